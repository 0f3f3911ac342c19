"""Tests for the frontend, conformer layers, decoder, losses, and search."""

import numpy as np
import pytest

from lupet import nnet
from lupet.numerics import (ConfigError, DimensionError, Parameter, Tensor,
                            grad_check, no_grad)


def conv_out_len(t, k=3, s=2):
    return (t - k) // s + 1


class TestSubsampleLength:
    def test_minimum_input(self):
        assert nnet.subsample_length(7) == 1
        with pytest.raises(DimensionError):
            nnet.subsample_length(6)

    def test_matches_two_conv_composition(self):
        for t in range(7, 200):
            assert nnet.subsample_length(t) == conv_out_len(conv_out_len(t))

    def test_monotone_factor_four(self):
        lens = [nnet.subsample_length(t) for t in range(7, 200)]
        assert all(b >= a for a, b in zip(lens, lens[1:]))
        assert nnet.subsample_length(103) == 25


class TestSubsamplingFrontend:
    def test_output_shape_and_lengths(self):
        rng = np.random.default_rng(0)
        fe = nnet.SubsamplingFrontend(16, 32, rng)
        x = Tensor(rng.normal(size=(3, 41, 16)))
        h, lens = fe(x, [41, 30, 9])
        assert h.shape == (3, nnet.subsample_length(41), 32)
        assert list(lens) == [nnet.subsample_length(t) for t in (41, 30, 9)]

    def test_single_utterance(self):
        rng = np.random.default_rng(1)
        fe = nnet.SubsamplingFrontend(8, 16, rng)
        h, lens = fe(Tensor(rng.normal(size=(23, 8))))
        assert h.shape == (nnet.subsample_length(23), 16)
        assert list(lens) == [nnet.subsample_length(23)]

    def test_deterministic(self):
        x = np.random.default_rng(3).normal(size=(1, 15, 8))
        outs = []
        for _ in range(2):
            fe = nnet.SubsamplingFrontend(8, 16, np.random.default_rng(7))
            outs.append(fe(Tensor(x))[0].data)
        assert np.array_equal(outs[0], outs[1])

    def test_gradient(self):
        rng = np.random.default_rng(4)
        fe = nnet.SubsamplingFrontend(4, 8, rng)
        x = Tensor(rng.normal(size=(9, 4)))
        report = grad_check(lambda: (fe(x)[0] * fe(x)[0]).sum(), fe.parameters(),
                            eps=1e-5, tol=1e-4)
        assert report.passed, repr(report)


class ZeroedEndFfn:
    needs_lid_emb = True

    def __call__(self, x, lid_emb):
        return x * 0.0


def zero_all(module):
    for p in module.parameters():
        p.data[...] = 0.0


class TestConformerLayer:
    def test_zeroed_layer_is_final_norm_only(self):
        """All-zero weights leave only the final norm: residuals add exact zeros."""
        rng = np.random.default_rng(5)
        layer = nnet.ConformerLayer(8, 2, 16, 3, rng)
        zero_all(layer)
        layer.norm_final.gain.data[...] = 1.0
        x = Tensor(rng.normal(size=(5, 8)))
        out = layer(x)
        assert np.array_equal(out.data, layer.norm_final(x).data)

    def test_span_composition(self):
        rng = np.random.default_rng(6)
        layers = [nnet.ConformerLayer(8, 2, 16, 3, rng) for _ in range(4)]
        x = Tensor(rng.normal(size=(2, 5, 8)))
        whole = nnet.encode_span(x, layers)
        split = nnet.encode_span(nnet.encode_span(x, layers[:2]), layers[2:])
        assert np.array_equal(whole.data, split.data)

    def test_gradient_one_layer(self):
        rng = np.random.default_rng(7)
        layer = nnet.ConformerLayer(8, 2, 16, 3, rng)
        x = Tensor(rng.normal(size=(4, 8)))
        report = grad_check(lambda: (layer(x) * layer(x)).sum(), layer.parameters(),
                            eps=1e-5, tol=1e-4, samples_per_param=12,
                            rng=np.random.default_rng(0))
        assert report.passed, repr(report)

    def test_moe_slot_requires_lid_emb(self):
        rng = np.random.default_rng(8)
        layer = nnet.ConformerLayer(8, 2, 16, 3, rng, end_ffn=ZeroedEndFfn())
        x = Tensor(rng.normal(size=(4, 8)))
        with pytest.raises(ConfigError):
            layer(x)
        out = layer(x, lid_emb=Tensor(np.zeros((4, 8))))
        assert out.shape == (4, 8)

    def test_pad_mask_blocks_padded_keys(self):
        """Growing the padding leaves valid positions unchanged.

        Tolerance covers reduction-order rounding only: vectorized sums over a
        longer (zero-masked) key axis regroup the same addends.
        """
        rng = np.random.default_rng(9)
        layers = [nnet.ConformerLayer(8, 2, 16, 3, np.random.default_rng(40 + i))
                  for i in range(2)]
        x_valid = rng.normal(size=(1, 6, 8))
        outs = []
        for pad in (0, 3):
            x = np.zeros((1, 6 + pad, 8))
            x[:, :6] = x_valid
            mask = np.arange(6 + pad)[None, :] < 6
            with no_grad():
                outs.append(nnet.encode_span(Tensor(x), layers, pad_mask=mask).data[:, :6])
        assert np.abs(outs[0] - outs[1]).max() < 1e-12


class TestDecoderCausality:
    def test_future_token_never_leaks(self):
        rng = np.random.default_rng(10)
        dec = nnet.DecoderStack(12, 16, 2, 32, 2, rng)
        enc = Tensor(rng.normal(size=(2, 4, 16)))
        ids = rng.integers(0, 12, size=(2, 5))
        with no_grad():
            base = dec(ids, enc, [4, 3]).data
            for u in range(1, 5):
                bumped = ids.copy()
                bumped[0, u] = (bumped[0, u] + 1) % 12
                out = dec(bumped, enc, [4, 3]).data
                assert np.array_equal(out[0, :u], base[0, :u])
                assert not np.array_equal(out[0, u:], base[0, u:])


class TestAttentionLoss:
    def test_perfect_one_hot_no_smoothing(self):
        labels = [3, 1]
        eos = 2
        logits = np.full((3, 10), 0.0)
        for u, y in enumerate(labels + [eos]):
            logits[u, y] = 60.0
        loss = nnet.attention_loss(Tensor(logits), labels, eos_id=eos, smoothing=0.0)
        assert abs(loss.item()) < 1e-9

    def test_uniform_logits(self):
        loss = nnet.attention_loss(Tensor(np.zeros((4, 10))), [5, 6, 7], eos_id=2,
                                   smoothing=0.0)
        assert abs(loss.item() - np.log(10)) < 1e-12

    def test_smoothing_matches_direct_formula(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(4, 7))
        labels = [4, 5, 6]
        eos = 2
        eps = 0.1
        loss = nnet.attention_loss(Tensor(logits), labels, eos_id=eos, smoothing=eps)
        logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        want = 0.0
        for u, y in enumerate(labels + [eos]):
            q = np.full(7, eps / 7)
            q[y] += 1.0 - eps
            want -= (q * logp[u]).sum()
        assert abs(loss.item() - want / 4) < 1e-12

    def test_empty_target_scores_eos_only(self):
        logits = np.zeros((1, 5))
        loss = nnet.attention_loss(Tensor(logits), [], eos_id=2, smoothing=0.0)
        assert abs(loss.item() - np.log(5)) < 1e-12

    def test_length_mismatch_raises(self):
        with pytest.raises(DimensionError):
            nnet.attention_loss(Tensor(np.zeros((2, 5))), [1, 2], eos_id=3)

    def test_batch_matches_single_and_ignores_padding(self):
        rng = np.random.default_rng(12)
        vocab, eos = 9, 2
        targets = [[4, 5, 6], [7], [8, 4]]
        n_pos = 6  # more than any target needs: the rest is padding
        logits = rng.normal(size=(3, n_pos, vocab))
        batch = nnet.attention_loss_batch(Tensor(logits), targets, eos_id=eos)
        for b, tgt in enumerate(targets):
            single = nnet.attention_loss(Tensor(logits[b, :len(tgt) + 1]), tgt, eos_id=eos)
            assert abs(batch.data[b] - single.item()) < 1e-12
        wider = np.concatenate([logits, rng.normal(size=(3, 2, vocab))], axis=1)
        rebatch = nnet.attention_loss_batch(Tensor(wider), targets, eos_id=eos)
        assert np.array_equal(batch.data, rebatch.data)

    def test_gradient(self):
        rng = np.random.default_rng(13)
        logits = Parameter(rng.normal(size=(3, 6)), name="logits")
        report = grad_check(
            lambda: nnet.attention_loss(logits, [3, 4], eos_id=2, smoothing=0.1),
            [logits], eps=1e-5, tol=1e-4)
        assert report.passed, repr(report)


class TrapDecoder:
    """Fixed two-step distribution where the greedy first choice is a trap.

    Vocab: 0=sos, 1=a, 2=b, 3=eos.  Step 1 prefers a (0.4 vs 0.35), but all
    continuations of a are poor (best 0.3) while b ends with eos at 0.9:
    p([a]) = 0.12 < p([b]) = 0.315.
    """

    def __call__(self, prefixes, enc, enc_lengths):
        rows = []
        for prefix in prefixes:
            seq = [np.log([0.05, 0.4, 0.35, 0.2])] * (len(prefix) - 1)
            if prefix[-1] == 0:
                seq.append(np.log([1e-9, 0.4, 0.35, 0.15]))
            elif prefix[-1] == 1:
                seq.append(np.log([1e-9, 0.25, 0.25, 0.3]))
            else:
                seq.append(np.log([1e-9, 0.05, 0.05, 0.9]))
            rows.append(np.stack(seq))
        return Tensor(np.stack(rows))


class TestSearch:
    def make_pair(self, seed, vocab=8, d=16, t_enc=3):
        rng = np.random.default_rng(seed)
        dec = nnet.DecoderStack(vocab, d, 2, 24, 1, rng)
        enc = Tensor(rng.normal(size=(t_enc, d)))
        return dec, enc, t_enc

    def test_beam_one_equals_greedy_on_50_models(self):
        for seed in range(50):
            dec, enc, t_enc = self.make_pair(seed)
            greedy = nnet.greedy_decode(dec, enc, t_enc, sos_id=1, eos_id=2,
                                        max_len=6, forbid=(0, 1, 3))
            beam = nnet.beam_search_decode(dec, enc, t_enc, sos_id=1, eos_id=2,
                                           beam_size=1, max_len=6, forbid=(0, 1, 3))
            assert beam.token_ids == greedy.token_ids
            assert abs(beam.score - greedy.score) < 1e-12
            assert beam.truncated == greedy.truncated

    def test_beam_two_escapes_greedy_trap(self):
        dec = TrapDecoder()
        enc = Tensor(np.zeros((1, 2)))
        greedy = nnet.greedy_decode(dec, enc, 1, sos_id=0, eos_id=3, max_len=4,
                                    forbid=(0,))
        beam = nnet.beam_search_decode(dec, enc, 1, sos_id=0, eos_id=3, beam_size=2,
                                       max_len=4, forbid=(0,))
        assert greedy.token_ids[0] == 1
        assert beam.token_ids == [2]
        assert beam.score > greedy.score

    def test_truncation_flag(self):
        dec, enc, t_enc = self.make_pair(99)
        out = nnet.beam_search_decode(dec, enc, t_enc, sos_id=1, eos_id=2,
                                      beam_size=2, max_len=1, forbid=(0, 1, 2, 3))
        assert out.truncated

    def test_decode_is_repeatable(self):
        dec, enc, t_enc = self.make_pair(17)
        runs = [nnet.beam_search_decode(dec, enc, t_enc, sos_id=1, eos_id=2,
                                        beam_size=3, max_len=5, forbid=(0, 1, 3))
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_bad_beam_size(self):
        dec, enc, t_enc = self.make_pair(3)
        with pytest.raises(ConfigError):
            nnet.beam_search_decode(dec, enc, t_enc, 1, 2, beam_size=0, max_len=3)
