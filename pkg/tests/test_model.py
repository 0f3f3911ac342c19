"""Tests for the assembled network, presets, checkpoints and config files."""

import dataclasses

import numpy as np
import pytest

import lupet.moe as moe
from lupet.ctc import ctc_greedy_decode, ctc_loss_batch
from lupet.data import Batch, EOS_ID, InfeasibleUtteranceError
from lupet.model import (Checkpoint, CheckpointError, EncodeResult,
                         LossBreakdown, LupetConfig, LupetModel, PRESET_NAMES,
                         arch_hash, average_checkpoints, build_model,
                         build_preset, load_checkpoint, load_config,
                         save_checkpoint, save_config, self_condition,
                         total_from_components, _teacher_inputs)
from lupet.nnet import attention_loss_batch, encode_span, subsample_length
from lupet.numerics import (ConfigError, Linear, Tensor, add, grad_check,
                            log_softmax, mul, tensor_mean, tensor_sum)


def tiny_config(**kw):
    base = dict(d_feat=6, d_model=16, heads=2, d_ff=32, kernel_size=5,
                n_enc_layers=4, stage_layers=(1, 2, 3, 4), n_dec_layers=1,
                vocab_size=10, n_lid=2, n_ipa=5, n_codes=8, d_code=4,
                n_experts=2, mlm_start_epoch=1, mlm_end_epoch=8,
                mask_start_prob=0.2, mask_span=3)
    base.update(kw)
    return LupetConfig(**base)


def lupet_flags():
    return dict(use_U=True, use_P=True, use_L=True, use_MoE=True)


def tiny_batch(seed=0):
    rng = np.random.default_rng(seed)
    lengths = np.array([40, 33])
    feats = np.zeros((2, 40, 6))
    for b, n in enumerate(lengths):
        feats[b, :n] = rng.normal(0.0, 1.0, (n, 6))
    return Batch(ids=("utt-a", "utt-b"), lids=np.array([0, 1]),
                 features=feats, feat_lengths=lengths,
                 token_targets=((4, 5, 6), (7, 4)),
                 ipa_targets=((0, 1, 2), (3, 0)),
                 texts=("abc", "da"))


class TestConfigValidation:
    def test_defaults_pass(self):
        LupetConfig()

    def test_stage_layers_must_increase(self):
        with pytest.raises(ConfigError):
            tiny_config(stage_layers=(2, 2, 3, 4))

    def test_last_stage_matches_depth(self):
        with pytest.raises(ConfigError):
            tiny_config(stage_layers=(1, 2, 3, 5))

    def test_stage_count(self):
        with pytest.raises(ConfigError):
            tiny_config(stage_layers=(1, 2, 4))

    def test_lambda_range(self):
        with pytest.raises(ConfigError):
            tiny_config(lambda_ctc=1.5)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            tiny_config(w2=-0.1)

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            tiny_config(d_model=15)

    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            tiny_config(kernel_size=4)

    def test_moe_needs_two_experts(self):
        with pytest.raises(ConfigError):
            tiny_config(use_MoE=True, n_experts=1)

    def test_mlm_window_order(self):
        with pytest.raises(ConfigError):
            tiny_config(mlm_start_epoch=9, mlm_end_epoch=3)


class TestPresets:
    def test_all_names_build(self):
        for name in PRESET_NAMES:
            config = build_preset(name)
            assert config.preset == name

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            build_preset("lupet_no_Q")

    def test_vanilla_flags_off(self):
        config = build_preset("vanilla")
        assert not (config.use_U or config.use_P or config.use_L
                    or config.use_MoE or config.oracle_lid)

    def test_lupet_flags_on(self):
        config = build_preset("lupet")
        assert (config.use_U and config.use_P and config.use_L
                and config.use_MoE)

    def test_ablation_flags(self):
        assert not build_preset("lupet_no_U").use_U
        assert build_preset("lupet_no_U").use_P
        assert not build_preset("lupet_no_P").use_P
        assert build_preset("lupet_no_P").use_U
        no_up = build_preset("lupet_no_UP")
        assert not no_up.use_U and not no_up.use_P
        assert no_up.use_L and no_up.use_MoE
        no_lu = build_preset("lupet_no_LU")
        assert not no_lu.use_L and not no_lu.use_U
        assert no_lu.use_P and no_lu.use_MoE

    def test_loss_weights(self):
        assert build_preset("lupet").w2 == 0.07
        assert build_preset("lupet").w1 == 0.3
        assert build_preset("lupet").w3 == 0.3
        assert build_preset("lupet_w2_1").w2 == 1.0
        assert build_preset("lupet_Uto50ep").mlm_end_epoch == 50

    def test_oracle_and_moe_variants(self):
        assert build_preset("oracle_lid").oracle_lid
        assert not build_preset("oracle_lid").use_L
        assert build_preset("moe").use_MoE
        assert not build_preset("moe").use_L

    def test_mono_is_narrow(self):
        config = build_preset("mono")
        assert config.mono_lid == 0
        assert config.d_model == 32
        assert config.d_model % config.heads == 0

    def test_paper_scale(self):
        config = build_preset("lupet", scale="paper")
        assert config.d_model == 512
        assert config.n_enc_layers == 12
        assert config.stage_layers == (3, 6, 9, 12)
        assert config.n_codes == 8192 and config.d_code == 16
        assert config.n_experts == 8
        assert (config.mlm_start_epoch, config.mlm_end_epoch) == (5, 30)
        with pytest.raises(ConfigError):
            build_preset("lupet", scale="huge")

    def test_overrides(self):
        assert build_preset("vanilla", vocab_size=40).vocab_size == 40


class TestLossArithmetic:
    def test_paper_weight_example(self):
        """Components (1, 2, 1, 3, 0.5) at the default weights total 1.96."""
        config = LupetConfig()
        total = total_from_components(config, 1.0, 2.0, 1.0, 3.0, 0.5)
        assert total == pytest.approx(1.96, abs=1e-12)

    def test_recompute_matches_forward(self):
        model = LupetModel(tiny_config(**lupet_flags()), seed=1)
        bd = model.forward_train(tiny_batch(), epoch=2,
                                 mask_rng=np.random.default_rng(3))
        recomputed = total_from_components(model.config, bd.l_attn, bd.l_ctc,
                                           bd.l_lid, bd.l_mlm, bd.l_ipa)
        assert abs(recomputed - float(bd.total.data)) <= 1e-9
        assert bd.mlm_active


class TestForwardTrain:
    def test_vanilla_inactive_terms_zero(self):
        model = LupetModel(tiny_config(), seed=0)
        bd = model.forward_train(tiny_batch(), epoch=2)
        assert bd.l_lid == 0.0 and bd.l_mlm == 0.0 and bd.l_ipa == 0.0
        assert not bd.mlm_active
        assert bd.l_attn > 0 and bd.l_ctc > 0

    def test_vanilla_is_exact_hybrid_loss(self):
        """With every flag off the total is bit-for-bit the two-term loss."""
        model = LupetModel(tiny_config(), seed=4)
        batch = tiny_batch()
        bd = model.forward_train(batch, epoch=0)
        lengths = np.asarray(batch.feat_lengths)
        h, enc_lengths = model.frontend(Tensor(batch.features), lengths)
        pad = np.arange(h.shape[-2])[None, :] < np.asarray(enc_lengths)[:, None]
        h = encode_span(h, model.enc_layers, pad)
        ctc_each = ctc_loss_batch(
            log_softmax(model.ctc_head(h), axis=-1),
            [tuple(t - 1 for t in tt) for tt in batch.token_targets],
            enc_lengths)
        l_ctc = tensor_mean(ctc_each)
        logits = model.decoder(_teacher_inputs(batch.token_targets), h,
                               enc_lengths)
        l_attn = tensor_mean(attention_loss_batch(
            logits, batch.token_targets, EOS_ID, model.config.label_smoothing))
        expected = add(mul(1.0 - model.config.lambda_ctc, l_attn),
                       mul(model.config.lambda_ctc, l_ctc))
        assert float(bd.total.data) == float(expected.data)

    def test_epoch_gates_masking(self):
        """Outside the window the mask rng is never consumed."""
        config = tiny_config(use_U=True, mlm_start_epoch=2, mlm_end_epoch=4)
        model = LupetModel(config, seed=2)
        batch = tiny_batch()
        out_a = model.forward_train(batch, 5, np.random.default_rng(1))
        out_b = model.forward_train(batch, 5, np.random.default_rng(2))
        assert out_a.l_mlm == 0.0 and not out_a.mlm_active
        assert float(out_a.total.data) == float(out_b.total.data)
        in_a = model.forward_train(batch, 3, np.random.default_rng(1))
        in_b = model.forward_train(batch, 3, np.random.default_rng(2))
        assert in_a.mlm_active
        assert float(in_a.total.data) != float(in_b.total.data)

    def test_deterministic_forward(self):
        model = LupetModel(tiny_config(**lupet_flags()), seed=5)
        batch = tiny_batch()
        a = model.forward_train(batch, 2, np.random.default_rng(7))
        b = model.forward_train(batch, 2, np.random.default_rng(7))
        assert float(a.total.data) == float(b.total.data)

    def test_infeasible_token_target_names_utterance(self):
        model = LupetModel(tiny_config(), seed=0)
        batch = tiny_batch()
        bad = dataclasses.replace(
            batch, token_targets=((4,) * 11, (7, 4)))
        with pytest.raises(InfeasibleUtteranceError, match="utt-a"):
            model.forward_train(bad, epoch=0)

    def test_infeasible_lid_target_names_utterance(self):
        """Frame-level LID labels need 2U-1 frames; 5 tokens exceed T'=7."""
        model = LupetModel(tiny_config(use_L=True), seed=0)
        batch = tiny_batch()
        bad = dataclasses.replace(
            batch, token_targets=((4, 5, 6), (7, 4, 7, 4, 7)))
        with pytest.raises(InfeasibleUtteranceError, match="utt-b"):
            model.forward_train(bad, epoch=0)

    def test_too_short_utterance(self):
        model = LupetModel(tiny_config(), seed=0)
        batch = tiny_batch()
        short = dataclasses.replace(
            batch, feat_lengths=np.array([40, 5]))
        with pytest.raises(InfeasibleUtteranceError, match="utt-b"):
            model.forward_train(short, epoch=0)

    def test_oracle_lid_uses_language_ids(self):
        model = LupetModel(tiny_config(oracle_lid=True), seed=3)
        batch = tiny_batch()
        bd = model.forward_train(batch, epoch=0)
        flipped = dataclasses.replace(batch, lids=np.array([1, 0]))
        bd2 = model.forward_train(flipped, epoch=0)
        assert float(bd.total.data) != float(bd2.total.data)

    def test_moe_preset_routes_without_lid(self):
        model = LupetModel(tiny_config(use_MoE=True), seed=3)
        bd = model.forward_train(tiny_batch(), epoch=0)
        assert np.isfinite(float(bd.total.data))


class TestSelfCondition:
    def test_zero_linear_is_identity(self):
        rng = np.random.default_rng(0)
        lin = Linear(4, 8, rng)
        lin.weight.data[...] = 0.0
        lin.bias.data[...] = 0.0
        h = Tensor(rng.normal(0, 1, (3, 8)))
        z = Tensor(rng.normal(0, 1, (3, 4)))
        out = self_condition(h, z, lin)
        assert np.array_equal(out.data, h.data)

    def test_output_shape(self):
        rng = np.random.default_rng(1)
        for width in (2, 5, 9):
            lin = Linear(width, 6, rng)
            out = self_condition(Tensor(np.zeros((4, 6))),
                                 Tensor(np.zeros((4, width))), lin)
            assert out.shape == (4, 6)

    def test_raw_mode_skips_softmax(self):
        rng = np.random.default_rng(2)
        lin = Linear(3, 5, rng)
        h = Tensor(rng.normal(0, 1, (2, 5)))
        z = Tensor(rng.normal(0, 1, (2, 3)))
        raw = self_condition(h, z, lin, normalize=False)
        assert np.array_equal(raw.data, add(h, lin(z)).data)
        soft = self_condition(h, z, lin, normalize=True)
        assert not np.array_equal(raw.data, soft.data)

    def test_gradient_reaches_both_inputs(self):
        rng = np.random.default_rng(3)
        lin = Linear(4, 6, rng)
        h = Tensor(rng.normal(0, 1, (3, 6)), requires_grad=True)
        z = Tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
        tensor_sum(self_condition(h, z, lin)).backward()
        assert h.grad is not None and np.any(h.grad != 0)
        assert z.grad is not None and np.any(z.grad != 0)


class TestLidHead:
    def test_width_is_languages_plus_blank(self):
        model = LupetModel(tiny_config(use_L=True, n_lid=2), seed=0)
        assert model.lid_head.weight.shape == (16, 3)
        wide = LupetModel(tiny_config(use_L=True, n_lid=10), seed=0)
        assert wide.lid_head.weight.shape == (16, 11)

    def test_confident_logits_collapse_to_one_language(self):
        """Greedy CTC over confident frame logits yields a single LID."""
        logits = np.full((9, 4), -10.0)
        blanks = [0, 8]
        for t in range(9):
            logits[t, 0 if t in blanks else 2] = 10.0
        decoded = ctc_greedy_decode(log_softmax(Tensor(logits), axis=-1))
        assert decoded == [1]


class TestLidEmbIdentity:
    def test_router_receives_the_conditioning_tensor(self, monkeypatch):
        """The tensor added to the stream is the object the router sees."""
        model = LupetModel(tiny_config(**lupet_flags()), seed=6)
        seen = []
        original_route = moe.route
        monkeypatch.setattr(
            moe, "route",
            lambda lid_emb, router: (seen.append(lid_emb),
                                     original_route(lid_emb, router))[1])
        addends = []
        original_sc = model.lid_sc.forward
        monkeypatch.setattr(
            model.lid_sc, "forward",
            lambda x: (addends.append(original_sc(x)), addends[-1])[1])
        model.forward_train(tiny_batch(), epoch=0)
        assert len(addends) == 1 and len(seen) >= 1
        assert all(obj is addends[0] for obj in seen)


class TestEndToEndGradient:
    def test_full_model_gradients(self):
        """Finite differences over the whole network at 64-bit."""
        model = LupetModel(tiny_config(**lupet_flags()), seed=8)
        batch = tiny_batch(seed=1)

        def loss():
            bd = model.forward_train(batch, epoch=2,
                                     mask_rng=np.random.default_rng(11))
            return bd.total

        report = grad_check(loss, model.trainable_parameters(), tol=1e-3,
                            samples_per_param=1,
                            rng=np.random.default_rng(12))
        assert report.passed, repr(report)


class TestEncode:
    def test_shapes_and_lengths(self):
        model = LupetModel(tiny_config(**lupet_flags()), seed=9)
        batch = tiny_batch()
        result = model.encode(batch.features, batch.feat_lengths)
        t_sub = [subsample_length(int(n)) for n in batch.feat_lengths]
        assert list(result.enc_lengths) == t_sub
        assert result.h.shape == (2, max(t_sub), 16)
        assert result.token_log_probs.shape == (2, max(t_sub), 10)
        assert result.lid_log_probs.shape == (2, max(t_sub), 3)
        assert result.ipa_log_probs.shape == (2, max(t_sub), 6)
        assert result.router_src is not None

    def test_vanilla_heads_absent(self):
        model = LupetModel(tiny_config(), seed=9)
        batch = tiny_batch()
        result = model.encode(batch.features, batch.feat_lengths)
        assert result.lid_log_probs is None
        assert result.ipa_log_probs is None
        assert result.router_src is None

    def test_oracle_requires_lids(self):
        model = LupetModel(tiny_config(oracle_lid=True), seed=9)
        batch = tiny_batch()
        with pytest.raises(ConfigError):
            model.encode(batch.features, batch.feat_lengths)
        model.encode(batch.features, batch.feat_lengths, lids=batch.lids)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model = LupetModel(tiny_config(**lupet_flags()), seed=10)
        path = tmp_path / "m.lupc"
        save_checkpoint(path, model, meta={"epoch": 3})
        ckpt = load_checkpoint(path)
        assert ckpt.config == model.config
        assert ckpt.meta == {"epoch": 3}
        assert ckpt.arch == arch_hash(model)
        for name, p in model.named_parameters():
            assert np.array_equal(ckpt.params[name], p.data)
            assert ckpt.frozen[name] == p.frozen

    def test_rebuild_forward_identical(self, tmp_path):
        model = LupetModel(tiny_config(**lupet_flags()), seed=11)
        batch = tiny_batch()
        before = model.forward_train(batch, 2, np.random.default_rng(0))
        path = tmp_path / "m.lupc"
        save_checkpoint(path, model)
        rebuilt = build_model(load_checkpoint(path), seed=99)
        after = rebuilt.forward_train(batch, 2, np.random.default_rng(0))
        assert float(before.total.data) == float(after.total.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lupc"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model = LupetModel(tiny_config(), seed=0)
        path = tmp_path / "m.lupc"
        save_checkpoint(path, model)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_arch_mismatch_on_build(self, tmp_path):
        model = LupetModel(tiny_config(), seed=0)
        path = tmp_path / "m.lupc"
        save_checkpoint(path, model)
        ckpt = load_checkpoint(path)
        tampered = Checkpoint(
            config=dataclasses.replace(ckpt.config, d_ff=64),
            params=ckpt.params, frozen=ckpt.frozen, arch=ckpt.arch,
            meta=ckpt.meta)
        with pytest.raises(CheckpointError):
            build_model(tampered)


class TestAveraging:
    def test_single_checkpoint_identity(self, tmp_path):
        model = LupetModel(tiny_config(), seed=1)
        path = tmp_path / "a.lupc"
        save_checkpoint(path, model)
        avg = average_checkpoints([path])
        for name, p in model.named_parameters():
            assert np.array_equal(avg.params[name], p.data)

    def test_opposite_weights_cancel(self, tmp_path):
        model = LupetModel(tiny_config(), seed=2)
        save_checkpoint(tmp_path / "a.lupc", model)
        for p in model.parameters():
            p.data[...] = -p.data
        save_checkpoint(tmp_path / "b.lupc", model)
        avg = average_checkpoints([tmp_path / "a.lupc", tmp_path / "b.lupc"])
        for name in avg.params:
            assert np.all(avg.params[name] == 0.0)

    def test_mean_of_three(self, tmp_path):
        """Averaging equals (a+b+c)/3 elementwise."""
        config = tiny_config(**lupet_flags())
        paths, stash = [], {}
        for k in range(3):
            model = LupetModel(config, seed=20 + k)
            path = tmp_path / f"{k}.lupc"
            save_checkpoint(path, model)
            paths.append(path)
            for name, p in model.named_parameters():
                stash.setdefault(name, []).append(p.data.copy())
        avg = average_checkpoints(paths)
        for name, arrays in stash.items():
            if avg.frozen[name]:
                assert np.array_equal(avg.params[name], arrays[0])
            else:
                want = (arrays[0] + arrays[1] + arrays[2]) / 3.0
                assert np.max(np.abs(avg.params[name] - want)) <= 1e-12

    def test_frozen_quantizer_copied_verbatim(self, tmp_path):
        config = tiny_config(use_U=True)
        for k in range(2):
            model = LupetModel(config, seed=30 + k)
            save_checkpoint(tmp_path / f"{k}.lupc", model)
        avg = average_checkpoints([tmp_path / "0.lupc", tmp_path / "1.lupc"])
        frozen_names = [n for n, f in avg.frozen.items() if f]
        assert frozen_names
        first = load_checkpoint(tmp_path / "0.lupc")
        for name in frozen_names:
            assert np.array_equal(avg.params[name], first.params[name])

    def test_mixed_architectures_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "a.lupc",
                        LupetModel(tiny_config(), seed=0))
        save_checkpoint(tmp_path / "b.lupc",
                        LupetModel(tiny_config(d_ff=64), seed=0))
        with pytest.raises(CheckpointError):
            average_checkpoints([tmp_path / "a.lupc", tmp_path / "b.lupc"])


class TestConfigFiles:
    def test_round_trip(self, tmp_path):
        config = build_preset("lupet_w2_1", vocab_size=42, n_ipa=17)
        path = tmp_path / "c.toml"
        save_config(path, config)
        assert load_config(path) == config

    def test_comments_and_blanks_tolerated(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("# a comment\n\nd_model = 32  # inline\nheads = 4\n")
        config = load_config(path)
        assert config.d_model == 32 and config.heads == 4

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("d_modle = 32\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_type_mismatch_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("d_model = 31.5\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_validation_still_applies(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("lambda_ctc = 2.0\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_line_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("just nonsense\n")
        with pytest.raises(ConfigError):
            load_config(path)
