"""Conformer encoder blocks, subsampling frontend, transformer decoder, and search.

The frontend reduces time by 4 with two unpadded stride-2 convolutions, so the
minimum admissible input length is 7 frames.  Conformer layers follow the
macaron structure (half-step FFN, self-attention, depthwise conv, half-step
end-FFN, final norm); the end-FFN slot accepts any module, which is how the
mixture-of-experts layer plugs in.  Positional information is absolute
sinusoidal, added after the frontend and the token embedding.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np

from .numerics import (ConfigError, DimensionError, Linear, LayerNorm, Module,
                       MultiHeadAttention, Parameter, Tensor, add, conv1d_depthwise,
                       log_softmax, mul, no_grad, reshape, sigmoid, swish, take,
                       tensor_sum)

MIN_FRAMES = 7


def subsample_length(n_frames: int) -> int:
    """Output length of the two unpadded k=3, s=2 convolutions."""
    if n_frames < MIN_FRAMES:
        raise DimensionError(f"frontend needs at least {MIN_FRAMES} frames, got {n_frames}")
    t1 = (n_frames - 3) // 2 + 1
    return (t1 - 3) // 2 + 1


@lru_cache(maxsize=None)
def sinusoidal_pe(n_positions: int, d: int) -> np.ndarray:
    """Read-only [n_positions, d] sine/cosine position table."""
    pos = np.arange(n_positions)[:, None]
    dim = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (dim // 2) * 2.0 / d)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


class _StridedConv(Module):
    """Stride-2 width-3 temporal convolution as a window gather plus linear map."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.lin = Linear(3 * d_in, d_out, rng)
        self.d_in = d_in

    def forward(self, x: Tensor) -> Tensor:
        t = x.shape[-2]
        t_out = (t - 3) // 2 + 1
        windows = np.arange(t_out)[:, None] * 2 + np.arange(3)[None, :]
        key = (slice(None), windows) if x.data.ndim == 3 else (windows,)
        gathered = take(x, key)
        flat = reshape(gathered, gathered.shape[:-2] + (3 * self.d_in,))
        return self.lin(flat)


class SubsamplingFrontend(Module):
    """Features [.., T, d_feat] to encoder inputs [.., T', d] with T' = subsample(T)."""

    def __init__(self, d_feat: int, d_model: int, rng: np.random.Generator):
        self.conv1 = _StridedConv(d_feat, d_model, rng)
        self.conv2 = _StridedConv(d_model, d_model, rng)
        self.proj = Linear(d_model, d_model, rng)
        self.d_model = d_model

    def forward(self, x: Tensor, lengths: Optional[Sequence[int]] = None):
        """Returns (encoder input, per-utterance output lengths)."""
        t = x.shape[-2]
        if lengths is None:
            lengths = [t] * (x.shape[0] if x.data.ndim == 3 else 1)
        out_lengths = np.array([subsample_length(int(n)) for n in lengths])
        h = self.conv2(swish(self.conv1(x)))
        h = mul(self.proj(h), math.sqrt(self.d_model))
        pe = sinusoidal_pe(h.shape[-2], self.d_model)
        return add(h, Tensor(pe)), out_lengths


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.lin1 = Linear(d, d_ff, rng)
        self.lin2 = Linear(d_ff, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(swish(self.lin1(x)))


class ConvModule(Module):
    """Pointwise expansion, GLU gate, depthwise temporal conv, norm, pointwise out.

    Layer norm stands in for the usual batch norm so outputs never depend on
    batch composition.
    """

    def __init__(self, d: int, kernel_size: int, rng: np.random.Generator):
        self.pw_in = Linear(d, 2 * d, rng)
        bound = 1.0 / math.sqrt(kernel_size)
        self.kernel = Parameter(rng.uniform(-bound, bound, size=(kernel_size, d)))
        self.norm = LayerNorm(d)
        self.pw_out = Linear(d, d, rng)
        self.d = d

    def forward(self, x: Tensor, pad_mask: Optional[np.ndarray] = None) -> Tensor:
        a = self.pw_in(x)
        gated = mul(a[..., :self.d], sigmoid(a[..., self.d:]))
        if pad_mask is not None:
            # Padded frames must enter the temporal conv as exact zeros so that
            # valid frames near the boundary see the same neighbourhood no
            # matter how much padding the batch carries.
            gated = mul(gated, pad_mask[..., :, None].astype(float))
        y = conv1d_depthwise(gated, self.kernel)
        return self.pw_out(swish(self.norm(y)))


class ConformerLayer(Module):
    """Macaron block: both FFN slots contribute through 0.5-weighted residuals."""

    def __init__(self, d: int, heads: int, d_ff: int, kernel_size: int,
                 rng: np.random.Generator, end_ffn: Optional[Module] = None):
        self.norm_ffn = LayerNorm(d)
        self.ffn1 = FeedForward(d, d_ff, rng)
        self.norm_mhsa = LayerNorm(d)
        self.mhsa = MultiHeadAttention(d, heads, rng)
        self.norm_conv = LayerNorm(d)
        self.conv = ConvModule(d, kernel_size, rng)
        self.norm_end = LayerNorm(d)
        self.end_ffn = end_ffn if end_ffn is not None else FeedForward(d, d_ff, rng)
        self.norm_final = LayerNorm(d)

    def forward(self, x: Tensor, pad_mask: Optional[np.ndarray] = None,
                lid_emb: Optional[Tensor] = None) -> Tensor:
        x = add(x, mul(self.ffn1(self.norm_ffn(x)), 0.5))
        attn_mask = None if pad_mask is None else pad_mask[..., None, None, :]
        n = self.norm_mhsa(x)
        x = add(x, self.mhsa(n, n, n, mask=attn_mask))
        x = add(x, self.conv(self.norm_conv(x), pad_mask=pad_mask))
        if getattr(self.end_ffn, "needs_lid_emb", False):
            if lid_emb is None:
                raise ConfigError("this layer's end-FFN routes by lid_emb, but none was given")
            end = self.end_ffn(self.norm_end(x), lid_emb)
        else:
            end = self.end_ffn(self.norm_end(x))
        return self.norm_final(add(x, mul(end, 0.5)))


def encode_span(x: Tensor, layers: Sequence[ConformerLayer],
                pad_mask: Optional[np.ndarray] = None,
                lid_emb: Optional[Tensor] = None) -> Tensor:
    """Apply a contiguous span of encoder layers."""
    for layer in layers:
        x = layer(x, pad_mask=pad_mask, lid_emb=lid_emb)
    return x


class _DecoderLayer(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.norm_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)

    def forward(self, x: Tensor, enc: Tensor, causal: np.ndarray,
                enc_mask: Optional[np.ndarray]) -> Tensor:
        n = self.norm_self(x)
        x = add(x, self.self_attn(n, n, n, mask=causal))
        n = self.norm_cross(x)
        x = add(x, self.cross_attn(n, enc, enc, mask=enc_mask))
        return add(x, self.ffn(self.norm_ffn(x)))


class DecoderStack(Module):
    """Autoregressive transformer decoder over encoder states.

    Position u of the output depends only on tokens at positions < u plus the
    encoder output (causal self-attention).
    """

    def __init__(self, vocab_size: int, d: int, heads: int, d_ff: int,
                 n_layers: int, rng: np.random.Generator):
        self.embed = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(vocab_size, d)))
        self.layers = [_DecoderLayer(d, heads, d_ff, rng) for _ in range(n_layers)]
        self.norm_final = LayerNorm(d)
        self.out = Linear(d, vocab_size, rng)
        self.d = d
        self.vocab_size = vocab_size

    def forward(self, token_ids: np.ndarray, enc: Tensor,
                enc_lengths: Optional[Sequence[int]] = None) -> Tensor:
        """Teacher-forced logits [.., L, vocab] from prefix ids [.., L]."""
        token_ids = np.asarray(token_ids)
        n_pos = token_ids.shape[-1]
        x = mul(take(self.embed, (token_ids,)), math.sqrt(self.d))
        x = add(x, Tensor(sinusoidal_pe(n_pos, self.d)))
        causal = np.tril(np.ones((n_pos, n_pos), dtype=bool))
        enc_mask = None
        if enc_lengths is not None:
            t_enc = enc.shape[-2]
            enc_mask = np.arange(t_enc)[None, :] < np.asarray(enc_lengths)[:, None]
            enc_mask = enc_mask[:, None, None, :]
        for layer in self.layers:
            x = layer(x, enc, causal, enc_mask)
        return self.out(self.norm_final(x))


def attention_loss(logits: Tensor, targets: Sequence[int], eos_id: int,
                   smoothing: float = 0.1, reduction: str = "mean") -> Tensor:
    """Label-smoothed cross-entropy over targets plus the closing eos.

    `logits` covers len(targets) + 1 positions (teacher forcing: the decoder
    was fed sos + targets).  Smoothing spreads eps uniformly over the whole
    vocabulary: q = (1 - eps) * onehot + eps / V.
    """
    n_pos, vocab = logits.shape[-2], logits.shape[-1]
    labels = list(targets) + [eos_id]
    if n_pos != len(labels):
        raise DimensionError(f"{n_pos} logit rows cannot score {len(labels)} labels")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    logp = log_softmax(logits, axis=-1)
    picked = take(logp, (np.arange(n_pos), np.array(labels)))
    total = add(mul(tensor_sum(picked), -(1.0 - smoothing)),
                mul(tensor_sum(logp), -smoothing / vocab))
    return mul(total, 1.0 / n_pos) if reduction == "mean" else total


def attention_loss_batch(logits: Tensor, targets: Sequence[Sequence[int]], eos_id: int,
                         smoothing: float = 0.1, reduction: str = "mean") -> Tensor:
    """Per-utterance smoothed cross-entropy [B] over padded decoder logits."""
    n_batch, n_pos, vocab = logits.shape
    labels = np.zeros((n_batch, n_pos), dtype=np.intp)
    valid = np.zeros((n_batch, n_pos))
    for b, tgt in enumerate(targets):
        row = list(tgt) + [eos_id]
        if len(row) > n_pos:
            raise DimensionError(f"target {b} needs {len(row)} positions, logits have {n_pos}")
        labels[b, :len(row)] = row
        valid[b, :len(row)] = 1.0
    logp = log_softmax(logits, axis=-1)
    picked = take(logp, (np.arange(n_batch)[:, None], np.arange(n_pos)[None, :], labels))
    per_pos = add(mul(picked, -(1.0 - smoothing)),
                  mul(tensor_sum(logp, axis=-1), -smoothing / vocab))
    per_utt = tensor_sum(mul(per_pos, Tensor(valid)), axis=-1)
    if reduction == "mean":
        per_utt = mul(per_utt, Tensor(1.0 / valid.sum(axis=-1)))
    return per_utt


@dataclass
class Hypothesis:
    """A decoded token sequence with its length-normalized log-prob score."""

    token_ids: List[int]
    score: float
    truncated: bool = False


def _step_log_probs(decoder: Module, prefixes: np.ndarray, enc: Tensor,
                    enc_length: int, forbid: Sequence[int]) -> np.ndarray:
    """Next-token log-probs [n_prefixes, vocab] for a set of equal-length prefixes."""
    n = prefixes.shape[0]
    enc_b = enc if enc.data.ndim == 3 else reshape(enc, (1,) + enc.shape)
    if enc_b.shape[0] != n:
        enc_b = Tensor(np.broadcast_to(enc_b.data, (n,) + enc_b.shape[1:]).copy())
    logits = decoder(prefixes, enc_b, [enc_length] * n)
    last = logits.data[:, -1, :]
    shift = last.max(axis=-1, keepdims=True)
    logp = last - shift - np.log(np.exp(last - shift).sum(axis=-1, keepdims=True))
    if forbid:
        logp[:, list(forbid)] = -np.inf
    return logp


def greedy_decode(decoder: Module, enc: Tensor, enc_length: int, sos_id: int,
                  eos_id: int, max_len: int, forbid: Sequence[int] = ()) -> Hypothesis:
    """Argmax autoregressive decode; ties resolve to the lowest token id."""
    tokens: List[int] = []
    total = 0.0
    with no_grad():
        for _ in range(max_len):
            prefix = np.array([[sos_id] + tokens])
            logp = _step_log_probs(decoder, prefix, enc, enc_length, forbid)[0]
            best = int(np.argmax(logp))
            total += float(logp[best])
            if best == eos_id:
                return Hypothesis(tokens, total / (len(tokens) + 1), truncated=False)
            tokens.append(best)
    return Hypothesis(tokens, total / max(len(tokens), 1), truncated=True)


def beam_search_decode(decoder: Module, enc: Tensor, enc_length: int, sos_id: int,
                       eos_id: int, beam_size: int, max_len: int,
                       forbid: Sequence[int] = ()) -> Hypothesis:
    """Length-normalized beam search; returns the best hypothesis.

    The result is flagged truncated when the winner never emitted eos within
    max_len steps.  Ranking ties break toward the earlier beam, then the lower
    token id, so repeated runs are identical.
    """
    if beam_size < 1:
        raise ConfigError(f"beam size must be >= 1, got {beam_size}")
    beams = [([], 0.0, False)]  # (tokens, total log-prob, finished)
    with no_grad():
        for _ in range(max_len):
            live = [(i, b) for i, b in enumerate(beams) if not b[2]]
            if not live:
                break
            prefixes = np.array([[sos_id] + tokens for _, (tokens, _, _) in live])
            logp = _step_log_probs(decoder, prefixes, enc, enc_length, forbid)
            pool = []
            for i, (tokens, total, finished) in enumerate(beams):
                if finished:
                    norm = total / (len(tokens) + 1)
                    pool.append((-norm, i, -1, tokens, total, True))
            for row, (i, (tokens, total, _)) in enumerate(live):
                for tok in np.argsort(-logp[row])[:beam_size]:
                    tok = int(tok)
                    cand_total = total + float(logp[row, tok])
                    cand_tokens = tokens if tok == eos_id else tokens + [tok]
                    norm = cand_total / (len(tokens) + 1)
                    pool.append((-norm, i, tok, cand_tokens, cand_total, tok == eos_id))
            pool.sort(key=lambda item: item[:3])
            beams = [(tokens, total, fin) for _, _, _, tokens, total, fin in pool[:beam_size]]
            if all(fin for _, _, fin in beams):
                break
    tokens, total, finished = beams[0]
    steps = max(len(tokens) + (1 if finished else 0), 1)
    return Hypothesis(tokens, total / steps, truncated=not finished)
