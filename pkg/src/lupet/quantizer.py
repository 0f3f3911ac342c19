"""Frozen random-projection quantizer, span masking, and the masked-prediction loss.

The quantizer never trains: a fixed random projection of 4-frame stacks is
matched against a fixed L2-normalized codebook by nearest neighbour, yielding
one discrete label per sub-sampled encoder frame.  Masking replaces random
spans of input frames with Gaussian noise; the loss asks the encoder to
recover the clean-feature labels at exactly those positions.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .numerics import (Module, Parameter, Tensor, log_softmax, matmul, mul,
                       take, tensor_sum)
from .nnet import MIN_FRAMES, subsample_length

STACK = 4  # input frames per sub-sampled label, matching the encoder reduction


class RandomProjectionQuantizer(Module):
    """Frozen projection [STACK*d_feat, d_code] plus frozen codebook [n_codes, d_code]."""

    def __init__(self, d_feat: int, n_codes: int, d_code: int, seed: int):
        rng = np.random.default_rng(seed)
        proj = rng.normal(0.0, 1.0, size=(STACK * d_feat, d_code))
        book = rng.normal(0.0, 1.0, size=(n_codes, d_code))
        book /= np.linalg.norm(book, axis=1, keepdims=True)
        self.proj = Parameter(proj, frozen=True)
        self.codebook = Parameter(book, frozen=True)
        self.seed = seed
        self.d_feat = d_feat

    def nearest_code(self, vectors: np.ndarray) -> np.ndarray:
        """Index of the Euclidean-nearest codebook row; ties go to the lowest index."""
        diff = vectors[:, None, :] - self.codebook.data[None, :, :]
        return np.argmin((diff * diff).sum(-1), axis=1)


def quantize(features: Tensor, q: RandomProjectionQuantizer) -> np.ndarray:
    """Labels, one per sub-sampled frame, from clean (unmasked) features.

    Features are normalized per utterance, stacked STACK frames at a time
    (the first STACK*T' frames; T' is the encoder output length), projected,
    L2-normalized, and matched against the codebook.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] != q.d_feat:
        raise ValueError(f"expected [T, {q.d_feat}] features, got {feats.shape}")
    t_sub = subsample_length(feats.shape[0])
    feats = (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-8)
    stacked = feats[:STACK * t_sub].reshape(t_sub, STACK * q.d_feat)
    projected = stacked @ q.proj.data
    projected /= np.linalg.norm(projected, axis=1, keepdims=True) + 1e-12
    return q.nearest_code(projected)


@dataclass
class MaskSpec:
    """Per-frame span-start probability, span length, and replacement-noise std."""

    start_prob: float = 0.01
    span: int = 20
    noise_std: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ValueError(f"start_prob must be in [0, 1], got {self.start_prob}")
        if self.span < 1:
            raise ValueError(f"span must be >= 1, got {self.span}")


def apply_mask(features: np.ndarray, spec: MaskSpec,
               rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Replace random spans with Gaussian noise.

    Every frame independently starts a span of `spec.span` frames (clipped at
    the end) with probability `spec.start_prob`.  Returns the masked copy and
    the sorted sub-sampled positions whose STACK-frame window overlaps any
    masked frame (the positions the masked-prediction loss scores).
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    n_frames = feats.shape[0]
    starts = rng.random(n_frames) < spec.start_prob
    covered = np.zeros(n_frames, dtype=bool)
    for start in np.flatnonzero(starts):
        covered[start:start + spec.span] = True
    masked = feats.copy()
    n_hit = int(covered.sum())
    if n_hit:
        masked[covered] = rng.normal(0.0, spec.noise_std, size=(n_hit, feats.shape[1]))
    if n_frames < MIN_FRAMES:
        return masked, np.zeros(0, dtype=np.intp)  # too short for the frontend
    sub_positions = np.unique(np.flatnonzero(covered) // STACK)
    return masked, sub_positions[sub_positions < subsample_length(n_frames)]


def mlm_loss(h_lm: Tensor, masked_positions: Sequence[int], labels: Sequence[int],
             proj_u: Tensor) -> Tuple[Tensor, bool]:
    """Mean cross-entropy between proj_u(h_lm) and labels at masked positions.

    Returns (loss, active); an empty position set yields (0, False) and
    contributes no gradient.
    """
    positions = np.asarray(masked_positions, dtype=np.intp)
    if positions.size == 0:
        return Tensor(np.zeros(())), False
    picked_h = take(h_lm, (positions,))
    logp = log_softmax(matmul(picked_h, proj_u), axis=-1)
    wanted = np.asarray(labels, dtype=np.intp)[positions]
    picked = take(logp, (np.arange(positions.size), wanted))
    return mul(tensor_sum(picked), -1.0 / positions.size), True


def mlm_loss_batch(h_lm: Tensor, masked_positions: Sequence[Sequence[int]],
                   labels: Sequence[Sequence[int]], proj_u: Tensor) -> Tuple[Tensor, bool]:
    """Pooled-mean masked-prediction loss over a padded batch [B, T', d]."""
    rows, cols, wanted = [], [], []
    for b, positions in enumerate(masked_positions):
        lab = np.asarray(labels[b], dtype=np.intp)
        for t in positions:
            rows.append(b)
            cols.append(int(t))
            wanted.append(int(lab[int(t)]))
    if not rows:
        return Tensor(np.zeros(())), False
    picked_h = take(h_lm, (np.array(rows), np.array(cols)))
    logp = log_softmax(matmul(picked_h, proj_u), axis=-1)
    picked = take(logp, (np.arange(len(rows)), np.array(wanted)))
    return mul(tensor_sum(picked), -1.0 / len(rows)), True
