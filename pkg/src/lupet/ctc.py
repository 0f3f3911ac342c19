"""Connectionist temporal classification loss, decoding, and a brute-force oracle.

The loss marginalizes over every frame-level alignment whose collapse (merge
adjacent repeats, then drop blanks) equals the target sequence, via a
log-domain alpha recursion over the blank-interleaved target.  Gradients flow
through the recursion itself; there is no hand-coded backward pass.

Conventions: the blank symbol occupies column 0 of every ``[T', V+1]``
log-probability matrix, and labels live in ``[0, V)``, i.e. label ``y`` reads
column ``y + 1``.  The same loss serves the token, language-id, and phoneme
heads; only the alphabet differs.
"""

from dataclasses import dataclass
from itertools import product
from typing import List, Optional, Sequence

import numpy as np

from .numerics import Tensor, concat, logaddexp, take, where

BLANK_ID = 0

_NEG_INF = float("-inf")


class InfeasibleAlignmentError(ValueError):
    """Target cannot be aligned: U plus adjacent repeats exceeds the frame count."""


class LabelError(ValueError):
    """A target label id falls outside [0, V)."""


class SizeError(ValueError):
    """Brute-force enumeration would exceed the instance-size cap."""


def _check_targets(targets: Sequence[int], n_labels: int, n_frames: int) -> None:
    for y in targets:
        if not isinstance(y, (int, np.integer)) or not 0 <= int(y) < n_labels:
            raise LabelError(f"label {y!r} outside [0, {n_labels})")
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    if len(targets) + repeats > n_frames:
        raise InfeasibleAlignmentError(
            f"target of length {len(targets)} with {repeats} adjacent repeats "
            f"needs at least {len(targets) + repeats} frames, got {n_frames}")


@dataclass
class CtcInput:
    """One utterance's log-posteriors ``[T', V+1]`` plus its label sequence."""

    log_probs: Tensor
    targets: List[int]

    def __post_init__(self):
        lp = self.log_probs.data
        if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
            raise ValueError(f"log_probs must be [T', V+1] with T'>=1, V>=1, got {lp.shape}")
        row_sums = np.exp(lp).sum(axis=-1)
        if np.abs(row_sums - 1.0).max() > 1e-6:
            raise ValueError("log_probs rows must exponentiate-and-sum to 1 +- 1e-6")
        _check_targets(self.targets, lp.shape[1] - 1, lp.shape[0])


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]],
                   lengths: Sequence[int]) -> Tensor:
    """Per-utterance CTC losses for a padded batch.

    `log_probs` is ``[B, T'_max, V+1]``; utterance ``b`` uses its first
    ``lengths[b]`` frames.  Padding frames must hold finite values (their
    contribution is masked out, not skipped).  Returns a ``[B]`` tensor of
    losses; gradients reach `log_probs` through the recursion.
    """
    lp = log_probs.data
    if lp.ndim != 3:
        raise ValueError(f"log_probs must be [B, T', V+1], got {lp.shape}")
    n_batch, t_max, width = lp.shape
    n_labels = width - 1
    if len(targets) != n_batch or len(lengths) != n_batch:
        raise ValueError("targets and lengths must match the batch size")
    for tgt, t_len in zip(targets, lengths):
        if not 1 <= t_len <= t_max:
            raise ValueError(f"length {t_len} outside [1, {t_max}]")
        _check_targets(tgt, n_labels, t_len)

    # Blank-interleaved state lattice, padded to the widest target.
    state_lens = np.array([2 * len(t) + 1 for t in targets])
    n_states = int(state_lens.max())
    cols = np.zeros((n_batch, n_states), dtype=np.intp)
    allow_skip = np.zeros((n_batch, n_states), dtype=bool)
    for b, tgt in enumerate(targets):
        for i, y in enumerate(tgt):
            cols[b, 2 * i + 1] = int(y) + 1
            if i >= 1 and tgt[i] != tgt[i - 1]:
                allow_skip[b, 2 * i + 1] = True

    batch_idx = np.arange(n_batch)[:, None]
    active = np.arange(t_max)[None, :] < np.asarray(lengths)[:, None]
    neg1 = Tensor(np.full((n_batch, 1), _NEG_INF))
    neg2 = Tensor(np.full((n_batch, 2), _NEG_INF))

    # States past a target's own lattice may hold junk: transitions only move
    # forward, so they can never feed the two end states read below.
    init_mask = np.arange(n_states)[None, :] < 2
    alpha = where(init_mask, take(log_probs, (batch_idx, 0, cols)),
                  Tensor(np.full((n_batch, n_states), _NEG_INF)))
    for t in range(1, t_max):
        stay = logaddexp(alpha, concat([neg1, alpha[:, :-1]], axis=1))
        skip = logaddexp(stay, concat([neg2, alpha[:, :-2]], axis=1))
        emit = take(log_probs, (batch_idx, t, cols))
        step = where(allow_skip, skip, stay) + emit
        # Frames past an utterance's length carry the previous alpha through.
        alpha = where(active[:, t:t + 1], step, alpha)

    rows = np.arange(n_batch)
    end_label = take(alpha, (rows, np.maximum(state_lens - 2, 0)))
    end_label = where(state_lens >= 2, end_label, Tensor(np.full(n_batch, _NEG_INF)))
    total = logaddexp(take(alpha, (rows, state_lens - 1)), end_label)
    return -total


def ctc_loss(input: CtcInput) -> Tensor:
    """Negative log-probability of all valid alignments, as a scalar tensor."""
    t_frames = input.log_probs.shape[0]
    batched = input.log_probs.reshape(1, t_frames, input.log_probs.shape[1])
    return ctc_loss_batch(batched, [input.targets], [t_frames])[0]


def _collapse(path: Sequence[int]) -> tuple:
    """Merge adjacent repeats, then drop blanks; returns label ids."""
    merged = [int(c) for i, c in enumerate(path) if i == 0 or c != path[i - 1]]
    return tuple(c - 1 for c in merged if c != BLANK_ID)


def ctc_loss_bruteforce(input: CtcInput, max_paths: int = 10 ** 7) -> float:
    """Reference loss by enumerating every length-T' symbol sequence."""
    lp = input.log_probs.data
    t_frames, width = lp.shape
    if width ** t_frames > max_paths:
        raise SizeError(f"{width}^{t_frames} paths exceeds the cap of {max_paths}")
    target = tuple(int(y) for y in input.targets)
    total = _NEG_INF
    for path in product(range(width), repeat=t_frames):
        if _collapse(path) == target:
            total = np.logaddexp(total, lp[np.arange(t_frames), path].sum())
    return float(-total)


def ctc_greedy_decode(log_probs: Tensor, length: Optional[int] = None) -> List[int]:
    """Per-frame argmax of ``[T', V+1]``, collapsed to a label sequence."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if length is not None:
        lp = lp[:length]
    return list(_collapse(np.argmax(lp, axis=-1)))


def make_lid_targets(lid: int, n_tokens: int) -> List[int]:
    """Language-id label repeated once per output token."""
    if not isinstance(lid, (int, np.integer)) or lid < 0:
        raise LabelError(f"language id must be a non-negative int, got {lid!r}")
    if n_tokens < 0:
        raise ValueError(f"token count must be non-negative, got {n_tokens}")
    return [int(lid)] * n_tokens
