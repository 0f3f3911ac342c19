"""Mixture-of-experts end-FFN with a frame-level top-2 router.

The router scores every expert per frame; the two highest-scoring experts are
combined with their probabilities renormalized to sum to one.  For two
experts, renormalized softmax reduces exactly to sigmoid(l_top - l_second), so
the weights are computed pairwise without a full-softmax denominator.  The
output uses the interpolation form e_b + w * (e_a - e_b), which keeps three
contracts bitwise exact: identical experts give that expert's output,
permuting experts together with router columns changes nothing, and experts
outside the selected pair receive exactly zero gradient.
"""

from typing import List, Sequence, Tuple

import numpy as np

from .numerics import (ConfigError, Linear, Module, Tensor, add, concat, mul,
                       reshape, sigmoid, sub, take)
from .nnet import FeedForward


def route(lid_emb: Tensor, router: Linear) -> Tuple[np.ndarray, Tensor]:
    """Top-2 expert indices [.., T, 2] and renormalized weights [.., T, 2].

    Ties break toward the lower expert index.  Gradients reach the router
    through the weights; the index choice itself is a constant.
    """
    logits = router(lid_emb)
    n_experts = logits.shape[-1]
    if n_experts < 2:
        raise ConfigError(f"routing needs at least 2 experts, got {n_experts}")
    order = np.argsort(-logits.data, axis=-1, kind="stable")
    idx = order[..., :2]
    grid = np.ix_(*[np.arange(n) for n in logits.shape[:-1]])
    l_top = take(logits, grid + (idx[..., 0],))
    l_second = take(logits, grid + (idx[..., 1],))
    w_top = sigmoid(sub(l_top, l_second))
    w_second = sub(1.0, w_top)  # exact complement: w_top >= 0.5
    pair_shape = idx.shape[:-1] + (1,)
    weights = concat([reshape(w_top, pair_shape), reshape(w_second, pair_shape)], axis=-1)
    return idx, weights


class MoELayer(Module):
    """Drop-in end-FFN: routed by lid_emb, applied frame-wise to h."""

    needs_lid_emb = True

    def __init__(self, d: int, d_ff: int, n_experts: int, rng: np.random.Generator):
        if n_experts < 2:
            raise ConfigError(f"mixture needs at least 2 experts, got {n_experts}")
        self.experts: List[FeedForward] = [FeedForward(d, d_ff, rng) for _ in range(n_experts)]
        self.router = Linear(d, n_experts, rng)

    def forward(self, h: Tensor, lid_emb: Tensor) -> Tensor:
        return moe_forward(h, lid_emb, self)


def moe_forward(h: Tensor, lid_emb: Tensor, layer: MoELayer) -> Tensor:
    """Convex combination of the two routed experts, frame by frame."""
    if h.shape != lid_emb.shape:
        raise ConfigError(f"h {h.shape} and lid_emb {lid_emb.shape} must agree")
    idx, weights = route(lid_emb, layer.router)
    top_out, second_out = None, None
    for i, expert in enumerate(layer.experts):
        out = expert(h)
        m_top = (idx[..., 0] == i)[..., None].astype(float)
        m_second = (idx[..., 1] == i)[..., None].astype(float)
        picked_top = mul(out, m_top)
        picked_second = mul(out, m_second)
        top_out = picked_top if top_out is None else add(top_out, picked_top)
        second_out = picked_second if second_out is None else add(second_out, picked_second)
    w_top = take(weights, (Ellipsis, slice(0, 1)))
    return add(second_out, mul(w_top, sub(top_out, second_out)))


def selection_counts(indices: np.ndarray, n_experts: int) -> np.ndarray:
    """How many frames routed to each expert (either slot of the pair)."""
    counts = np.zeros(n_experts, dtype=np.int64)
    for slot in (0, 1):
        ids, n = np.unique(indices[..., slot], return_counts=True)
        counts[ids] += n
    return counts
