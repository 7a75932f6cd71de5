"""Stage-wise context sampling.

Each alignment layer samples a binary keep/drop mask over its sequence from a
small decision head that sees every position's local features next to a
global summary of what earlier layers kept. Masks nest across layers: a
position dropped once stays dropped, so later layers refine rather than
reshuffle the selection.

The hard decisions ride a straight-through estimator, so the decision head
still receives gradients from every mask-weighted loss downstream.
"""

from __future__ import annotations

import numpy as np

from .nn import Mlp, Module
from .tensor import (Tensor, broadcast_to, concat, constant, div,
                     gumbel_softmax, mul, narrow, softmax, tsum)


def masked_gap(features: Tensor, mask: Tensor) -> Tensor:
    """Mean of the rows with mask 1: sum(features * mask) / sum(mask).

    features (..., n, d), mask (..., n) with 0/1 entries -> (..., 1, d).
    Every batch row must keep at least one position. Differentiable in both
    arguments.
    """
    if features.shape[:-1] != mask.shape:
        raise ValueError(
            f"masked_gap: mask shape {mask.shape} does not match rows of {features.shape}")
    counts = mask.data.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("masked_gap: empty mask, no kept positions to summarize")
    m = mask.reshape(mask.shape + (1,))
    total = tsum(mul(features, m), axis=-2, keepdims=True)
    kept = tsum(m, axis=-2, keepdims=True)
    return div(total, kept)


class ContextSampler(Module):
    """Per-position keep/drop sampler conditioned on a masked global summary."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.local_mlp = Mlp(d, d, d, rng)
        self.global_mlp = Mlp(d, d, d, rng)
        self.decide_mlp = Mlp(2 * d, d, 2, rng)
        # Start near keep-all (p ~ 0.9). The mask-weighted generation losses
        # only ever push keep probabilities down, so selection must shrink
        # from full coverage; a coin-flip start collapses to drop-all before
        # the generator learns which content it can reproduce.
        self.decide_mlp.fc2.bias.data[0] = 2.2

    def __call__(self, features: Tensor, prev_mask: Tensor, temperature: float,
                 rng: np.random.Generator, training: bool) -> tuple[Tensor, Tensor]:
        """Sample the next-stage mask.

        - features (..., n, d); prev_mask (..., n) 0/1 with at least one kept
          position per row.
        - returns (mask, keep_probs), both (..., n). mask = decision * prev_mask,
          so the keep-set can only shrink.
        - training=True draws hard gumbel-softmax samples (channel 0 = keep);
          training=False takes the argmax, ties keep.
        """
        z = self.local_mlp(features)
        summary = masked_gap(self.global_mlp(features), prev_mask)
        g = broadcast_to(summary, z.shape)
        logits = self.decide_mlp(concat([z, g], axis=-1))
        probs = softmax(logits, axis=-1)
        keep_probs = narrow(probs, (..., 0))
        if training:
            decision = gumbel_softmax(logits, temperature, rng, hard=True)
            keep = narrow(decision, (..., 0))
        else:
            keep = constant((np.argmax(probs.data, axis=-1) == 0).astype(np.float64))
        return mul(keep, prev_mask), keep_probs
