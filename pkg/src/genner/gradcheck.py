"""Finite-difference oracle for the autodiff engine.

Central differences against the analytic gradient, with the relative error
denominator floored so near-zero gradients compare sanely.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            eps: float = 1e-6,
                            sample: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    - ``f`` maps a tensor to a scalar tensor and must be deterministic.
    - relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    - probe points and f's values there must be finite, else a
      FloatingPointError is raised.
    - ``sample`` limits the check to that many randomly chosen coordinates
      (needs ``rng``); by default every coordinate is probed.
    """
    if not np.isfinite(x.data).all():
        raise FloatingPointError("finite_difference_check: non-finite probe point")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError("finite_difference_check: f must return a scalar")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        if rng is None:
            raise ValueError("finite_difference_check: sampling requires an rng")
        coords = rng.choice(flat.size, size=sample, replace=False)

    def probe(values: np.ndarray) -> float:
        val = f(Tensor(values.reshape(x.shape))).item()
        if not np.isfinite(val):
            raise FloatingPointError(
                "finite_difference_check: f returned a non-finite value at a probe point")
        return val

    a_flat = analytic.reshape(-1)
    worst = 0.0
    for i in coords:
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        numeric = (probe(plus) - probe(minus)) / (2.0 * eps)
        a = a_flat[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
