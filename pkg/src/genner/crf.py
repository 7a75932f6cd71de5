"""Linear-chain CRF over emission scores.

Log-linear potentials: per-position emissions, a label-transition matrix, and
start scores (no end scores). The partition function uses the forward
algorithm in log space and is differentiable through the tensor engine; the
brute-force counterparts enumerate every labeling and exist purely as oracles
for small instances.
"""

from __future__ import annotations

import itertools

import numpy as np

from .nn import Module
from .tensor import (Tensor, add, gather_nd, logsumexp, narrow, reshape, sub,
                     tsum)


class CrfParams(Module):
    """transitions[i, j] scores label i followed by label j; start[j] scores
    label j at position 0."""

    def __init__(self, n_labels: int, rng: np.random.Generator):
        self.transitions = Tensor(rng.normal(0.0, 0.01, (n_labels, n_labels)),
                                  requires_grad=True)
        self.start = Tensor(rng.normal(0.0, 0.01, n_labels), requires_grad=True)
        self.n_labels = n_labels


def _check_inputs(emissions: Tensor, crf: CrfParams) -> tuple[int, int]:
    if emissions.ndim != 2:
        raise ValueError(f"emissions must be 2-d, got {emissions.shape}")
    n, n_labels = emissions.shape
    if n == 0:
        raise ValueError("empty sequence")
    if n_labels != crf.n_labels:
        raise ValueError(
            f"emission width {n_labels} != label count {crf.n_labels}")
    return n, n_labels


def _check_tags(tags, n: int, n_labels: int) -> np.ndarray:
    t = np.asarray(tags, dtype=np.int64)
    if t.shape != (n,):
        raise ValueError(f"expected {n} tags, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_labels):
        raise ValueError("tag index out of range")
    return t


def crf_log_partition(emissions: Tensor, crf: CrfParams) -> Tensor:
    """log sum over all label sequences of exp(path score)."""
    n, n_labels = _check_inputs(emissions, crf)
    alpha = add(crf.start, narrow(emissions, 0))
    for t in range(1, n):
        inner = add(reshape(alpha, (n_labels, 1)), crf.transitions)
        alpha = add(logsumexp(inner, axis=0), narrow(emissions, t))
    return logsumexp(alpha, axis=0)


def crf_score(emissions: Tensor, tags, crf: CrfParams) -> Tensor:
    """Score of one labeling: start + emissions along the path + transitions."""
    n, n_labels = _check_inputs(emissions, crf)
    t = _check_tags(tags, n, n_labels)
    total = add(narrow(crf.start, int(t[0])),
                tsum(gather_nd(emissions, (np.arange(n), t))))
    if n > 1:
        total = add(total, tsum(gather_nd(crf.transitions, (t[:-1], t[1:]))))
    return total


def crf_nll(emissions: Tensor, tags, crf: CrfParams) -> Tensor:
    """Negative log-likelihood, always >= 0 up to rounding."""
    return sub(crf_log_partition(emissions, crf), crf_score(emissions, tags, crf))


def viterbi_decode(emissions: np.ndarray, transitions: np.ndarray,
                   start: np.ndarray) -> list[int]:
    """Highest-scoring labeling; ties resolve to the lowest label index at
    each backtrack step. Pure numpy, no gradients."""
    emissions = np.asarray(emissions, dtype=np.float64)
    if emissions.ndim != 2 or emissions.shape[0] == 0:
        raise ValueError("emissions must be a nonempty (n, L) matrix")
    n, n_labels = emissions.shape
    if transitions.shape != (n_labels, n_labels) or start.shape != (n_labels,):
        raise ValueError("parameter shapes do not match emission width")
    score = start + emissions[0]
    backptr = np.zeros((n, n_labels), dtype=np.int64)
    for t in range(1, n):
        mat = score[:, None] + transitions
        backptr[t] = np.argmax(mat, axis=0)  # argmax takes the first maximum
        score = mat[backptr[t], np.arange(n_labels)] + emissions[t]
    best = int(np.argmax(score))
    path = [best]
    for t in range(n - 1, 0, -1):
        best = int(backptr[t, best])
        path.append(best)
    path.reverse()
    return path


def brute_force_log_partition(emissions: np.ndarray, transitions: np.ndarray,
                              start: np.ndarray) -> float:
    """Exact partition by enumerating all L^n labelings (L^n <= 1e6)."""
    emissions = np.asarray(emissions, dtype=np.float64)
    n, n_labels = emissions.shape
    if n_labels ** n > 1_000_000:
        raise ValueError(f"instance too large to enumerate: {n_labels}^{n}")
    scores = [_path_score(emissions, transitions, start, path)
              for path in itertools.product(range(n_labels), repeat=n)]
    scores = np.array(scores)
    hi = scores.max()
    return float(hi + np.log(np.exp(scores - hi).sum()))


def brute_force_best(emissions: np.ndarray, transitions: np.ndarray,
                     start: np.ndarray) -> tuple[float, list[int]]:
    """Exact argmax by enumeration; first maximum in lexicographic path order."""
    emissions = np.asarray(emissions, dtype=np.float64)
    n, n_labels = emissions.shape
    if n_labels ** n > 1_000_000:
        raise ValueError(f"instance too large to enumerate: {n_labels}^{n}")
    best_score = -np.inf
    best_path: list[int] = []
    for path in itertools.product(range(n_labels), repeat=n):
        s = _path_score(emissions, transitions, start, path)
        if s > best_score:
            best_score = s
            best_path = list(path)
    return float(best_score), best_path


def _path_score(emissions: np.ndarray, transitions: np.ndarray,
                start: np.ndarray, path) -> float:
    s = start[path[0]] + emissions[0, path[0]]
    for t in range(1, len(path)):
        s += transitions[path[t - 1], path[t]] + emissions[t, path[t]]
    return float(s)
