"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node in an implicit graph; ``backward`` walks the
graph in reverse topological order and accumulates gradients into ``.grad``
buffers. Repeated backward calls accumulate; ``zero_grad`` resets.

Numerical policy: NaN and +inf in any op output raise immediately. -inf is
permitted only where additive attention masks legitimately produce it: in
explicit mask constants, in ``add`` outputs, and in structural ops that move
data without arithmetic (concat, reshape, transpose, slicing, broadcast).
``softmax`` consumes -inf entries to exact zeros.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_values(arr, "tensor", allow_neg_inf=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None
        self._op = "leaf"

    # -- construction -----------------------------------------------------

    @staticmethod
    def _result(data: Array, parents: tuple["Tensor", ...], op: str,
                backward: Callable[[Array], Sequence[Array | None]] | None,
                allow_neg_inf: bool = False) -> "Tensor":
        _check_values(data, op, allow_neg_inf)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    # -- basic introspection ----------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op}{grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def constant(data, allow_neg_inf: bool = False) -> Tensor:
    """A non-differentiable leaf. The only sanctioned source of -inf values
    (additive attention masks)."""
    arr = np.asarray(data, dtype=np.float64)
    _check_values(arr, "constant", allow_neg_inf)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = "constant"
    return out


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _check_values(data: Array, op: str, allow_neg_inf: bool) -> None:
    if data.dtype != np.float64:
        raise TypeError(f"{op}: expected float64, got {data.dtype}")
    if not np.isfinite(data).all():
        if np.isnan(data).any():
            raise FloatingPointError(f"{op}: NaN in output")
        if np.isposinf(data).any():
            raise FloatingPointError(f"{op}: +inf in output")
        if not allow_neg_inf:
            raise FloatingPointError(f"{op}: -inf in output")


def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- graph traversal --------------------------------------------------------


class Graph:
    """Ordered record of the operations reachable from a root tensor.

    ``nodes`` is topologically sorted: every tensor appears after all of the
    parents it depends on. Only nodes on a ``requires_grad`` path are recorded.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return Graph(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every requires_grad tensor
    reachable from ``loss``.

    - loss must be scalar (size 1) and attached to a graph.
    - repeated calls accumulate into existing ``.grad`` buffers.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is detached from the graph")
    graph = Graph.trace(loss)
    flowing: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    # -inf allowed: this is how additive attention masks enter the graph.
    data = a.data + b.data
    _assert_no_nan_posinf(data, "add")

    def bwd(g: Array):
        return (_sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape))

    return Tensor._result(data, (a, b), "add", bwd, allow_neg_inf=True)


def _assert_no_nan_posinf(data: Array, op: str) -> None:
    if np.isnan(data).any():
        raise FloatingPointError(f"{op}: NaN in output")
    if np.isposinf(data).any():
        raise FloatingPointError(f"{op}: +inf in output")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g: Array):
        return (_sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape))

    return Tensor._result(data, (a, b), "sub", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g: Array):
        return (_sum_to_shape(g * b.data, a.shape),
                _sum_to_shape(g * a.data, b.shape))

    return Tensor._result(data, (a, b), "mul", bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    # zero divisors surface as +inf/NaN and fail the output check below
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bwd(g: Array):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))

    return Tensor._result(data, (a, b), "div", bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g: Array):
        return (-g,)

    return Tensor._result(-a.data, (a,), "neg", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching over leading axes.

    Both operands must be at least 2-d; leading axes broadcast.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g: Array):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape))

    return Tensor._result(data, (a, b), "matmul", bwd)


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="raise"):
        try:
            data = np.exp(a.data)
        except FloatingPointError:
            raise FloatingPointError("exp: overflow to +inf") from None

    def bwd(g: Array):
        return (g * data,)

    return Tensor._result(data, (a,), "exp", bwd)


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise FloatingPointError("log: nonpositive input")
    data = np.log(a.data)

    def bwd(g: Array):
        return (g / a.data,)

    return Tensor._result(data, (a,), "log", bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def bwd(g: Array):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return Tensor._result(data, (a,), "gelu", bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor). Gradient is zero in the clamped region."""
    data = np.maximum(a.data, floor)
    mask = a.data > floor

    def bwd(g: Array):
        return (g * mask,)

    return Tensor._result(data, (a,), "clamp_min", bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g: Array):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(data, dtype=np.float64), (a,), "sum", bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g: Array):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor._result(np.asarray(data, dtype=np.float64), (a,), "mean", bwd)


# -- shape and indexing ------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g: Array):
        return (g.reshape(a.shape),)

    return Tensor._result(data, (a,), "reshape", bwd, allow_neg_inf=True)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)

    def bwd(g: Array):
        return (np.swapaxes(g, ax1, ax2),)

    return Tensor._result(data, (a,), "swapaxes", bwd, allow_neg_inf=True)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = np.broadcast_to(a.data, shape).copy()

    def bwd(g: Array):
        return (_sum_to_shape(g, a.shape),)

    return Tensor._result(data, (a,), "broadcast_to", bwd, allow_neg_inf=True)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat: empty input list")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(data, tuple(parts), "concat", bwd, allow_neg_inf=True)


def narrow(a: Tensor, idx) -> Tensor:
    """Basic indexing (ints and slices). For integer-array lookups use
    ``take_rows`` / ``gather_nd``."""
    data = a.data[idx]

    def bwd(g: Array):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return Tensor._result(np.asarray(data, dtype=np.float64), (a,), "narrow",
                          bwd, allow_neg_inf=True)


def take_rows(a: Tensor, indices) -> Tensor:
    """Index axis 0 with an integer array; output shape idx.shape + a.shape[1:].

    Backward scatter-adds, so repeated indices accumulate (embedding lookup).
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("take_rows: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for axis of size {a.shape[0]}")
    data = a.data[idx]

    def bwd(g: Array):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(data, (a,), "take_rows", bwd, allow_neg_inf=True)


def gather_nd(a: Tensor, indices: tuple) -> Tensor:
    """Advanced integer indexing a[idx0, idx1, ...]; backward scatter-adds."""
    idx = tuple(np.asarray(i) for i in indices)
    data = a.data[idx]

    def bwd(g: Array):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(np.asarray(data, dtype=np.float64), (a,), "gather_nd", bwd)


# -- reductions with softmax structure ---------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    - -inf entries map to exactly 0.
    - a slice that is entirely -inf is a hard error (degenerate axis).
    """
    x = a.data
    hi = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(hi).any():
        raise FloatingPointError("softmax: all entries are -inf along the axis")
    with np.errstate(invalid="ignore"):
        shifted = x - hi
    # -inf - finite stays -inf; exp(-inf) is an exact IEEE zero.
    e = np.exp(shifted)
    z = e.sum(axis=axis, keepdims=True)
    data = e / z

    def bwd(g: Array):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return Tensor._result(data, (a,), "softmax", bwd)


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = a.data
    hi = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(hi).any():
        raise FloatingPointError("logsumexp: all entries are -inf along the axis")
    with np.errstate(invalid="ignore"):
        e = np.exp(x - hi)
    s = e.sum(axis=axis, keepdims=True)
    data = np.log(s) + hi
    weights = e / s
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bwd(g: Array):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * weights,)

    return Tensor._result(data, (a,), "logsumexp", bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = gamma.data * xhat + beta.data

    def bwd(g: Array):
        d = x.shape[-1]
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - m1 - xhat * m2) * inv
        ggamma = _sum_to_shape(g * xhat, gamma.shape)
        gbeta = _sum_to_shape(g, beta.shape)
        return (gx, ggamma, gbeta)

    return Tensor._result(data, (a, gamma, beta), "layer_norm", bwd)


# -- probabilistic ops --------------------------------------------------------


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) = sum p * log(p / q) for probability vectors.

    - p and q must have the same shape and each sum to 1 within 1e-9
      along the last axis.
    - entries are clamped at 1e-12 before the log, so zeros are tolerated;
      clamped entries contribute no gradient.
    - differentiable in both arguments.
    """
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError(f"kl_divergence: {name} does not sum to 1 within 1e-9")
    pc = clamp_min(p, 1e-12)
    qc = clamp_min(q, 1e-12)
    return tsum(mul(pc, sub(tlog(pc), tlog(qc))))


def straight_through(hard: Array, soft: Tensor) -> Tensor:
    """Forward the exact ``hard`` values, route gradients to ``soft`` unchanged."""
    if hard.shape != soft.shape:
        raise ValueError("straight_through: shape mismatch")

    def bwd(g: Array):
        return (g,)

    return Tensor._result(np.asarray(hard, dtype=np.float64), (soft,),
                          "straight_through", bwd)


def gumbel_softmax(logits: Tensor, temperature: float,
                   rng: np.random.Generator, hard: bool = True) -> Tensor:
    """Sample from softmax(logits) along the last axis with Gumbel noise.

    - temperature must be > 0.
    - hard=True returns exactly one-hot rows in the forward pass while the
      backward pass sees the soft distribution (straight-through).
    - same rng state and inputs -> identical output.
    """
    if temperature <= 0.0:
        raise ValueError(f"gumbel_softmax: temperature must be > 0, got {temperature}")
    expo = rng.exponential(1.0, size=logits.shape)
    noise = -np.log(np.maximum(expo, 1e-300))
    noisy = mul(add(logits, constant(noise)), constant(1.0 / temperature))
    soft = softmax(noisy, axis=-1)
    if not hard:
        return soft
    k = soft.shape[-1]
    hard_data = np.eye(k, dtype=np.float64)[np.argmax(soft.data, axis=-1)]
    return straight_through(hard_data, soft)


def attention_mask_constant(keep: Array, n_query: int) -> Tensor:
    """Additive {0, -inf} mask of shape (n_query, len(keep)) from a 0/1 keep
    vector; identical rows. At least one source position must be kept."""
    keep = np.asarray(keep, dtype=np.float64)
    if keep.ndim != 1:
        raise ValueError(f"attention mask: keep vector must be 1-d, got {keep.shape}")
    if keep.sum() == 0:
        raise ValueError("attention mask: all source positions are masked")
    row = np.where(keep > 0.0, 0.0, -np.inf)
    return constant(np.broadcast_to(row, (n_query, keep.shape[0])).copy(),
                    allow_neg_inf=True)
