"""Neural building blocks on top of the tensor engine.

Post-layer-norm residual blocks throughout: sublayer, add residual, then
normalize. Attention masks are additive {0, -inf} constants; padded or
dropped source positions get exactly zero weight.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (Tensor, add, broadcast_to, concat, constant, gelu,
                     layer_norm, matmul, mul, softmax, swapaxes, take_rows)


class Module:
    """Minimal parameter container. Children are discovered from instance
    attributes (tensors, modules, or lists of modules) in definition order,
    which keeps parameter ordering deterministic for optimizers and
    checkpoints."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Dropout:
    """Inverted dropout; applied only when constructed with rate > 0."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return mul(x, constant(keep))


class Linear(Module):
    """Affine map; weight init is zero-mean normal with scale 1/sqrt(d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class Mlp(Module):
    """Two affine maps with a GELU between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with h heads.

    - queries come from ``q_in``, keys and values from ``kv_in``.
    - ``mask`` is an optional additive constant broadcastable to the score
      shape (..., h, n_q, n_kv); -inf entries zero out those source positions
      exactly.
    """

    def __init__(self, d: int, h: int, rng: np.random.Generator):
        if d % h != 0:
            raise ValueError(f"model dim {d} not divisible by head count {h}")
        self.h = h
        self.d_k = d // h
        self.wq = Linear(d, d, rng)
        # a key bias shifts every score for a query by the same amount, which
        # softmax ignores; dropping it removes an exactly-zero gradient direction
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        new_shape = x.shape[:-1] + (self.h, self.d_k)
        return swapaxes(x.reshape(new_shape), -3, -2)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: Tensor | None = None) -> Tensor:
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(kv_in))
        v = self._split(self.wv(kv_in))
        scores = mul(matmul(q, swapaxes(k, -1, -2)), constant(1.0 / np.sqrt(self.d_k)))
        if mask is not None:
            try:
                np.broadcast_shapes(mask.shape, scores.shape)
            except ValueError:
                raise ValueError(
                    f"attention mask shape {mask.shape} does not broadcast "
                    f"to scores {scores.shape}") from None
            scores = add(scores, mask)
        attn = softmax(scores, axis=-1)
        ctx = swapaxes(matmul(attn, v), -3, -2)
        merged = ctx.reshape(ctx.shape[:-2] + (self.h * self.d_k,))
        return self.wo(merged)


class FeedForward(Module):
    """Position-wise FFN with 4x hidden width and GELU."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = Linear(d, 4 * d, rng)
        self.fc2 = Linear(4 * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Self-attention + FFN with post-LN residuals."""

    def __init__(self, d: int, h: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(d, h, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, mask: Tensor | None = None,
                 drop: Dropout | None = None) -> Tensor:
        a = self.attn(x, x, mask)
        if drop is not None:
            a = drop(a)
        x = self.norm1(add(x, a))
        f = self.ffn(x)
        if drop is not None:
            f = drop(f)
        return self.norm2(add(x, f))


class DecoderBlock(Module):
    """Self-attention over the queries, cross-attention into a memory
    sequence, then an FFN; post-LN residuals after each sublayer.

    - ``memory_mask`` gates which memory positions the queries may read.
    - ``self_mask`` gates query slots that are padding so real rows are
      independent of them.
    """

    def __init__(self, d: int, h: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(d, h, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, h, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, rng)
        self.norm3 = LayerNorm(d)

    def __call__(self, queries: Tensor, memory: Tensor,
                 memory_mask: Tensor | None = None,
                 self_mask: Tensor | None = None,
                 drop: Dropout | None = None) -> Tensor:
        a = self.self_attn(queries, queries, self_mask)
        if drop is not None:
            a = drop(a)
        x = self.norm1(add(queries, a))
        c = self.cross_attn(x, memory, memory_mask)
        if drop is not None:
            c = drop(c)
        x = self.norm2(add(x, c))
        f = self.ffn(x)
        if drop is not None:
            f = drop(f)
        return self.norm3(add(x, f))


class TokenEmbedder(Module):
    """Token + positional embeddings with [CLS]/[SEP] framing.

    Row 0 is the [CLS] slot and carries no positional term; positions are
    added from row 1 on. Output length is input length + 2.
    """

    def __init__(self, vocab_size: int, d: int, max_len: int,
                 rng: np.random.Generator, pad_id: int, cls_id: int, sep_id: int):
        scale = 1.0 / np.sqrt(d)
        self.table = Tensor(rng.normal(0.0, scale, (vocab_size, d)), requires_grad=True)
        self.positions = Tensor(rng.normal(0.0, scale, (max_len + 2, d)), requires_grad=True)
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.pad_id = pad_id
        self.cls_id = cls_id
        self.sep_id = sep_id

    def framed_ids(self, ids: list[int]) -> np.ndarray:
        if len(ids) > self.max_len:
            raise ValueError(f"sequence of {len(ids)} tokens exceeds max_len {self.max_len}")
        full = np.array([self.cls_id] + list(ids) + [self.sep_id], dtype=np.int64)
        if full.min() < 0 or full.max() >= self.vocab_size:
            raise ValueError("token id out of vocabulary range")
        return full

    def __call__(self, ids_batch: np.ndarray) -> Tensor:
        """ids_batch: int array (B, n) of already framed+padded ids."""
        if ids_batch.min() < 0 or ids_batch.max() >= self.vocab_size:
            raise ValueError("token id out of vocabulary range")
        n = ids_batch.shape[-1]
        if n > self.max_len + 2:
            raise ValueError(f"framed length {n} exceeds max_len {self.max_len} + 2")
        tok = take_rows(self.table, ids_batch)
        pos = take_rows(self.positions, np.arange(n))
        # the [CLS] slot carries no positional term
        gate = np.ones((n, 1))
        gate[0, 0] = 0.0
        return add(tok, mul(pos, constant(gate)))

    def embed(self, ids: list[int]) -> Tensor:
        """Single unpadded sentence -> (len + 2, d)."""
        return self(self.framed_ids(ids)[None, :])[0]


class PatchEmbedder(Module):
    """Linear projection of raw patch vectors plus a learned position per slot."""

    def __init__(self, d_raw: int, d: int, n_patches: int, rng: np.random.Generator):
        self.proj = Linear(d_raw, d, rng)
        self.positions = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (n_patches, d)),
                                requires_grad=True)
        self.d_raw = d_raw
        self.n_patches = n_patches

    def __call__(self, patches) -> Tensor:
        """patches: array (..., n_patches, d_raw) -> (..., n_patches, d)."""
        if not isinstance(patches, Tensor):
            patches = constant(np.asarray(patches, dtype=np.float64))
        if patches.shape[-1] != self.d_raw:
            raise ValueError(f"patch dim {patches.shape[-1]} != expected {self.d_raw}")
        if patches.shape[-2] != self.n_patches:
            raise ValueError(f"patch count {patches.shape[-2]} != expected {self.n_patches}")
        return add(self.proj(patches), self.positions)


def pad_key_mask(valid: np.ndarray, n_query: int) -> Tensor | None:
    """Additive mask (B, 1, n_query, n_kv) hiding invalid key columns.

    ``valid`` is a 0/1 array (B, n_kv). Returns None when nothing is padded.
    """
    valid = np.asarray(valid, dtype=np.float64)
    if valid.all():
        return None
    rows = np.where(valid > 0.0, 0.0, -np.inf)[:, None, None, :]
    return constant(np.broadcast_to(rows, (valid.shape[0], 1, n_query, valid.shape[1])).copy(),
                    allow_neg_inf=True)
