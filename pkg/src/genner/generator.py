"""Bidirectional cross-modal generation.

One generator pair, shared by every alignment layer: a text-to-visual decoder
that reads kept token states and writes patch-shaped features into learned
visual query slots, and a visual-to-text decoder doing the reverse into
per-position text query slots. Generation quality is scored by row-wise KL
between channel-softmaxed features, weighted by the sampled keep masks, plus
a cycle term that regenerates each modality from the other's generation under
a full mask.

Sampled masks reach the generators as hard {0, -inf} attention constants, so
no gradient flows through mask *application*; the sampler learns through the
mask-weighted losses instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DecoderBlock, Dropout, Module, pad_key_mask
from .tensor import (Tensor, broadcast_to, clamp_min, constant, div, mul,
                     narrow, softmax, sub, take_rows, tlog, tsum)


def build_attention_mask(keep, n_query: int) -> Tensor:
    """Additive {0, -inf} mask (n_query, n_src) or batched (B, 1, n_query, n_src).

    ``keep`` is a 0/1 vector (n_src,) or batch (B, n_src); rows are identical
    per query. Every row must keep at least one source position.
    """
    arr = keep.data if isinstance(keep, Tensor) else np.asarray(keep, dtype=np.float64)
    if arr.ndim == 1:
        if arr.sum() == 0:
            raise ValueError("attention mask: all source positions are masked")
        row = np.where(arr > 0.0, 0.0, -np.inf)
        return constant(np.broadcast_to(row, (n_query, arr.shape[0])).copy(),
                        allow_neg_inf=True)
    if arr.ndim != 2:
        raise ValueError(f"attention mask: keep must be 1-d or 2-d, got {arr.shape}")
    if np.any(arr.sum(axis=-1) == 0):
        raise ValueError("attention mask: a batch row masks all source positions")
    rows = np.where(arr > 0.0, 0.0, -np.inf)[:, None, None, :]
    out = np.broadcast_to(rows, (arr.shape[0], 1, n_query, arr.shape[1])).copy()
    return constant(out, allow_neg_inf=True)


def feature_kl(generated: Tensor, target: Tensor, weights: Tensor) -> Tensor:
    """Sum over rows of weight_i * KL(softmax(generated_i) || softmax(target_i)).

    generated/target (..., n, d), weights (..., n). Differentiable in all
    three. Probabilities are clamped at 1e-12 before the log.
    """
    if generated.shape != target.shape:
        raise ValueError(
            f"feature_kl: shape mismatch {generated.shape} vs {target.shape}")
    if weights.shape != generated.shape[:-1]:
        raise ValueError(
            f"feature_kl: weights {weights.shape} do not match rows of {generated.shape}")
    p = clamp_min(softmax(generated, axis=-1), 1e-12)
    q = clamp_min(softmax(target, axis=-1), 1e-12)
    row_kl = tsum(mul(p, sub(tlog(p), tlog(q))), axis=-1)
    return tsum(mul(row_kl, weights))


@dataclass
class GenerationOutput:
    """Per-layer generation record for one example."""
    v_hat: Tensor
    t_hat: Tensor | None
    v_bar: Tensor | None
    t_bar: Tensor | None
    recon: Tensor | float
    cycle: Tensor | float


class CrossModalGenerator(Module):
    """The shared decoder pair plus learned modality query banks."""

    def __init__(self, d: int, h: int, n_patches: int, max_len: int,
                 rng: np.random.Generator):
        scale = 1.0 / np.sqrt(d)
        self.t2v = DecoderBlock(d, h, rng)
        self.v2t = DecoderBlock(d, h, rng)
        self.visual_queries = Tensor(rng.normal(0.0, scale, (n_patches, d)),
                                     requires_grad=True)
        # one query slot per framed text position, truncated per sentence
        self.text_queries = Tensor(rng.normal(0.0, scale, (max_len + 2, d)),
                                   requires_grad=True)
        self.n_patches = n_patches

    def generate_visual(self, text_states: Tensor, text_keep,
                        drop: Dropout | None = None) -> Tensor:
        """Patch-shaped features decoded from the kept token states.

        text_states (..., n_t, d), text_keep 0/1 over source positions.
        """
        mask = build_attention_mask(text_keep, self.n_patches)
        q = self.visual_queries
        if text_states.ndim == 3:
            q = broadcast_to(q, (text_states.shape[0],) + q.shape)
        return self.t2v(q, text_states, memory_mask=mask, drop=drop)

    def generate_text(self, visual_states: Tensor, patch_keep, n_text: int,
                      text_valid: np.ndarray | None = None,
                      drop: Dropout | None = None) -> Tensor:
        """Token-shaped features decoded from the kept patch states.

        Query bank is truncated to ``n_text`` rows; ``text_valid`` masks padded
        query slots out of the self-attention so real rows ignore them.
        """
        if n_text > self.text_queries.shape[0]:
            raise ValueError(
                f"generate_text: {n_text} rows exceed query bank "
                f"{self.text_queries.shape[0]}")
        mask = build_attention_mask(patch_keep, n_text)
        q = narrow(self.text_queries, slice(0, n_text))
        self_mask = None
        if text_valid is not None:
            valid = np.asarray(text_valid, dtype=np.float64)
            if valid.ndim == 1:
                valid = valid[None, :]
            self_mask = pad_key_mask(valid, n_text)
        if visual_states.ndim == 3:
            q = broadcast_to(q, (visual_states.shape[0],) + q.shape)
        return self.v2t(q, visual_states, memory_mask=mask,
                        self_mask=self_mask, drop=drop)


def forward_generation(gen: CrossModalGenerator, text_states: Tensor,
                       visual_states: Tensor | None, m_t: Tensor,
                       m_v: Tensor | None, has_image: bool,
                       drop: Dropout | None = None) -> GenerationOutput:
    """Single-example generation pass with both losses.

    - text_states (n_t, d); visual_states (N_v, d) or None when has_image is
      false; m_t (n_t,), m_v (N_v,).
    - has_image=False: only v_hat is produced (the text branch still fuses
      it) and both losses are exactly 0.0.
    - an empty m_t keeps only the [CLS] slot for decoding v_hat; an empty
      mask on either side skips the remaining generations and zeroes the
      losses (degenerate path).
    """
    n_t = text_states.shape[-2]
    t_keep = m_t.data
    degenerate_t = t_keep.sum() == 0
    if degenerate_t:
        t_keep = np.zeros(n_t)
        t_keep[0] = 1.0  # fall back to the [CLS] slot
    v_hat = gen.generate_visual(text_states, t_keep, drop=drop)

    if not has_image:
        return GenerationOutput(v_hat, None, None, None, 0.0, 0.0)
    if visual_states is None:
        raise ValueError("forward_generation: has_image without visual states")
    if m_v is None:
        raise ValueError("forward_generation: has_image without a visual mask")

    degenerate_v = m_v.data.sum() == 0
    if degenerate_t or degenerate_v:
        return GenerationOutput(v_hat, None, None, None, 0.0, 0.0)

    t_hat = gen.generate_text(visual_states, m_v.data, n_t, drop=drop)
    recon = feature_kl(v_hat, visual_states, m_v) + feature_kl(t_hat, text_states, m_t)

    ones_t = np.ones(n_t)
    ones_v = np.ones(gen.n_patches)
    v_bar = gen.generate_visual(t_hat, ones_t, drop=drop)
    t_bar = gen.generate_text(v_hat, ones_v, n_t, drop=drop)
    cycle = feature_kl(v_bar, visual_states, m_v) + feature_kl(t_bar, text_states, m_t)
    return GenerationOutput(v_hat, t_hat, v_bar, t_bar, recon, cycle)


@dataclass
class BatchGeneration:
    """Batched counterpart used by the training forward pass."""
    v_hat: Tensor                 # (B, N_v, d), for every row
    t_hat: Tensor | None          # (B_img, n_t, d)
    recon: Tensor | float
    cycle: Tensor | float


def batched_generation(gen: CrossModalGenerator, text_states: Tensor,
                       visual_states: Tensor | None, m_t: Tensor,
                       m_v: Tensor | None, img_rows: np.ndarray,
                       text_valid: np.ndarray,
                       drop: Dropout | None = None,
                       losses: bool = True) -> BatchGeneration:
    """Generation losses over a padded batch.

    text_states (B, n_t, d); visual_states (B_img, N_v, d) for the rows listed
    in ``img_rows``; m_t (B, n_t); m_v (B_img, N_v); text_valid (B, n_t) 0/1.

    Rows whose sampled mask is empty on either side fall back to a safe
    attention mask and have their loss contribution zeroed, matching the
    single-example degenerate path. Losses are averaged over the image rows;
    ``losses=False`` skips them (the fusion inputs are still produced).
    """
    n_t = text_states.shape[-2]
    t_keep = m_t.data.copy()
    empty_t = t_keep.sum(axis=-1) == 0
    t_keep[empty_t] = 0.0
    t_keep[empty_t, 0] = 1.0  # [CLS] fallback for v_hat decoding
    v_hat = gen.generate_visual(text_states, t_keep, drop=drop)

    if visual_states is None or len(img_rows) == 0:
        return BatchGeneration(v_hat, None, 0.0, 0.0)
    assert m_v is not None

    v_keep = m_v.data.copy()
    empty_v = v_keep.sum(axis=-1) == 0
    v_keep[empty_v] = 0.0
    v_keep[empty_v, 0] = 1.0
    valid_img = text_valid[img_rows]

    t_hat = gen.generate_text(visual_states, v_keep, n_t, text_valid=valid_img,
                              drop=drop)
    if not losses:
        return BatchGeneration(v_hat, t_hat, 0.0, 0.0)

    text_img = take_rows(text_states, img_rows)
    m_t_img = take_rows(m_t, img_rows)
    v_hat_img = take_rows(v_hat, img_rows)

    # degenerate rows contribute nothing, exactly as in the unbatched path
    row_ok = ((~empty_t[img_rows]) & (~empty_v)).astype(np.float64)
    w_v = mul(m_v, constant(row_ok[:, None]))
    w_t = mul(m_t_img, constant(row_ok[:, None]))
    n_img = float(len(img_rows))

    recon = feature_kl(v_hat_img, visual_states, w_v) \
        + feature_kl(t_hat, text_img, w_t)

    v_bar = gen.generate_visual(t_hat, valid_img, drop=drop)
    ones_v = np.ones((len(img_rows), gen.n_patches))
    t_bar = gen.generate_text(v_hat_img, ones_v, n_t, text_valid=valid_img,
                              drop=drop)
    cycle = feature_kl(v_bar, visual_states, w_v) \
        + feature_kl(t_bar, text_img, w_t)

    return BatchGeneration(v_hat, t_hat,
                           div(recon, constant(n_img)),
                           div(cycle, constant(n_img)))
