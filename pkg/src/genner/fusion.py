"""Hybrid feature extraction and the per-layer assembly.

Each alignment layer: sample keep masks for both sequences, generate each
modality from the other's kept content, then let every position attend over
its own sequence concatenated with the *generated* other modality. Fusion
attention is not gated by the sampled masks; only the global summary, the
generator's cross-attention, and the generation losses are.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .generator import BatchGeneration, CrossModalGenerator, batched_generation
from .nn import Dropout, EncoderLayer, Module, pad_key_mask
from .sampler import ContextSampler
from .tensor import Tensor, add, concat, constant, mul

class HybridExtractor(EncoderLayer):
    """Encoder layer whose keys/values may extend over generated features.

    With no generated input this is exactly the plain encoder layer (same
    parameters, same code path)."""

    def __call__(self, primary: Tensor, generated: Tensor | None = None,
                 mask: Tensor | None = None, drop: Dropout | None = None) -> Tensor:
        if generated is None:
            return super().__call__(primary, mask=mask, drop=drop)
        kv = concat([primary, generated], axis=-2)
        a = self.attn(primary, kv, mask)
        if drop is not None:
            a = drop(a)
        x = self.norm1(add(primary, a))
        f = self.ffn(x)
        if drop is not None:
            f = drop(f)
        return self.norm2(add(x, f))


@dataclass
class LayerState:
    """Everything one alignment layer consumes and produces."""
    text: Tensor                      # (B, n_t, d)
    visual: Tensor | None             # (B_img, N_v, d)
    img_rows: np.ndarray              # batch indices that carry an image
    m_t: Tensor                       # (B, n_t) keep mask entering the layer
    m_v: Tensor | None                # (B_img, N_v)
    text_valid: np.ndarray            # (B, n_t) 0/1; 0 at [PAD]
    eligible: np.ndarray              # (B, n_t) 0/1; 1 at word positions only


@dataclass
class LayerRecord:
    """Inspection snapshot of one layer's sampling and losses."""
    text_mask: np.ndarray
    visual_mask: np.ndarray | None
    text_keep_probs: np.ndarray
    visual_keep_probs: np.ndarray | None
    recon: float = 0.0
    cycle: float = 0.0


def _sample_guarded(sampler: ContextSampler, features: Tensor, prev: Tensor,
                    temperature: float, rng: np.random.Generator,
                    training: bool) -> tuple[Tensor, Tensor]:
    """Run the sampler, tolerating batch rows whose keep-set already collapsed.

    Empty rows get a stand-in [CLS]-only summary and come back forced-empty,
    preserving nesting without failing the whole batch.
    """
    empty = prev.data.sum(axis=-1) == 0
    if not empty.any():
        return sampler(features, prev, temperature, rng, training)
    bump = np.zeros(prev.shape)
    bump[empty, 0] = 1.0
    mask, probs = sampler(features, add(prev, constant(bump)), temperature,
                          rng, training)
    alive = constant((~empty).astype(np.float64)[:, None])
    return mul(mask, alive), probs


class AlignmentLayer(Module):
    """One sampling + generation + fusion stage. The generator pair is shared
    across layers and passed in by the model."""

    def __init__(self, d: int, h: int, rng: np.random.Generator):
        self.text_sampler = ContextSampler(d, rng)
        self.visual_sampler = ContextSampler(d, rng)
        self.text_fuse = HybridExtractor(d, h, rng)
        self.visual_fuse = HybridExtractor(d, h, rng)

    def __call__(self, state: LayerState, gen: CrossModalGenerator,
                 temperature: float, rng: np.random.Generator, training: bool,
                 fuse: bool, want_losses: bool,
                 drop: Dropout | None = None) -> tuple[LayerState, LayerRecord, BatchGeneration | None]:
        n_t = state.text.shape[-2]
        b = state.text.shape[0]

        m_t, p_t = _sample_guarded(self.text_sampler, state.text, state.m_t,
                                   temperature, rng, training)
        # specials and padding never count as kept content
        m_t = mul(m_t, constant(state.eligible))

        m_v = None
        p_v = None
        if state.visual is not None:
            m_v, p_v = _sample_guarded(self.visual_sampler, state.visual,
                                       state.m_v, temperature, rng, training)

        genout: BatchGeneration | None = None
        if fuse:
            genout = batched_generation(gen, state.text, state.visual, m_t, m_v,
                                        state.img_rows, state.text_valid,
                                        drop=drop, losses=want_losses)
            key_valid = np.concatenate(
                [state.text_valid, np.ones((b, gen.n_patches))], axis=-1)
            text_next = self.text_fuse(state.text, genout.v_hat,
                                       mask=pad_key_mask(key_valid, n_t), drop=drop)
        else:
            text_next = self.text_fuse(state.text, None,
                                       mask=pad_key_mask(state.text_valid, n_t),
                                       drop=drop)

        visual_next = None
        if state.visual is not None:
            if fuse and genout is not None and genout.t_hat is not None:
                valid_img = state.text_valid[state.img_rows]
                kv_valid = np.concatenate(
                    [np.ones((len(state.img_rows), gen.n_patches)), valid_img],
                    axis=-1)
                visual_next = self.visual_fuse(state.visual, genout.t_hat,
                                               mask=pad_key_mask(kv_valid, gen.n_patches),
                                               drop=drop)
            else:
                visual_next = self.visual_fuse(state.visual, None, drop=drop)

        record = LayerRecord(
            text_mask=m_t.data.copy(),
            visual_mask=None if m_v is None else m_v.data.copy(),
            text_keep_probs=p_t.data.copy(),
            visual_keep_probs=None if p_v is None else p_v.data.copy(),
        )
        if genout is not None and not isinstance(genout.recon, float):
            record.recon = float(genout.recon.data)
        if genout is not None and not isinstance(genout.cycle, float):
            record.cycle = float(genout.cycle.data)

        next_state = LayerState(text=text_next, visual=visual_next,
                                img_rows=state.img_rows, m_t=m_t, m_v=m_v,
                                text_valid=state.text_valid,
                                eligible=state.eligible)
        return next_state, record, genout
