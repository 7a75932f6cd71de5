"""The full tagger: paired encoders, stacked alignment layers, CRF head.

Information flows text -> generated-visual -> text fusion; nothing flows from
real image features back into the text states. That one-way design is what
makes inference image-free: the text branch regenerates its own visual
evidence from learned queries, so images are consumed only by the training
losses (and by the visual branch they supervise).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .crf import CrfParams, crf_nll, viterbi_decode
from .data import Batch, Example, Vocab, make_batch
from .fusion import AlignmentLayer, LayerRecord, LayerState
from .generator import CrossModalGenerator
from .metrics import bio_spans, metrics_report
from .nn import (Dropout, EncoderLayer, Linear, Module, PatchEmbedder,
                 TokenEmbedder, pad_key_mask)
from .tensor import Tensor, add, constant, mul, narrow

@dataclass
class ModelConfig:
    labels: tuple[str, ...]
    vocab_size: int
    d: int = 64
    h: int = 4
    n_layers: int = 2
    n_patches: int = 8
    d_raw: int = 16
    max_len: int = 32
    dropout: float = 0.0
    gumbel_temperature: float = 1.0
    alpha: float = 0.001
    lr: float = 3e-3
    # mask samplers train this much slower than the rest; their only gradient
    # is mask-weighted loss pressure, which is one-directional (see
    # ContextSampler), so at full lr they saturate to drop-all within epochs
    sampler_lr_scale: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    seed: int = 0
    fuse_generated: bool = True

    def __post_init__(self):
        if self.d % self.h != 0:
            raise ValueError(f"d={self.d} not divisible by h={self.h}")
        if self.n_layers < 1:
            raise ValueError("need at least one alignment layer")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.sampler_lr_scale < 0:
            raise ValueError("sampler_lr_scale must be >= 0")
        if not self.labels or self.labels[0] != "O":
            raise ValueError("label set must start with O")
        self.labels = tuple(self.labels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["labels"] = list(self.labels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["labels"] = tuple(d["labels"])
        return ModelConfig(**d)


@dataclass
class ForwardOutput:
    loss_mner: Tensor | None
    recon: list                      # per layer, Tensor or 0.0
    cycle: list
    records: list[LayerRecord]
    emissions: list[Tensor]          # per sentence, (n_words, n_labels)
    v_hat_last: Tensor | None        # (B, n_patches, d) generated at the last layer
    text_final: Tensor


class MultimodalTagger(Module):
    def __init__(self, config: ModelConfig, vocab: Vocab):
        if len(vocab) != config.vocab_size:
            raise ValueError(
                f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.seed)
        c = config
        self.token_embedder = TokenEmbedder(c.vocab_size, c.d, c.max_len, rng,
                                            pad_id=0, cls_id=1, sep_id=2)
        self.patch_embedder = PatchEmbedder(c.d_raw, c.d, c.n_patches, rng)
        self.text_plain = EncoderLayer(c.d, c.h, rng)
        self.visual_plain = EncoderLayer(c.d, c.h, rng)
        # one generator pair shared by all alignment layers
        self.generator = CrossModalGenerator(c.d, c.h, c.n_patches, c.max_len, rng)
        self.layers = [AlignmentLayer(c.d, c.h, rng) for _ in range(c.n_layers)]
        self.emission = Linear(c.d, len(c.labels), rng)
        self.crf = CrfParams(len(c.labels), rng)
        self._label_index = {t: i for i, t in enumerate(c.labels)}

    # -- forward -----------------------------------------------------------

    def _encode(self, batch: Batch, rng: np.random.Generator | None,
                training: bool) -> ForwardOutput:
        c = self.config
        if training and rng is None:
            raise ValueError("training forward needs an rng")
        drop = Dropout(c.dropout, rng) if training and c.dropout > 0.0 else None
        width = batch.token_ids.shape[1]

        text = self.text_plain(self.token_embedder(batch.token_ids),
                               mask=pad_key_mask(batch.valid, width), drop=drop)
        visual = None
        m_v = None
        img_rows = batch.img_rows
        if c.fuse_generated and batch.patches is not None and len(img_rows) > 0:
            visual = self.visual_plain(self.patch_embedder(batch.patches), drop=drop)
            m_v = constant(np.ones((len(img_rows), c.n_patches)))
        else:
            img_rows = np.array([], dtype=np.int64)

        state = LayerState(text=text, visual=visual, img_rows=img_rows,
                           m_t=constant(batch.valid.copy()), m_v=m_v,
                           text_valid=batch.valid, eligible=batch.eligible)
        want_losses = c.alpha != 0.0 and visual is not None
        recons: list = []
        cycles: list = []
        records: list[LayerRecord] = []
        v_hat_last = None
        for layer in self.layers:
            state, record, gen = layer(state, self.generator,
                                       c.gumbel_temperature, rng, training,
                                       fuse=c.fuse_generated,
                                       want_losses=want_losses, drop=drop)
            records.append(record)
            recons.append(gen.recon if gen is not None else 0.0)
            cycles.append(gen.cycle if gen is not None else 0.0)
            if gen is not None:
                v_hat_last = gen.v_hat

        emissions_all = self.emission(state.text)
        emissions = []
        for i, n_words in enumerate(batch.lengths):
            emissions.append(narrow(emissions_all, (i, slice(1, int(n_words) + 1))))
        return ForwardOutput(None, recons, cycles, records, emissions,
                             v_hat_last, state.text)

    def forward_train(self, batch: Batch, rng: np.random.Generator | None = None,
                      training: bool = True) -> ForwardOutput:
        out = self._encode(batch, rng, training)
        total = None
        for em, tags in zip(out.emissions, batch.tag_ids):
            nll = crf_nll(em, tags, self.crf)
            total = nll if total is None else add(total, nll)
        out.loss_mner = mul(total, constant(1.0 / len(batch.tag_ids)))
        return out

    def overall_loss(self, out: ForwardOutput) -> Tensor:
        """loss_mner + alpha * (1/N) * sum over layers of (recon + cycle).

        With alpha = 0, or when no batch row carried an image, this returns
        loss_mner itself (bitwise, no extra graph nodes).
        """
        c = self.config
        assert out.loss_mner is not None
        terms = [t for pair in zip(out.recon, out.cycle) for t in pair
                 if isinstance(t, Tensor)]
        if c.alpha == 0.0 or not terms:
            return out.loss_mner
        gen_total = terms[0]
        for t in terms[1:]:
            gen_total = add(gen_total, t)
        return add(out.loss_mner, mul(gen_total, constant(c.alpha / c.n_layers)))

    # -- inference ----------------------------------------------------------

    def _single_batch(self, tokens: list[str]) -> Batch:
        ex = Example(list(tokens), ["O"] * len(tokens), None, False)
        return make_batch([ex], self.vocab, self._label_index, self.config.max_len)

    def infer(self, tokens: list[str]) -> list[str]:
        """Tags for one sentence from text alone: the evaluation-mode text
        branch plus Viterbi. No image enters this path."""
        if not tokens:
            raise ValueError("cannot tag an empty sentence")
        out = self._encode(self._single_batch(tokens), None, training=False)
        em = out.emissions[0].data
        path = viterbi_decode(em, self.crf.transitions.data, self.crf.start.data)
        return [self.config.labels[i] for i in path]

    def evaluate(self, examples: list[Example]) -> dict:
        """Span micro metrics of image-free inference over a dataset."""
        pred, gold = [], []
        for ex in examples:
            pred.append(bio_spans(self.infer(ex.tokens)))
            gold.append(bio_spans(ex.tags))
        types = sorted({lab[2:] for lab in self.config.labels if lab != "O"})
        return metrics_report(pred, gold, types)

    def inspect_masks(self, example: Example) -> dict:
        """Evaluation-mode keep/drop decisions per layer for one example."""
        ex_batch = make_batch([example], self.vocab, self._label_index,
                              self.config.max_len)
        out = self._encode(ex_batch, None, training=False)
        framed = ["[CLS]"] + list(example.tokens) + ["[SEP]"]
        layers = []
        for rec in out.records:
            entry = {
                "text_keep": [int(v) for v in rec.text_mask[0][:len(framed)]],
                "text_keep_probs": [round(float(v), 6)
                                    for v in rec.text_keep_probs[0][:len(framed)]],
            }
            if rec.visual_mask is not None:
                entry["patch_keep"] = [int(v) for v in rec.visual_mask[0]]
                entry["patch_keep_probs"] = [round(float(v), 6)
                                             for v in rec.visual_keep_probs[0]]
            layers.append(entry)
        return {"tokens": framed, "has_image": example.has_image, "layers": layers}

    def alignment_similarity(self, tokens: list[str],
                             candidates: list[np.ndarray]) -> list[float]:
        """Cosine between the sentence's generated visual features and each
        candidate patch set, both mean-pooled. Candidates are encoded by the
        plain visual layer only."""
        if len(candidates) < 2:
            raise ValueError("need at least two candidate patch sets")
        out = self._encode(self._single_batch(tokens), None, training=False)
        if out.v_hat_last is None:
            raise RuntimeError("model has generation disabled, nothing to compare")
        pooled = out.v_hat_last.data[0].mean(axis=0)
        scores = []
        for patches in candidates:
            enc = self.visual_plain(self.patch_embedder(np.asarray(patches, dtype=np.float64)))
            cand = enc.data.mean(axis=-2).reshape(-1)
            denom = np.linalg.norm(pooled) * np.linalg.norm(cand)
            if denom == 0.0:
                raise FloatingPointError("zero-norm features in similarity")
            scores.append(float(pooled @ cand / denom))
        return scores
