"""End-to-end runs wired from the core pieces: dataset generation, training,
evaluation, inference, and the two inspection views. The HTTP service and the
CLI are both thin wrappers around these functions; everything here works on
plain paths and dicts."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import DataConfig, RunConfig, build_model_config, load_run_config
from .data import (Example, Schema, Vocab, generate_corpus, load_corpus,
                   make_schema, save_corpus, text_only_ceiling)
from .diagnostics import run_gradient_suite
from .model import MultimodalTagger
from .train import train_model


def generate_dataset(cfg: DataConfig, out_dir: str | Path) -> dict:
    """Draw a schema and corpus from ``cfg`` and write them under ``out_dir``.

    Writes schema.json, one JSONL file per split, and stats.json with the
    per-split text-only ceilings.
    """
    rng = np.random.default_rng(cfg.seed)
    schema = make_schema(rng, n_types=cfg.types, lexicon_size=cfg.lexicon,
                         ambiguous_fraction=cfg.ambiguous_fraction,
                         context_vocab=cfg.context_vocab, d_raw=cfg.patch_dim,
                         n_patches=cfg.patches, noise_sigma=cfg.noise_sigma,
                         two_token_fraction=cfg.two_token_fraction)
    schema.max_tokens = cfg.max_tokens
    sizes = {"train": cfg.train, "dev": cfg.dev, "test": cfg.test}
    splits = generate_corpus(schema, sizes, cfg.missing_image_fraction, rng)
    save_corpus(out_dir, schema, splits)
    stats = {
        "sizes": {k: len(v) for k, v in splits.items()},
        "text_only_ceiling": {k: text_only_ceiling(schema, v)
                              for k, v in splits.items()},
        "entity_types": list(schema.entity_types),
        "labels": schema.labels(),
        "vocab_size": len(Vocab.from_schema(schema)),
        "max_archetype_cos": schema.max_archetype_cos,
        "seed": cfg.seed,
    }
    (Path(out_dir) / "stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n")
    return {"out_dir": str(out_dir), **stats}


def _resolve_model_geometry(run: RunConfig, schema: Schema) -> dict:
    """The dataset fixes patch geometry and the length budget; explicit
    [model] values must agree with it."""
    declared = run.model_fields
    fixed = {"n_patches": schema.n_patches, "d_raw": schema.d_raw}
    for key, value in fixed.items():
        if key in declared and declared[key] != value:
            raise ValueError(
                f"config declares {key}={declared[key]} but the dataset "
                f"was generated with {value}")
    overrides = dict(fixed)
    max_len = declared.get("max_len", 32)
    if max_len < schema.max_tokens:
        raise ValueError(
            f"max_len {max_len} is below the dataset's sentence budget "
            f"{schema.max_tokens}")
    overrides["max_len"] = max_len
    return overrides


def _load_run(config: RunConfig | str | Path | None) -> RunConfig:
    if isinstance(config, RunConfig):
        return config
    return load_run_config(config)


def train_run(data_dir: str | Path, out_dir: str | Path,
              config: RunConfig | str | Path | None = None,
              seed: int | None = None, log=None) -> dict:
    """Train on a generated dataset directory; returns the training summary
    and leaves last.ckpt / best.ckpt / history.json under ``out_dir``."""
    run = _load_run(config)
    schema, splits = load_corpus(data_dir)
    for split in ("train", "dev"):
        if split not in splits:
            raise FileNotFoundError(f"dataset under {data_dir} has no {split}.jsonl")
    vocab = Vocab.from_schema(schema)
    overrides = _resolve_model_geometry(run, schema)
    model_config = build_model_config(run, tuple(schema.labels()), len(vocab),
                                      seed=seed, **overrides)
    model = MultimodalTagger(model_config, vocab)
    result = train_model(model, splits["train"], splits["dev"], out_dir, log=log)
    out = Path(out_dir)
    summary = {
        "config": model_config.to_dict(),
        "data_dir": str(data_dir),
        "best_epoch": result["best_epoch"],
        "best_dev_f1": result["best_dev_f1"],
        "total_steps": result["total_steps"],
        "history": result["epochs"],
        "checkpoints": {"last": str(out / "last.ckpt"),
                        "best": str(out / "best.ckpt")},
    }
    (out / "history.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def load_model(checkpoint: str | Path) -> MultimodalTagger:
    model, _ = load_checkpoint(checkpoint)
    return model


def split_examples(data_dir: str | Path, split: str) -> tuple[Schema, list[Example]]:
    schema, splits = load_corpus(data_dir)
    if split not in splits:
        raise FileNotFoundError(f"dataset under {data_dir} has no {split}.jsonl")
    return schema, splits[split]


def eval_run(checkpoint: str | Path, data_dir: str | Path,
             split: str = "test",
             model: MultimodalTagger | None = None) -> dict:
    model = model or load_model(checkpoint)
    _, examples = split_examples(data_dir, split)
    return model.evaluate(examples)


def infer_run(checkpoint: str | Path, sentences: list[list[str]],
              model: MultimodalTagger | None = None) -> list[dict]:
    model = model or load_model(checkpoint)
    out = []
    for tokens in sentences:
        out.append({"tokens": list(tokens), "labels": model.infer(list(tokens))})
    return out


def masks_run(checkpoint: str | Path, data_dir: str | Path, split: str,
              index: int, model: MultimodalTagger | None = None) -> dict:
    model = model or load_model(checkpoint)
    _, examples = split_examples(data_dir, split)
    if not 0 <= index < len(examples):
        raise IndexError(f"index {index} out of range for {split} "
                         f"({len(examples)} examples)")
    example = examples[index]
    report = model.inspect_masks(example)
    report["index"] = index
    report["tags"] = list(example.tags)
    return report


def similarity_run(checkpoint: str | Path, data_dir: str | Path, split: str,
                   index: int, k: int = 3, seed: int = 0,
                   model: MultimodalTagger | None = None) -> dict:
    """Cosine of the generated visual features against the paired image and
    ``k`` mismatched ones drawn from the same split."""
    model = model or load_model(checkpoint)
    _, examples = split_examples(data_dir, split)
    if not 0 <= index < len(examples):
        raise IndexError(f"index {index} out of range for {split} "
                         f"({len(examples)} examples)")
    example = examples[index]
    if not example.has_image:
        raise ValueError(f"example {index} has no paired image")
    pool = [i for i, ex in enumerate(examples) if ex.has_image and i != index]
    if k < 1:
        raise ValueError("need at least one mismatched image")
    if len(pool) < k:
        raise ValueError(f"only {len(pool)} other examples with images, need {k}")
    rng = np.random.default_rng(seed)
    distractors = [int(i) for i in rng.choice(len(pool), size=k, replace=False)]
    distractors = [pool[i] for i in distractors]
    candidates = [example.patches] + [examples[i].patches for i in distractors]
    scores = model.alignment_similarity(example.tokens, candidates)
    return {
        "index": index,
        "tokens": list(example.tokens),
        "paired_score": scores[0],
        "mismatched": [{"index": i, "score": s}
                       for i, s in zip(distractors, scores[1:])],
        "preferred": scores[0] > max(scores[1:]),
    }


def gradcheck_run(seed: int = 0, trials: int = 10) -> dict:
    return run_gradient_suite(seed=seed, trials=trials)
