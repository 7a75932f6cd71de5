"""Run configuration: INI-style files with strict key checking.

Three sections. [model] and [train] fill ModelConfig fields; [data] drives
synthetic corpus generation. Unknown sections or keys are hard errors, so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig


@dataclass
class DataConfig:
    types: int = 4
    lexicon: int = 120
    ambiguous_fraction: float = 0.5
    context_vocab: int = 150
    two_token_fraction: float = 0.35
    missing_image_fraction: float = 0.15
    noise_sigma: float = 0.1
    patches: int = 8
    patch_dim: int = 16
    max_tokens: int = 24
    train: int = 4000
    dev: int = 500
    test: int = 500
    seed: int = 0


# INI key -> (ModelConfig field, type)
_MODEL_KEYS = {
    "d": ("d", int),
    "h": ("h", int),
    "layers": ("n_layers", int),
    "patches": ("n_patches", int),
    "patch_dim": ("d_raw", int),
    "max_len": ("max_len", int),
    "dropout": ("dropout", float),
    "gumbel_temperature": ("gumbel_temperature", float),
    "fuse_generated": ("fuse_generated", bool),
}

_TRAIN_KEYS = {
    "lr": ("lr", float),
    "sampler_lr_scale": ("sampler_lr_scale", float),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "warmup_ratio": ("warmup_ratio", float),
    "alpha": ("alpha", float),
    "weight_decay": ("weight_decay", float),
    "seed": ("seed", int),
}

_DATA_TYPES = {"types": int, "lexicon": int, "ambiguous_fraction": float,
               "context_vocab": int, "two_token_fraction": float,
               "missing_image_fraction": float, "noise_sigma": float,
               "patches": int, "patch_dim": int,
               "max_tokens": int, "train": int, "dev": int, "test": int,
               "seed": int}


@dataclass
class RunConfig:
    model_fields: dict
    data: DataConfig


def _parse_value(raw: str, typ, section: str, key: str):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ValueError(
            f"[{section}] {key}: expected {typ.__name__}, got {raw!r}") from None


def load_run_config(path: str | Path | None) -> RunConfig:
    """Defaults when path is None; otherwise strict parse of the INI file."""
    model_fields: dict = {}
    data_fields: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        for section in parser.sections():
            if section == "model":
                keymap = _MODEL_KEYS
            elif section == "train":
                keymap = _TRAIN_KEYS
            elif section == "data":
                keymap = {k: (k, _DATA_TYPES[k]) for k in _DATA_TYPES}
            else:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in keymap:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                name, typ = keymap[key]
                value = _parse_value(raw, typ, section, key)
                if section == "data":
                    data_fields[name] = value
                else:
                    model_fields[name] = value
    return RunConfig(model_fields=model_fields, data=DataConfig(**data_fields))


def build_model_config(run: RunConfig, labels: tuple[str, ...], vocab_size: int,
                       seed: int | None = None, **overrides) -> ModelConfig:
    kwargs = dict(run.model_fields)
    kwargs.update(overrides)
    if seed is not None:
        kwargs["seed"] = seed
    return ModelConfig(labels=labels, vocab_size=vocab_size, **kwargs)
