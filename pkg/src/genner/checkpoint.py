"""Versioned binary checkpoints.

Layout: magic, header length, a JSON header (version, model config, vocab,
parameter index, optional metadata), then each parameter's raw little-endian
float64 buffer in header order. Everything is written explicitly so that two
identical models produce byte-identical files; archive formats were avoided
because they embed timestamps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Vocab
from .model import ModelConfig, MultimodalTagger

MAGIC = b"GNCK"
VERSION = 1


def save_checkpoint(path: str | Path, model: MultimodalTagger,
                    extra: dict | None = None) -> None:
    params = list(model.named_parameters())
    header = {
        "version": VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.tokens,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[MultimodalTagger, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode())
    if header["version"] != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    config = ModelConfig.from_dict(header["config"])
    model = MultimodalTagger(config, Vocab(list(header["vocab"])))
    params = dict(model.named_parameters())
    if list(params) != [entry["name"] for entry in header["params"]]:
        raise ValueError(f"{path}: parameter names do not match the model")
    offset = 12 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        buf = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape)
        p = params[entry["name"]]
        if p.shape != shape:
            raise ValueError(f"{path}: shape mismatch for {entry['name']}")
        p.data = buf.astype(np.float64).copy()
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes, file is corrupt")
    return model, header["extra"]
