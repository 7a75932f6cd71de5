"""Desk-scale multimodal named-entity tagger, built from scratch.

The model tags entity spans in text while learning, at train time, to
regenerate each modality's features from the other through a shared
bidirectional generator; at inference it runs from text alone. Everything
rests on a small reverse-mode autodiff engine over float64 numpy arrays.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataConfig, RunConfig, build_model_config, load_run_config
from .data import Example, Schema, Vocab, generate_corpus, load_corpus, make_schema
from .diagnostics import run_gradient_suite
from .gradcheck import finite_difference_check
from .metrics import bio_spans, metrics_report, span_micro_f1
from .model import ModelConfig, MultimodalTagger
from .tensor import Tensor, backward, constant
from .train import AdamW, train_model

__all__ = [
    "AdamW", "DataConfig", "Example", "ModelConfig", "MultimodalTagger",
    "RunConfig", "Schema", "Tensor", "Vocab", "backward",
    "bio_spans", "build_model_config", "constant", "finite_difference_check",
    "generate_corpus", "load_checkpoint", "load_corpus", "load_run_config",
    "make_schema", "metrics_report", "run_gradient_suite", "save_checkpoint",
    "span_micro_f1", "train_model",
]
