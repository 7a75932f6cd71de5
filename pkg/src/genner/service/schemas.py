"""Request and response shapes for the HTTP service.

The service runs next to its caller and exchanges filesystem paths, not
payloads: datasets and checkpoints stay on disk, responses carry summaries.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class GenerateDataRequest(BaseModel):
    out_dir: str
    config: str | None = None         # path to an INI file, [data] section
    seed: int | None = None           # overrides the configured seed


class GenerateDataResponse(BaseModel):
    out_dir: str
    sizes: dict[str, int]
    text_only_ceiling: dict[str, float]
    entity_types: list[str]
    labels: list[str]
    vocab_size: int
    max_archetype_cos: float
    seed: int


class TrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    config: str | None = None
    seed: int | None = None


class TrainResponse(BaseModel):
    best_epoch: int
    best_dev_f1: float
    total_steps: int
    checkpoints: dict[str, str]
    history: list[dict]
    config: dict


class Prf(BaseModel):
    p: float
    r: float
    f1: float


class MetricsResponse(BaseModel):
    overall: Prf
    per_type: dict[str, Prf]


class EvalRequest(BaseModel):
    checkpoint: str
    data_dir: str
    split: str = "test"


class InferRequest(BaseModel):
    checkpoint: str
    sentences: list[list[str]] = Field(min_length=1)


class TaggedSentence(BaseModel):
    tokens: list[str]
    labels: list[str]


class InferResponse(BaseModel):
    sentences: list[TaggedSentence]


class InspectMasksRequest(BaseModel):
    checkpoint: str
    data_dir: str
    split: str = "test"
    index: int = 0


class LayerMasks(BaseModel):
    text_keep: list[int]
    text_keep_probs: list[float]
    patch_keep: list[int] | None = None
    patch_keep_probs: list[float] | None = None


class InspectMasksResponse(BaseModel):
    index: int
    tokens: list[str]            # framed with [CLS]/[SEP]
    tags: list[str]
    has_image: bool
    layers: list[LayerMasks]


class SimilarityRequest(BaseModel):
    checkpoint: str
    data_dir: str
    split: str = "test"
    index: int = 0
    k: int = 3
    seed: int = 0


class MismatchedScore(BaseModel):
    index: int
    score: float


class SimilarityResponse(BaseModel):
    index: int
    tokens: list[str]
    paired_score: float
    mismatched: list[MismatchedScore]
    preferred: bool


class GradcheckRequest(BaseModel):
    seed: int = 0
    trials: int = 10


class GradcheckResponse(BaseModel):
    ok: bool
    runtime_s: float
    max_err: dict[str, float]
    checks: list[dict]
    model: dict
