"""The HTTP face of the package.

One endpoint per workflow. Expected failures (missing files, bad indices,
mismatched configs) become 400s with the underlying message; everything else
is a real 500. Checkpoints are cached per (path, mtime, size) since several
inspection calls typically hit the same model.
"""

from __future__ import annotations

import dataclasses
import os

from fastapi import FastAPI, HTTPException

from .. import workflows
from ..config import load_run_config
from ..model import MultimodalTagger
from .schemas import (EvalRequest, GenerateDataRequest, GenerateDataResponse,
                      GradcheckRequest, GradcheckResponse, HealthResponse,
                      InferRequest, InferResponse, InspectMasksRequest,
                      InspectMasksResponse, MetricsResponse, SimilarityRequest,
                      SimilarityResponse, TrainRequest, TrainResponse)

_EXPECTED = (ValueError, KeyError, IndexError, FileNotFoundError,
             NotADirectoryError, IsADirectoryError)


def _version() -> str:
    try:
        from importlib.metadata import version
        return version("genner")
    except Exception:
        return "unknown"


class _CheckpointCache:
    def __init__(self, limit: int = 4):
        self.limit = limit
        self._entries: dict[tuple, MultimodalTagger] = {}

    def get(self, path: str) -> MultimodalTagger:
        stat = os.stat(path)
        key = (os.path.abspath(path), stat.st_mtime_ns, stat.st_size)
        if key not in self._entries:
            if len(self._entries) >= self.limit:
                self._entries.pop(next(iter(self._entries)))
            self._entries[key] = workflows.load_model(path)
        return self._entries[key]


def create_app() -> FastAPI:
    app = FastAPI(title="genner", version=_version())
    cache = _CheckpointCache()

    def guarded(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _EXPECTED as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=_version())

    @app.post("/data/generate", response_model=GenerateDataResponse)
    def generate_data(req: GenerateDataRequest) -> GenerateDataResponse:
        def run():
            cfg = load_run_config(req.config).data
            if req.seed is not None:
                cfg = dataclasses.replace(cfg, seed=req.seed)
            return workflows.generate_dataset(cfg, req.out_dir)
        return GenerateDataResponse(**guarded(run))

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest) -> TrainResponse:
        result = guarded(workflows.train_run, req.data_dir, req.out_dir,
                         config=req.config, seed=req.seed)
        return TrainResponse(**{k: result[k] for k in TrainResponse.model_fields})

    @app.post("/eval", response_model=MetricsResponse)
    def evaluate(req: EvalRequest) -> MetricsResponse:
        def run():
            model = cache.get(req.checkpoint)
            return workflows.eval_run(req.checkpoint, req.data_dir, req.split,
                                      model=model)
        return MetricsResponse(**guarded(run))

    @app.post("/infer", response_model=InferResponse)
    def infer(req: InferRequest) -> InferResponse:
        def run():
            model = cache.get(req.checkpoint)
            return workflows.infer_run(req.checkpoint, req.sentences, model=model)
        return InferResponse(sentences=guarded(run))

    @app.post("/inspect/masks", response_model=InspectMasksResponse)
    def inspect_masks(req: InspectMasksRequest) -> InspectMasksResponse:
        def run():
            model = cache.get(req.checkpoint)
            return workflows.masks_run(req.checkpoint, req.data_dir,
                                       req.split, req.index, model=model)
        return InspectMasksResponse(**guarded(run))

    @app.post("/inspect/similarity", response_model=SimilarityResponse)
    def inspect_similarity(req: SimilarityRequest) -> SimilarityResponse:
        def run():
            model = cache.get(req.checkpoint)
            return workflows.similarity_run(req.checkpoint, req.data_dir,
                                            req.split, req.index,
                                            k=req.k, seed=req.seed, model=model)
        return SimilarityResponse(**guarded(run))

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest) -> GradcheckResponse:
        if req.trials < 1:
            raise HTTPException(status_code=400, detail="trials must be >= 1")
        return GradcheckResponse(**workflows.gradcheck_run(req.seed, req.trials))

    return app
