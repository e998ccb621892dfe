"""FastAPI service exposing train/evaluate/synth/export over HTTP.

Thin wrapper: endpoints validate the request shape, translate domain errors
(bad config keys, missing files, shape mismatches) to 400 responses, and
delegate to the run functions. Anything unexpected surfaces as a 500.
"""

from __future__ import annotations

from contextlib import contextmanager

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import RunConfig
from ..runs import run_evaluate, run_export, run_synth, run_train
from ..synthetic import SyntheticSpec
from .schemas import (
    EvaluateRequest,
    EvaluateResponse,
    ExportRequest,
    ExportResponse,
    HealthResponse,
    SynthRequest,
    SynthResponse,
    TrainRequest,
    TrainResponse,
)

_USER_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError, KeyError, TypeError)


@contextmanager
def _user_errors():
    try:
        yield
    except _USER_ERRORS as err:
        raise HTTPException(status_code=400, detail=str(err)) from err


def create_app() -> FastAPI:
    app = FastAPI(title="deconfrec service", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/train", response_model=TrainResponse)
    def train_endpoint(request: TrainRequest) -> TrainResponse:
        with _user_errors():
            config = RunConfig.from_dict(request.config)
            result = run_train(config)
        return TrainResponse(**result)

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate_endpoint(request: EvaluateRequest) -> EvaluateResponse:
        with _user_errors():
            result = run_evaluate(
                request.checkpoint,
                dataset_dir=request.dataset_dir,
                ks=request.ks,
                output_path=request.output_path,
            )
        return EvaluateResponse(**result)

    @app.post("/synth", response_model=SynthResponse)
    def synth_endpoint(request: SynthRequest) -> SynthResponse:
        with _user_errors():
            spec = SyntheticSpec(
                **request.model_dump(exclude={"out_dir"})
            )
            result = run_synth(spec, request.out_dir)
        return SynthResponse(**result)

    @app.post("/export", response_model=ExportResponse)
    def export_endpoint(request: ExportRequest) -> ExportResponse:
        with _user_errors():
            result = run_export(
                request.checkpoint,
                request.what,
                out_path=request.out_path,
                dataset_dir=request.dataset_dir,
            )
        return ExportResponse(**result)

    return app


app = create_app()
