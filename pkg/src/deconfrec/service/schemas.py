"""Request/response contracts for the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class TrainRequest(BaseModel):
    config: dict = Field(
        default_factory=dict,
        description="RunConfig fields to override; unknown keys are rejected",
    )


class TrainResponse(BaseModel):
    output_dir: str
    config_hash: str
    best_epoch: int
    best_val_recall: float
    stopped_early: bool
    report: dict


class EvaluateRequest(BaseModel):
    checkpoint: str
    dataset_dir: str | None = None
    ks: list[int] = [10, 20]
    output_path: str | None = None


class EvaluateResponse(BaseModel):
    output_path: str
    report: dict


class SynthRequest(BaseModel):
    out_dir: str | None = None
    num_users: int = 500
    num_items: int = 300
    num_confounders: int = 4
    confounder_strength: float = 0.8
    exposure_bias_strength: float = 0.5
    seed: int = 0
    outlier_fraction: float = 0.07
    visual_dim: int = 64
    textual_dim: int = 32


class SynthResponse(BaseModel):
    out_dir: str
    files: dict[str, str]
    num_users: int
    num_items: int
    num_edges: int


class ExportRequest(BaseModel):
    checkpoint: str
    what: Literal["environments", "pruned_graph"]
    out_path: str | None = None
    dataset_dir: str | None = None


class ExportResponse(BaseModel):
    out_path: str
    kind: str
    num_records: int
