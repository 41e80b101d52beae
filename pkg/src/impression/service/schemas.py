"""Pydantic request/response models for the service endpoints.

Every CLI flag has a field twin here, so a request body doubles as the
run's effective configuration document. Unknown keys are rejected.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ErrorBody(StrictModel):
    category: Literal["config", "io", "incompatible", "numeric", "internal"]
    message: str


class HealthResponse(StrictModel):
    status: str = "ok"
    version: str


class TrainRequest(StrictModel):
    dataset: str = Field(description="'two-domain', 'mnist', or a labeled manifest path")
    out: str
    epochs: int = 2
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    widths: list[int] = [16, 32, 64]
    n_per_domain: int = 600
    image_size: int = 32
    holdout_fraction: float = 0.2


class TrainResponse(StrictModel):
    out: str
    fingerprint: str
    accuracy: float
    dataset: str
    train_count: int
    test_count: int


class EncodeRequest(StrictModel):
    net: str
    input: str = Field(description="image file, directory, or manifest path")
    out: str
    schema_tag: Literal["mean", "var", "meanvar"] = Field(default="meanvar", alias="schema")
    ensemble: bool = False
    seed: int = 0

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class EncodeResponse(StrictModel):
    out: str
    dimension: int
    ensemble_size: int
    fingerprint: str


class SynthRequest(StrictModel):
    net: str
    target_code: str
    out_dir: str
    batch: int = 32
    iters: int = 2000
    lr: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.9
    shift: int = 4
    flip_prob: float = 0.5
    mode: Literal["per-image", "ensemble"] = "per-image"
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"


class SynthResponse(StrictModel):
    out_dir: str
    images: list[str]
    loss_csv: str
    first_loss: float
    final_loss: float
    per_image_losses: list[float]


class TranslateRequest(StrictModel):
    net: str
    source: str = Field(description="image file, directory, or manifest path")
    target_code: str
    out_dir: str
    lam: Optional[float] = None
    task: Optional[str] = None
    iters: int = 2000
    lr: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.9
    shift: int = 4
    flip_prob: float = 0.5
    mode: Literal["per-image", "ensemble"] = "per-image"
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"


class TranslateResponse(StrictModel):
    out_dir: str
    images: list[str]
    loss_csv: str
    lam: float
    first_loss: float
    final_loss: float
    final_impression: float
    final_content: float


class RetrieveRequest(StrictModel):
    net: str
    seed_images: str = Field(description="manifest of labeled seed images")
    corpus: str = Field(description="manifest of corpus images")
    out: str
    n_t: int = 0
    schema_tag: Literal["mean", "var", "meanvar"] = Field(default="meanvar", alias="schema")
    seed: int = 0

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class RetrieveResponse(StrictModel):
    out: str
    ranked_count: int
    selected: list[str]
    skipped: list[list[str]]


class GridifyRequest(StrictModel):
    inputs: str
    out: str
    cols: Optional[int] = None
    pad: int = 2
    seed: int = 0


class GridifyResponse(StrictModel):
    out: str
    rows: int
    cols: int
    image_count: int


class DistanceRequest(StrictModel):
    code_a: str
    code_b: str


class DistanceResponse(StrictModel):
    distance: float
    dimension: int


class TaskTableResponse(StrictModel):
    tasks: dict[str, float]
