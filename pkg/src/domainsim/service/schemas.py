"""Request/response models for the probe HTTP API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ProbeRequest(BaseModel):
    q1: str
    q2: str
    expected: int | None = Field(default=None, ge=0, le=1)


class ModelVerdict(BaseModel):
    model_id: int
    label: int
    probability: float


class ProbeResponse(BaseModel):
    q1: str
    q2: str
    per_model: list[ModelVerdict]
    majority_label: int
    expected: int | None
    status: str | None


class SessionCreateResponse(BaseModel):
    session_id: str


class StepRequest(BaseModel):
    q1: str
    q2: str
    expected: int | None = Field(default=None, ge=0, le=1)
    note: str = ""


class StepResponse(BaseModel):
    timestamp: float
    q1: str
    q2: str
    expected: int | None
    note: str
    result: ProbeResponse


class SessionResponse(BaseModel):
    session_id: str
    closed: bool
    steps: list[StepResponse]


class ModelProvenance(BaseModel):
    model_id: int
    stages: list[str]
    seed: int


class EnsembleInfoResponse(BaseModel):
    condition: str
    k: int
    consistency_threshold: int
    vocab_size: int
    mean_accuracy: float | None
    std_accuracy: float | None
    models: list[ModelProvenance]


class ErrorResponse(BaseModel):
    code: str
    message: str
