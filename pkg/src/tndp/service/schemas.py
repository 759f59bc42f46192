from typing import List, Literal, Optional

from pydantic import BaseModel, Field


class DesignIn(BaseModel):
    x: List[float] = Field(..., min_length=1)
    tag: Optional[int] = Field(None, ge=0, description="decision tag (arm) for discrete-arm models")


class ObservationIn(DesignIn):
    y: float


class ModelRequest(BaseModel):
    context: List[ObservationIn] = []
    task_context: List[float] = []


class ProposeRequest(ModelRequest):
    query: List[DesignIn] = Field(..., min_length=1)
    prediction: List[DesignIn] = []


class ProposeResponse(BaseModel):
    index: int
    design: DesignIn
    probabilities: List[float]
    step: int


class PredictRequest(ModelRequest):
    prediction: List[DesignIn] = Field(..., min_length=1)


class PredictResponse(BaseModel):
    mean: List[float]
    std: List[float]
    step: int


class DecideRequest(BaseModel):
    mean: List[float] = Field(..., min_length=1)
    std: List[float] = Field(..., min_length=1)
    kind: Literal["distribution-output", "discrete-arm", "top-k-subset"]
    k: Optional[int] = Field(None, ge=1)
    n_samples: int = Field(256, ge=1, le=100_000)
    seed: int = 0


class DecideResponse(BaseModel):
    decision: List[float] | int | List[int]
    value: float


class HealthResponse(BaseModel):
    status: str
    signature: str
    d_x: int
    max_steps: int
    n_decisions: Optional[int]
    gamma_dim: int
