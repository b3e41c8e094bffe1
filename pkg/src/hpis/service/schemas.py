"""Request and response models for the JSON endpoints (``/wire`` carries raw frames)."""

from typing import Literal, Optional

from pydantic import BaseModel, Field, PositiveInt


class HealthResponse(BaseModel):
    participant: str
    role: str
    status: Literal["ok"] = "ok"


class ErrorResponse(BaseModel):
    code: str
    detail: str


class LedgerResponse(BaseModel):
    participant: str
    on_hand: dict[str, int]
    in_transit: int
    consumed: dict[str, int] = Field(default_factory=dict)


class RecordsResponse(BaseModel):
    keys: list[str]


class ChannelModel(BaseModel):
    peer: str
    status: Literal["agreed", "refused"]
    plan: Optional[str] = None
    reason: Optional[str] = None


class HandshakeResponse(BaseModel):
    channels: list[ChannelModel]


class DispenseRequest(BaseModel):
    term: str = Field(min_length=1)
    quantity: PositiveInt
    patient: str = Field(min_length=1)
    date: str = Field(pattern=r"^\d{4}-\d{2}-\d{2}$")


class DispenseResponse(BaseModel):
    drug: str
    served: int


class StepResponse(BaseModel):
    orders: list[str]
    delivered: int
