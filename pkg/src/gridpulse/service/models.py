"""Pydantic schemas for every service payload.

These are the wire contract the operator console builds against; matrix
stream messages are newline-delimited JSON serializations of
``MatrixFrameMsg``.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    rows_indexed: int
    pmu_count: int


class ConfigResponse(BaseModel):
    pmu_count: int
    sample_hz: int
    window_lengths: list[int]
    corr_threshold: float
    electrical_order: list[int]
    electrical_distances: list[float]
    archive_start_ms: Optional[int] = None
    archive_end_ms: Optional[int] = None
    live: bool


class FlagMsg(BaseModel):
    kind: Literal["data_drop", "misread", "power_event"]
    pmu_id: Optional[int]
    window_length: int
    start_ts: str
    last_ts: str


class MatrixFrameMsg(BaseModel):
    """One correlation-triangle snapshot for one window length.

    ``cells`` is the condensed upper triangle in electrical order (pair
    (i, j) of ``labels``, i < j); null cells are undefined (blacked out).
    """

    ts: str
    seq: int
    window_length: int
    labels: list[int]
    cells: list[Optional[float]]
    flags: list[FlagMsg] = Field(default_factory=list)
    replay_id: Optional[str] = None


class QueryRequest(BaseModel):
    q: str
    limit: int = Field(default=100, ge=0)
    path: Literal["bitmap", "linear"] = "bitmap"


class QueryRow(BaseModel):
    row_id: int
    ts: str
    v: list[float]
    phi: list[float]


class QueryReportMsg(BaseModel):
    query: str
    path: str
    candidates: int
    returned: int
    wall_ms: float
    bytes_read: int


class QueryResponse(BaseModel):
    total: int
    rows: list[QueryRow]
    report: QueryReportMsg


class ReplayRequest(BaseModel):
    from_ts: str = Field(alias="from")
    to_ts: str = Field(alias="to")
    speed: float = 1.0

    model_config = {"populate_by_name": True}


class ReplayState(BaseModel):
    id: str
    state: Literal["running", "paused", "done"]
    from_ms: int
    to_ms: int
    speed: float
    cursor_ms: Optional[int] = None


class ErrorResponse(BaseModel):
    detail: str
