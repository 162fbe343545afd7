"""HTTP surface: health, queries, the matrix stream, and replay control."""

from __future__ import annotations

import asyncio
from contextlib import asynccontextmanager
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import StreamingResponse
from fastapi.staticfiles import StaticFiles

from ..domain import ValidationError
from ..query import QuerySyntaxError, execute
from .models import (
    ConfigResponse,
    FlagMsg,
    HealthResponse,
    MatrixFrameMsg,
    QueryReportMsg,
    QueryRequest,
    QueryResponse,
    QueryRow,
    ReplayRequest,
    ReplayState,
)
from .runtime import EngineRuntime, MatrixSnapshot, ReplayBusyError, ReplayNotFound

STREAM_POLL_S = 0.1  # also the per-subscriber throttle: <= 10 msg/s


def _iso(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _parse_when(text: str) -> int:
    raw = text[:-1] if text.endswith("Z") else text
    try:
        dt = datetime.fromisoformat(raw)
    except ValueError:
        raise ValidationError(f"bad timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * 1000)


def snapshot_msg(snap: MatrixSnapshot) -> MatrixFrameMsg:
    flags = [FlagMsg(kind=k, pmu_id=p, window_length=w,
                     start_ts=_iso(s), last_ts=_iso(l))
             for (k, p, w, s, l) in snap.flags]
    return MatrixFrameMsg(ts=_iso(snap.ts), seq=snap.seq,
                          window_length=snap.window_length,
                          labels=list(snap.labels), cells=list(snap.cells),
                          flags=flags, replay_id=snap.replay_id)


def create_app(runtime: EngineRuntime, console_dir: Path | None = None) -> FastAPI:
    @asynccontextmanager
    async def lifespan(_app):
        yield
        runtime.stop()

    app = FastAPI(title="gridpulse", version="0.1.0", lifespan=lifespan)
    app.state.runtime = runtime

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(rows_indexed=runtime.archive.m,
                              pmu_count=runtime.config.pmu_count)

    @app.get("/config", response_model=ConfigResponse)
    def config():
        rng = runtime.archive.time_range_ms()
        order = runtime.config.electrical_order
        return ConfigResponse(
            pmu_count=runtime.config.pmu_count,
            sample_hz=runtime.config.sample_hz,
            window_lengths=list(runtime.config.window_lengths),
            corr_threshold=runtime.config.corr_threshold,
            electrical_order=list(order.ids),
            electrical_distances=list(order.distances),
            archive_start_ms=rng[0] if rng else None,
            archive_end_ms=rng[1] if rng else None,
            live=runtime.live_source is not None,
        )

    @app.post("/query", response_model=QueryResponse)
    def query(req: QueryRequest):
        try:
            with runtime.archive_lock:
                block, report = execute(runtime.archive, req.q, req.path)
        except QuerySyntaxError as exc:
            raise HTTPException(400, detail=str(exc))
        except ValidationError as exc:
            raise HTTPException(400, detail=str(exc))
        except OSError as exc:
            raise HTTPException(500, detail=f"archive I/O failed: {exc}")
        rows = []
        for i in range(min(len(block), req.limit)):
            ts = datetime.fromtimestamp(block.ts_ms[i] / 1000, tz=timezone.utc)
            rows.append(QueryRow(row_id=int(block.row_ids[i]), ts=_iso(ts),
                                 v=[round(x, 6) for x in block.v[i].tolist()],
                                 phi=[round(x, 6) for x in block.phi[i].tolist()]))
        return QueryResponse(total=len(block), rows=rows,
                             report=QueryReportMsg(
                                 query=report.query, path=report.path,
                                 candidates=report.candidate_count,
                                 returned=report.returned_count,
                                 wall_ms=report.wall_ms,
                                 bytes_read=report.bytes_read))

    @app.get("/matrix")
    async def matrix(window: int = Query(...),
                     limit: int | None = Query(default=None, ge=1)):
        """Newline-delimited JSON stream of triangle snapshots.

        Late subscribers get the latest snapshot immediately; each
        subscriber is throttled to at most one message per poll interval.
        ``limit`` bounds the subscription to that many messages.
        """
        if window not in runtime.config.window_lengths:
            raise HTTPException(
                400, detail=f"window {window} not configured "
                f"(use one of {list(runtime.config.window_lengths)})")

        async def stream():
            last_seq = -1
            sent = 0
            while limit is None or sent < limit:
                snap = runtime.latest_snapshot(window)
                if snap is not None and snap.seq != last_seq:
                    last_seq = snap.seq
                    sent += 1
                    yield snapshot_msg(snap).model_dump_json() + "\n"
                await asyncio.sleep(STREAM_POLL_S)

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    @app.post("/replay", response_model=ReplayState, status_code=201)
    def start_replay(req: ReplayRequest):
        try:
            session = runtime.start_replay(_parse_when(req.from_ts),
                                           _parse_when(req.to_ts), req.speed)
        except ReplayBusyError as exc:
            raise HTTPException(409, detail=str(exc))
        except ValidationError as exc:
            raise HTTPException(404, detail=str(exc))
        return _session_state(session)

    @app.get("/replay/{session_id}", response_model=ReplayState)
    def replay_state(session_id: str):
        return _session_state(_get_session(session_id))

    @app.post("/replay/{session_id}/pause", response_model=ReplayState)
    def replay_pause(session_id: str):
        session = _get_session(session_id)
        session.pause()
        return _session_state(session)

    @app.post("/replay/{session_id}/resume", response_model=ReplayState)
    def replay_resume(session_id: str):
        session = _get_session(session_id)
        session.resume()
        return _session_state(session)

    @app.post("/replay/{session_id}/stop", response_model=ReplayState)
    def replay_stop(session_id: str):
        session = _get_session(session_id)
        session.stop()
        session.state = "done"
        return _session_state(session)

    def _get_session(session_id: str):
        try:
            return runtime.get_session(session_id)
        except ReplayNotFound:
            raise HTTPException(404, detail=f"unknown replay session {session_id!r}")

    def _session_state(session) -> ReplayState:
        return ReplayState(id=session.id, state=session.state,
                           from_ms=session.from_ms, to_ms=session.to_ms,
                           speed=session.speed, cursor_ms=session.cursor_ms)

    if console_dir is not None and console_dir.exists():
        app.mount("/", StaticFiles(directory=console_dir, html=True),
                  name="console")

    return app
