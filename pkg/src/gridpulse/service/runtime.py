"""Engine runtime behind the service: one stream writer, many readers.

All engine mutation happens on a single feeder thread at a time (live
synthetic input, or a replay session that preempts it).  Handlers read
published immutable snapshots and query the archive under a shared lock.
"""

from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from ..archive import Archive
from ..correlation import Monitor, snapshot_ordered
from ..domain import EngineConfig, ValidationError
from ..ingest import GeneratorParams, InjectionKind, InjectionSpec, generate_arrays


class ReplayBusyError(RuntimeError):
    """Only one replay session may run at a time."""


class ReplayNotFound(KeyError):
    pass


@dataclass(frozen=True)
class MatrixSnapshot:
    seq: int
    ts: datetime
    window_length: int
    labels: tuple[int, ...]
    cells: tuple  # floats and Nones, electrical order
    flags: tuple
    replay_id: str | None


class ReplaySession:
    _ids = itertools.count(1)

    def __init__(self, from_ms: int, to_ms: int, speed: float):
        self.id = f"r{next(self._ids)}"
        self.from_ms = from_ms
        self.to_ms = to_ms
        self.speed = speed
        self.state = "running"
        self.cursor_ms: int | None = None
        self.resume_event = threading.Event()
        self.resume_event.set()
        self.stop_requested = False

    def pause(self):
        if self.state == "running":
            self.state = "paused"
            self.resume_event.clear()

    def resume(self):
        if self.state == "paused":
            self.state = "running"
            self.resume_event.set()

    def stop(self):
        self.stop_requested = True
        self.resume_event.set()


class LiveSynthetic:
    """Endless quiet stream with occasional random events, for live demo."""

    def __init__(self, config: EngineConfig, seed: int = 0,
                 events: bool = True,
                 params: GeneratorParams = GeneratorParams()):
        self.config = config
        self.seed = seed
        self.events = events
        self.params = params
        self.chunk_frames = 30 * config.sample_hz
        self._counter = 0

    def next_chunk(self, start_ts: datetime):
        """30 s of stream; deterministic per (seed, chunk counter)."""
        idx = self._counter
        self._counter += 1
        rng = np.random.default_rng((self.seed, idx))
        injections = []
        if self.events and idx > 1 and rng.random() < 0.4:
            kind = rng.choice([InjectionKind.DATA_DROP, InjectionKind.MISREAD,
                               InjectionKind.LIGHTNING])
            pmu = int(rng.integers(0, self.config.pmu_count))
            offset = float(rng.uniform(2, 12))
            dur = float(rng.uniform(4, 8)) if kind is InjectionKind.LIGHTNING \
                else float(rng.uniform(0.5, 2))
            from datetime import timedelta
            injections.append(InjectionSpec(
                kind, pmu, start_ts + timedelta(seconds=offset), dur))
        return generate_arrays(self.config, start_ts, self.chunk_frames,
                               injections, seed=hash((self.seed, idx)) % 2**31,
                               params=self.params)


class EngineRuntime:
    """Owns the monitor, the archive and the single-writer feed discipline."""

    def __init__(self, config: EngineConfig, archive: Archive,
                 live_source: LiveSynthetic | None = None):
        self.config = config
        self.archive = archive
        self.monitor = Monitor(config)
        self.live_source = live_source
        self.order = tuple(config.electrical_order.ids)
        self._order_idx = np.asarray(self.order)
        self._iu = np.triu_indices(config.pmu_count, k=1)
        self.engine_lock = threading.Lock()    # serializes monitor pushes
        self.archive_lock = threading.Lock()   # serializes appends vs queries
        self.snapshots: dict[int, MatrixSnapshot] = {}
        self._seq = 0
        self.replay: ReplaySession | None = None
        self.sessions: dict[str, ReplaySession] = {}
        self._live_stop = threading.Event()
        self._live_paused = threading.Event()
        self._threads: list[threading.Thread] = []

    # ----------------------------------------------------------------- feeds

    def push(self, ts: datetime, v: np.ndarray, phi: np.ndarray,
             replay_id: str | None = None) -> None:
        """Feed one frame through the monitor and publish snapshots."""
        with self.engine_lock:
            triangles, _ = self.monitor.push_arrays(ts, v, phi)
            active = tuple(self._flag_tuple(f)
                           for f in self.monitor.classifier.active_flags())
            self._seq += 1
            seq = self._seq
        idx = self._order_idx
        for tri in triangles:
            m = np.full((tri.pmu_count, tri.pmu_count), np.nan)
            m[self._iu] = tri.cells
            m[(self._iu[1], self._iu[0])] = tri.cells
            ordered = m[idx[:, None], idx[None, :]][self._iu]
            cells = tuple(None if np.isnan(c) else float(c) for c in ordered)
            self.snapshots[tri.window_length] = MatrixSnapshot(
                seq, ts, tri.window_length, self.order, cells, active, replay_id)

    @staticmethod
    def _flag_tuple(flag):
        return (flag.kind.value, flag.pmu_id, flag.window_length,
                flag.start_ts, flag.last_ts)

    def start_live(self) -> None:
        if self.live_source is None:
            return
        thread = threading.Thread(target=self._live_loop, name="live-feed",
                                  daemon=True)
        self._threads.append(thread)
        thread.start()

    def _live_loop(self) -> None:
        hz = self.config.sample_hz
        interval = 1.0 / hz
        start = self.archive.last_ts_ms
        ts0 = datetime.now(timezone.utc) if start is None else \
            datetime.fromtimestamp(start / 1000 + 1.0, tz=timezone.utc)
        frame_clock = time.monotonic()
        pending = []
        while not self._live_stop.is_set():
            chunk = self.live_source.next_chunk(ts0)
            from datetime import timedelta
            ts0 = ts0 + timedelta(seconds=chunk.n_frames / hz)
            for i in range(chunk.n_frames):
                if self._live_stop.is_set():
                    return
                while self._live_paused.is_set():
                    time.sleep(0.05)
                    frame_clock = time.monotonic()
                    if self._live_stop.is_set():
                        return
                ts = datetime.fromtimestamp(chunk.ts_ms[i] / 1000,
                                            tz=timezone.utc)
                self.push(ts, chunk.v[i], chunk.phi[i])
                pending.append(i)
                if len(pending) >= hz:
                    self._flush_live(chunk, pending)
                    pending = []
                frame_clock += interval
                delay = frame_clock - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            if pending:
                self._flush_live(chunk, pending)
                pending = []

    def _flush_live(self, chunk, pending: list[int]) -> None:
        rows = np.asarray(pending)
        with self.archive_lock:
            self.archive.append_block(chunk.ts_ms[rows], chunk.v[rows],
                                      chunk.phi[rows])

    def stop(self) -> None:
        self._live_stop.set()
        if self.replay is not None:
            self.replay.stop()
        for t in self._threads:
            t.join(timeout=5)

    # ---------------------------------------------------------------- replay

    def start_replay(self, from_ms: int, to_ms: int, speed: float) -> ReplaySession:
        if self.replay is not None and self.replay.state != "done":
            raise ReplayBusyError("a replay session is already running")
        rng = self.archive.time_range_ms()
        if rng is None:
            raise ValidationError("archive is empty; nothing to replay")
        if not (rng[0] <= from_ms <= to_ms <= rng[1]):
            raise ValidationError(
                f"replay range [{from_ms}, {to_ms}] outside archived span "
                f"[{rng[0]}, {rng[1]}]")
        if not (speed > 0):
            raise ValidationError("replay speed must be > 0")
        session = ReplaySession(from_ms, to_ms, speed)
        self.replay = session
        self.sessions[session.id] = session
        thread = threading.Thread(target=self._replay_loop, args=(session,),
                                  name=f"replay-{session.id}", daemon=True)
        self._threads.append(thread)
        thread.start()
        return session

    def _replay_loop(self, session: ReplaySession) -> None:
        self._live_paused.set()
        try:
            time.sleep(0.05)  # let the live feeder reach its pause gate
            with self.engine_lock:
                self.monitor.reset()
            with self.archive_lock:
                first = self.archive.find_row_at_or_after(session.from_ms)
                stop = self.archive.find_row_at_or_after(session.to_ms + 1)
            interval = (1.0 / self.config.sample_hz) / session.speed
            clock = time.monotonic()
            for row in range(first, stop, 600):
                with self.archive_lock:
                    block = self.archive.read_rows(row, min(row + 600, stop))
                for i in range(len(block)):
                    if session.stop_requested:
                        return
                    session.resume_event.wait()
                    if session.stop_requested:
                        return
                    ts = datetime.fromtimestamp(block.ts_ms[i] / 1000,
                                                tz=timezone.utc)
                    self.push(ts, block.v[i], block.phi[i], replay_id=session.id)
                    session.cursor_ms = int(block.ts_ms[i])
                    clock += interval
                    delay = clock - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
        finally:
            session.state = "done"
            with self.engine_lock:
                self.monitor.reset()
            self._live_paused.clear()

    def get_session(self, session_id: str) -> ReplaySession:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise ReplayNotFound(session_id) from None

    # --------------------------------------------------------------- queries

    def latest_snapshot(self, window: int) -> MatrixSnapshot | None:
        return self.snapshots.get(window)
