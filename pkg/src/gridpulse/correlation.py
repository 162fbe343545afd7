"""Incremental multi-window Pearson correlation over PMU streams.

One engine instance tracks every PMU pair over every configured window
length.  Each pushed frame updates running sums (add the newest sample,
subtract the one sliding out of each window) so the correlation
coefficient never has to be recomputed from scratch:

    r = (Sxy - Sx*Sy/n) / sqrt((Sxx - Sx^2/n) * (Syy - Sy^2/n))

Cells whose variance term falls below ``VAR_EPS`` are undefined (a
constant stream has no correlation) and surface as NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum

import numpy as np

from .domain import EngineConfig, FrameRecord, Signal, ValidationError

VAR_EPS = 1e-12


class OrderingError(ValueError):
    """Frames must arrive with strictly increasing timestamps."""


@dataclass(frozen=True)
class PairWindowState:
    """Running sums for one PMU pair over one window."""

    sum_x: float
    sum_y: float
    sum_xy: float
    sum_x2: float
    sum_y2: float
    n: int

    def correlation(self) -> float | None:
        if self.n < 2:
            return None
        vx = self.sum_x2 - self.sum_x * self.sum_x / self.n
        vy = self.sum_y2 - self.sum_y * self.sum_y / self.n
        if vx <= VAR_EPS or vy <= VAR_EPS:
            return None
        cov = self.sum_xy - self.sum_x * self.sum_y / self.n
        return float(np.clip(cov / np.sqrt(vx * vy), -1.0, 1.0))


@dataclass(frozen=True)
class CorrelationTriangle:
    """Upper-triangle snapshot of pairwise correlations for one window.

    ``cells`` holds the condensed upper triangle (pair (i, j), i < j, at
    the usual condensed index); NaN marks undefined cells.
    """

    window_length: int
    ts: datetime
    pmu_count: int
    cells: np.ndarray
    pmu_order: tuple[int, ...] | None = None  # set by snapshot_ordered

    def cell(self, i: int, j: int) -> float:
        if i == j:
            raise ValidationError("triangle has no diagonal cells")
        if i > j:
            i, j = j, i
        p = self.pmu_count
        return float(self.cells[p * i - i * (i + 1) // 2 + (j - i - 1)])

    def as_matrix(self) -> np.ndarray:
        p = self.pmu_count
        m = np.full((p, p), np.nan)
        iu = np.triu_indices(p, k=1)
        m[iu] = self.cells
        m[(iu[1], iu[0])] = self.cells
        np.fill_diagonal(m, 1.0)
        return m

    def defined_mask(self) -> np.ndarray:
        return ~np.isnan(self.cells)


def snapshot_ordered(triangle: CorrelationTriangle,
                     order: tuple[int, ...]) -> CorrelationTriangle:
    """Re-index a triangle so positions follow the given PMU order.

    Cell (a, b) of the result is the correlation of PMUs order[a] and
    order[b]; values are untouched.
    """
    p = triangle.pmu_count
    if sorted(order) != list(range(p)):
        raise ValidationError("order must be a permutation of PMU ids")
    m = triangle.as_matrix()
    idx = np.asarray(order)
    iu = np.triu_indices(p, k=1)
    cells = m[idx[:, None], idx[None, :]][iu]
    return replace(triangle, cells=cells, pmu_order=tuple(order))


class CorrelationEngine:
    """Single-writer incremental correlation over all pairs and windows."""

    def __init__(self, config: EngineConfig, signal: Signal | None = None):
        self.config = config
        self.signal = signal or config.signal
        p = config.pmu_count
        self.windows = np.asarray(config.window_lengths, dtype=np.int64)
        w = len(self.windows)
        self.capacity = int(self.windows.max())
        # Sums are kept for x - offset, with the per-PMU offset frozen at
        # the first sample.  r is shift-invariant, and centering removes
        # the catastrophic cancellation that raw sums of band-level values
        # (~540 kV) would suffer in the variance terms of small windows.
        self.offset = np.zeros(p, dtype=np.float64)
        self.ring = np.zeros((self.capacity, p), dtype=np.float64)  # centered
        self.sx = np.zeros((w, p))
        self.sx2 = np.zeros((w, p))
        self.sxy = np.zeros((w, p, p))
        self.t = 0
        self.last_ts: datetime | None = None
        self._iu = np.triu_indices(p, k=1)

    # ------------------------------------------------------------------- push

    def push_frame(self, frame: FrameRecord) -> list[CorrelationTriangle]:
        """Incorporate one frame; returns a triangle per warm window."""
        if len(frame.samples) != self.config.pmu_count:
            raise ValidationError(
                f"frame has {len(frame.samples)} samples, engine expects "
                f"{self.config.pmu_count}")
        if self.signal is Signal.VOLTAGE_MAGNITUDE:
            x = np.array([s.v for s in frame.samples])
        else:
            x = np.array([s.phi for s in frame.samples])
        return self.push_values(frame.ts, x)

    def push_values(self, ts: datetime, x: np.ndarray) -> list[CorrelationTriangle]:
        if self.last_ts is not None and ts <= self.last_ts:
            raise OrderingError(
                f"frame timestamp {ts.isoformat()} not after {self.last_ts.isoformat()}")
        self.last_ts = ts
        t = self.t
        if t == 0:
            self.offset[:] = x
        u = x - self.offset
        warm = self.windows <= t  # windows that must evict this push
        old_idx = (t - self.windows) % self.capacity
        olds = self.ring[old_idx]
        olds[~warm] = 0.0
        self.sx += u - olds
        self.sx2 += u * u - olds * olds
        self.sxy += u[:, None] * u[None, :] - olds[:, :, None] * olds[:, None, :]
        self.ring[t % self.capacity] = u
        self.t = t + 1
        if self.config.resync_interval and self.t % self.config.resync_interval == 0:
            self.resync()
        return self._emit(ts)

    def _emit(self, ts: datetime) -> list[CorrelationTriangle]:
        n = np.minimum(self.t, self.windows).astype(np.float64)
        iu0, iu1 = self._iu
        varterm = self.sx2 - self.sx * self.sx / n[:, None]
        cov = self.sxy[:, iu0, iu1] - self.sx[:, iu0] * self.sx[:, iu1] / n[:, None]
        vi = varterm[:, iu0]
        vj = varterm[:, iu1]
        defined = (vi > VAR_EPS) & (vj > VAR_EPS)
        denom = np.sqrt(np.where(defined, vi * vj, 1.0))
        r = np.where(defined, np.clip(cov / denom, -1.0, 1.0), np.nan)
        out = []
        p = self.config.pmu_count
        for w, N in enumerate(self.windows):
            if n[w] >= 2:
                out.append(CorrelationTriangle(int(N), ts, p, r[w]))
        return out

    # ------------------------------------------------------------ maintenance

    def resync(self) -> None:
        """Recompute all sums from the ring buffer to cancel float drift."""
        t = self.t
        for w, N in enumerate(self.windows):
            n = min(t, int(N))
            rows = (np.arange(t - n, t) % self.capacity)
            data = self.ring[rows]
            self.sx[w] = data.sum(axis=0)
            self.sx2[w] = (data * data).sum(axis=0)
            self.sxy[w] = data.T @ data

    def reset(self) -> None:
        """Clear all stream state (used when replay preempts live input)."""
        self.ring[:] = 0.0
        self.sx[:] = 0.0
        self.sx2[:] = 0.0
        self.sxy[:] = 0.0
        self.offset[:] = 0.0
        self.t = 0
        self.last_ts = None

    # ---------------------------------------------------------------- queries

    def window_index(self, window_length: int) -> int:
        idx = np.flatnonzero(self.windows == window_length)
        if idx.size == 0:
            raise ValidationError(f"window length {window_length} not configured")
        return int(idx[0])

    def pair_state(self, i: int, j: int, window_length: int) -> PairWindowState:
        """Running-sum view for one pair (in raw signal units)."""
        w = self.window_index(window_length)
        n = int(min(self.t, self.windows[w]))
        ci, cj = self.offset[i], self.offset[j]
        su_i, su_j = self.sx[w, i], self.sx[w, j]
        return PairWindowState(
            sum_x=float(su_i + n * ci),
            sum_y=float(su_j + n * cj),
            sum_xy=float(self.sxy[w, i, j] + ci * su_j + cj * su_i + n * ci * cj),
            sum_x2=float(self.sx2[w, i] + 2 * ci * su_i + n * ci * ci),
            sum_y2=float(self.sx2[w, j] + 2 * cj * su_j + n * cj * cj),
            n=n)

    def retained(self, window_length: int) -> np.ndarray:
        """The samples currently inside the given window, oldest first."""
        w = self.window_index(window_length)
        n = int(min(self.t, self.windows[w]))
        rows = (np.arange(self.t - n, self.t) % self.capacity)
        return self.ring[rows] + self.offset


class EventKind(Enum):
    DATA_DROP = "data_drop"
    MISREAD = "misread"
    POWER_EVENT = "power_event"


@dataclass
class EventFlag:
    """A classified stream condition with its observed time span."""

    kind: EventKind
    pmu_id: int | None
    window_length: int
    start_ts: datetime
    last_ts: datetime

    def overlaps(self, start: datetime, end: datetime) -> bool:
        return self.start_ts < end and start <= self.last_ts


class StreamClassifier:
    """Turns per-frame values plus correlation triangles into event flags.

    Data errors are value signatures: a run of exact zeros is a data drop,
    a run of identical nonzero readings is a misread.  Power events are
    correlation signatures: some PMU's mean |r| over its pairs dips below
    the threshold in a 1-10 s window while every sub-second window stays
    correlated (data errors decorrelate the short windows first, so this
    split separates the two families).
    """

    def __init__(self, config: EngineConfig):
        self.config = config
        p = config.pmu_count
        self.zero_run = np.zeros(p, dtype=np.int64)
        self.repeat_run = np.zeros(p, dtype=np.int64)
        self.prev_v: np.ndarray | None = None
        self.prev_phi: np.ndarray | None = None
        # frame index until which a PMU's pairs are excluded from power-event
        # stats (windows still contain post-error residue)
        self.contaminated_until = np.full(p, -1, dtype=np.int64)
        self.frame_idx = -1
        self.band_windows = [n for n in config.window_lengths if 60 <= n <= 600]
        self.short_windows = [n for n in config.window_lengths if n <= 54]
        self.linger_frames = 30
        self._active: dict = {}          # key -> (flag, last_true_frame)
        self.flags: list[EventFlag] = []
        self._iu = np.triu_indices(p, k=1)

    # ----------------------------------------------------------------- update

    def update(self, ts: datetime, v: np.ndarray, phi: np.ndarray,
               triangles: list[CorrelationTriangle]) -> list[EventFlag]:
        """Process one frame; returns flags that are new or still active."""
        self.frame_idx += 1
        touched: list[EventFlag] = []
        self._update_value_runs(v, phi)
        touched += self._data_flags(ts, v)
        by_window = {t.window_length: t for t in triangles}
        touched += self._power_flags(ts, by_window)
        self._retire()
        return touched

    def _update_value_runs(self, v: np.ndarray, phi: np.ndarray) -> None:
        zero = (v == 0.0)
        self.zero_run = np.where(zero, self.zero_run + 1, 0)
        if self.prev_v is None:
            self.repeat_run[:] = 0
        else:
            same = (v == self.prev_v) & (phi == self.prev_phi)
            self.repeat_run = np.where(same, self.repeat_run + 1, 0)
        self.prev_v = v.copy()
        self.prev_phi = phi.copy()

    def _data_flags(self, ts: datetime, v: np.ndarray) -> list[EventFlag]:
        out = []
        shortest = self.config.shortest_window
        drop = self.zero_run >= self.config.drop_frames
        # a frozen stream repeats its value for the full shortest window:
        # repeat_run counts repeats after the first occurrence
        misread = (self.repeat_run >= shortest - 1) & (v != 0.0)
        horizon = self.frame_idx + max(self.band_windows, default=0)
        for p in np.flatnonzero(drop):
            out.append(self._touch((EventKind.DATA_DROP, int(p)),
                                   EventKind.DATA_DROP, int(p), shortest, ts))
            self.contaminated_until[p] = horizon
        for p in np.flatnonzero(misread):
            if drop[p]:
                continue
            out.append(self._touch((EventKind.MISREAD, int(p)),
                                   EventKind.MISREAD, int(p), shortest, ts))
            self.contaminated_until[p] = horizon
        return out

    def _power_flags(self, ts: datetime,
                     by_window: dict[int, CorrelationTriangle]) -> list[EventFlag]:
        cfg = self.config
        p = cfg.pmu_count
        clean = self.contaminated_until < self.frame_idx
        if clean.sum() < 2:
            return []
        iu0, iu1 = self._iu
        pair_ok = clean[iu0] & clean[iu1]

        def mean_abs_per_pmu(tri: CorrelationTriangle) -> np.ndarray:
            vals = np.abs(tri.cells)
            use = pair_ok & ~np.isnan(tri.cells)
            a, b, w = iu0[use], iu1[use], vals[use]
            sums = np.bincount(a, weights=w, minlength=p) + \
                np.bincount(b, weights=w, minlength=p)
            counts = np.bincount(a, minlength=p) + np.bincount(b, minlength=p)
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

        # every short window must look correlated for every clean PMU
        shorts_ok = np.ones(p, dtype=bool)
        for n in self.short_windows:
            tri = by_window.get(n)
            if tri is None:
                return []
            stat = mean_abs_per_pmu(tri)
            shorts_ok &= np.isnan(stat) | (stat >= cfg.corr_threshold)

        trigger_window = 0
        trigger_tri = None
        frames_seen = self.frame_idx + 1
        for n in sorted(self.band_windows, reverse=True):
            tri = by_window.get(n)
            if tri is None or frames_seen < n:  # require a fully warm window
                continue
            stat = mean_abs_per_pmu(tri)
            dipped = clean & shorts_ok & ~np.isnan(stat) & (stat < cfg.corr_threshold)
            if dipped.any():
                trigger_window = n
                trigger_tri = tri
                break
        if trigger_tri is None:
            return []
        # localize: the PMU with the most sub-threshold pairs
        vals = np.abs(trigger_tri.cells)
        bad = pair_ok & ~np.isnan(trigger_tri.cells) & (vals < cfg.corr_threshold)
        counts = np.bincount(iu0[bad], minlength=p) + np.bincount(iu1[bad], minlength=p)
        counts[~clean] = -1
        pmu = int(np.argmax(counts))
        flag = self._touch((EventKind.POWER_EVENT,), EventKind.POWER_EVENT,
                           pmu, trigger_window, ts)
        return [flag]

    def _touch(self, key, kind: EventKind, pmu: int | None,
               window: int, ts: datetime) -> EventFlag:
        entry = self._active.get(key)
        if entry is None:
            flag = EventFlag(kind, pmu, window, ts, ts)
            self.flags.append(flag)
        else:
            flag = entry[0]
            flag.last_ts = ts
            flag.window_length = max(flag.window_length, window)
        self._active[key] = (flag, self.frame_idx)
        return flag

    def _retire(self) -> None:
        stale = [k for k, (_, last) in self._active.items()
                 if self.frame_idx - last > self.linger_frames]
        for k in stale:
            del self._active[k]

    def active_flags(self) -> list[EventFlag]:
        return [flag for flag, _ in self._active.values()]


class Monitor:
    """Engine plus classifier: the live-analysis pipeline for one stream."""

    def __init__(self, config: EngineConfig, signal: Signal | None = None):
        self.config = config
        self.engine = CorrelationEngine(config, signal)
        self.classifier = StreamClassifier(config)

    def push_frame(self, frame: FrameRecord) -> tuple[list[CorrelationTriangle], list[EventFlag]]:
        v = np.array([s.v for s in frame.samples])
        phi = np.array([s.phi for s in frame.samples])
        return self.push_arrays(frame.ts, v, phi)

    def push_arrays(self, ts: datetime, v: np.ndarray,
                    phi: np.ndarray) -> tuple[list[CorrelationTriangle], list[EventFlag]]:
        x = v if self.engine.signal is Signal.VOLTAGE_MAGNITUDE else phi
        triangles = self.engine.push_values(ts, x)
        flags = self.classifier.update(ts, v, phi, triangles)
        return triangles, flags

    def reset(self) -> None:
        self.engine.reset()
        self.classifier = StreamClassifier(self.config)

    @property
    def flags(self) -> list[EventFlag]:
        return self.classifier.flags
