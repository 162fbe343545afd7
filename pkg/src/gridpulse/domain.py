"""Core value types shared by the stream engine and the archive."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum

#: Calendar span covered by the year bins of the default index layout.
YEAR_SPAN = (2010, 2020)

#: Sliding-window lengths (in samples) maintained by the correlation engine,
#: longest first.  The three long windows target power-system events, the
#: six short ones target data errors.
DEFAULT_WINDOW_LENGTHS = (1200, 600, 60, 54, 48, 30, 18, 12, 6)

DEFAULT_PMU_COUNT = 20
DEFAULT_SAMPLE_HZ = 60
DEFAULT_SEGMENT_ROWS = 72_000  # 20 minutes at 60 Hz


class RangeError(ValueError):
    """A value fell outside a documented domain."""


class ValidationError(ValueError):
    """A value failed a structural invariant."""


def normalize_phase(phi: float) -> float:
    """Reduce an angle in degrees to the canonical [-180, 180) interval.

    The upper boundary folds down: 180 maps to -180 so every angle has a
    single representation (and a single index bin).
    """
    if not math.isfinite(phi):
        raise ValidationError(f"phase angle must be finite, got {phi!r}")
    phi = math.fmod(phi + 180.0, 360.0)
    if phi < 0:
        phi += 360.0
    return phi - 180.0


def phase_delta(phi_now: float, phi_prev: float) -> float:
    """Absolute displacement between two consecutive phase angles, degrees.

    This is the raw |a - b| difference, not wrap-aware: a swing across the
    +/-180 seam reads as a large displacement.
    """
    return abs(phi_now - phi_prev)


@dataclass(frozen=True)
class PhasorSample:
    """One positive-sequence reading from a single PMU."""

    pmu_id: int
    v: float        # voltage magnitude, kV-scale, >= 0
    phi: float      # phase angle, degrees in [-180, 180)

    def __post_init__(self):
        if self.pmu_id < 0:
            raise ValidationError(f"pmu_id must be >= 0, got {self.pmu_id}")
        if not (self.v >= 0):
            raise ValidationError(f"voltage magnitude must be >= 0, got {self.v}")
        phi = self.phi
        if phi == 180.0:
            phi = -180.0
            object.__setattr__(self, "phi", phi)
        if not (-180.0 <= phi < 180.0):
            raise ValidationError(f"phase angle must lie in [-180, 180), got {self.phi}")


@dataclass(frozen=True)
class FrameRecord:
    """One time-aligned row of readings across all PMUs."""

    ts: datetime
    samples: tuple[PhasorSample, ...]

    def __post_init__(self):
        if self.ts.tzinfo is None:
            object.__setattr__(self, "ts", self.ts.replace(tzinfo=timezone.utc))
        if not isinstance(self.samples, tuple):
            object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def ts_ms(self) -> int:
        return int(round(self.ts.timestamp() * 1000))


@dataclass(frozen=True)
class TimeParts:
    """A timestamp decomposed into the fields the date-time bins use."""

    year: int
    month: int
    day: int
    hour: int
    minute: int
    second: int
    decisecond: int  # floor(milliseconds / 100), 0..9

    def as_tuple(self) -> tuple[int, int, int, int, int, int, int]:
        return (self.year, self.month, self.day, self.hour,
                self.minute, self.second, self.decisecond)


def decompose_time(ts: datetime) -> TimeParts:
    """Split a timestamp into the per-field values used for date-time binning.

    Raises RangeError for years outside the indexed span.
    """
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    else:
        ts = ts.astimezone(timezone.utc)
    lo, hi = YEAR_SPAN
    if not (lo <= ts.year <= hi):
        raise RangeError(
            f"timestamp year {ts.year} outside indexed span {lo}-{hi}")
    return TimeParts(ts.year, ts.month, ts.day, ts.hour, ts.minute, ts.second,
                     ts.microsecond // 100_000)


def reconstruct_time(parts: TimeParts) -> datetime:
    """Inverse of decompose_time, at 100 ms resolution."""
    return datetime(parts.year, parts.month, parts.day, parts.hour,
                    parts.minute, parts.second, parts.decisecond * 100_000,
                    tzinfo=timezone.utc)


class Signal(Enum):
    """Which phasor attribute feeds the correlation engine."""

    VOLTAGE_MAGNITUDE = "v"
    PHASE_ANGLE = "phi"


@dataclass(frozen=True)
class ElectricalOrder:
    """PMU ids sorted by ascending electrical distance from the reference.

    ``ids`` is a permutation of 0..P-1 with the reference PMU (id 0) first;
    ``distances`` is parallel to ``ids``.
    """

    ids: tuple[int, ...]
    distances: tuple[float, ...]

    def __post_init__(self):
        if sorted(self.ids) != list(range(len(self.ids))):
            raise ValidationError("electrical order must be a permutation of PMU ids")
        if len(self.distances) != len(self.ids):
            raise ValidationError("distances must parallel ids")

    @classmethod
    def default(cls, pmu_count: int, spacing: float = 0.35) -> "ElectricalOrder":
        ids = tuple(range(pmu_count))
        return cls(ids, tuple(round(i * spacing, 6) for i in ids))

    def distance_of(self, pmu_id: int) -> float:
        return self.distances[self.ids.index(pmu_id)]


@dataclass(frozen=True)
class EngineConfig:
    """Tunables shared by the stream engine, the archive and the service."""

    pmu_count: int = DEFAULT_PMU_COUNT
    sample_hz: int = DEFAULT_SAMPLE_HZ
    window_lengths: tuple[int, ...] = DEFAULT_WINDOW_LENGTHS
    corr_threshold: float = 0.5
    signal: Signal = Signal.VOLTAGE_MAGNITUDE
    electrical_order: ElectricalOrder | None = None
    segment_rows: int = DEFAULT_SEGMENT_ROWS
    # consecutive exact-zero samples before a data drop is flagged
    drop_frames: int = 3
    # pushes between full recomputations of the running sums (drift control)
    resync_interval: int = 65_536

    def __post_init__(self):
        if self.pmu_count < 2:
            raise ValidationError("need at least 2 PMUs to correlate")
        wl = tuple(self.window_lengths)
        object.__setattr__(self, "window_lengths", wl)
        if any(n < 2 for n in wl):
            raise ValidationError("window lengths must all be >= 2")
        if any(a <= b for a, b in zip(wl, wl[1:])):
            raise ValidationError("window lengths must be strictly decreasing")
        if not (0.0 < self.corr_threshold < 1.0):
            raise ValidationError("corr_threshold must lie in (0, 1)")
        if self.electrical_order is None:
            object.__setattr__(self, "electrical_order",
                               ElectricalOrder.default(self.pmu_count))
        elif len(self.electrical_order.ids) != self.pmu_count:
            raise ValidationError("electrical order size must match pmu_count")
        if self.segment_rows < 1:
            raise ValidationError("segment_rows must be >= 1")

    @property
    def frame_interval_s(self) -> float:
        return 1.0 / self.sample_hz

    @property
    def shortest_window(self) -> int:
        return self.window_lengths[-1]
