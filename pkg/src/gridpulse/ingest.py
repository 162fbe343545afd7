"""Stream sources: PDC-style CSV parsing, synthetic generation, pacing.

The synthetic generator stands in for a live PDC feed.  Quiet operation
keeps every PMU's voltage inside the nominal [535, 545) band with a noise
mix that correlates across PMUs at every window length; injected events
override slices of the stream and come back as ground-truth labels so
detector output can be scored.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Iterable, Iterator, TextIO

import numpy as np

from .domain import EngineConfig, FrameRecord, PhasorSample, ValidationError


class ParseError(ValueError):
    """CSV input malformed; carries line (and column) context."""

    def __init__(self, message: str, line: int, column: int | None = None):
        at = f"line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(f"{message} ({at})")
        self.line = line
        self.column = column


class StreamOrderError(ValueError):
    """Rows must carry strictly increasing timestamps."""


class InjectionKind(Enum):
    DATA_DROP = "data_drop"
    MISREAD = "misread"
    LIGHTNING = "lightning"


@dataclass(frozen=True)
class InjectionSpec:
    """One event to fold into a generated stream.

    ``magnitude`` applies to lightning only: (peak voltage deviation in kV,
    peak angle kick in degrees), both decaying over the duration.  Other
    PMUs see the transient attenuated by 1/(1+distance) and lagged by
    ceil(distance/lag_step) frames.
    """

    kind: InjectionKind
    pmu_id: int
    start_ts: datetime
    duration_s: float
    magnitude: tuple[float, float] = (25.0, 8.0)

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValidationError("injection duration must be > 0")


@dataclass(frozen=True)
class GroundTruthLabel:
    kind: InjectionKind
    pmu_id: int
    start_ts: datetime
    end_ts: datetime  # exclusive


@dataclass(frozen=True)
class GeneratorParams:
    """Quiet-stream and transient shape parameters.

    The noise mix: two slow common sinusoids give the band its wander, a
    shared white component keeps PMU pairs correlated even inside the
    shortest windows, and a small independent term models per-site sensor
    noise.
    """

    v_nominal: float = 540.0
    v_site_spread: float = 0.8           # static per-PMU offset, uniform +/-
    v_slow_amp: tuple[float, float] = (1.6, 0.7)
    v_slow_period_s: tuple[float, float] = (75.0, 13.0)
    v_common_sigma: float = 0.22
    v_noise_sigma: float = 0.02
    phi_site_step_deg: float = -1.7      # per-PMU static angle ladder
    phi_drift_amp_deg: float = 16.0
    phi_drift_period_s: float = 90.0
    phi_common_sigma: float = 0.02
    phi_noise_sigma: float = 0.004
    # lightning transient: attenuated, lagged, decaying ring
    lightning_tau_s: float = 2.0
    lightning_ring_period_s: float = 1.5
    lightning_ring_detune: float = 0.25  # per-PMU relative frequency jitter
    lightning_dip_frac: float = 0.3      # common envelope share
    lightning_ring_frac: float = 0.7     # incoherent ring share
    lag_step: float = 0.25               # distance units per frame of lag


DEFAULT_PARAMS = GeneratorParams()


def _ms(ts: datetime) -> int:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return int(round(ts.timestamp() * 1000))


def frame_times_ms(start_ts: datetime, n_frames: int, sample_hz: int) -> np.ndarray:
    """Millisecond timestamps of n consecutive frames at the sample rate."""
    base = _ms(start_ts)
    k = np.arange(n_frames, dtype=np.int64)
    return base + (k * 1000) // sample_hz


@dataclass
class StreamArrays:
    """A generated stream in columnar form."""

    ts_ms: np.ndarray   # (n,)
    v: np.ndarray       # (n, P)
    phi: np.ndarray     # (n, P)
    labels: list[GroundTruthLabel]

    @property
    def n_frames(self) -> int:
        return len(self.ts_ms)

    def frames(self) -> Iterator[FrameRecord]:
        for i in range(self.n_frames):
            ts = datetime.fromtimestamp(self.ts_ms[i] / 1000, tz=timezone.utc)
            samples = tuple(
                PhasorSample(p, float(self.v[i, p]), float(self.phi[i, p]))
                for p in range(self.v.shape[1]))
            yield FrameRecord(ts, samples)


def generate_arrays(config: EngineConfig, start_ts: datetime, n_frames: int,
                    injections: list[InjectionSpec] | None = None,
                    seed: int = 0,
                    params: GeneratorParams = DEFAULT_PARAMS) -> StreamArrays:
    """Deterministic synthetic PDC stream with labeled injections."""
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    injections = list(injections or [])
    _check_overlaps(injections)
    p = config.pmu_count
    hz = config.sample_hz
    rng = np.random.default_rng(seed)
    ts_ms = frame_times_ms(start_ts, n_frames, hz)
    t = np.arange(n_frames, dtype=np.float64)

    site_v = rng.uniform(-params.v_site_spread, params.v_site_spread, p)
    phases = rng.uniform(0, 2 * np.pi, 3)
    a1, a2 = params.v_slow_amp
    t1, t2 = (np.asarray(params.v_slow_period_s) * hz)
    common_v = (a1 * np.sin(2 * np.pi * t / t1 + phases[0])
                + a2 * np.sin(2 * np.pi * t / t2 + phases[1])
                + params.v_common_sigma * rng.standard_normal(n_frames))
    v = (params.v_nominal + site_v[None, :] + common_v[:, None]
         + params.v_noise_sigma * rng.standard_normal((n_frames, p)))

    site_phi = params.phi_site_step_deg * np.arange(p)
    drift = params.phi_drift_amp_deg * np.sin(
        2 * np.pi * t / (params.phi_drift_period_s * hz) + phases[2])
    common_phi = drift + params.phi_common_sigma * rng.standard_normal(n_frames)
    phi = (site_phi[None, :] + common_phi[:, None]
           + params.phi_noise_sigma * rng.standard_normal((n_frames, p)))

    labels = []
    start_ms = ts_ms[0]
    distances = np.array([config.electrical_order.distance_of(q) for q in range(p)])
    for spec in injections:
        f0 = _frame_of(spec.start_ts, start_ms, hz, n_frames)
        dur = max(1, int(round(spec.duration_s * hz)))
        f1 = min(f0 + dur, n_frames)
        if spec.kind is InjectionKind.LIGHTNING:
            _apply_lightning(v, phi, f0, dur, spec, distances, hz, params, rng)
        elif spec.kind is InjectionKind.MISREAD:
            if f0 == 0:
                raise ValidationError("misread cannot start at the stream head")
            v[f0:f1, spec.pmu_id] = v[f0 - 1, spec.pmu_id]
            phi[f0:f1, spec.pmu_id] = phi[f0 - 1, spec.pmu_id]
        else:
            v[f0:f1, spec.pmu_id] = 0.0
            phi[f0:f1, spec.pmu_id] = 0.0
        end = datetime.fromtimestamp(
            (start_ms + (f1 * 1000) // hz) / 1000, tz=timezone.utc)
        begin = datetime.fromtimestamp(
            (start_ms + (f0 * 1000) // hz) / 1000, tz=timezone.utc)
        labels.append(GroundTruthLabel(spec.kind, spec.pmu_id, begin, end))

    np.clip(v, 0.0, None, out=v)
    phi = (phi + 180.0) % 360.0 - 180.0
    return StreamArrays(ts_ms, v, phi, labels)


def _frame_of(ts: datetime, start_ms: int, hz: int, n_frames: int) -> int:
    offset_ms = _ms(ts) - start_ms
    f = int(round(offset_ms * hz / 1000))
    if not (0 <= f < n_frames):
        raise ValidationError(f"injection start {ts.isoformat()} outside the stream")
    return f


def _apply_lightning(v, phi, f0, dur, spec, distances, hz, params, rng):
    """Add the propagated transient of one strike to all PMUs.

    The transient is a decaying envelope times (common dip + ringing).
    The ring phase and frequency vary per PMU, so windows long enough to
    span several ring periods decorrelate while sub-second windows still
    see locally smooth, correlated motion.
    """
    n_frames, p = v.shape
    dv_peak, dphi_peak = spec.magnitude
    tau = params.lightning_tau_s * hz
    omega0 = 2 * np.pi / (params.lightning_ring_period_s * hz)
    src_d = distances[spec.pmu_id]
    rel = np.abs(distances - src_d)
    atten = 1.0 / (1.0 + rel)
    lags = np.ceil(rel / params.lag_step).astype(np.int64)
    detune = 1.0 + params.lightning_ring_detune * rng.uniform(-1, 1, p)
    theta_v = rng.uniform(0, 2 * np.pi, p)
    theta_phi = rng.uniform(0, 2 * np.pi, p)
    for q in range(p):
        a = f0 + int(lags[q])
        b = min(a + dur, n_frames)
        if a >= b:
            continue
        s = np.arange(b - a, dtype=np.float64)
        envelope = np.exp(-s / tau)
        ring = (params.lightning_dip_frac
                + params.lightning_ring_frac * np.cos(omega0 * detune[q] * s + theta_v[q]))
        v[a:b, q] -= dv_peak * atten[q] * envelope * ring
        phi[a:b, q] += dphi_peak * atten[q] * envelope * np.cos(
            omega0 * detune[q] * s + theta_phi[q])


def _check_overlaps(injections: list[InjectionSpec]) -> None:
    spans: dict[int, list[tuple[float, float]]] = {}
    for spec in injections:
        a = _ms(spec.start_ts) / 1000
        b = a + spec.duration_s
        for (c, d) in spans.get(spec.pmu_id, []):
            if a < d and c < b:
                raise ValidationError(
                    f"overlapping injections on pmu {spec.pmu_id}")
        spans.setdefault(spec.pmu_id, []).append((a, b))


def generate(config: EngineConfig, start_ts: datetime, n_frames: int,
             injections: list[InjectionSpec] | None = None, seed: int = 0,
             params: GeneratorParams = DEFAULT_PARAMS,
             ) -> tuple[Iterator[FrameRecord], list[GroundTruthLabel]]:
    """Frame-record view of generate_arrays."""
    arrays = generate_arrays(config, start_ts, n_frames, injections, seed, params)
    return arrays.frames(), arrays.labels


# ------------------------------------------------------------------ CSV I/O

CSV_TS_FORMAT = "%Y-%m-%dT%H:%M:%S.%f"


def csv_header(pmu_count: int) -> str:
    cols = ["ts"]
    for p in range(pmu_count):
        cols += [f"v{p}", f"phi{p}"]
    return ",".join(cols)


def _format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(CSV_TS_FORMAT)[:-3] + "Z"


def render_stream(frames: Iterable[FrameRecord], out: TextIO,
                  pmu_count: int | None = None) -> int:
    """Write frames as PDC CSV; returns the row count."""
    rows = 0
    header_written = False
    for frame in frames:
        if not header_written:
            out.write(csv_header(pmu_count or len(frame.samples)) + "\n")
            header_written = True
        parts = [_format_ts(frame.ts)]
        for s in frame.samples:
            parts.append(repr(s.v))
            parts.append(repr(s.phi))
        out.write(",".join(parts) + "\n")
        rows += 1
    if not header_written and pmu_count is not None:
        out.write(csv_header(pmu_count) + "\n")
    return rows


def parse_stream(source) -> Iterator[FrameRecord]:
    """Parse a PDC CSV byte or text stream into frames, in timestamp order.

    The first non-blank line must be the header; blank lines are skipped.
    """
    if hasattr(source, "read"):
        lines = source
    else:
        lines = iter(source)
    last_ts = None
    expected_fields = None
    header_seen = False
    for lineno, raw in enumerate(lines, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.strip()
        if not line:
            continue
        if not header_seen:
            header_seen = True
            fields = line.split(",")
            if fields[0] != "ts" or (len(fields) - 1) % 2 != 0:
                raise ParseError(f"unrecognized header {line!r}", lineno)
            expected_fields = len(fields)
            continue
        fields = line.split(",")
        if len(fields) != expected_fields:
            raise ParseError(
                f"row has {len(fields)} fields, expected {expected_fields}",
                lineno)
        try:
            ts = _parse_ts(fields[0])
        except ValueError:
            raise ParseError(f"bad timestamp {fields[0]!r}", lineno, 1) from None
        if last_ts is not None and ts <= last_ts:
            raise StreamOrderError(
                f"timestamp {fields[0]} at line {lineno} not increasing")
        last_ts = ts
        samples = []
        for p in range((expected_fields - 1) // 2):
            col = 1 + 2 * p
            try:
                v = float(fields[col])
                phi = float(fields[col + 1])
            except ValueError:
                raise ParseError(
                    f"bad number {fields[col]!r}/{fields[col + 1]!r}",
                    lineno, col + 1) from None
            try:
                samples.append(PhasorSample(p, v, phi))
            except ValidationError as exc:
                raise ParseError(str(exc), lineno, col + 1) from None
        yield FrameRecord(ts, tuple(samples))


def _parse_ts(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1]
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


def write_csv(path, arrays: StreamArrays) -> int:
    """Render a generated stream to a CSV file."""
    with open(path, "w") as f:
        return render_stream(arrays.frames(), f, arrays.v.shape[1])


# -------------------------------------------------------------------- pacing

def pace(frames: Iterable[FrameRecord], speed: float,
         sample_hz: int = 60) -> Iterator[FrameRecord]:
    """Emit frames at the stream's nominal rate scaled by ``speed``.

    ``speed`` of infinity replays as fast as possible.  Scheduling is
    absolute (against the wall clock at start) so delays do not drift.
    """
    if not (speed > 0):
        raise ValidationError("speed must be > 0")
    if math.isinf(speed):
        yield from frames
        return
    interval = (1.0 / sample_hz) / speed
    start = time.monotonic()
    for k, frame in enumerate(frames):
        target = start + k * interval
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        yield frame
