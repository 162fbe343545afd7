import io
import math
import time
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from gridpulse.correlation import CorrelationEngine
from gridpulse.domain import EngineConfig, ValidationError
from gridpulse.ingest import (
    GroundTruthLabel,
    InjectionKind,
    InjectionSpec,
    ParseError,
    StreamOrderError,
    generate,
    generate_arrays,
    pace,
    parse_stream,
    render_stream,
)

T0 = datetime(2013, 6, 24, 21, 5, tzinfo=timezone.utc)
CFG4 = EngineConfig(pmu_count=4)


class TestCsv:
    def test_roundtrip(self):
        arrays = generate_arrays(CFG4, T0, 50, seed=1)
        frames = list(arrays.frames())
        buf = io.StringIO()
        assert render_stream(frames, buf) == 50
        parsed = list(parse_stream(io.StringIO(buf.getvalue())))
        assert parsed == frames

    def test_single_row(self):
        text = "ts,v0,phi0\n2013-06-24T21:05:00.000Z,540.25,-12.5\n"
        frames = list(parse_stream(io.StringIO(text)))
        assert len(frames) == 1
        assert frames[0].samples[0].v == 540.25
        assert frames[0].samples[0].phi == -12.5

    def test_blank_lines_skipped(self):
        text = "ts,v0,phi0\n\n2013-06-24T21:05:00.000Z,540.0,0.0\n\n"
        assert len(list(parse_stream(io.StringIO(text)))) == 1

    def test_wrong_arity_names_row(self):
        text = ("ts,v0,phi0,v1,phi1\n"
                "2013-06-24T21:05:00.000Z,540.0,0.0,539.0\n")
        with pytest.raises(ParseError, match="line 2"):
            list(parse_stream(io.StringIO(text)))

    def test_bad_number_names_column(self):
        text = "ts,v0,phi0\n2013-06-24T21:05:00.000Z,oops,0.0\n"
        with pytest.raises(ParseError, match="line 2"):
            list(parse_stream(io.StringIO(text)))

    def test_non_monotone_rejected(self):
        text = ("ts,v0,phi0\n"
                "2013-06-24T21:05:01.000Z,540.0,0.0\n"
                "2013-06-24T21:05:00.000Z,540.0,0.0\n")
        with pytest.raises(StreamOrderError):
            list(parse_stream(io.StringIO(text)))

    def test_byte_stream_accepted(self):
        text = b"ts,v0,phi0\n2013-06-24T21:05:00.000Z,540.0,0.0\n"
        assert len(list(parse_stream(io.BytesIO(text)))) == 1

    def test_one_minute_at_60hz(self):
        arrays = generate_arrays(CFG4, T0, 3600, seed=2)
        buf = io.StringIO()
        render_stream(arrays.frames(), buf)
        assert len(list(parse_stream(io.StringIO(buf.getvalue())))) == 3600


class TestGenerator:
    def test_deterministic(self):
        a = generate_arrays(CFG4, T0, 300, seed=7)
        b = generate_arrays(CFG4, T0, 300, seed=7)
        assert np.array_equal(a.v, b.v) and np.array_equal(a.phi, b.phi)
        assert np.array_equal(a.ts_ms, b.ts_ms)

    def test_seed_changes_stream(self):
        a = generate_arrays(CFG4, T0, 300, seed=7)
        b = generate_arrays(CFG4, T0, 300, seed=8)
        assert not np.array_equal(a.v, b.v)

    def test_quiet_voltage_stays_in_band(self):
        arrays = generate_arrays(EngineConfig(), T0, 3600, seed=3)
        assert arrays.v.min() >= 535.0
        assert arrays.v.max() < 545.0

    def test_quiet_phase_in_range(self):
        arrays = generate_arrays(EngineConfig(), T0, 3600, seed=3)
        assert arrays.phi.min() >= -180.0 and arrays.phi.max() < 180.0

    def test_quiet_stream_correlates_in_60_window(self):
        cfg = EngineConfig()
        arrays = generate_arrays(cfg, T0, 1800, seed=4)
        engine = CorrelationEngine(cfg)
        worst = 1.0
        for i in range(arrays.n_frames):
            ts = datetime.fromtimestamp(arrays.ts_ms[i] / 1000, tz=timezone.utc)
            for tri in engine.push_values(ts, arrays.v[i]):
                if tri.window_length == 60 and i >= 60:
                    worst = min(worst, float(np.abs(tri.cells).min()))
        assert worst >= 0.9

    def test_timestamps_at_60hz(self):
        arrays = generate_arrays(CFG4, T0, 120, seed=0)
        gaps = np.diff(arrays.ts_ms)
        assert set(gaps.tolist()) <= {16, 17}
        assert arrays.ts_ms[60] - arrays.ts_ms[0] == 1000

    def test_data_drop_override(self):
        spec = InjectionSpec(InjectionKind.DATA_DROP, 3,
                             T0 + timedelta(seconds=2), 1.0)
        arrays = generate_arrays(CFG4, T0, 300, [spec], seed=5)
        zeros = np.flatnonzero(arrays.v[:, 3] == 0.0)
        assert len(zeros) == 60
        assert zeros.tolist() == list(range(120, 180))
        assert np.all(arrays.phi[120:180, 3] == 0.0)
        label = arrays.labels[0]
        assert label.kind is InjectionKind.DATA_DROP and label.pmu_id == 3
        assert label.start_ts == T0 + timedelta(seconds=2)
        assert label.end_ts == T0 + timedelta(seconds=3)

    def test_misread_freezes_previous_value(self):
        spec = InjectionSpec(InjectionKind.MISREAD, 1,
                             T0 + timedelta(seconds=1), 0.5)
        arrays = generate_arrays(CFG4, T0, 200, [spec], seed=6)
        frozen_v = arrays.v[59, 1]
        assert np.all(arrays.v[60:90, 1] == frozen_v)
        assert np.all(arrays.phi[60:90, 1] == arrays.phi[59, 1])
        assert arrays.v[90, 1] != frozen_v

    def test_lightning_felt_at_all_pmus_lagged(self):
        cfg = EngineConfig()
        spec = InjectionSpec(InjectionKind.LIGHTNING, 0,
                             T0 + timedelta(seconds=5), 5.0, magnitude=(25.0, 8.0))
        quiet = generate_arrays(cfg, T0, 1200, seed=9)
        lit = generate_arrays(cfg, T0, 1200, [spec], seed=9)
        dv = lit.v - quiet.v
        onset = np.array([np.argmax(np.abs(dv[:, p]) > 1e-9) for p in range(20)])
        assert onset[0] == 300
        assert np.all(np.diff(onset) >= 0)  # farther PMUs react later
        assert onset[19] > onset[0]
        peak = np.abs(dv).max(axis=0)
        assert peak[0] > peak[19] > 0  # and attenuated

    def test_labels_match_intervals_exactly(self):
        specs = [InjectionSpec(InjectionKind.DATA_DROP, 0,
                               T0 + timedelta(seconds=1), 0.5),
                 InjectionSpec(InjectionKind.MISREAD, 2,
                               T0 + timedelta(seconds=3), 0.5)]
        arrays = generate_arrays(CFG4, T0, 400, specs, seed=10)
        for label, spec in zip(arrays.labels, specs):
            f0 = int((label.start_ts - T0).total_seconds() * 60)
            f1 = f0 + 30
            if label.kind is InjectionKind.DATA_DROP:
                assert np.all(arrays.v[f0:f1, 0] == 0)
                assert arrays.v[f0 - 1, 0] != 0 and arrays.v[f1, 0] != 0

    def test_overlapping_same_pmu_rejected(self):
        specs = [InjectionSpec(InjectionKind.DATA_DROP, 1,
                               T0 + timedelta(seconds=1), 2.0),
                 InjectionSpec(InjectionKind.MISREAD, 1,
                               T0 + timedelta(seconds=2), 2.0)]
        with pytest.raises(ValidationError, match="overlap"):
            generate_arrays(CFG4, T0, 600, specs, seed=0)

    def test_generate_yields_frames_and_labels(self):
        frames, labels = generate(CFG4, T0, 10, seed=1)
        frames = list(frames)
        assert len(frames) == 10 and labels == []
        assert frames[0].ts == T0

    def test_injection_outside_stream_rejected(self):
        spec = InjectionSpec(InjectionKind.DATA_DROP, 0,
                             T0 + timedelta(seconds=100), 1.0)
        with pytest.raises(ValidationError, match="outside"):
            generate_arrays(CFG4, T0, 60, [spec], seed=0)


class TestPace:
    def test_speed_one_takes_about_one_second(self):
        frames = list(generate_arrays(CFG4, T0, 60, seed=0).frames())
        t0 = time.monotonic()
        out = list(pace(frames, speed=1.0))
        elapsed = time.monotonic() - t0
        assert out == frames
        assert 0.885 <= elapsed <= 1.085  # 59 gaps of 1/60 s, +/-10%

    def test_infinite_speed_does_not_sleep(self):
        frames = list(generate_arrays(CFG4, T0, 60, seed=0).frames())
        t0 = time.monotonic()
        assert len(list(pace(frames, speed=math.inf))) == 60
        assert time.monotonic() - t0 < 0.2

    def test_double_speed_halves_time(self):
        frames = list(generate_arrays(CFG4, T0, 120, seed=0).frames())
        t0 = time.monotonic()
        list(pace(frames, speed=2.0))
        elapsed = time.monotonic() - t0
        assert 0.89 <= elapsed <= 1.1

    def test_nonpositive_speed_rejected(self):
        with pytest.raises(ValidationError):
            list(pace([], speed=0.0))
