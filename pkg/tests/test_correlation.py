import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from gridpulse.correlation import (
    CorrelationEngine,
    EventKind,
    Monitor,
    OrderingError,
    StreamClassifier,
    snapshot_ordered,
)
from gridpulse.domain import EngineConfig, Signal, ValidationError

T0 = datetime(2013, 6, 24, 21, 0, tzinfo=timezone.utc)


def small_config(pmu_count=4, windows=(50, 20, 7, 3), **kw):
    return EngineConfig(pmu_count=pmu_count, window_lengths=windows, **kw)


def push_series(engine, series):
    """series: (n, P) array; returns the triangles of the last push."""
    triangles = []
    for k, row in enumerate(series):
        triangles = engine.push_values(T0 + timedelta(milliseconds=17 * k),
                                       np.asarray(row, dtype=float))
    return triangles


def direct_r(x, y):
    # Pearson in deviation form (numerically sound for offset data)
    dx = x - x.mean()
    dy = y - y.mean()
    vx = (dx * dx).sum()
    vy = (dy * dy).sum()
    if vx <= 1e-12 or vy <= 1e-12:
        return None
    return (dx * dy).sum() / math.sqrt(vx * vy)


class TestEngine:
    def test_worked_example(self):
        # ΣXY=49, ΣX=10, ΣY=15, ΣX²=30, ΣY²=85 over the 4-window
        cfg = small_config(pmu_count=2, windows=(4, 2))
        engine = CorrelationEngine(cfg)
        tris = push_series(engine, np.column_stack([[1, 2, 3, 4], [1, 2, 4, 8]]))
        tri4 = next(t for t in tris if t.window_length == 4)
        assert tri4.cell(0, 1) == pytest.approx(0.9592, abs=5e-5)
        st = engine.pair_state(0, 1, 4)
        assert (st.sum_x, st.sum_y, st.sum_xy, st.sum_x2, st.sum_y2, st.n) == \
            (10, 15, 49, 30, 85, 4)

    def test_identical_streams_give_one(self):
        cfg = small_config(pmu_count=3, windows=(8, 4))
        rng = np.random.default_rng(0)
        col = rng.normal(0, 1, 20)
        tris = push_series(CorrelationEngine(cfg), np.column_stack([col, col, col]))
        for tri in tris:
            assert np.allclose(tri.cells, 1.0)

    def test_constant_stream_is_undefined(self):
        cfg = small_config(pmu_count=2, windows=(6, 3))
        series = np.column_stack([np.full(10, 540.0), np.random.default_rng(1).normal(size=10)])
        tris = push_series(CorrelationEngine(cfg), series)
        for tri in tris:
            assert math.isnan(tri.cell(0, 1))

    def test_warmup_starts_at_two_samples(self):
        cfg = small_config(pmu_count=2, windows=(10, 5))
        engine = CorrelationEngine(cfg)
        assert engine.push_values(T0, np.array([1.0, 2.0])) == []
        tris = engine.push_values(T0 + timedelta(milliseconds=17),
                                  np.array([2.0, 1.0]))
        assert {t.window_length for t in tris} == {10, 5}
        # two points always correlate exactly (opposite slope here)
        assert tris[0].cell(0, 1) == pytest.approx(-1.0)

    def test_ordering_enforced(self):
        engine = CorrelationEngine(small_config())
        engine.push_values(T0, np.zeros(4))
        with pytest.raises(OrderingError):
            engine.push_values(T0, np.zeros(4))

    def test_wrong_sample_count(self):
        from gridpulse.domain import FrameRecord, PhasorSample
        engine = CorrelationEngine(small_config())
        frame = FrameRecord(T0, (PhasorSample(0, 540, 0),))
        with pytest.raises(ValidationError):
            engine.push_frame(frame)

    # band-level means exercise the internal centering: raw sums would
    # lose ~6 digits to cancellation in the small-window variance terms
    @pytest.mark.parametrize("mean,tol", [(0.0, 1e-9), (540.0, 1e-9)])
    def test_incremental_matches_direct_oracle(self, mean, tol):
        cfg = small_config(pmu_count=4, windows=(50, 20, 7, 3))
        engine = CorrelationEngine(cfg)
        rng = np.random.default_rng(42)
        history = []
        for k in range(400):
            x = rng.normal(mean, 2, 4)
            history.append(x)
            tris = engine.push_values(T0 + timedelta(milliseconds=17 * k), x)
            for tri in tris:
                n = min(len(history), tri.window_length)
                window = np.array(history[-n:])
                for i in range(4):
                    for j in range(i + 1, 4):
                        want = direct_r(window[:, i], window[:, j])
                        got = tri.cell(i, j)
                        if want is None:
                            assert math.isnan(got)
                        else:
                            assert got == pytest.approx(want, abs=tol)

    def test_pair_state_matches_retained_window(self):
        cfg = small_config(pmu_count=3, windows=(30, 10, 4))
        engine = CorrelationEngine(cfg)
        rng = np.random.default_rng(9)
        for k in range(300):
            engine.push_values(T0 + timedelta(milliseconds=17 * k),
                               rng.normal(540, 1, 3))
        for n in (30, 10, 4):
            data = engine.retained(n)
            st = engine.pair_state(0, 2, n)
            assert st.n == n
            assert st.sum_x == pytest.approx(data[:, 0].sum(), rel=1e-9)
            assert st.sum_xy == pytest.approx((data[:, 0] * data[:, 2]).sum(), rel=1e-9)
            assert st.sum_y2 == pytest.approx((data[:, 2] ** 2).sum(), rel=1e-9)

    def test_shift_scale_equivariance(self):
        cfg = small_config(pmu_count=2, windows=(16, 4))
        rng = np.random.default_rng(5)
        base = rng.normal(0, 1, (40, 2))
        ref = push_series(CorrelationEngine(cfg), base)
        scaled = base.copy()
        scaled[:, 0] = 3.5 * scaled[:, 0] + 100.0
        got = push_series(CorrelationEngine(cfg), scaled)
        for a, b in zip(ref, got):
            assert b.cell(0, 1) == pytest.approx(a.cell(0, 1), abs=1e-9)
        flipped = base.copy()
        flipped[:, 0] *= -2.0
        got = push_series(CorrelationEngine(cfg), flipped)
        for a, b in zip(ref, got):
            assert b.cell(0, 1) == pytest.approx(-a.cell(0, 1), abs=1e-9)

    def test_resync_preserves_values(self):
        cfg = small_config(pmu_count=3, windows=(20, 5), resync_interval=64)
        a = CorrelationEngine(cfg)
        b = CorrelationEngine(EngineConfig(pmu_count=3, window_lengths=(20, 5),
                                           resync_interval=0))
        rng = np.random.default_rng(13)
        for k in range(500):
            x = rng.normal(540, 2, 3)
            ts = T0 + timedelta(milliseconds=17 * k)
            ta = a.push_values(ts, x)
            tb = b.push_values(ts, x)
            for u, v in zip(ta, tb):
                np.testing.assert_allclose(u.cells, v.cells, atol=1e-9)

    def test_clamped_to_unit_interval(self):
        cfg = small_config(pmu_count=2, windows=(8, 4))
        rng = np.random.default_rng(3)
        engine = CorrelationEngine(cfg)
        for k in range(100):
            tris = engine.push_values(T0 + timedelta(milliseconds=17 * k),
                                      rng.normal(0, 1, 2) + 1e9)
            for tri in tris:
                defined = tri.cells[~np.isnan(tri.cells)]
                assert np.all(np.abs(defined) <= 1.0)


class TestSnapshotOrdered:
    def _triangle(self):
        cfg = small_config(pmu_count=4, windows=(6, 3))
        rng = np.random.default_rng(1)
        return push_series(CorrelationEngine(cfg), rng.normal(0, 1, (8, 4)))[0]

    def test_identity(self):
        tri = self._triangle()
        same = snapshot_ordered(tri, (0, 1, 2, 3))
        np.testing.assert_array_equal(same.cells, tri.cells)

    def test_swap_relocates_cells(self):
        tri = self._triangle()
        swapped = snapshot_ordered(tri, (1, 0, 2, 3))
        assert swapped.cell(0, 1) == tri.cell(0, 1)  # the pair itself
        assert swapped.cell(0, 2) == tri.cell(1, 2)  # position 0 now holds pmu 1
        assert swapped.cell(1, 2) == tri.cell(0, 2)

    def test_multiset_invariant(self):
        tri = self._triangle()
        perm = (2, 0, 3, 1)
        reordered = snapshot_ordered(tri, perm)
        assert sorted(reordered.cells.tolist()) == pytest.approx(
            sorted(tri.cells.tolist()))

    def test_not_permutation_rejected(self):
        with pytest.raises(ValidationError):
            snapshot_ordered(self._triangle(), (0, 1, 1, 3))


def feed(monitor, cfg, n, v_fn, phi_fn=None):
    rng = np.random.default_rng(77)
    p = cfg.pmu_count
    for k in range(n):
        base = 540 + 0.3 * math.sin(k / 7) + rng.normal(0, 0.05)
        v = np.full(p, base) + rng.normal(0, 0.01, p)
        phi = np.full(p, 10.0) + rng.normal(0, 0.01, p)
        v, phi = v_fn(k, v), (phi_fn(k, phi) if phi_fn else phi)
        monitor.push_arrays(T0 + timedelta(milliseconds=17 * k), v, phi)


class TestClassifier:
    def test_quiet_stream_yields_no_flags(self):
        cfg = EngineConfig(pmu_count=4)
        mon = Monitor(cfg)
        feed(mon, cfg, 1500, lambda k, v: v)
        assert mon.flags == []

    def test_data_drop_flagged_within_three_frames(self):
        cfg = EngineConfig(pmu_count=4)
        mon = Monitor(cfg)

        def drop(k, v):
            if 600 <= k < 700:
                v[2] = 0.0
            return v

        feed(mon, cfg, 900, drop)
        drops = [f for f in mon.flags if f.kind is EventKind.DATA_DROP]
        assert len(drops) == 1
        flag = drops[0]
        assert flag.pmu_id == 2
        onset = T0 + timedelta(milliseconds=17 * 600)
        assert (flag.start_ts - onset).total_seconds() <= 3 / 60 + 1e-6
        # coalesced: last_ts tracks the end of the run
        assert flag.last_ts >= T0 + timedelta(milliseconds=17 * 699)

    def test_misread_flagged_after_shortest_window(self):
        cfg = EngineConfig(pmu_count=4)
        mon = Monitor(cfg)
        frozen = {}

        def freeze(k, v):
            if 600 <= k < 720:
                v[1] = frozen.setdefault("v", v[1])
            return v

        def freeze_phi(k, phi):
            if 600 <= k < 720:
                phi[1] = frozen.setdefault("phi", phi[1])
            return phi

        feed(mon, cfg, 900, freeze, freeze_phi)
        mis = [f for f in mon.flags if f.kind is EventKind.MISREAD]
        assert len(mis) == 1 and mis[0].pmu_id == 1
        onset = T0 + timedelta(milliseconds=17 * 600)
        latency = (mis[0].start_ts - onset).total_seconds()
        assert latency <= cfg.shortest_window / 60 + 1e-6

    def test_zero_drop_does_not_double_flag_misread(self):
        cfg = EngineConfig(pmu_count=4)
        mon = Monitor(cfg)

        def drop(k, v):
            if 600 <= k < 700:
                v[0] = 0.0
            return v

        def drop_phi(k, phi):
            if 600 <= k < 700:
                phi[0] = 0.0
            return phi

        feed(mon, cfg, 800, drop, drop_phi)
        assert not any(f.kind is EventKind.MISREAD for f in mon.flags)

    def test_determinism(self):
        cfg = EngineConfig(pmu_count=4)

        def noisy(k, v):
            if 500 <= k < 560:
                v[3] = 0.0
            return v

        runs = []
        for _ in range(2):
            mon = Monitor(cfg)
            feed(mon, cfg, 700, noisy)
            runs.append([(f.kind, f.pmu_id, f.start_ts, f.last_ts, f.window_length)
                         for f in mon.flags])
        assert runs[0] == runs[1]
