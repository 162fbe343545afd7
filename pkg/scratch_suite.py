"""Scratch: full labeled-injection suite scoring (precursor to acceptance)."""
import sys
import time
from datetime import datetime, timedelta, timezone

import numpy as np

from gridpulse.correlation import EventKind, Monitor
from gridpulse.domain import EngineConfig
from gridpulse.ingest import InjectionKind, InjectionSpec, generate_arrays

KIND_MAP = {
    InjectionKind.DATA_DROP: EventKind.DATA_DROP,
    InjectionKind.MISREAD: EventKind.MISREAD,
    InjectionKind.LIGHTNING: EventKind.POWER_EVENT,
}


def build_suite(cfg, start, seed):
    rng = np.random.default_rng(seed)
    kinds = [InjectionKind.DATA_DROP] * 20 + [InjectionKind.MISREAD] * 20 \
        + [InjectionKind.LIGHTNING] * 10
    rng.shuffle(kinds)
    specs = []
    t = 30.0  # warmup
    for kind in kinds:
        pmu = int(rng.integers(0, cfg.pmu_count))
        if kind is InjectionKind.LIGHTNING:
            dur = float(rng.uniform(8, 12))
            specs.append(InjectionSpec(kind, pmu, start + timedelta(seconds=t), dur))
            t += 30.0 + dur + 10.0
        else:
            dur = float(rng.uniform(0.5, 3.0))
            specs.append(InjectionSpec(kind, pmu, start + timedelta(seconds=t), dur))
            t += 30.0
    n_frames = int((t + 20) * cfg.sample_hz)
    return specs, n_frames


def run(seed):
    cfg = EngineConfig()
    start = datetime(2013, 6, 24, 12, 0, tzinfo=timezone.utc)
    specs, n_frames = build_suite(cfg, start, seed)
    arrays = generate_arrays(cfg, start, n_frames, specs, seed=seed + 1000)
    mon = Monitor(cfg)
    t0 = time.time()
    for i in range(arrays.n_frames):
        ts = datetime.fromtimestamp(arrays.ts_ms[i] / 1000, tz=timezone.utc)
        mon.push_arrays(ts, arrays.v[i], arrays.phi[i])
    elapsed = time.time() - t0
    flags = mon.flags
    labels = arrays.labels

    print(f"seed={seed}: {n_frames} frames in {elapsed:.1f}s, {len(flags)} flags")
    ok = True
    for ikind, ekind in KIND_MAP.items():
        kind_labels = [l for l in labels if l.kind is ikind]
        kind_flags = [f for f in flags if f.kind is ekind]
        def matches(f, l):
            if ekind is not EventKind.POWER_EVENT and f.pmu_id != l.pmu_id:
                return False
            return f.start_ts < l.end_ts + timedelta(seconds=12) and \
                l.start_ts <= f.last_ts
        matched_flags = sum(1 for f in kind_flags if any(matches(f, l) for l in kind_labels))
        matched_labels = sum(1 for l in kind_labels if any(matches(f, l) for f in kind_flags))
        prec = matched_flags / len(kind_flags) if kind_flags else 1.0
        rec = matched_labels / len(kind_labels) if kind_labels else 1.0
        print(f"  {ikind.value:10s}: labels={len(kind_labels)} flags={len(kind_flags)} "
              f"precision={prec:.3f} recall={rec:.3f}")
        ok &= prec >= 0.95 and rec >= 0.95
        if ekind in (EventKind.DATA_DROP, EventKind.MISREAD):
            lat = [ (f.start_ts - l.start_ts).total_seconds()
                    for l in kind_labels
                    for f in kind_flags if matches(f, l) and f.pmu_id == l.pmu_id ]
            if lat:
                print(f"    max onset latency: {max(lat):.3f}s")
        else:
            wl = [f.window_length for f in kind_flags]
            print(f"    windows reported: {sorted(set(wl))}")
    return ok


if __name__ == "__main__":
    seeds = [int(s) for s in sys.argv[1:]] or [1, 2, 3]
    results = [run(s) for s in seeds]
    print("ALL OK" if all(results) else "FAILURES PRESENT")
