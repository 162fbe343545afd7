"""Scratch: check quiet-stream correlation levels and event detectability."""
import time
from datetime import datetime, timedelta, timezone

import numpy as np

from gridpulse.correlation import EventKind, Monitor
from gridpulse.domain import EngineConfig
from gridpulse.ingest import InjectionKind, InjectionSpec, generate_arrays

cfg = EngineConfig()
start = datetime(2013, 6, 24, 21, 0, tzinfo=timezone.utc)

# --- quiet stream: per-window mean |r| ranges
arrays = generate_arrays(cfg, start, 7200, seed=3)
mon = Monitor(cfg)
mins = {n: 1.0 for n in cfg.window_lengths}
t0 = time.time()
for i in range(arrays.n_frames):
    ts = datetime.fromtimestamp(arrays.ts_ms[i] / 1000, tz=timezone.utc)
    tris, flags = mon.push_arrays(ts, arrays.v[i], arrays.phi[i])
    if i > 1300:
        for tri in tris:
            m = np.nanmean(np.abs(tri.cells))
            mins[tri.window_length] = min(mins[tri.window_length], m)
print(f"quiet push rate: {arrays.n_frames/(time.time()-t0):.0f} frames/s")
print("quiet per-window min of mean|r|:")
for n, v in mins.items():
    print(f"  N={n:5d}: {v:.4f}")
print("quiet flags:", mon.flags)

# --- lightning detectability
inj = [InjectionSpec(InjectionKind.LIGHTNING, 5, start + timedelta(seconds=40), 10.0)]
arrays = generate_arrays(cfg, start, 60 * 70, injections=inj, seed=11)
mon = Monitor(cfg)
stats = {n: [] for n in cfg.window_lengths}
for i in range(arrays.n_frames):
    ts = datetime.fromtimestamp(arrays.ts_ms[i] / 1000, tz=timezone.utc)
    tris, flags = mon.push_arrays(ts, arrays.v[i], arrays.phi[i])
    for tri in tris:
        stats[tri.window_length].append(np.nanmean(np.abs(tri.cells)))
print("\nlightning at t=40s..50s; mean|r| minima during 40-60s:")
for n in cfg.window_lengths:
    arr = np.array(stats[n][40 * 60:])
    print(f"  N={n:5d}: min={arr.min():.3f}")
print("flags:", [(f.kind.value, f.pmu_id, f.window_length,
                  f.start_ts.strftime('%H:%M:%S.%f'),
                  f.last_ts.strftime('%H:%M:%S')) for f in mon.flags])
