"""Large synthetic archives for benchmarking and compression checks.

Streams are produced in segment-sized chunks (72,000 frames is exactly 20
minutes at 60 Hz, so chunk boundaries stay on the global frame grid) and
appended straight into the archive in columnar form.  Periodic lightning
transients on one PMU sweep its voltage through the off-band width-1 bins
so the high-selectivity value query has candidates to find.
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from pathlib import Path

from .archive import Archive
from .domain import EngineConfig
from .ingest import InjectionKind, InjectionSpec, generate_arrays

BENCH_START = datetime(2013, 6, 24, 5, 0, tzinfo=timezone.utc)
BENCH_EVENT_PMU = 1
BENCH_EVENT_SPACING_S = 3000
CHUNK_FRAMES = 72_000


def bench_injections(start_frame: int, n_frames: int, hz: int,
                     chunk_start: datetime) -> list[InjectionSpec]:
    """Lightning strikes on the bench PMU at fixed global offsets."""
    out = []
    spacing = BENCH_EVENT_SPACING_S * hz
    first_global = 40 * hz
    k = max(0, (start_frame - first_global + spacing - 1) // spacing)
    while True:
        event_frame = first_global + k * spacing
        if event_frame >= start_frame + n_frames - 15 * hz:
            break
        if event_frame >= start_frame:
            offset_s = (event_frame - start_frame) / hz
            out.append(InjectionSpec(
                InjectionKind.LIGHTNING, BENCH_EVENT_PMU,
                chunk_start + timedelta(seconds=offset_s), 10.0,
                magnitude=(25.0, 8.0)))
        k += 1
    return out


def build_bench_archive(data_dir, rows: int, config: EngineConfig | None = None,
                        seed: int = 2013, start: datetime = BENCH_START,
                        progress=None) -> Archive:
    """Create (or reuse) an archive of at least ``rows`` rows."""
    config = config or EngineConfig()
    data_dir = Path(data_dir)
    if (data_dir / "archive.json").exists():
        archive = Archive.open(data_dir, config)
        if archive.m >= rows:
            return archive
        raise RuntimeError(
            f"archive at {data_dir} has {archive.m} rows; delete it to "
            f"rebuild with {rows}")
    archive = Archive(data_dir, config)
    hz = config.sample_hz
    done = 0
    while done < rows:
        take = min(CHUNK_FRAMES, rows - done)
        chunk_start = start + timedelta(milliseconds=(done * 1000) // hz)
        injections = bench_injections(done, take, hz, chunk_start)
        arrays = generate_arrays(config, chunk_start, take, injections,
                                 seed=seed + done)
        archive.append_block(arrays.ts_ms, arrays.v, arrays.phi)
        done += take
        if progress is not None:
            progress(done, rows)
    archive.save()
    return archive
