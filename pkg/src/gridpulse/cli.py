"""Command-line entry points; state lives in the library or behind the
service, the commands stay thin.

Exit codes: 0 success, 1 validation problems (flags, query text, input
files), 2 runtime failures.
"""

from __future__ import annotations

import json
import re
import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

import click

from .archive import Archive
from .binning import BinLayout, BinLayoutConfig
from .bitmap_index import BitmapIndex, DeltaTracker
from .domain import ElectricalOrder, EngineConfig, ValidationError
from .ingest import (
    InjectionKind,
    InjectionSpec,
    ParseError,
    StreamOrderError,
    generate_arrays,
    parse_stream,
    write_csv,
)
from .query import QuerySyntaxError, bench, bench_csv, execute, table2_suite

DEFAULT_DATA_DIR = "./data"


def load_config(path: str | None) -> EngineConfig:
    """Key/value config file -> EngineConfig; missing path gives defaults."""
    if path is None:
        return EngineConfig()
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    kwargs = {}
    if "pmu_count" in values:
        kwargs["pmu_count"] = int(values.pop("pmu_count"))
    if "sample_hz" in values:
        kwargs["sample_hz"] = int(values.pop("sample_hz"))
    if "window_lengths" in values:
        kwargs["window_lengths"] = tuple(
            int(x) for x in values.pop("window_lengths").split(","))
    if "corr_threshold" in values:
        kwargs["corr_threshold"] = float(values.pop("corr_threshold"))
    if "segment_rows" in values:
        kwargs["segment_rows"] = int(values.pop("segment_rows"))
    if "electrical_distances" in values:
        pairs = [item.split(":") for item in
                 values.pop("electrical_distances").split(",")]
        by_id = {int(i): float(d) for i, d in pairs}
        ids = tuple(sorted(by_id, key=lambda i: (by_id[i], i)))
        kwargs["electrical_order"] = ElectricalOrder(
            ids, tuple(by_id[i] for i in ids))
    if values:
        raise ValidationError(f"unknown config keys: {', '.join(sorted(values))}")
    return EngineConfig(**kwargs)


_INJECT_RE = re.compile(
    r"(?P<kind>drop|data_drop|misread|lightning):pmu(?P<pmu>\d+)"
    r":\+(?P<offset>\d+(\.\d+)?)s:(?P<dur>\d+(\.\d+)?)s")

_KINDS = {"drop": InjectionKind.DATA_DROP, "data_drop": InjectionKind.DATA_DROP,
          "misread": InjectionKind.MISREAD, "lightning": InjectionKind.LIGHTNING}


def parse_injection(text: str, start: datetime) -> InjectionSpec:
    m = _INJECT_RE.fullmatch(text.strip())
    if m is None:
        raise ValidationError(
            f"bad injection {text!r} (want kind:pmuN:+OFFSETs:DURs, e.g. "
            f"lightning:pmu0:+60s:10s)")
    return InjectionSpec(_KINDS[m.group("kind")], int(m.group("pmu")),
                         start + timedelta(seconds=float(m.group("offset"))),
                         float(m.group("dur")))


def _parse_start(text: str) -> datetime:
    raw = text[:-1] if text.endswith("Z") else text
    dt = datetime.fromisoformat(raw)
    return dt.replace(tzinfo=timezone.utc) if dt.tzinfo is None else dt


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Engine config file (key = value lines).")
@click.option("--data-dir", default=DEFAULT_DATA_DIR, show_default=True,
              help="Archive directory.")
@click.pass_context
def cli(ctx, config_path, data_dir):
    """PMU stream monitoring and compressed archival queries."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = load_config(config_path)
    ctx.obj["data_dir"] = Path(data_dir)


@cli.command()
@click.option("--frames", type=int, required=True)
@click.option("--start", default="2013-06-24T21:00:00", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--inject", "injections", multiple=True,
              help="kind:pmuN:+OFFSETs:DURs (repeatable).")
@click.option("--out", type=click.Path(), required=True, help="CSV output path.")
@click.option("--labels", "labels_path", type=click.Path(), default=None,
              help="Ground-truth labels JSON output path.")
@click.pass_context
def gen(ctx, frames, start, seed, injections, out, labels_path):
    """Generate a synthetic PDC CSV stream with labeled injections."""
    config = ctx.obj["config"]
    start_ts = _parse_start(start)
    specs = [parse_injection(text, start_ts) for text in injections]
    arrays = generate_arrays(config, start_ts, frames, specs, seed=seed)
    rows = write_csv(out, arrays)
    if labels_path:
        payload = [{"kind": l.kind.value, "pmu_id": l.pmu_id,
                    "start_ts": l.start_ts.isoformat(),
                    "end_ts": l.end_ts.isoformat()} for l in arrays.labels]
        Path(labels_path).write_text(json.dumps(payload, indent=2))
    click.echo(f"wrote {rows} frames to {out}"
               + (f", {len(arrays.labels)} labels to {labels_path}"
                  if labels_path else ""))


@cli.command()
@click.argument("csv_files", nargs=-1, required=True,
                type=click.Path(exists=True))
@click.pass_context
def ingest(ctx, csv_files):
    """Parse PDC CSV files into the archive (building the index as it goes)."""
    config = ctx.obj["config"]
    data_dir = ctx.obj["data_dir"]
    if (data_dir / "archive.json").exists():
        archive = Archive.open(data_dir, config)
    else:
        archive = Archive(data_dir, config)
    total = 0
    for path in csv_files:
        with open(path) as f:
            frames = list(parse_stream(f))
        if not frames:
            continue
        first, last = archive.append_frames(frames)
        total += last - first + 1
    archive.save()
    click.echo(f"ingested {total} rows; archive now has {archive.m}")


@cli.command()
@click.option("--rebuild", is_flag=True,
              help="Rebuild the bitmap index by scanning segment files.")
@click.pass_context
def index(ctx, rebuild):
    """Inspect or rebuild the archive's bitmap index."""
    config = ctx.obj["config"]
    data_dir = ctx.obj["data_dir"]
    if not rebuild:
        archive = Archive.open(data_dir, config)
        idx = archive.index
        click.echo(f"rows: {idx.m}")
        click.echo(f"bins: {idx.layout.total_bins}")
        click.echo(f"compressed bytes: {idx.compressed_bytes()}")
        click.echo(f"uncompressed bits: {idx.uncompressed_bits()}")
        return
    archive = Archive(data_dir, config)
    archive.filemap = archive._rebuild_filemap()
    fresh = BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=config.pmu_count)))
    tracker = DeltaTracker(config.pmu_count)
    for block in archive.iter_blocks():
        fresh.append_block(block.ts_ms, block.v, block.phi, tracker)
    archive.index = fresh
    archive.tracker = tracker
    archive.last_ts_ms = archive.row_ts_ms(archive.m - 1) if archive.m else None
    archive.save()
    click.echo(f"rebuilt index over {fresh.m} rows")


@cli.command()
@click.argument("query_text")
@click.option("--limit", type=int, default=20, show_default=True)
@click.option("--path", type=click.Choice(["bitmap", "linear"]),
              default="bitmap", show_default=True)
@click.option("--server", default=None,
              help="Run against a serving instance instead of local files.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.pass_context
def query(ctx, query_text, limit, path, server, as_json):
    """Run a selection query (local archive, or a server with --server)."""
    if server:
        import httpx
        resp = httpx.post(f"{server.rstrip('/')}/query",
                          json={"q": query_text, "limit": limit, "path": path},
                          timeout=300.0)
        if resp.status_code != 200:
            raise ValidationError(resp.json().get("detail", resp.text))
        payload = resp.json()
        total, report = payload["total"], payload["report"]
        rows_out = [(r["ts"], r["v"], r["phi"]) for r in payload["rows"]]
    else:
        archive = Archive.open(ctx.obj["data_dir"], ctx.obj["config"])
        block, rep = execute(archive, query_text, path)
        total, report = len(block), rep.as_dict()
        rows_out = []
        for i in range(min(len(block), limit)):
            ts = datetime.fromtimestamp(block.ts_ms[i] / 1000, tz=timezone.utc)
            rows_out.append((ts.isoformat(), block.v[i].tolist(),
                             block.phi[i].tolist()))
    if as_json:
        click.echo(json.dumps({"total": total, "report": report,
                               "rows": rows_out}))
        return
    click.echo(f"{total} rows ({report['path']} path, "
               f"{report['wall_ms']:.2f} ms, {report['bytes_read']} bytes read, "
               f"{report['candidates']} candidates)")
    for ts, v, phi in rows_out:
        click.echo(f"  {ts}  v0={v[0]:.3f} phi0={phi[0]:.3f} ...")


@cli.command()
@click.option("--rows", type=int, default=4_000_000, show_default=True)
@click.option("--suite", type=click.Choice(["table2"]), default="table2",
              show_default=True)
@click.option("--reps", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=2013, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Write the benchmark table as CSV.")
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def bench_cmd(ctx, rows, suite, reps, seed, out, as_json):
    """Benchmark bitmap vs linear-scan retrieval on a synthetic archive."""
    from .benchdata import build_bench_archive
    config = ctx.obj["config"]

    def progress(done, total):
        click.echo(f"  generated {done}/{total} rows", err=True)

    archive = build_bench_archive(ctx.obj["data_dir"], rows, config,
                                  seed=seed, progress=progress)
    results = bench(archive, table2_suite(), repetitions=reps)
    if out:
        Path(out).write_text(bench_csv(results))
    if as_json:
        click.echo(json.dumps([r.as_dict() for r in results]))
    else:
        for r in results:
            click.echo(f"{r.query_id:16s} bitmap={r.bitmap_ms:10.2f}ms "
                       f"linear={r.linear_ms:10.2f}ms speedup={r.speedup:8.1f}x "
                       f"records={r.records}")


cli.add_command(bench_cmd, name="bench")


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--live/--no-live", default=True, show_default=True,
              help="Feed a synthetic live stream through the engine.")
@click.option("--live-events/--no-live-events", default=True, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def serve(ctx, host, port, live, live_events, seed):
    """Run the monitoring/query service (and console, when built)."""
    import uvicorn

    from .service import EngineRuntime, LiveSynthetic, create_app
    config = ctx.obj["config"]
    data_dir = ctx.obj["data_dir"]
    if (data_dir / "archive.json").exists():
        archive = Archive.open(data_dir, config)
    else:
        archive = Archive(data_dir, config)
    source = LiveSynthetic(config, seed=seed, events=live_events) if live else None
    runtime = EngineRuntime(config, archive, source)
    runtime.start_live()
    console = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    app = create_app(runtime, console_dir=console if console.exists() else None)
    try:
        uvicorn.run(app, host=host, port=port, log_level="info")
    finally:
        runtime.stop()
        archive.save()


@cli.command()
@click.option("--server", required=True)
@click.option("--from", "from_ts", required=True)
@click.option("--to", "to_ts", required=True)
@click.option("--speed", type=float, default=1.0, show_default=True)
@click.option("--wait/--no-wait", default=False,
              help="Poll until the session finishes.")
def replay(server, from_ts, to_ts, speed, wait):
    """Ask a serving instance to replay an archived time range."""
    import time as _time

    import httpx
    base = server.rstrip("/")
    resp = httpx.post(f"{base}/replay", json={"from": from_ts, "to": to_ts,
                                              "speed": speed}, timeout=30.0)
    if resp.status_code not in (200, 201):
        raise ValidationError(resp.json().get("detail", resp.text))
    state = resp.json()
    click.echo(f"replay {state['id']} {state['state']}")
    while wait and state["state"] != "done":
        _time.sleep(0.5)
        state = httpx.get(f"{base}/replay/{state['id']}", timeout=30.0).json()
    if wait:
        click.echo(f"replay {state['id']} done")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except (ValidationError, QuerySyntaxError, ParseError,
            StreamOrderError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except Exception as exc:  # runtime failures
        click.echo(f"runtime error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
