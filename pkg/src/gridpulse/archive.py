"""Append-only segment archive with its File Map and coupled bitmap index.

Rows are fixed-width little-endian records (8-byte epoch-ms timestamp plus
per-PMU voltage/angle doubles; 328 bytes at 20 PMUs) in numbered segment
files.  The File Map translates global row positions to (file, offset) via
an upper-bound search over cumulative row counts.  Every appended row is
also pushed into the bitmap index, so index and archive always agree on m.
"""

from __future__ import annotations

import json
import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .binning import BinLayout, BinLayoutConfig
from .bitmap_index import BitmapIndex, DeltaTracker, ResultBitVector
from .domain import EngineConfig, FrameRecord, PhasorSample, ValidationError

SEGMENT_DIR = "segments"
FILEMAP_NAME = "filemap.bin"
INDEX_NAME = "index.bmi"
META_NAME = "archive.json"


class ArchiveOrderError(ValueError):
    """Appends must continue the archive's timestamp order."""


class ArchiveIntegrityError(RuntimeError):
    """Archive files are missing or inconsistent with the File Map."""


class ArchiveRangeError(ValueError):
    """A position or time range fell outside the archived rows."""


def row_dtype(pmu_count: int) -> np.dtype:
    return np.dtype([("ts", "<i8"), ("vphi", "<f8", (2 * pmu_count,))])


def row_size(pmu_count: int) -> int:
    return 8 + 16 * pmu_count


@dataclass(frozen=True)
class FileMapEntry:
    total_rows: int       # cumulative rows through this file
    path: str             # segment file name, relative to the segment dir


class FileMap:
    """Cumulative row counts per segment, searchable by row position."""

    def __init__(self, entries: list[FileMapEntry] | None = None):
        self.entries = entries or []

    @property
    def total(self) -> int:
        return self.entries[-1].total_rows if self.entries else 0

    def add(self, rows_in_file: int, path: str) -> None:
        self.entries.append(FileMapEntry(self.total + rows_in_file, path))

    def extend_last(self, extra_rows: int) -> None:
        last = self.entries[-1]
        self.entries[-1] = FileMapEntry(last.total_rows + extra_rows, last.path)

    def locate(self, position: int) -> tuple[str, int]:
        """Map a 1-based row position to (file, 0-based offset in file).

        Upper-bound search: the first entry whose cumulative count is >=
        the position owns the row.
        """
        if not (1 <= position <= self.total):
            raise ArchiveRangeError(
                f"position {position} outside 1..{self.total}")
        totals = [e.total_rows for e in self.entries]
        i = bisect_left(totals, position)
        prev = totals[i - 1] if i > 0 else 0
        return self.entries[i].path, position - prev - 1

    def file_start(self, index: int) -> int:
        """Global row id of the first row in entry ``index``."""
        return self.entries[index - 1].total_rows if index > 0 else 0

    def save(self, path: Path) -> None:
        with open(path, "wb") as f:
            for e in self.entries:
                raw = e.path.encode("utf-8")
                f.write(struct.pack("<QH", e.total_rows, len(raw)))
                f.write(raw)

    @classmethod
    def load(cls, path: Path) -> "FileMap":
        entries = []
        data = path.read_bytes()
        pos = 0
        while pos < len(data):
            if pos + 10 > len(data):
                raise ArchiveIntegrityError("truncated file map")
            total, plen = struct.unpack_from("<QH", data, pos)
            pos += 10
            name = data[pos:pos + plen].decode("utf-8")
            pos += plen
            entries.append(FileMapEntry(total, name))
        fm = cls(entries)
        if any(a.total_rows >= b.total_rows for a, b in zip(entries, entries[1:])):
            raise ArchiveIntegrityError("file map counts not increasing")
        return fm


@dataclass
class ReadStats:
    bytes_read: int = 0
    read_calls: int = 0
    file_opens: int = 0


@dataclass
class RowBlock:
    """A set of archive rows in columnar form."""

    row_ids: np.ndarray   # (n,) int64 global row positions
    ts_ms: np.ndarray     # (n,) int64
    v: np.ndarray         # (n, P)
    phi: np.ndarray       # (n, P)
    delta: np.ndarray     # (n, P) displacement vs the preceding archive row

    def __len__(self) -> int:
        return len(self.row_ids)

    @classmethod
    def empty(cls, pmu_count: int) -> "RowBlock":
        z = np.empty((0, pmu_count))
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                   z, z.copy(), z.copy())

    @classmethod
    def concat(cls, blocks: list["RowBlock"], pmu_count: int) -> "RowBlock":
        blocks = [b for b in blocks if len(b)]
        if not blocks:
            return cls.empty(pmu_count)
        return cls(*(np.concatenate([getattr(b, f) for b in blocks])
                     for f in ("row_ids", "ts_ms", "v", "phi", "delta")))

    def select(self, mask: np.ndarray) -> "RowBlock":
        return RowBlock(self.row_ids[mask], self.ts_ms[mask], self.v[mask],
                        self.phi[mask], self.delta[mask])

    def to_frames(self) -> list[FrameRecord]:
        out = []
        for i in range(len(self)):
            ts = datetime.fromtimestamp(self.ts_ms[i] / 1000, tz=timezone.utc)
            samples = tuple(PhasorSample(p, float(self.v[i, p]), float(self.phi[i, p]))
                            for p in range(self.v.shape[1]))
            out.append(FrameRecord(ts, samples))
        return out


class Archive:
    """Single-writer archive: segment files + File Map + bitmap index."""

    def __init__(self, data_dir, config: EngineConfig,
                 layout: BinLayout | None = None):
        self.dir = Path(data_dir)
        self.config = config
        self.segment_dir = self.dir / SEGMENT_DIR
        self.segment_dir.mkdir(parents=True, exist_ok=True)
        self.layout = layout or BinLayout(BinLayoutConfig(pmu_count=config.pmu_count))
        if self.layout.pmu_count != config.pmu_count:
            raise ValidationError("bin layout PMU count must match config")
        self.index = BitmapIndex(self.layout)
        self.tracker = DeltaTracker(config.pmu_count)
        self.filemap = FileMap()
        self.last_ts_ms: int | None = None
        self._dtype = row_dtype(config.pmu_count)
        self._row_size = row_size(config.pmu_count)

    # ------------------------------------------------------------------ paths

    @property
    def m(self) -> int:
        return self.filemap.total

    def _segment_path(self, name: str) -> Path:
        return self.segment_dir / name

    def _next_segment_name(self) -> str:
        return f"seg-{len(self.filemap.entries):08d}.bin"

    # ----------------------------------------------------------------- append

    def append_frames(self, frames: Iterable[FrameRecord]) -> tuple[int, int]:
        """Append timestamp-ordered frames; returns (first, last) row ids."""
        frames = list(frames)
        if not frames:
            raise ValidationError("no frames to append")
        p = self.config.pmu_count
        ts_ms = np.empty(len(frames), dtype=np.int64)
        v = np.empty((len(frames), p))
        phi = np.empty((len(frames), p))
        for i, fr in enumerate(frames):
            if len(fr.samples) != p:
                raise ValidationError(
                    f"frame {i} has {len(fr.samples)} samples, expected {p}")
            ts_ms[i] = fr.ts_ms
            for q, s in enumerate(fr.samples):
                v[i, q] = s.v
                phi[i, q] = s.phi
        return self.append_block(ts_ms, v, phi)

    def append_block(self, ts_ms: np.ndarray, v: np.ndarray,
                     phi: np.ndarray) -> tuple[int, int]:
        """Columnar append; the bitmap index is extended in the same step."""
        ts_ms = np.asarray(ts_ms, dtype=np.int64)
        n = len(ts_ms)
        if n == 0:
            raise ValidationError("no rows to append")
        if np.any(np.diff(ts_ms) <= 0):
            raise ArchiveOrderError("frame timestamps must strictly increase")
        if self.last_ts_ms is not None and ts_ms[0] <= self.last_ts_ms:
            raise ArchiveOrderError(
                f"append starts at {ts_ms[0]} which is not after the archive "
                f"tail {self.last_ts_ms}")
        first_row = self.m
        self.index.append_block(ts_ms, v, phi, self.tracker)

        rows = np.empty(n, dtype=self._dtype)
        rows["ts"] = ts_ms
        rows["vphi"][:, 0::2] = v
        rows["vphi"][:, 1::2] = phi

        seg_rows = self.config.segment_rows
        written = 0
        while written < n:
            if self.filemap.entries:
                last = self.filemap.entries[-1]
                in_last = last.total_rows - self.filemap.file_start(
                    len(self.filemap.entries) - 1)
            else:
                in_last = seg_rows
            if in_last >= seg_rows:
                name = self._next_segment_name()
                take = min(seg_rows, n - written)
                with open(self._segment_path(name), "wb") as f:
                    rows[written:written + take].tofile(f)
                self.filemap.add(take, name)
            else:
                name = self.filemap.entries[-1].path
                take = min(seg_rows - in_last, n - written)
                with open(self._segment_path(name), "ab") as f:
                    rows[written:written + take].tofile(f)
                self.filemap.extend_last(take)
            written += take
        self.last_ts_ms = int(ts_ms[-1])
        return first_row, self.m - 1

    # ------------------------------------------------------------ persistence

    def save(self) -> None:
        self.index.save(self.dir / INDEX_NAME)
        self.filemap.save(self.dir / FILEMAP_NAME)
        meta = {
            "pmu_count": self.config.pmu_count,
            "segment_rows": self.config.segment_rows,
            "rows": self.m,
            "last_ts_ms": self.last_ts_ms,
            "tracker": self.tracker.state_dict(),
        }
        (self.dir / META_NAME).write_text(json.dumps(meta))

    @classmethod
    def open(cls, data_dir, config: EngineConfig) -> "Archive":
        """Open a saved archive, rebuilding the File Map if its sidecar is
        missing."""
        data_dir = Path(data_dir)
        meta = json.loads((data_dir / META_NAME).read_text())
        if meta["pmu_count"] != config.pmu_count:
            raise ValidationError(
                f"archive has {meta['pmu_count']} PMUs, config says "
                f"{config.pmu_count}")
        index = BitmapIndex.load(data_dir / INDEX_NAME)
        archive = cls(data_dir, config, layout=index.layout)
        archive.index = index
        fm_path = data_dir / FILEMAP_NAME
        if fm_path.exists():
            archive.filemap = FileMap.load(fm_path)
        else:
            archive.filemap = archive._rebuild_filemap()
        archive.last_ts_ms = meta.get("last_ts_ms")
        archive.tracker.load_state(meta.get("tracker", {}))
        if archive.m != index.m:
            raise ArchiveIntegrityError(
                f"file map rows ({archive.m}) disagree with index ({index.m})")
        return archive

    def _rebuild_filemap(self) -> FileMap:
        fm = FileMap()
        for path in sorted(self.segment_dir.glob("seg-*.bin")):
            size = path.stat().st_size
            if size % self._row_size:
                raise ArchiveIntegrityError(
                    f"segment {path.name} is not row-aligned")
            fm.add(size // self._row_size, path.name)
        return fm

    # ------------------------------------------------------------------ reads

    def locate(self, position: int) -> tuple[str, int]:
        """1-based hit position -> (segment file, 0-based offset)."""
        return self.filemap.locate(position)

    def _read_span(self, start_row: int, stop_row: int,
                   stats: ReadStats | None = None) -> np.ndarray:
        """Read global rows [start_row, stop_row) across segment boundaries."""
        out = []
        row = start_row
        while row < stop_row:
            name, offset = self.filemap.locate(row + 1)
            path = self._segment_path(name)
            if not path.exists():
                raise ArchiveIntegrityError(f"missing segment file {name}")
            entry_idx = next(i for i, e in enumerate(self.filemap.entries)
                             if e.path == name)
            file_rows = (self.filemap.entries[entry_idx].total_rows
                         - self.filemap.file_start(entry_idx))
            take = min(stop_row - row, file_rows - offset)
            with open(path, "rb") as f:
                f.seek(offset * self._row_size)
                chunk = np.fromfile(f, dtype=self._dtype, count=take)
            if len(chunk) != take:
                raise ArchiveIntegrityError(
                    f"segment {name} shorter than the file map claims")
            if stats is not None:
                stats.file_opens += 1
                stats.read_calls += 1
                stats.bytes_read += take * self._row_size
            out.append(chunk)
            row += take
        return np.concatenate(out) if len(out) != 1 else out[0]

    def _rows_to_block(self, rows: np.ndarray, first_id: int,
                       prev_phi: np.ndarray | None) -> RowBlock:
        p = self.config.pmu_count
        v = rows["vphi"][:, 0::2]
        phi = rows["vphi"][:, 1::2]
        delta = np.empty_like(phi)
        delta[1:] = np.abs(phi[1:] - phi[:-1])
        if prev_phi is None:
            delta[0] = 0.0
        else:
            delta[0] = np.abs(phi[0] - prev_phi)
        return RowBlock(first_id + np.arange(len(rows), dtype=np.int64),
                        rows["ts"].astype(np.int64), v, phi, delta)

    # runs closer than this many rows are served from one contiguous read
    FETCH_MERGE_GAP = 256

    def fetch(self, result: ResultBitVector,
              stats: ReadStats | None = None) -> RowBlock:
        """Materialize the rows whose bits are set in a result vector.

        Hit positions coalesce into contiguous reads (nearby runs share
        one read); zero fills in the vector are skipped without
        inspection.
        """
        if result.bits.length != self.m:
            raise ValidationError(
                f"result vector covers {result.bits.length} rows, archive has "
                f"{self.m}")
        blocks = []
        group: list[tuple[int, int]] = []
        group_stop = -1

        def flush():
            if not group:
                return
            read_from = max(group[0][0] - 1, 0)
            rows = self._read_span(read_from, group_stop, stats)
            for a, b in group:
                local = a - read_from
                prev_phi = rows["vphi"][local - 1, 1::2] if a > 0 else None
                blocks.append(self._rows_to_block(
                    rows[local:local + (b - a)], a, prev_phi))

        for start, stop in result.bits.iter_set_runs():
            if group and start - group_stop > self.FETCH_MERGE_GAP:
                flush()
                group = []
            group.append((start, stop))
            group_stop = stop
        flush()
        return RowBlock.concat(blocks, self.config.pmu_count)

    def iter_blocks(self, chunk_rows: int = 262_144,
                    stats: ReadStats | None = None) -> Iterator[RowBlock]:
        """Scan the whole archive in order as columnar chunks."""
        prev_phi = None
        row = 0
        while row < self.m:
            take = min(chunk_rows, self.m - row)
            rows = self._read_span(row, row + take, stats)
            block = self._rows_to_block(rows, row, prev_phi)
            prev_phi = block.phi[-1]
            row += take
            yield block

    def read_rows(self, start_row: int, stop_row: int) -> RowBlock:
        """Rows [start_row, stop_row) as a block (delta relative to the
        preceding archived row)."""
        if not (0 <= start_row < stop_row <= self.m):
            raise ArchiveRangeError(
                f"row span [{start_row}, {stop_row}) outside 0..{self.m}")
        read_from = max(start_row - 1, 0)
        rows = self._read_span(read_from, stop_row)
        prev_phi = None
        if start_row > 0:
            prev_phi = rows["vphi"][0, 1::2]
            rows = rows[1:]
        return self._rows_to_block(rows, start_row, prev_phi)

    def row_ts_ms(self, row_id: int) -> int:
        name, offset = self.filemap.locate(row_id + 1)
        with open(self._segment_path(name), "rb") as f:
            f.seek(offset * self._row_size)
            raw = f.read(8)
        return struct.unpack("<q", raw)[0]

    def find_row_at_or_after(self, ts_ms: int) -> int:
        """First row with timestamp >= ts_ms (== m when past the tail)."""
        lo, hi = 0, self.m
        while lo < hi:
            mid = (lo + hi) // 2
            if self.row_ts_ms(mid) < ts_ms:
                lo = mid + 1
            else:
                hi = mid
        return lo

    def time_range_ms(self) -> tuple[int, int] | None:
        if self.m == 0:
            return None
        return self.row_ts_ms(0), self.row_ts_ms(self.m - 1)


def candidacy_filter(block: RowBlock, predicate_mask) -> RowBlock:
    """Keep only candidate rows that truly satisfy the original predicate.

    ``predicate_mask`` is a callable mapping a RowBlock to a boolean mask
    (the pre-binning predicate, evaluated exactly).
    """
    if len(block) == 0:
        return block
    return block.select(predicate_mask(block))
