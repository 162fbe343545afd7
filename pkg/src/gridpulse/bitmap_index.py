"""Compressed bitmap index over archived rows.

One WAH vector per bin; every appended row sets exactly one bit per
attribute.  Queries arrive as boolean trees over (attribute, value-range)
leaves; each leaf ORs the bins its range touches and the tree combines the
results on the compressed form, yielding a result bit vector of candidate
rows.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .binning import BinLayout, time_fields
from .domain import FrameRecord, ValidationError, phase_delta
from .wah import WahVector, wah_and, wah_or

MAGIC = b"GPBMIDX1"
FORMAT_VERSION = 1


class IndexFormatError(ValueError):
    """Index file is corrupt, truncated or from an unknown version."""


class IndexStateError(RuntimeError):
    """Operation not valid for the index's current state."""


class DeltaTracker:
    """Remembers each PMU's previous phase angle to derive displacements.

    The first row of a stream has no predecessor; its displacement is 0.
    """

    def __init__(self, pmu_count: int):
        self.pmu_count = pmu_count
        self.prev_phi: np.ndarray | None = None

    def deltas_for(self, phi: np.ndarray) -> np.ndarray:
        """Displacement rows for a block of phase angles, updating state."""
        phi = np.asarray(phi, dtype=np.float64)
        out = np.empty_like(phi)
        out[1:] = np.abs(phi[1:] - phi[:-1])
        if self.prev_phi is None:
            out[0] = 0.0
        else:
            out[0] = np.abs(phi[0] - self.prev_phi)
        self.prev_phi = phi[-1].copy()
        return out

    def state_dict(self) -> dict:
        return {"prev_phi": None if self.prev_phi is None else self.prev_phi.tolist()}

    def load_state(self, d: dict) -> None:
        p = d.get("prev_phi")
        self.prev_phi = None if p is None else np.asarray(p, dtype=np.float64)


@dataclass
class ResultBitVector:
    """Candidate rows of a query: compressed hit positions plus their count.

    ``exact`` is True when no touched bin required a candidacy check, i.e.
    the candidates are already the true answer set.
    """

    bits: WahVector
    hit_count: int
    exact: bool = True

    @classmethod
    def from_vector(cls, bits: WahVector, exact: bool = True) -> "ResultBitVector":
        return cls(bits, bits.count(), exact)


# boolean expression tree over index leaves
@dataclass(frozen=True)
class Leaf:
    """All rows whose attribute value falls in [lo, hi) (eq when lo == hi)."""

    attr: str
    lo: float
    hi: float

    @classmethod
    def eq(cls, attr: str, value: float) -> "Leaf":
        return cls(attr, value, value)


@dataclass(frozen=True)
class Node:
    op: str  # "and" | "or"
    children: tuple = ()


def _all_zero(length: int) -> WahVector:
    v = WahVector()
    v.append_run(False, length)
    return v


def _all_one(length: int) -> WahVector:
    v = WahVector()
    v.append_run(True, length)
    return v


class BitmapIndex:
    """Per-bin compressed bit vectors over all archived rows."""

    def __init__(self, layout: BinLayout):
        self.layout = layout
        self.m = 0
        self.vectors = [WahVector() for _ in range(layout.total_bins)]
        self._open = True

    # ----------------------------------------------------------------- append

    def close(self) -> None:
        self._open = False

    def append_row(self, record: FrameRecord, tracker: DeltaTracker) -> int:
        """Append one row; returns its row id."""
        if not self._open:
            raise IndexStateError("index is closed for appends")
        if len(record.samples) != self.layout.pmu_count:
            raise ValidationError(
                f"record has {len(record.samples)} samples, layout expects "
                f"{self.layout.pmu_count}")
        ts_ms = np.array([record.ts_ms], dtype=np.int64)
        v = np.array([[s.v for s in record.samples]])
        phi = np.array([[s.phi for s in record.samples]])
        return self.append_block(ts_ms, v, phi, tracker)

    def append_block(self, ts_ms: np.ndarray, v: np.ndarray, phi: np.ndarray,
                     tracker: DeltaTracker) -> int:
        """Append a columnar block of rows; returns the first row id.

        ``ts_ms`` is (n,), ``v`` and ``phi`` are (n, P).  The per-bin
        vectors are extended by run, so wide blocks amortize much better
        than repeated single-row appends.
        """
        if not self._open:
            raise IndexStateError("index is closed for appends")
        n = len(ts_ms)
        if n == 0:
            return self.m
        first_row = self.m
        delta = tracker.deltas_for(phi)
        fields = time_fields(ts_ms)
        layout = self.layout
        for i, attr in enumerate(layout.attributes):
            if attr.pmu_id is None:
                values = fields[attr.name]
            elif attr.name.endswith(".phi"):
                values = phi[:, attr.pmu_id]
            elif attr.name.endswith(".v"):
                values = v[:, attr.pmu_id]
            else:
                values = delta[:, attr.pmu_id]
            ids = attr.bin_of_array(values)
            self._append_attr_column(layout.offsets[i], attr.n_bins, ids, n)
        self.m += n
        return first_row

    def _append_attr_column(self, offset: int, n_bins: int,
                            ids: np.ndarray, n: int) -> None:
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        boundaries = np.flatnonzero(np.diff(sorted_ids)) + 1
        starts = np.r_[0, boundaries]
        ends = np.r_[boundaries, n]
        touched = set()
        for s, e in zip(starts.tolist(), ends.tolist()):
            local = int(sorted_ids[s])
            touched.add(local)
            self._append_positions(self.vectors[offset + local], order[s:e], n)
        for b in range(n_bins):
            if b not in touched:
                self.vectors[offset + b].append_run(False, n)

    @staticmethod
    def _append_positions(vec: WahVector, positions: np.ndarray, n: int) -> None:
        """Extend ``vec`` by n bits with ones at the given sorted positions."""
        breaks = np.flatnonzero(np.diff(positions) != 1)
        run_starts = positions[np.r_[0, breaks + 1]]
        run_ends = positions[np.r_[breaks, positions.size - 1]] + 1
        cursor = 0
        for s, e in zip(run_starts.tolist(), run_ends.tolist()):
            if s > cursor:
                vec.append_run(False, s - cursor)
            vec.append_run(True, e - s)
            cursor = e
        if cursor < n:
            vec.append_run(False, n - cursor)

    # --------------------------------------------------------------- evaluate

    def bin_vector(self, global_bin: int) -> WahVector:
        return self.vectors[global_bin]

    def evaluate(self, expr) -> ResultBitVector:
        """Evaluate a Leaf/Node tree into a result bit vector."""
        bits, exact = self._eval(expr)
        return ResultBitVector.from_vector(bits, exact)

    def _eval(self, expr) -> tuple[WahVector, bool]:
        if isinstance(expr, Leaf):
            return self._eval_leaf(expr)
        if isinstance(expr, Node):
            if not expr.children:
                raise ValidationError("boolean node needs at least one child")
            op = wah_and if expr.op == "and" else wah_or
            parts = [self._eval(c) for c in expr.children]
            bits, exact = parts[0]
            for b, e in parts[1:]:
                bits = op(bits, b)
                exact = exact and e
            return bits, exact
        raise ValidationError(f"unknown expression node {expr!r}")

    def _eval_leaf(self, leaf: Leaf) -> tuple[WahVector, bool]:
        attr = self.layout.attribute(leaf.attr)
        off = self.layout.offsets[self.layout.attr_index(leaf.attr)]
        if leaf.lo == leaf.hi:  # equality
            local = attr.bin_of(leaf.lo)
            pairs = [(local, attr.bin_is_exact(local))]
        else:
            pairs = attr.bins_for_range(leaf.lo, leaf.hi)
        if not pairs:
            return _all_zero(self.m), True
        bits = None
        exact = True
        for local, covered in pairs:
            vec = self.vectors[off + local]
            bits = vec if bits is None else wah_or(bits, vec)
            exact = exact and (covered or attr.bin_is_exact(local))
        if bits is self.vectors[off + pairs[0][0]] and len(pairs) == 1:
            # do not hand out the live bin vector
            bits = wah_or(bits, _all_zero(self.m))
        return bits, exact

    # ------------------------------------------------------------ persistence

    def save(self, path) -> None:
        """Write the index: header, layout descriptor, m, offsets, vectors."""
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            layout_blob = json.dumps(self.layout.to_dict()).encode("utf-8")
            f.write(struct.pack("<I", len(layout_blob)))
            f.write(layout_blob)
            f.write(struct.pack("<QI", self.m, len(self.vectors)))
            # offsets table: byte offset of each vector relative to data start
            offsets = []
            pos = 0
            for vec in self.vectors:
                offsets.append(pos)
                pos += 9 + 4 * len(vec.words)  # per-vector header + words
            np.asarray(offsets, dtype="<u8").tofile(f)
            for vec in self.vectors:
                f.write(struct.pack("<IBI", len(vec.words), vec.active_len,
                                    vec.active))
                if vec.words:
                    np.frombuffer(vec.words, dtype=np.uint32).astype("<u4").tofile(f)

    @classmethod
    def load(cls, path) -> "BitmapIndex":
        with open(path, "rb") as f:
            data = f.read()
        try:
            return cls._parse(data)
        except (struct.error, ValueError, KeyError, IndexError) as exc:
            if isinstance(exc, IndexFormatError):
                raise
            raise IndexFormatError(f"corrupt index file: {exc}") from exc

    @classmethod
    def _parse(cls, data: bytes) -> "BitmapIndex":
        buf = io.BytesIO(data)
        magic = buf.read(8)
        if magic != MAGIC:
            raise IndexFormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        (blob_len,) = struct.unpack("<I", buf.read(4))
        layout = BinLayout.from_dict(json.loads(buf.read(blob_len).decode("utf-8")))
        m, n_bins = struct.unpack("<QI", buf.read(12))
        if n_bins != layout.total_bins:
            raise IndexFormatError(
                f"vector count {n_bins} does not match layout "
                f"({layout.total_bins} bins)")
        offsets = np.frombuffer(buf.read(8 * n_bins), dtype="<u8")
        if offsets.size != n_bins:
            raise IndexFormatError("truncated offsets table")
        index = cls(layout)
        index.m = m
        data_start = buf.tell()
        groups_expected = m // 31
        for i in range(n_bins):
            buf.seek(data_start + int(offsets[i]))
            header = buf.read(9)
            if len(header) != 9:
                raise IndexFormatError(f"truncated vector header for bin {i}")
            n_words, active_len, active = struct.unpack("<IBI", header)
            raw = buf.read(4 * n_words)
            if len(raw) != 4 * n_words:
                raise IndexFormatError(f"truncated vector payload for bin {i}")
            vec = index.vectors[i]
            vec.words.frombytes(raw)
            vec.active_len = active_len
            vec.active = active
            vec.length = m
            if active_len != m % 31 or _group_total(vec) != groups_expected:
                raise IndexFormatError(f"vector {i} length does not match m={m}")
        return index

    def structurally_equal(self, other: "BitmapIndex") -> bool:
        return (self.layout == other.layout and self.m == other.m
                and all(a == b for a, b in zip(self.vectors, other.vectors)))

    def compressed_bytes(self) -> int:
        """Total payload bytes across all bin vectors."""
        return sum(v.byte_size() for v in self.vectors)

    def uncompressed_bits(self) -> int:
        """Size of the logical m x n bit matrix."""
        return self.m * self.layout.total_bins


def _group_total(vec: WahVector) -> int:
    total = 0
    for w in vec.words:
        total += (w & 0x3FFF_FFFF) if w & 0x8000_0000 else 1
    return total


def row_delta_from_record(prev: FrameRecord | None, cur: FrameRecord) -> list[float]:
    """Per-PMU displacement between two consecutive records."""
    if prev is None:
        return [0.0] * len(cur.samples)
    return [phase_delta(c.phi, p.phi) for p, c in zip(prev.samples, cur.samples)]
