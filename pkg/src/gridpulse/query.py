"""Selection queries: text grammar, planning, and both execution paths.

Grammar (leaves joined by ``and``/``or`` with parentheses):

    year = 2012
    minute in [5, 7)
    pmu1.v = 533
    pmu3.phi in [-40, 10)
    pmu0.delta >= 2
    date in [2013-06-24T21:05, 2013-06-24T21:06)

Date-literal ranges decompose into the per-field date bins (whole-minute
ranges become five-way conjunctions); all other leaves map directly onto
the bin layout.  The bitmap path prunes candidates through the index and
only then touches segment files; the linear path scans everything and is
the correctness oracle.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .archive import Archive, ReadStats, RowBlock, candidacy_filter
from .binning import time_fields
from .bitmap_index import Leaf, Node
from .domain import ValidationError

DATE_FIELDS = ("year", "month", "day", "hour", "minute", "second", "decisecond")
PMU_ATTRS = ("v", "phi", "delta")


class QuerySyntaxError(ValueError):
    """Query text failed to parse; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


# ----------------------------------------------------------------- predicate

@dataclass(frozen=True)
class DateEq:
    field: str
    value: int


@dataclass(frozen=True)
class DateRange:
    lo: datetime  # inclusive
    hi: datetime  # exclusive


@dataclass(frozen=True)
class DateFieldRange:
    field: str
    lo: int  # inclusive
    hi: int  # exclusive


@dataclass(frozen=True)
class PmuEq:
    pmu_id: int
    attr: str
    value: float


@dataclass(frozen=True)
class PmuRange:
    pmu_id: int
    attr: str
    lo: float  # inclusive
    hi: float  # exclusive


@dataclass(frozen=True)
class And:
    children: tuple


@dataclass(frozen=True)
class Or:
    children: tuple


Predicate = object  # any of the above


def predicate_text(p) -> str:
    """Render a predicate back to grammar text."""
    if isinstance(p, DateEq):
        return f"{p.field} = {p.value}"
    if isinstance(p, DateFieldRange):
        return f"{p.field} in [{p.lo}, {p.hi})"
    if isinstance(p, DateRange):
        return (f"date in [{p.lo.strftime('%Y-%m-%dT%H:%M:%S.%f')[:-3]}, "
                f"{p.hi.strftime('%Y-%m-%dT%H:%M:%S.%f')[:-3]})")
    if isinstance(p, PmuEq):
        return f"pmu{p.pmu_id}.{p.attr} = {_num(p.value)}"
    if isinstance(p, PmuRange):
        return f"pmu{p.pmu_id}.{p.attr} in [{_num(p.lo)}, {_num(p.hi)})"
    if isinstance(p, And):
        return " and ".join(_paren(c, p) for c in p.children)
    if isinstance(p, Or):
        return " or ".join(_paren(c, p) for c in p.children)
    raise ValidationError(f"unknown predicate node {p!r}")


def _num(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(int(x)) if float(x).is_integer() else repr(x)


def _paren(child, parent) -> str:
    text = predicate_text(child)
    if isinstance(parent, And) and isinstance(child, Or):
        return f"({text})"
    return text


# -------------------------------------------------------------------- parser

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<datetime>\d{4}-\d{2}-\d{2}T\d{2}:\d{2}(:\d{2}(\.\d{1,3})?)?Z?)
  | (?P<number>-?(\d+\.\d*|\.\d+|\d+|inf)|-inf)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*(\.[A-Za-z_]+)?)
  | (?P<op><=|>=|=|<|>)
  | (?P<punct>[\[\](),])
""", re.VERBOSE)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None, value=None):
        tok = self.tokens[self.i]
        if kind and tok[0] != kind or value and tok[1] != value:
            expected = value or kind
            raise QuerySyntaxError(
                f"expected {expected!r}, found {tok[1]!r}", tok[2])
        self.i += 1
        return tok

    def parse(self):
        expr = self.parse_or()
        tok = self.peek()
        if tok[0] != "eof":
            raise QuerySyntaxError(f"unexpected trailing {tok[1]!r}", tok[2])
        return expr

    def parse_or(self):
        children = [self.parse_and()]
        while self.peek()[:2] == ("name", "or"):
            self.take()
            children.append(self.parse_and())
        return children[0] if len(children) == 1 else Or(tuple(children))

    def parse_and(self):
        children = [self.parse_factor()]
        while self.peek()[:2] == ("name", "and"):
            self.take()
            children.append(self.parse_factor())
        return children[0] if len(children) == 1 else And(tuple(children))

    def parse_factor(self):
        tok = self.peek()
        if tok[:2] == ("punct", "("):
            self.take()
            expr = self.parse_or()
            self.take("punct", ")")
            return expr
        return self.parse_leaf()

    def parse_leaf(self):
        kind, name, offset = self.take("name")
        if name == "date":
            return self._date_leaf(offset)
        if name in DATE_FIELDS:
            return self._field_leaf(name, offset, is_date=True)
        m = re.fullmatch(r"pmu(\d+)\.(\w+)", name)
        if m:
            pmu_id, attr = int(m.group(1)), m.group(2)
            if attr not in PMU_ATTRS:
                raise QuerySyntaxError(
                    f"unknown PMU attribute {attr!r} (use v, phi or delta)", offset)
            return self._field_leaf((pmu_id, attr), offset, is_date=False)
        raise QuerySyntaxError(f"unknown field {name!r}", offset)

    def _date_leaf(self, offset):
        self.take("name", "in")
        self.take("punct", "[")
        lo = self._datetime_value()
        self.take("punct", ",")
        hi = self._datetime_value()
        self.take("punct", ")")
        if lo >= hi:
            raise QuerySyntaxError("empty date range", offset)
        return DateRange(lo, hi)

    def _datetime_value(self):
        kind, text, offset = self.take("datetime")
        raw = text[:-1] if text.endswith("Z") else text
        dt = datetime.fromisoformat(raw).replace(tzinfo=timezone.utc)
        if dt.microsecond % 100_000:
            raise QuerySyntaxError(
                "date bounds support 100 ms resolution at finest", offset)
        return dt

    def _field_leaf(self, field_key, offset, is_date: bool):
        tok = self.peek()
        if tok[:2] == ("name", "in"):
            self.take()
            self.take("punct", "[")
            lo = self._number()
            self.take("punct", ",")
            hi = self._number()
            self.take("punct", ")")
            if lo >= hi:
                raise QuerySyntaxError("empty range", offset)
            return self._make_range(field_key, lo, hi, is_date)
        op = self.take("op")[1]
        value = self._number()
        if op == "=":
            if is_date:
                return DateEq(field_key, int(value))
            return PmuEq(field_key[0], field_key[1], value)
        bounds = {"<": (-math.inf, value), "<=": (-math.inf, _next_up(value)),
                  ">=": (value, math.inf), ">": (_next_up(value), math.inf)}
        lo, hi = bounds[op]
        return self._make_range(field_key, lo, hi, is_date)

    def _make_range(self, field_key, lo, hi, is_date):
        if is_date:
            ilo = max(int(math.ceil(lo)), -(10 ** 9)) if not math.isinf(lo) else -(10 ** 9)
            ihi = min(int(math.ceil(hi)), 10 ** 9) if not math.isinf(hi) else 10 ** 9
            return DateFieldRange(field_key, ilo, ihi)
        return PmuRange(field_key[0], field_key[1], lo, hi)

    def _number(self) -> float:
        kind, text, offset = self.take("number")
        return float(text)


def _next_up(value: float) -> float:
    """Smallest representable float above value (for <=/> on reals).

    Integer comparisons on date fields round through ceil, so this only
    matters for PMU attributes.
    """
    return math.nextafter(value, math.inf)


def parse(text: str):
    """Parse query text into a predicate tree."""
    if not text or not text.strip():
        raise QuerySyntaxError("empty query", 0)
    return _Parser(text).parse()


# ---------------------------------------------------------- calendar planner

_FIELD_MIN = {"month": 1, "day": 1, "hour": 0, "minute": 0, "second": 0,
              "decisecond": 0}


def _block_start(ts: datetime, level: int) -> bool:
    """Is ts the first instant of its level-sized calendar block?"""
    finer = DATE_FIELDS[level + 1:]
    values = {"month": ts.month, "day": ts.day, "hour": ts.hour,
              "minute": ts.minute, "second": ts.second,
              "decisecond": ts.microsecond // 100_000}
    return all(values[f] == _FIELD_MIN[f] for f in finer)


def _block_end(ts: datetime, level: int) -> datetime:
    fld = DATE_FIELDS[level]
    if fld == "year":
        return ts.replace(year=ts.year + 1)
    if fld == "month":
        if ts.month == 12:
            return ts.replace(year=ts.year + 1, month=1)
        return ts.replace(month=ts.month + 1)
    step = {"day": timedelta(days=1), "hour": timedelta(hours=1),
            "minute": timedelta(minutes=1), "second": timedelta(seconds=1),
            "decisecond": timedelta(milliseconds=100)}[fld]
    return ts + step


def _term_fields(ts: datetime, level: int) -> list[tuple[str, int]]:
    values = {"year": ts.year, "month": ts.month, "day": ts.day,
              "hour": ts.hour, "minute": ts.minute, "second": ts.second,
              "decisecond": ts.microsecond // 100_000}
    return [(f, values[f]) for f in DATE_FIELDS[:level + 1]]


def date_range_terms(lo: datetime, hi: datetime) -> list[list[tuple[str, int]]]:
    """Cover [lo, hi) with maximal calendar-aligned blocks.

    Each term is a list of (field, value) equalities from year down to the
    block's granularity.
    """
    terms = []
    t = lo
    while t < hi:
        for level in range(len(DATE_FIELDS)):
            if _block_start(t, level) and _block_end(t, level) <= hi:
                terms.append(_term_fields(t, level))
                t = _block_end(t, level)
                break
        else:
            raise ValidationError(
                f"date range endpoint {t.isoformat()} not at 100 ms resolution")
    return terms


def _merge_terms(terms: list[list[tuple[str, int]]]):
    """Fuse consecutive same-depth terms differing only in the last value
    into a range over that field, to keep the OR fan-in small."""
    merged = []
    for term in terms:
        if merged:
            prev_prefix, prev_field, prev_lo, prev_hi = merged[-1]
            if (len(term) - 1 == len(prev_prefix) and prev_field == term[-1][0]
                    and term[:-1] == prev_prefix and term[-1][1] == prev_hi):
                merged[-1] = (prev_prefix, prev_field, prev_lo, prev_hi + 1)
                continue
        merged.append((term[:-1], term[-1][0], term[-1][1], term[-1][1] + 1))
    return merged


def plan(predicate) -> object:
    """Translate a predicate tree into index bin algebra (Leaf/Node)."""
    if isinstance(predicate, DateEq):
        return Leaf.eq(predicate.field, predicate.value)
    if isinstance(predicate, DateFieldRange):
        return Leaf(predicate.field, predicate.lo, predicate.hi)
    if isinstance(predicate, PmuEq):
        return Leaf.eq(f"pmu{predicate.pmu_id}.{predicate.attr}", predicate.value)
    if isinstance(predicate, PmuRange):
        return Leaf(f"pmu{predicate.pmu_id}.{predicate.attr}",
                    predicate.lo, predicate.hi)
    if isinstance(predicate, DateRange):
        parts = []
        for prefix, fld, lo, hi in _merge_terms(date_range_terms(predicate.lo,
                                                                 predicate.hi)):
            leaves = [Leaf.eq(f, v) for f, v in prefix]
            leaves.append(Leaf(fld, lo, hi) if hi - lo > 1 else Leaf.eq(fld, lo))
            parts.append(leaves[0] if len(leaves) == 1 else Node("and", tuple(leaves)))
        return parts[0] if len(parts) == 1 else Node("or", tuple(parts))
    if isinstance(predicate, And):
        return Node("and", tuple(plan(c) for c in predicate.children))
    if isinstance(predicate, Or):
        return Node("or", tuple(plan(c) for c in predicate.children))
    raise ValidationError(f"unknown predicate node {predicate!r}")


# ----------------------------------------------------------------- row masks

def block_mask(predicate, block: RowBlock) -> np.ndarray:
    """Evaluate the original (pre-binning) predicate exactly on a block."""
    fields_cache: dict = {}

    def fields():
        if not fields_cache:
            fields_cache.update(time_fields(block.ts_ms))
        return fields_cache

    def rec(p) -> np.ndarray:
        if isinstance(p, DateEq):
            return fields()[p.field] == p.value
        if isinstance(p, DateFieldRange):
            f = fields()[p.field]
            return (f >= p.lo) & (f < p.hi)
        if isinstance(p, DateRange):
            lo = int(p.lo.timestamp() * 1000)
            hi = int(p.hi.timestamp() * 1000)
            return (block.ts_ms >= lo) & (block.ts_ms < hi)
        if isinstance(p, PmuEq):
            return _column(p.attr, p.pmu_id) == p.value
        if isinstance(p, PmuRange):
            col = _column(p.attr, p.pmu_id)
            return (col >= p.lo) & (col < p.hi)
        if isinstance(p, And):
            out = rec(p.children[0])
            for c in p.children[1:]:
                out &= rec(c)
            return out
        if isinstance(p, Or):
            out = rec(p.children[0])
            for c in p.children[1:]:
                out |= rec(c)
            return out
        raise ValidationError(f"unknown predicate node {p!r}")

    def _column(attr, pmu_id):
        return {"v": block.v, "phi": block.phi, "delta": block.delta}[attr][:, pmu_id]

    return rec(predicate)


def validate_predicate(predicate, pmu_count: int) -> None:
    """Reject references to PMUs the archive does not have."""
    if isinstance(predicate, (PmuEq, PmuRange)):
        if not (0 <= predicate.pmu_id < pmu_count):
            raise ValidationError(
                f"pmu{predicate.pmu_id} does not exist (archive has "
                f"{pmu_count} PMUs)")
    elif isinstance(predicate, (And, Or)):
        for c in predicate.children:
            validate_predicate(c, pmu_count)


# ------------------------------------------------------------------- execute

@dataclass
class QueryReport:
    """What one query execution did and what it cost."""

    query: str
    path: str                 # "bitmap" | "linear"
    candidate_count: int
    returned_count: int
    wall_ms: float
    bytes_read: int

    def as_dict(self) -> dict:
        return {"query": self.query, "path": self.path,
                "candidates": self.candidate_count,
                "returned": self.returned_count,
                "wall_ms": round(self.wall_ms, 3),
                "bytes_read": self.bytes_read}


def execute_bitmap(archive: Archive, predicate) -> tuple[RowBlock, QueryReport]:
    """Index path: evaluate bins, fetch candidates, candidacy-check."""
    validate_predicate(predicate, archive.config.pmu_count)
    stats = ReadStats()
    t0 = time.perf_counter()
    result = archive.index.evaluate(plan(predicate))
    if result.hit_count == 0:
        block = RowBlock.empty(archive.config.pmu_count)
    else:
        block = archive.fetch(result, stats)
        if not result.exact:
            block = candidacy_filter(block, lambda b: block_mask(predicate, b))
    wall = (time.perf_counter() - t0) * 1000
    return block, QueryReport(predicate_text(predicate), "bitmap",
                              result.hit_count, len(block), wall,
                              stats.bytes_read)


def execute_linear(archive: Archive, predicate) -> tuple[RowBlock, QueryReport]:
    """Baseline path: scan every row, evaluate the predicate directly."""
    validate_predicate(predicate, archive.config.pmu_count)
    stats = ReadStats()
    t0 = time.perf_counter()
    parts = []
    for block in archive.iter_blocks(stats=stats):
        mask = block_mask(predicate, block)
        if mask.any():
            parts.append(block.select(mask))
    out = RowBlock.concat(parts, archive.config.pmu_count)
    wall = (time.perf_counter() - t0) * 1000
    return out, QueryReport(predicate_text(predicate), "linear",
                            archive.m, len(out), wall, stats.bytes_read)


def execute(archive: Archive, text: str, path: str = "bitmap"):
    predicate = parse(text)
    if path == "linear":
        return execute_linear(archive, predicate)
    return execute_bitmap(archive, predicate)


# ----------------------------------------------------------------- benchmark

@dataclass
class BenchRow:
    query_id: str
    query: str
    bitmap_ms: float          # median
    linear_ms: float          # median
    speedup: float
    records: int
    bitmap_cold_ms: float | None = None
    linear_cold_ms: float | None = None

    def as_dict(self) -> dict:
        d = {"query_id": self.query_id, "query": self.query,
             "bitmap_ms": round(self.bitmap_ms, 3),
             "linear_ms": round(self.linear_ms, 3),
             "speedup": round(self.speedup, 2), "records": self.records}
        if self.bitmap_cold_ms is not None:
            d["bitmap_cold_ms"] = round(self.bitmap_cold_ms, 3)
            d["linear_cold_ms"] = round(self.linear_cold_ms, 3)
        return d


def _drop_page_cache() -> bool:
    """Best effort; needs a writable /proc/sys/vm/drop_caches."""
    try:
        with open("/proc/sys/vm/drop_caches", "w") as f:
            f.write("3\n")
        return True
    except OSError:
        return False


def bench(archive: Archive, queries: list[tuple[str, str]],
          repetitions: int = 3, drop_caches: bool = True) -> list[BenchRow]:
    """Time both paths for each (id, text) query.

    When the platform refuses to drop the page cache, the first (coldest)
    run is reported separately and the median is taken over the rest.
    """
    out = []
    for qid, text in queries:
        predicate = parse(text)
        can_drop = drop_caches and _drop_page_cache()
        bitmap_times, linear_times = [], []
        records = None
        for _ in range(repetitions):
            if can_drop:
                _drop_page_cache()
            rows, rep = execute_bitmap(archive, predicate)
            bitmap_times.append(rep.wall_ms)
            if records is None:
                records = len(rows)
            elif records != len(rows):
                raise RuntimeError(f"query {qid} unstable between runs")
            if can_drop:
                _drop_page_cache()
            _, rep = execute_linear(archive, predicate)
            linear_times.append(rep.wall_ms)
        if can_drop or repetitions == 1:
            b_med = float(np.median(bitmap_times))
            l_med = float(np.median(linear_times))
            cold_b = cold_l = None
        else:
            cold_b, cold_l = bitmap_times[0], linear_times[0]
            b_med = float(np.median(bitmap_times[1:]))
            l_med = float(np.median(linear_times[1:]))
        out.append(BenchRow(qid, text, b_med, l_med,
                            l_med / b_med if b_med > 0 else math.inf,
                            records, cold_b, cold_l))
    return out


def bench_csv(rows: list[BenchRow]) -> str:
    lines = ["query_id,path,median_ms,records,speedup"]
    for r in rows:
        lines.append(f"{r.query_id},bitmap,{r.bitmap_ms:.3f},{r.records},{r.speedup:.2f}")
        lines.append(f"{r.query_id},linear,{r.linear_ms:.3f},{r.records},1.00")
    return "\n".join(lines) + "\n"


def table2_suite(day: str = "2013-06-24", pmu: int = 1,
                 value: float = 533.0, absent_year: int = 2012) -> list[tuple[str, str]]:
    """The six query shapes of the reference performance table, retargeted
    at synthetic timestamps."""
    return [
        ("q1_value", f"pmu{pmu}.v = {_num(value)}"),
        ("q2_minute", f"date in [{day}T21:05, {day}T21:06)"),
        ("q3_minute", f"date in [{day}T21:06, {day}T21:07)"),
        ("q4_minute", f"date in [{day}T21:07, {day}T21:08)"),
        ("q5_minute_value",
         f"date in [{day}T21:06, {day}T21:07) and pmu{pmu}.v = {_num(value)}"),
        ("q6_year", f"year = {absent_year}"),
    ]
