"""Bin layout: how record attributes discretize into index columns.

The default layout gives every archived row 4,988 bins: 208 date-time bins
(year 11, month 12, day 31, hour 24, minute 60, second 60, decisecond 10)
plus, per PMU, 36 phase bins, 23 voltage bins and 180 phase-displacement
bins.  Each attribute's bins partition its domain, so a row sets exactly
one bit per attribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import ValidationError, YEAR_SPAN

MS_PER_DAY = 86_400_000

PHASE_LO, PHASE_HI = -180.0, 180.0
DELTA_LO, DELTA_HI = 0.0, 360.0

# default voltage scheme around the nominal operating band
V_BAND_LO, V_BAND_HI = 535.0, 545.0   # central bin, half-open
V_EDGE = 10                           # width-1 bins on each side of the band


def _check_finite(value: float, attr: str) -> None:
    if math.isnan(value):
        raise ValidationError(f"cannot bin NaN {attr} value")


class Attribute:
    """One binned attribute: a name, a bin count and the value->bin map."""

    name: str
    pmu_id: int | None
    n_bins: int

    def bin_of(self, value) -> int:
        raise NotImplementedError

    def bin_of_array(self, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bins_for_range(self, lo: float, hi: float) -> list[tuple[int, bool]]:
        """Local bins intersecting [lo, hi) as (bin, fully_covered) pairs."""
        raise NotImplementedError

    def bin_is_exact(self, local_bin: int) -> bool:
        """True when the bin holds a single value (no candidacy check)."""
        raise NotImplementedError


class IntAttribute(Attribute):
    """Exact integer-valued attribute: one bin per value in [lo, hi]."""

    def __init__(self, name: str, lo: int, hi: int):
        self.name = name
        self.pmu_id = None
        self.lo = lo
        self.hi = hi
        self.n_bins = hi - lo + 1

    def bin_of(self, value) -> int:
        value = int(value)
        if not (self.lo <= value <= self.hi):
            raise ValidationError(
                f"{self.name} value {value} outside [{self.lo}, {self.hi}]")
        return value - self.lo

    def bin_of_array(self, values: np.ndarray) -> np.ndarray:
        out = np.asarray(values, dtype=np.int64) - self.lo
        if out.size and (out.min() < 0 or out.max() >= self.n_bins):
            raise ValidationError(f"{self.name} values outside bin domain")
        return out

    def bins_for_range(self, lo, hi) -> list[tuple[int, bool]]:
        first = max(self.lo, math.ceil(lo))
        last = min(self.hi, math.ceil(hi) - 1)
        return [(v - self.lo, True) for v in range(first, last + 1)]

    def bin_is_exact(self, local_bin: int) -> bool:
        return True


class EqualWidthAttribute(Attribute):
    """Equal-width bins over a half-open real interval [lo, hi)."""

    def __init__(self, name: str, pmu_id: int, lo: float, hi: float, width: float):
        self.name = name
        self.pmu_id = pmu_id
        self.lo = lo
        self.hi = hi
        self.width = width
        self.n_bins = int(round((hi - lo) / width))
        if not math.isclose(self.n_bins * width, hi - lo):
            raise ValidationError(
                f"{name}: width {width} does not evenly divide [{lo}, {hi})")

    def bin_of(self, value) -> int:
        _check_finite(value, self.name)
        if not (self.lo <= value < self.hi):
            raise ValidationError(
                f"{self.name} value {value} outside [{self.lo}, {self.hi})")
        return min(int((value - self.lo) / self.width), self.n_bins - 1)

    def bin_of_array(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if np.isnan(values).any():
            raise ValidationError(f"cannot bin NaN {self.name} value")
        out = ((values - self.lo) / self.width).astype(np.int64)
        np.clip(out, 0, self.n_bins - 1, out=out)
        return out

    def bins_for_range(self, lo, hi) -> list[tuple[int, bool]]:
        lo = max(lo, self.lo)
        hi = min(hi, self.hi)
        if lo >= hi:
            return []
        first = int((lo - self.lo) / self.width)
        last = min(int(math.ceil((hi - self.lo) / self.width)) - 1, self.n_bins - 1)
        out = []
        for b in range(first, last + 1):
            b_lo = self.lo + b * self.width
            b_hi = b_lo + self.width
            out.append((b, lo <= b_lo and b_hi <= hi))
        return out

    def bin_is_exact(self, local_bin: int) -> bool:
        return False


class VoltageAttribute(Attribute):
    """Skewed voltage bins: zero bin, width-1 edge bins, a wide central
    band, and one catch-all for everything else.

    Bin order: 0 = exact zero; 1..E = width-1 bins below the band;
    E+1 = central band; E+2..2E+1 = width-1 bins above; 2E+2 = other.
    """

    def __init__(self, name: str, pmu_id: int,
                 band_lo: float = V_BAND_LO, band_hi: float = V_BAND_HI,
                 edge_bins: int = V_EDGE):
        self.name = name
        self.pmu_id = pmu_id
        self.band_lo = band_lo
        self.band_hi = band_hi
        self.edge = edge_bins
        self.low_start = band_lo - edge_bins   # width-1 bins cover [low_start, band_lo)
        self.high_end = band_hi + edge_bins    # and [band_hi, high_end)
        self.n_bins = 2 * edge_bins + 3
        self.central_bin = edge_bins + 1
        self.other_bin = self.n_bins - 1

    def bin_of(self, value) -> int:
        _check_finite(value, self.name)
        if value == 0.0:
            return 0
        if self.low_start <= value < self.band_lo:
            return 1 + int(value - self.low_start)
        if self.band_lo <= value < self.band_hi:
            return self.central_bin
        if self.band_hi <= value < self.high_end:
            return self.central_bin + 1 + int(value - self.band_hi)
        return self.other_bin

    def bin_of_array(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if np.isnan(values).any():
            raise ValidationError(f"cannot bin NaN {self.name} value")
        out = np.full(values.shape, self.other_bin, dtype=np.int64)
        low = (values >= self.low_start) & (values < self.band_lo)
        out[low] = 1 + (values[low] - self.low_start).astype(np.int64)
        mid = (values >= self.band_lo) & (values < self.band_hi)
        out[mid] = self.central_bin
        high = (values >= self.band_hi) & (values < self.high_end)
        out[high] = self.central_bin + 1 + (values[high] - self.band_hi).astype(np.int64)
        out[values == 0.0] = 0
        return out

    def _intervals(self) -> list[tuple[int, float, float]]:
        """Bin id with its half-open interval, skipping zero and other."""
        out = []
        for k in range(self.edge):
            out.append((1 + k, self.low_start + k, self.low_start + k + 1))
        out.append((self.central_bin, self.band_lo, self.band_hi))
        for k in range(self.edge):
            out.append((self.central_bin + 1 + k,
                        self.band_hi + k, self.band_hi + k + 1))
        return out

    def bins_for_range(self, lo, hi) -> list[tuple[int, bool]]:
        if lo >= hi:
            return []
        out = []
        if lo <= 0.0 < hi:
            out.append((0, True))  # single-valued: touching it covers it
        for b, b_lo, b_hi in self._intervals():
            if b_lo < hi and lo < b_hi:
                out.append((b, lo <= b_lo and b_hi <= hi))
        # catch-all spans (0, low_start) and [high_end, inf)
        if (lo < self.low_start and hi > 0.0) or hi > self.high_end:
            covered = lo <= 0.0 and hi == math.inf
            out.append((self.other_bin, covered))
        return out

    def bin_is_exact(self, local_bin: int) -> bool:
        return local_bin == 0


DATE_FIELDS = ("year", "month", "day", "hour", "minute", "second", "decisecond")
PMU_FIELDS = ("phi", "v", "delta")


@dataclass(frozen=True)
class BinLayoutConfig:
    pmu_count: int = 20
    phase_bin_width: float = 10.0
    delta_bin_width: float = 2.0
    v_band: tuple[float, float] = (V_BAND_LO, V_BAND_HI)
    v_edge_bins: int = V_EDGE


class BinLayout:
    """The ordered catalog of all binned attributes and their offsets."""

    def __init__(self, config: BinLayoutConfig | None = None):
        self.config = config or BinLayoutConfig()
        cfg = self.config
        year_lo, year_hi = YEAR_SPAN
        attrs: list[Attribute] = [
            IntAttribute("year", year_lo, year_hi),
            IntAttribute("month", 1, 12),
            IntAttribute("day", 1, 31),
            IntAttribute("hour", 0, 23),
            IntAttribute("minute", 0, 59),
            IntAttribute("second", 0, 59),
            IntAttribute("decisecond", 0, 9),
        ]
        for p in range(cfg.pmu_count):
            attrs.append(EqualWidthAttribute(
                f"pmu{p}.phi", p, PHASE_LO, PHASE_HI, cfg.phase_bin_width))
            attrs.append(VoltageAttribute(
                f"pmu{p}.v", p, cfg.v_band[0], cfg.v_band[1], cfg.v_edge_bins))
            attrs.append(EqualWidthAttribute(
                f"pmu{p}.delta", p, DELTA_LO, DELTA_HI, cfg.delta_bin_width))
        self.attributes = attrs
        self._by_name = {a.name: i for i, a in enumerate(attrs)}
        self.offsets = []
        total = 0
        for a in attrs:
            self.offsets.append(total)
            total += a.n_bins
        self.total_bins = total

    @property
    def pmu_count(self) -> int:
        return self.config.pmu_count

    def attr_index(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValidationError(f"unknown attribute {name!r}") from None

    def attribute(self, name: str) -> Attribute:
        return self.attributes[self.attr_index(name)]

    def global_bin(self, name: str, value) -> int:
        """Global bin index for a value of the named attribute."""
        i = self.attr_index(name)
        return self.offsets[i] + self.attributes[i].bin_of(value)

    def global_bins_for_range(self, name: str, lo, hi) -> list[tuple[int, bool]]:
        i = self.attr_index(name)
        off = self.offsets[i]
        return [(off + b, cov) for b, cov in self.attributes[i].bins_for_range(lo, hi)]

    def to_dict(self) -> dict:
        c = self.config
        return {
            "pmu_count": c.pmu_count,
            "phase_bin_width": c.phase_bin_width,
            "delta_bin_width": c.delta_bin_width,
            "v_band": list(c.v_band),
            "v_edge_bins": c.v_edge_bins,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinLayout":
        return cls(BinLayoutConfig(
            pmu_count=int(d["pmu_count"]),
            phase_bin_width=float(d["phase_bin_width"]),
            delta_bin_width=float(d["delta_bin_width"]),
            v_band=(float(d["v_band"][0]), float(d["v_band"][1])),
            v_edge_bins=int(d["v_edge_bins"]),
        ))

    def __eq__(self, other):
        return isinstance(other, BinLayout) and self.to_dict() == other.to_dict()


def time_fields(ts_ms: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorized decomposition of epoch-millisecond timestamps (UTC)."""
    ts_ms = np.asarray(ts_ms, dtype=np.int64)
    days = ts_ms // MS_PER_DAY
    ms_of_day = ts_ms - days * MS_PER_DAY
    d = days.astype("M8[D]")
    m = d.astype("M8[M]")
    y = d.astype("M8[Y]")
    return {
        "year": y.astype(np.int64) + 1970,
        "month": (m - y).astype(np.int64) + 1,
        "day": (d - m).astype(np.int64) + 1,
        "hour": ms_of_day // 3_600_000,
        "minute": (ms_of_day // 60_000) % 60,
        "second": (ms_of_day // 1000) % 60,
        "decisecond": (ms_of_day % 1000) // 100,
    }
