from datetime import datetime, timezone

import numpy as np
import pytest

from gridpulse.binning import BinLayout, BinLayoutConfig, time_fields
from gridpulse.bitmap_index import (
    BitmapIndex,
    DeltaTracker,
    IndexFormatError,
    IndexStateError,
    Leaf,
    Node,
)
from gridpulse.domain import FrameRecord, PhasorSample, ValidationError
from gridpulse.wah import wah_or


def utc_ms(*args):
    return int(datetime(*args, tzinfo=timezone.utc).timestamp() * 1000)


@pytest.fixture(scope="module")
def layout():
    return BinLayout()


class TestLayout:
    def test_default_totals(self, layout):
        assert layout.total_bins == 4988
        assert len(layout.attributes) == 7 + 3 * 20

    def test_date_bin_counts(self, layout):
        counts = {a.name: a.n_bins for a in layout.attributes[:7]}
        assert counts == {"year": 11, "month": 12, "day": 31, "hour": 24,
                          "minute": 60, "second": 60, "decisecond": 10}

    def test_pmu_bin_counts(self, layout):
        assert layout.attribute("pmu0.phi").n_bins == 36
        assert layout.attribute("pmu0.v").n_bins == 23
        assert layout.attribute("pmu0.delta").n_bins == 180

    def test_voltage_examples(self, layout):
        v = layout.attribute("pmu0.v")
        assert v.bin_of(540.0) == v.central_bin
        assert v.bin_of(0.0) == 0
        assert v.bin_of(533.0) == v.bin_of(533.9)
        assert v.bin_of(533.0) != v.bin_of(534.0)
        assert v.bin_of(100.0) == v.bin_of(999.0) == v.other_bin

    def test_phase_examples(self, layout):
        phi = layout.attribute("pmu0.phi")
        assert phi.bin_of(-180.0) == 0
        assert phi.bin_of(0.0) == 18
        assert phi.bin_of(179.999) == 35

    def test_nan_rejected(self, layout):
        with pytest.raises(ValidationError):
            layout.attribute("pmu0.v").bin_of(float("nan"))

    @pytest.mark.parametrize("attr,values", [
        ("pmu0.v", [0.0, 1e-9, 100.0, 524.999, 525.0, 533.0, 534.999, 535.0,
                    540.0, 544.999, 545.0, 554.999, 555.0, 1e6]),
        ("pmu0.phi", [-180.0, -0.001, 0.0, 10.0, 179.999]),
        ("pmu0.delta", [0.0, 1.999, 2.0, 359.999]),
    ])
    def test_partition_every_value_one_bin(self, layout, attr, values):
        a = layout.attribute(attr)
        for v in values:
            b = a.bin_of(v)
            assert 0 <= b < a.n_bins
            # vectorized agrees with scalar
            assert a.bin_of_array(np.array([v]))[0] == b

    def test_scalar_matches_vectorized_randomly(self, layout):
        rng = np.random.default_rng(5)
        v = layout.attribute("pmu3.v")
        values = np.concatenate([rng.uniform(0, 1200, 500), [0.0, 535.0, 545.0]])
        vec = v.bin_of_array(values)
        assert [v.bin_of(x) for x in values] == vec.tolist()

    def test_range_bins_cover_intersections(self, layout):
        phi = layout.attribute("pmu0.phi")
        pairs = phi.bins_for_range(-180.0, -120.0)
        assert [b for b, _ in pairs] == [0, 1, 2, 3, 4, 5]
        assert all(cov for _, cov in pairs)
        pairs = phi.bins_for_range(-175.0, -120.0)
        assert pairs[0] == (0, False)

    def test_voltage_range_touches_other_and_zero(self, layout):
        v = layout.attribute("pmu0.v")
        pairs = dict(v.bins_for_range(0.0, 530.0))
        assert pairs[0] is True            # zero bin, single-valued
        assert v.other_bin in pairs and pairs[v.other_bin] is False
        full = dict(v.bins_for_range(0.0, float("inf")))
        assert full[v.other_bin] is True

    def test_serialization_roundtrip(self, layout):
        assert BinLayout.from_dict(layout.to_dict()) == layout

    def test_small_layout(self):
        small = BinLayout(BinLayoutConfig(pmu_count=3))
        assert small.total_bins == 208 + 3 * 239


class TestTimeFields:
    def test_matches_datetime(self):
        stamps = [utc_ms(2013, 6, 24, 21, 5, 0) + 167,
                  utc_ms(2010, 1, 1, 0, 0, 0),
                  utc_ms(2020, 12, 31, 23, 59, 59) + 999]
        fields = time_fields(np.array(stamps))
        assert fields["year"].tolist() == [2013, 2010, 2020]
        assert fields["month"].tolist() == [6, 1, 12]
        assert fields["day"].tolist() == [24, 1, 31]
        assert fields["hour"].tolist() == [21, 0, 23]
        assert fields["minute"].tolist() == [5, 0, 59]
        assert fields["second"].tolist() == [0, 0, 59]
        assert fields["decisecond"].tolist() == [1, 0, 9]


def make_frame(ts_ms, v_phi, pmu_count=3):
    ts = datetime.fromtimestamp(ts_ms / 1000, tz=timezone.utc)
    samples = tuple(PhasorSample(i, v, phi) for i, (v, phi) in enumerate(v_phi))
    assert len(samples) == pmu_count
    return FrameRecord(ts, samples)


@pytest.fixture()
def small_index():
    return BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=3)))


class TestAppend:
    def test_first_row(self, small_index):
        tracker = DeltaTracker(3)
        row = small_index.append_row(
            make_frame(utc_ms(2013, 6, 24), [(540, 0), (541, 10), (539, -10)]),
            tracker)
        assert row == 0
        assert small_index.m == 1
        assert all(v.length == 1 for v in small_index.vectors)

    def test_bits_set_per_row(self, small_index):
        tracker = DeltaTracker(3)
        small_index.append_row(
            make_frame(utc_ms(2013, 6, 24), [(540, 0), (541, 10), (539, -10)]),
            tracker)
        set_bits = sum(v.count() for v in small_index.vectors)
        assert set_bits == 7 + 3 * 3  # one bit per attribute

    def test_identical_rows_compress(self, small_index):
        tracker = DeltaTracker(3)
        for k in range(100):
            small_index.append_row(
                make_frame(utc_ms(2013, 6, 24) + k * 17, [(540, 0), (541, 10), (539, -10)]),
                tracker)
        # voltage vector for the central bin is one fill word
        v_attr = small_index.layout.attribute("pmu0.v")
        g = small_index.layout.offsets[small_index.layout.attr_index("pmu0.v")]
        vec = small_index.vectors[g + v_attr.central_bin]
        assert vec.count() == 100
        assert len(vec.words) <= 2

    def test_block_equals_rows(self):
        rng = np.random.default_rng(11)
        n, p = 257, 3
        ts = utc_ms(2013, 6, 24) + np.arange(n, dtype=np.int64) * 17
        v = rng.uniform(520, 560, (n, p))
        phi = rng.uniform(-180, 180, (n, p))

        by_block = BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=p)))
        by_block.append_block(ts, v, phi, DeltaTracker(p))

        by_rows = BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=p)))
        tracker = DeltaTracker(p)
        for i in range(n):
            by_rows.append_row(
                make_frame(int(ts[i]), list(zip(v[i], phi[i]))), tracker)
        assert by_block.structurally_equal(by_rows)

    def test_delta_tracker_first_row_zero(self):
        tracker = DeltaTracker(2)
        d = tracker.deltas_for(np.array([[10.0, -10.0], [12.5, -14.0]]))
        assert d[0].tolist() == [0.0, 0.0]
        assert d[1].tolist() == [2.5, 4.0]
        d2 = tracker.deltas_for(np.array([[13.0, -15.0]]))
        assert d2[0].tolist() == [0.5, 1.0]

    def test_closed_index_rejects_append(self, small_index):
        small_index.close()
        with pytest.raises(IndexStateError):
            small_index.append_row(
                make_frame(utc_ms(2013, 1, 1), [(540, 0), (540, 0), (540, 0)]),
                DeltaTracker(3))

    def test_attribute_or_is_all_ones(self, small_index):
        tracker = DeltaTracker(3)
        rng = np.random.default_rng(2)
        n = 300
        ts = utc_ms(2013, 6, 24) + np.arange(n, dtype=np.int64) * 17
        small_index.append_block(ts, rng.uniform(0, 900, (n, 3)),
                                 rng.uniform(-180, 180, (n, 3)), tracker)
        layout = small_index.layout
        for i, attr in enumerate(layout.attributes):
            off = layout.offsets[i]
            acc = small_index.vectors[off]
            for b in range(1, attr.n_bins):
                acc = wah_or(acc, small_index.vectors[off + b])
            assert acc.count() == n, attr.name


class TestEvaluate:
    @pytest.fixture()
    def filled(self):
        idx = BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=3)))
        n = 3600
        ts = utc_ms(2013, 6, 24, 21, 5, 0) + (np.arange(n, dtype=np.int64) * 1000) // 60
        rng = np.random.default_rng(0)
        v = rng.uniform(536, 544, (n, 3))
        v[:100, 0] = 533.25
        phi = rng.uniform(-20, 20, (n, 3))
        idx.append_block(ts, v, phi, DeltaTracker(3))
        return idx, ts, v, phi

    def test_absent_year_is_empty_and_exact(self, filled):
        idx, *_ = filled
        res = idx.evaluate(Leaf.eq("year", 2012))
        assert res.hit_count == 0 and res.exact

    def test_full_minute_conjunction(self, filled):
        idx, ts, *_ = filled
        expr = Node("and", (Leaf.eq("year", 2013), Leaf.eq("month", 6),
                            Leaf.eq("day", 24), Leaf.eq("hour", 21),
                            Leaf.eq("minute", 5)))
        res = idx.evaluate(expr)
        assert res.hit_count == 3600 and res.exact

    def test_value_equality_needs_candidacy(self, filled):
        idx, *_ = filled
        res = idx.evaluate(Leaf.eq("pmu0.v", 533.25))
        assert res.hit_count == 100
        assert not res.exact  # width-1 bin spans a real interval

    def test_zero_bin_is_exact(self, filled):
        idx, *_ = filled
        res = idx.evaluate(Leaf.eq("pmu0.v", 0.0))
        assert res.hit_count == 0 and res.exact

    def test_range_leaf_ors_bins(self, filled):
        idx, ts, v, phi = filled
        res = idx.evaluate(Leaf("pmu0.phi", -180.0, 0.0))
        assert res.hit_count == int((phi[:, 0] < 0).sum())
        assert res.exact  # bin edges align with the range

    def test_empty_node_rejected(self, filled):
        idx, *_ = filled
        with pytest.raises(ValidationError):
            idx.evaluate(Node("and", ()))


class TestSaveLoad:
    def test_empty_roundtrip(self, tmp_path):
        idx = BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=3)))
        idx.save(tmp_path / "idx.bmi")
        loaded = BitmapIndex.load(tmp_path / "idx.bmi")
        assert loaded.structurally_equal(idx)

    def test_filled_roundtrip_queries_agree(self, tmp_path):
        rng = np.random.default_rng(9)
        idx = BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=3)))
        n = 5000
        ts = utc_ms(2014, 2, 3) + np.arange(n, dtype=np.int64) * 17
        idx.append_block(ts, rng.uniform(500, 580, (n, 3)),
                         rng.uniform(-180, 180, (n, 3)), DeltaTracker(3))
        idx.save(tmp_path / "idx.bmi")
        loaded = BitmapIndex.load(tmp_path / "idx.bmi")
        assert loaded.structurally_equal(idx)
        expr = Node("or", (Leaf("pmu1.v", 520.0, 540.0), Leaf.eq("hour", 0)))
        assert loaded.evaluate(expr).hit_count == idx.evaluate(expr).hit_count

    def test_corrupt_header_rejected(self, tmp_path):
        idx = BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=3)))
        path = tmp_path / "idx.bmi"
        idx.save(path)
        data = bytearray(path.read_bytes())
        data[3] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(IndexFormatError):
            BitmapIndex.load(path)

    def test_truncation_rejected(self, tmp_path):
        rng = np.random.default_rng(1)
        idx = BitmapIndex(BinLayout(BinLayoutConfig(pmu_count=3)))
        n = 64
        ts = utc_ms(2014, 2, 3) + np.arange(n, dtype=np.int64) * 17
        idx.append_block(ts, rng.uniform(500, 580, (n, 3)),
                         rng.uniform(-180, 180, (n, 3)), DeltaTracker(3))
        path = tmp_path / "idx.bmi"
        idx.save(path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(IndexFormatError):
            BitmapIndex.load(path)
