import csv
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdua.ingest import (LOG_COLUMNS, CapacityError, ChargingRecord, ChargingSegment, OrderingError, ParseResult,
                         SchemaError, SegmentCapacityEstimate, aggregate_weekly, estimate_segment_capacity,
                         ingest_records, median_filter, parse_charging_log, read_weekly_csv, smooth_observed,
                         split_sessions, validate_segment, week_index, write_charging_log, write_weekly_csv)

from tests.oracles import naive_median


def rec(ts, soc=50.0, current=-50.0, vid="v1"):
    return ChargingRecord(vid, int(ts), current, 350.0, soc, 3.70, 3.65, 30.0, 28.0)


def segment(n, soc0, soc1, current=-50.0, dt=8, vid="v1", t0=0):
    socs = np.linspace(soc0, soc1, n)
    currents = np.broadcast_to(current, (n,))
    return ChargingSegment(vid, [rec(t0 + i * dt, s, c, vid) for i, (s, c) in enumerate(zip(socs, currents))])


class TestParse:
    def _write(self, path, rows):
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            w.writerows(rows)

    def test_three_rows(self, tmp_path):
        rows = [["v1", 8 * i, -50, 350, 20 + i, 3.7, 3.6, 30, 28] for i in range(3)]
        self._write(tmp_path / "a.csv", rows)
        res = parse_charging_log(tmp_path / "a.csv")
        assert len(res.records) == 3 and res.skipped == 0

    def test_corrupt_soc_is_tallied(self, tmp_path):
        rows = [["v1", 8 * i, -50, 350, 20 + i, 3.7, 3.6, 30, 28] for i in range(3)]
        rows[1][4] = "abc"
        self._write(tmp_path / "a.csv", rows)
        res = parse_charging_log(tmp_path / "a.csv")
        assert len(res.records) == 2 and res.skipped == 1 and res.row_errors[0][0] == 3

    def test_out_of_range_soc_and_bad_timestamp(self, tmp_path):
        rows = [["v1", 0, -50, 350, 120, 3.7, 3.6, 30, 28], ["v1", "noon", -50, 350, 20, 3.7, 3.6, 30, 28]]
        self._write(tmp_path / "a.csv", rows)
        res = parse_charging_log(tmp_path / "a.csv")
        assert res.records == [] and res.skipped == 2

    def test_header_only(self, tmp_path):
        self._write(tmp_path / "a.csv", [])
        res = parse_charging_log(tmp_path / "a.csv")
        assert res.records == [] and res.skipped == 0

    def test_missing_column(self, tmp_path):
        (tmp_path / "a.csv").write_text("vehicle_id,timestamp\nv1,0\n")
        with pytest.raises(SchemaError):
            parse_charging_log(tmp_path / "a.csv")

    def test_write_parse_round_trip(self, tmp_path):
        recs = [rec(8 * i, 20 + 0.1 * i, -48.25 + 0.001 * i) for i in range(50)]
        write_charging_log(tmp_path / "log.csv", recs)
        assert parse_charging_log(tmp_path / "log.csv").records == recs


class TestSplit:
    def test_regular_interval_is_one_segment(self):
        assert len(split_sessions([rec(8 * i) for i in range(200)])) == 1

    def test_long_gap_splits(self):
        recs = [rec(8 * i) for i in range(100)] + [rec(8 * 99 + 3600 + 8 * i) for i in range(100)]
        segs = split_sessions(recs)
        assert [len(s) for s in segs] == [100, 100]

    def test_gap_of_exactly_ten_keeps_session(self):
        assert len(split_sessions([rec(10 * i) for i in range(50)])) == 1
        assert len(split_sessions([rec(0), rec(11)])) == 2

    def test_unsorted_raises(self):
        with pytest.raises(OrderingError):
            split_sessions([rec(16), rec(8)])

    def test_vehicle_change_splits(self):
        segs = split_sessions([rec(0, vid="a"), rec(8, vid="a"), rec(16, vid="b")])
        assert [s.vehicle_id for s in segs] == ["a", "b"]

    @given(st.lists(st.integers(1, 30), min_size=1, max_size=200))
    @settings(max_examples=100, deadline=None)
    def test_partition_property(self, gaps):
        ts = np.cumsum([0] + gaps)
        recs = [rec(t) for t in ts]
        segs = split_sessions(recs)
        assert [r for s in segs for r in s.records] == recs
        assert len(segs) == 1 + sum(g > 10 for g in gaps)
        for s in segs:
            assert np.all(np.diff(s.column("timestamp")) <= 10)


class TestValidate:
    def test_valid(self):
        assert validate_segment(segment(150, 20, 70))

    def test_too_short(self):
        v = validate_segment(segment(80, 20, 70))
        assert not v and "short" in v.reason
        assert not validate_segment(segment(100, 20, 70))
        assert validate_segment(segment(101, 20, 70))

    def test_small_span(self):
        v = validate_segment(segment(150, 50, 52))
        assert not v and "span" in v.reason

    def test_backtrack_tolerance(self):
        seg = segment(150, 20, 70)
        recs = list(seg.records)
        recs[50] = rec(recs[50].timestamp, recs[49].soc - 0.4)
        assert validate_segment(ChargingSegment("v1", recs))
        recs[50] = rec(recs[50].timestamp, recs[49].soc - 2.0)
        v = validate_segment(ChargingSegment("v1", recs))
        assert not v and "monotone" in v.reason


class TestCapacity:
    def test_constant_current(self):
        est = estimate_segment_capacity(segment(450, 20, 70))
        assert est.capacity == pytest.approx(100.0, abs=1e-9)
        assert est.valid and est.soc_span == pytest.approx(0.5)

    def test_zero_span_raises(self):
        with pytest.raises(CapacityError):
            estimate_segment_capacity(segment(450, 20, 20.0))

    def test_piecewise_current(self):
        current = np.r_[np.full(225, -50.0), np.full(225, -25.0)]
        est = estimate_segment_capacity(segment(450, 20, 57.5, current=current))
        assert est.capacity == pytest.approx(100.0, abs=1e-9)

    @given(st.floats(-200, -1), st.integers(101, 800), st.floats(0, 40), st.floats(6, 60))
    @settings(max_examples=50, deadline=None)
    def test_constant_current_exact(self, current, n, soc0, span):
        est = estimate_segment_capacity(segment(n, soc0, soc0 + span, current=current))
        hours = n * 8 / 3600
        assert abs(est.capacity - (-current) * hours / (span / 100)) < 1e-9

    def test_week_index(self):
        assert week_index(604799, 0) == 0
        assert week_index(604800, 0) == 1
        est = estimate_segment_capacity(segment(150, 20, 70, t0=3 * 604800 + 5), epoch=0)
        assert est.week_index == 3


class TestWeekly:
    def test_mean_and_missing(self):
        ests = [SegmentCapacityEstimate("a", 0, 100.0, 0.5), SegmentCapacityEstimate("a", 0, 102.0, 0.5),
                SegmentCapacityEstimate("a", 2, 99.0, 0.5)]
        w = aggregate_weekly(ests)["a"]
        assert w.capacity[0] == 101.0 and np.isnan(w.capacity[1]) and w.capacity[2] == 99.0
        assert list(w.n_segments) == [2, 0, 1]

    def test_permutation_invariant(self):
        rng = random.Random(5)
        ests = [SegmentCapacityEstimate("a", rng.randrange(4), rng.uniform(90, 110), 0.5) for _ in range(40)]
        base = aggregate_weekly(ests)["a"].capacity
        for _ in range(10):
            rng.shuffle(ests)
            np.testing.assert_array_equal(aggregate_weekly(ests)["a"].capacity, base)

    def test_csv_round_trip(self, tmp_path):
        ests = [SegmentCapacityEstimate("a", 0, 100.0, 0.5), SegmentCapacityEstimate("a", 2, 99.5, 0.5)]
        weekly = aggregate_weekly(ests)
        write_weekly_csv(tmp_path / "w.csv", weekly)
        back = read_weekly_csv(tmp_path / "w.csv")
        np.testing.assert_array_equal(back["a"].capacity, weekly["a"].capacity)
        np.testing.assert_array_equal(back["a"].n_segments, weekly["a"].n_segments)

    def test_ingest_records_end_to_end(self):
        recs = segment(150, 20, 70).records + segment(150, 20, 70, t0=604800).records + segment(50, 20, 70,
                                                                                              t0=10**6).records
        res = ingest_records(ParseResult(recs))
        assert res.rejection_counts() == {"valid": 2, "too short": 1}
        np.testing.assert_allclose(res.weekly["v1"].capacity, [150 * 8 / 3600 * 50 / 0.5] * 2)


class TestMedianFilter:
    def test_examples(self):
        np.testing.assert_array_equal(median_filter([1, 9, 2], 3), [1, 2, 2])
        np.testing.assert_array_equal(median_filter(np.full(9, 4.2), 7), np.full(9, 4.2))

    def test_spike_in_ramp(self):
        x = np.arange(20.0)
        x[10] = 500.0
        y = median_filter(x, 5)
        assert y[10] < 12 and y[0] == 0.0 and y[-1] == 19.0

    @pytest.mark.parametrize("w", [0, 2, 4, -1, 11])
    def test_bad_window(self, w):
        with pytest.raises(ValueError):
            median_filter(np.arange(10.0), w)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=9, max_size=60), st.sampled_from([3, 5, 7, 9]))
    @settings(max_examples=200, deadline=None)
    def test_matches_naive(self, xs, w):
        y = median_filter(xs, w)
        assert list(y) == naive_median(xs, w)
        h = w // 2
        pad = np.pad(np.asarray(xs), h, mode="edge")
        for i in range(len(xs)):
            assert pad[i:i + w].min() <= y[i] <= pad[i:i + w].max()

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_idempotent_on_monotone(self, xs):
        x = np.sort(xs)
        np.testing.assert_array_equal(median_filter(x, 3), x)

    def test_smooth_observed_keeps_gaps(self):
        x = np.array([1.0, np.nan, 9.0, 2.0, np.nan, 3.0])
        y = smooth_observed(x, 3)
        assert np.isnan(y[1]) and np.isnan(y[4])
        np.testing.assert_array_equal(y[~np.isnan(x)], [1, 2, 3, 3])
