import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdua.features import (CATALOG, FEATURE_NAMES, REFERENCE_F3, WEEK, FeatureSelection, FeatureTable, apply_normalizer,
                           compute_weekly_features, fit_normalizer, merge_feature_sets, pearson_corr, select_by_importance,
                           select_by_pearson)
from cdua.ingest import ChargingRecord, ChargingSegment, SchemaError
from cdua.gbdt import NoSplitError


def seg(values, vid="v1", **over):
    recs = []
    for i, v in enumerate(values):
        kw = dict(current=-40.0, pack_voltage=350.0, soc=20.0 + i * 0.1, max_cell_voltage=3.7,
                  min_cell_voltage=3.6, max_temp=30.0, min_temp=28.0)
        kw.update({k: (f(i) if callable(f) else f) for k, f in over.items()})
        if v is not None:
            kw["pack_voltage"] = v
        recs.append(ChargingRecord(vid, 8 * i, **kw))
    return ChargingSegment(vid, recs)


def table(n=300, seed=0, n_vehicles=5):
    rng = np.random.default_rng(seed)
    cap = rng.uniform(80, 120, n)
    vals = rng.standard_normal((n, len(FEATURE_NAMES)))
    vals[:, 0] = cap + 0.01 * rng.standard_normal(n)
    return FeatureTable(np.array([f"v{i % n_vehicles}" for i in range(n)], dtype=object), np.arange(n) // n_vehicles,
                        cap, vals)


def test_catalog_size():
    assert len(FEATURE_NAMES) == 27 and len(CATALOG) == 28
    assert set(REFERENCE_F3) <= set(CATALOG) and len(REFERENCE_F3) == 9


class TestWeeklyFeatures:
    def test_constant_voltage(self):
        row = compute_weekly_features([seg([350.0] * 100)]).as_dict()
        assert row["pack_voltage_mean"] == 350.0
        assert row["pack_voltage_sum"] == 35000.0
        assert row["pack_voltage_std"] == 0.0

    def test_population_std(self):
        row = compute_weekly_features([seg([1.0, 2.0, 3.0])]).as_dict()
        assert row["pack_voltage_mean"] == 2.0 and row["pack_voltage_sum"] == 6.0
        assert row["pack_voltage_std"] == pytest.approx(np.sqrt(2 / 3), abs=1e-12)

    def test_split_equals_union(self):
        whole = seg(np.linspace(340, 360, 40), current=lambda i: -30.0 - i)
        a = ChargingSegment("v1", whole.records[:15])
        b = ChargingSegment("v1", whole.records[15:])
        np.testing.assert_allclose(compute_weekly_features([a, b]).features,
                                   compute_weekly_features([whole]).features, rtol=1e-12)

    def test_derived_signals_nonnegative(self):
        row = compute_weekly_features([seg([350.0] * 10, max_cell_voltage=lambda i: 3.7 + 0.01 * i)]).as_dict()
        assert row["cell_voltage_diff_mean"] >= 0 and row["temp_diff_mean"] == 2.0
        assert all(row[f"{s}_std"] >= 0 for s in ("current", "soc", "cell_voltage_diff"))

    def test_empty_week(self):
        assert compute_weekly_features([]) is None


class TestPearson:
    def test_examples(self):
        assert pearson_corr([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-12)
        assert pearson_corr([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)
        assert pearson_corr([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_constant_raises(self):
        with pytest.raises(ValueError):
            pearson_corr([1, 1, 1], [1, 2, 3])

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=40), st.floats(-50, 50), st.floats(-50, 50),
           st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_affine_equivariance_and_bound(self, xs, a, b, seed):
        x = np.asarray(xs)
        z = np.random.default_rng(seed).standard_normal(len(x))
        if np.ptp(x) < 1e-3 or abs(a) < 1e-3:
            return
        r = pearson_corr(x, z)
        assert abs(r) <= 1 + 1e-12
        assert pearson_corr(a * x + b, z) == pytest.approx(np.sign(a) * r, abs=1e-9)


class TestSelection:
    def test_informative_feature_selected_and_noise_excluded(self):
        t = table(2000)
        sel = select_by_pearson(t, 0.6)
        assert sel == [FEATURE_NAMES[0]]

    def test_threshold_monotone(self):
        t = table(400, seed=3)
        prev = None
        for th in np.linspace(0.0, 1.0, 11):
            cur = set(select_by_pearson(t, th))
            if prev is not None:
                assert cur <= prev
            prev = cur

    def test_importance_single_signal(self):
        t = table(300)
        assert select_by_importance(t, 0.01)[0] == FEATURE_NAMES[0]

    def test_importance_all_constant(self):
        t = FeatureTable(np.array(["a"] * 20, dtype=object), np.zeros(20), np.arange(20.0), np.ones((20, 27)))
        with pytest.raises(NoSplitError):
            select_by_importance(t, 0.01, candidates=FEATURE_NAMES)

    def test_merge(self):
        s = merge_feature_sets([WEEK, "a"], [WEEK, "b"])
        assert s.f3 == [WEEK, "a", "b"]
        assert merge_feature_sets(["x", "y", "z"], ["y"]).f3 == ["x", "y", "z"]

    @given(st.lists(st.sampled_from(CATALOG), unique=True), st.lists(st.sampled_from(CATALOG), unique=True))
    def test_union_properties(self, f1, f2):
        s = merge_feature_sets(f1, f2)
        assert set(f1) <= set(s.f3) and set(f2) <= set(s.f3)
        assert len(s.f3) <= len(f1) + len(f2) and s.f3.count(WEEK) <= 1
        assert len(s.f3) == len(set(s.f3))

    def test_selection_dict_round_trip(self):
        s = merge_feature_sets([WEEK], ["soc_sum"], {WEEK: (0.9, 0.2)})
        assert FeatureSelection.from_dict(s.to_dict()) == s
        with pytest.raises(SchemaError):
            FeatureSelection.from_dict({"f1": ["nope"], "f2": [], "f3": ["nope"]})


class TestNormalizer:
    def test_midpoint_and_round_trip(self):
        t = FeatureTable(np.array(["a", "a"], dtype=object), [0, 1], [100.0, 90.0],
                         np.tile(np.arange(27.0), (2, 1)) * np.array([[1.0], [2.0]]))
        t.values[:, 0] = [2.0, 4.0]
        norm = fit_normalizer(t, FEATURE_NAMES)
        assert norm.transform(np.r_[3.0, t.values[0, 1:]])[0] == 0.5
        u, c = apply_normalizer(norm, t)
        np.testing.assert_allclose(norm.inverse(u), t.values, atol=1e-12)
        np.testing.assert_allclose(norm.inverse_capacity(c), t.capacity, atol=1e-12)

    @given(st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_random(self, seed):
        t = table(50, seed)
        norm = fit_normalizer(t, list(CATALOG))
        u = norm.transform(t.matrix(list(CATALOG)))
        assert u.min() >= 0 and u.max() <= 1
        np.testing.assert_allclose(norm.inverse(u), t.matrix(list(CATALOG)), atol=1e-12 * 1e3)
        np.testing.assert_allclose(norm.inverse_capacity(norm.transform_capacity(t.capacity)), t.capacity,
                                   atol=1e-12 * 1e3)

    def test_constant_feature_warns(self, caplog):
        t = FeatureTable(np.array(["a"] * 3, dtype=object), [0, 1, 2], [1.0, 2.0, 3.0], np.ones((3, 27)))
        with caplog.at_level(logging.WARNING):
            norm = fit_normalizer(t, ["soc_sum"])
        assert "constant" in caplog.text
        np.testing.assert_array_equal(norm.transform(np.array([[7.0]])), [[0.5]])

    def test_refuses_test_fold(self):
        with pytest.raises(ValueError):
            fit_normalizer(table(10), ["soc_sum"], fold="test-0")


def test_feature_table_csv_round_trip(tmp_path):
    t = table(20)
    t.to_csv(tmp_path / "f.csv")
    back = FeatureTable.from_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(back.values, t.values)
    np.testing.assert_array_equal(back.capacity, t.capacity)
    assert list(back.vehicle_ids) == list(t.vehicle_ids)
    (tmp_path / "bad.csv").write_text("vehicle_id,week\n")
    with pytest.raises(SchemaError):
        FeatureTable.from_csv(tmp_path / "bad.csv")
