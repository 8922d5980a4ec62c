"""Weekly feature table (9 signals x mean/sum/std), Pearson and boosted-tree
selection, and train-fold normalization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gbdt
from .ingest import ChargingSegment, IngestResult, SchemaError, week_index

log = logging.getLogger(__name__)

BASE_SIGNALS = (
    "current", "pack_voltage", "soc", "max_cell_voltage", "min_cell_voltage",
    "cell_voltage_diff", "max_temp", "min_temp", "temp_diff",
)
STATS = ("mean", "sum", "std")
FEATURE_NAMES = tuple(f"{sig}_{stat}" for sig in BASE_SIGNALS for stat in STATS)
WEEK = "week"
CATALOG = (WEEK,) + FEATURE_NAMES

# the nine-feature set named in the source study
REFERENCE_F3 = (
    "week", "min_cell_voltage_mean", "pack_voltage_mean", "current_std", "soc_sum",
    "pack_voltage_sum", "min_cell_voltage_sum", "max_cell_voltage_sum", "cell_voltage_diff_mean",
)


def _signal_matrix(segments: Sequence[ChargingSegment]) -> np.ndarray:
    cols = {name: np.concatenate([s.column(name) for s in segments]) for name in
            ("current", "pack_voltage", "soc", "max_cell_voltage", "min_cell_voltage", "max_temp", "min_temp")}
    cols["cell_voltage_diff"] = cols["max_cell_voltage"] - cols["min_cell_voltage"]
    cols["temp_diff"] = cols["max_temp"] - cols["min_temp"]
    return np.stack([cols[s] for s in BASE_SIGNALS], axis=1)


@dataclass
class WeeklyFeatureRow:
    vehicle_id: str
    week: int
    capacity: float
    features: np.ndarray  # aligned with FEATURE_NAMES

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.features.tolist()))


def compute_weekly_features(segments: Sequence[ChargingSegment], week: int = 0,
                            capacity: float = math.nan) -> WeeklyFeatureRow | None:
    """Mean, sum and population std of each signal over every record of the week.

    Returns None for a week without segments (the missing-row marker).
    """
    segments = [s for s in segments if len(s)]
    if not segments:
        return None
    m = _signal_matrix(segments)
    stats = np.stack([m.mean(axis=0), m.sum(axis=0), m.std(axis=0)], axis=1)
    return WeeklyFeatureRow(segments[0].vehicle_id, int(week), float(capacity), stats.reshape(-1))


@dataclass
class FeatureTable:
    """Columnar weekly table: one row per observed vehicle-week."""

    vehicle_ids: np.ndarray
    weeks: np.ndarray
    capacity: np.ndarray
    values: np.ndarray  # n x len(FEATURE_NAMES)

    def __post_init__(self):
        self.vehicle_ids = np.asarray(self.vehicle_ids, dtype=object)
        self.weeks = np.asarray(self.weeks, dtype=np.int64)
        self.capacity = np.asarray(self.capacity, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.weeks), len(FEATURE_NAMES))

    def __len__(self) -> int:
        return len(self.weeks)

    @classmethod
    def from_rows(cls, rows: Sequence[WeeklyFeatureRow]) -> "FeatureTable":
        if not rows:
            return cls(np.array([], dtype=object), np.array([], dtype=np.int64), np.array([]),
                       np.zeros((0, len(FEATURE_NAMES))))
        return cls(np.array([r.vehicle_id for r in rows], dtype=object), np.array([r.week for r in rows]),
                   np.array([r.capacity for r in rows]), np.stack([r.features for r in rows]))

    def column(self, name: str) -> np.ndarray:
        if name == WEEK:
            return self.weeks.astype(np.float64)
        try:
            return self.values[:, FEATURE_NAMES.index(name)]
        except ValueError:
            raise KeyError(f"unknown feature {name!r}") from None

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self.column(n) for n in names], axis=1) if names else np.zeros((len(self), 0))

    def vehicles(self) -> list[str]:
        return sorted(set(self.vehicle_ids.tolist()))

    def subset(self, mask) -> "FeatureTable":
        mask = np.asarray(mask)
        return FeatureTable(self.vehicle_ids[mask], self.weeks[mask], self.capacity[mask], self.values[mask])

    def for_vehicles(self, ids) -> "FeatureTable":
        return self.subset(np.isin(self.vehicle_ids, list(ids)))

    def with_capacity(self, capacity) -> "FeatureTable":
        return FeatureTable(self.vehicle_ids, self.weeks, capacity, self.values)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("vehicle_id", "week", "capacity_ah") + FEATURE_NAMES)
            for i in range(len(self)):
                w.writerow([self.vehicle_ids[i], int(self.weeks[i]), repr(float(self.capacity[i]))]
                           + [repr(float(v)) for v in self.values[i]])

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            expected = ["vehicle_id", "week", "capacity_ah"] + list(FEATURE_NAMES)
            if header != expected:
                missing = [c for c in expected if c not in (header or [])]
                raise SchemaError(f"{path}: feature table header mismatch (missing {missing})")
            ids, weeks, cap, vals = [], [], [], []
            for row in reader:
                if len(row) != len(expected):
                    raise SchemaError(f"{path}: row has {len(row)} fields, expected {len(expected)}")
                ids.append(row[0])
                weeks.append(int(row[1]))
                cap.append(float(row[2]) if row[2] else math.nan)
                vals.append([float(v) for v in row[3:]])
        return cls(np.array(ids, dtype=object), np.array(weeks, dtype=np.int64), np.array(cap),
                   np.array(vals).reshape(len(weeks), len(FEATURE_NAMES)))


def build_feature_table(result: IngestResult) -> FeatureTable:
    """Feature rows for every vehicle-week that has a capacity label."""
    by_week: dict[tuple[str, int], list[ChargingSegment]] = {}
    for seg in result.valid_segments():
        key = (seg.vehicle_id, week_index(seg.start_time, result.epochs[seg.vehicle_id]))
        by_week.setdefault(key, []).append(seg)
    rows = []
    for vid, series in result.weekly.items():
        for week, cap in zip(series.weeks, series.capacity):
            if np.isnan(cap):
                continue
            row = compute_weekly_features(by_week.get((vid, int(week)), []), int(week), cap)
            if row is not None:
                rows.append(row)
    return FeatureTable.from_rows(rows)


def pearson_corr(x, z) -> float:
    """Sample Pearson correlation."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape or x.ndim != 1:
        raise ValueError("pearson_corr needs two equal-length 1D series")
    if x.size < 2:
        raise ValueError("pearson_corr needs at least 2 points")
    dx = x - x.mean()
    dz = z - z.mean()
    denom = math.sqrt(float(np.dot(dx, dx))) * math.sqrt(float(np.dot(dz, dz)))
    if denom == 0.0:
        raise ValueError("correlation undefined for a constant series")
    return float(np.dot(dx, dz)) / denom


def pearson_scores(table: FeatureTable, candidates: Sequence[str] = CATALOG) -> dict[str, float]:
    """|rho| of each candidate with capacity, pooled over vehicles. Constant columns score NaN."""
    if len(table) < 2:
        raise ValueError("need at least 2 rows")
    scores = {}
    for name in candidates:
        try:
            scores[name] = abs(pearson_corr(table.column(name), table.capacity))
        except ValueError:
            scores[name] = math.nan
    return scores


def _rank(scores: dict[str, float], threshold: float) -> list[str]:
    keep = [n for n, s in scores.items() if not math.isnan(s) and s > threshold]
    order = {n: i for i, n in enumerate(scores)}
    return sorted(keep, key=lambda n: (-scores[n], order[n]))


def select_by_pearson(table: FeatureTable, threshold: float = 0.6,
                      candidates: Sequence[str] = CATALOG) -> list[str]:
    return _rank(pearson_scores(table, candidates), threshold)


def importance_scores(table: FeatureTable, candidates: Sequence[str] = CATALOG,
                      config: gbdt.GBDTConfig | None = None) -> dict[str, float]:
    model = gbdt.fit(table.matrix(candidates), table.capacity, config, feature_names=list(candidates))
    return gbdt.gain_importance(model)


def select_by_importance(table: FeatureTable, threshold: float = 0.01, candidates: Sequence[str] = CATALOG,
                         config: gbdt.GBDTConfig | None = None) -> list[str]:
    return _rank(importance_scores(table, candidates, config), threshold)


@dataclass
class FeatureSelection:
    f1: list[str]
    f2: list[str]
    f3: list[str]
    scores: dict[str, tuple[float, float]] = field(default_factory=dict)

    def get(self, name: str) -> list[str]:
        try:
            return {"f1": self.f1, "f2": self.f2, "f3": self.f3}[name.lower()]
        except KeyError:
            raise KeyError(f"unknown feature set {name!r}") from None

    def to_dict(self) -> dict:
        return {"f1": self.f1, "f2": self.f2, "f3": self.f3,
                "scores": {k: {"pearson_abs": p, "importance": i} for k, (p, i) in self.scores.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSelection":
        scores = {k: (v["pearson_abs"], v["importance"]) for k, v in d.get("scores", {}).items()}
        sel = cls(list(d["f1"]), list(d["f2"]), list(d["f3"]), scores)
        for name in sel.f1 + sel.f2 + sel.f3:
            if name not in CATALOG:
                raise SchemaError(f"unknown feature {name!r} in selection")
        return sel


def merge_feature_sets(f1: Sequence[str], f2: Sequence[str],
                       scores: dict[str, tuple[float, float]] | None = None) -> FeatureSelection:
    """F3 is the order-stable union of F1 and F2 without duplicates."""
    f3 = list(dict.fromkeys(list(f1) + list(f2)))
    return FeatureSelection(list(f1), list(f2), f3, dict(scores or {}))


def select_features(table: FeatureTable, pearson_threshold: float = 0.6, importance_threshold: float = 0.01,
                    config: gbdt.GBDTConfig | None = None) -> FeatureSelection:
    p = pearson_scores(table)
    imp = importance_scores(table, CATALOG, config)
    scores = {n: (p[n], imp[n]) for n in CATALOG}
    return merge_feature_sets(_rank(p, pearson_threshold), _rank(imp, importance_threshold), scores)


@dataclass(frozen=True)
class Normalizer:
    """Min-max statistics from one training fold.

    Features map to [0, 1] per column. Capacity uses one fleet-level range
    over the training fold so unseen test vehicles share it.
    """

    names: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray
    cap_lo: float
    cap_hi: float
    fold: str
    slack: float = 0.5

    def _scale(self, lo, hi):
        span = hi - lo
        return np.where(span > 0, span, 1.0)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = (x - self.lo) / self._scale(self.lo, self.hi)
        return np.where(self.hi > self.lo, out, 0.5)

    def inverse(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        return np.where(self.hi > self.lo, u * self._scale(self.lo, self.hi) + self.lo, self.lo)

    def transform_capacity(self, c) -> np.ndarray:
        span = self.cap_hi - self.cap_lo
        return (np.asarray(c, dtype=np.float64) - self.cap_lo) / span

    def inverse_capacity(self, u) -> np.ndarray:
        return np.asarray(u, dtype=np.float64) * (self.cap_hi - self.cap_lo) + self.cap_lo

    def capacity_scale(self) -> float:
        return self.cap_hi - self.cap_lo

    def out_of_range(self, u: np.ndarray) -> bool:
        u = np.asarray(u)
        return bool(np.any(u < -self.slack) or np.any(u > 1.0 + self.slack))


def fit_normalizer(table: FeatureTable, names: Sequence[str], fold: str = "train") -> Normalizer:
    """Fit on training-fold rows only; ``fold`` tags where the statistics came from."""
    if fold.startswith("test"):
        raise ValueError("normalizer statistics may not come from a test fold")
    if len(table) == 0:
        raise ValueError("cannot fit a normalizer on an empty table")
    m = table.matrix(names)
    lo, hi = m.min(axis=0), m.max(axis=0)
    for n, a, b in zip(names, lo, hi):
        if a == b:
            log.warning("feature %s is constant on fold %s; mapped to 0.5", n, fold)
    cap = table.capacity[~np.isnan(table.capacity)]
    cap_lo, cap_hi = float(cap.min()), float(cap.max())
    if cap_hi == cap_lo:
        log.warning("capacity is constant on fold %s; using unit range", fold)
        cap_hi = cap_lo + 1.0
    return Normalizer(tuple(names), lo, hi, cap_lo, cap_hi, fold)


def apply_normalizer(norm: Normalizer, table: FeatureTable) -> tuple[np.ndarray, np.ndarray]:
    """Normalized feature matrix and normalized capacity for ``table``."""
    u = norm.transform(table.matrix(norm.names))
    if norm.out_of_range(u):
        log.warning("normalized features exceed the [0, 1] band by more than %.2f", norm.slack)
    return u, norm.transform_capacity(table.capacity)
