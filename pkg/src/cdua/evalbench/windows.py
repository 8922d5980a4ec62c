"""Vehicle-level folds, per-vehicle weekly arrays, and rolling supervised windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffusion import SupervisedWindow
from ..features import FeatureTable, Normalizer
from ..ingest import smooth_observed

MAX_INTERP_GAP = 2


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]
    k: int
    seed: int

    @property
    def train_equals_test(self) -> bool:
        return self.k == 1

    def split(self, i: int) -> tuple[list[str], list[str]]:
        test = list(self.folds[i])
        if self.k == 1:
            return test, test
        train = [v for j, f in enumerate(self.folds) if j != i for v in f]
        return sorted(train), sorted(test)

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "folds": [list(f) for f in self.folds]}


def make_folds(vehicle_ids, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then near-equal contiguous partition."""
    ids = sorted(set(vehicle_ids))
    if k < 1 or k > len(ids):
        raise ValueError(f"k must lie in [1, {len(ids)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(order, k)
    return FoldPlan(tuple(tuple(sorted(ids[i] for i in p)) for p in parts), k, seed)


@dataclass
class VehicleSeries:
    """Dense weekly arrays for one vehicle; NaN rows mark missing weeks."""

    vehicle_id: str
    capacity: np.ndarray  # smoothed capacity, Ah
    raw_capacity: np.ndarray
    features: np.ndarray  # weeks x catalog columns

    @property
    def reference(self) -> float:
        """First smoothed observed capacity; denominator of relative metrics."""
        obs = self.capacity[~np.isnan(self.capacity)]
        return float(obs[0])


def vehicle_series(table: FeatureTable, names, smooth_window: int = 5) -> dict[str, VehicleSeries]:
    out = {}
    for vid in table.vehicles():
        sub = table.for_vehicles([vid])
        n = int(sub.weeks.max()) + 1
        raw = np.full(n, np.nan)
        raw[sub.weeks] = sub.capacity
        feats = np.full((n, len(names)), np.nan)
        feats[sub.weeks] = sub.matrix(names)
        cap = smooth_observed(raw, smooth_window) if smooth_window > 1 else raw.copy()
        out[vid] = VehicleSeries(vid, cap, raw, feats)
    return out


def _fill_history(block: np.ndarray, max_gap: int = MAX_INTERP_GAP) -> np.ndarray | None:
    """Linearly interpolate interior NaN runs of at most ``max_gap`` rows; None if impossible."""
    missing = np.isnan(block).any(axis=1)
    if not missing.any():
        return block
    if missing[0] or missing[-1]:
        return None
    idx = np.nonzero(missing)[0]
    runs = np.split(idx, np.nonzero(np.diff(idx) > 1)[0] + 1)
    if max(len(r) for r in runs) > max_gap:
        return None
    good = np.nonzero(~missing)[0]
    out = block.copy()
    for j in range(block.shape[1]):
        out[missing, j] = np.interp(idx, good, block[good, j])
    return out


def make_windows(capacity, features, L: int, H: int, stride: int = 1, vehicle_id: str = "",
                 use_capacity: bool = True, full_only: bool = False) -> list[SupervisedWindow]:
    """Rolling windows: ``L`` history weeks of features (+ capacity) and the next ``H``
    capacities. Short interior history gaps are interpolated, longer ones drop the
    window; targets that are missing or past the series end are masked."""
    capacity = np.asarray(capacity, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64).reshape(len(capacity), -1)
    if L < 1 or H < 1 or stride < 1:
        raise ValueError("L, H and stride must be positive")
    n = len(capacity)
    block = np.concatenate([features, capacity[:, None]], axis=1) if use_capacity else features
    windows = []
    for s in range(0, n - L, stride):
        hist = _fill_history(block[s:s + L])
        if hist is None:
            continue
        tgt = np.full(H, np.nan)
        avail = capacity[s + L:s + L + H]
        tgt[:len(avail)] = avail
        mask = ~np.isnan(tgt)
        if not mask.any() or (full_only and not mask.all()):
            continue
        windows.append(SupervisedWindow(hist, np.nan_to_num(tgt), mask, vehicle_id,
                                        np.arange(s + L, s + L + H)))
    return windows


def normalized_windows(series: VehicleSeries, norm: Normalizer, L: int, H: int, stride: int = 1,
                       use_capacity: bool = True, full_only: bool = False) -> list[SupervisedWindow]:
    feats = norm.transform(series.features)
    feats[np.isnan(series.features).any(axis=1)] = np.nan
    return make_windows(norm.transform_capacity(series.capacity), feats, L, H, stride, series.vehicle_id,
                        use_capacity, full_only)
