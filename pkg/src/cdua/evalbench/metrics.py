"""Point and interval metrics, in Ah or relative to a reference capacity."""

from __future__ import annotations

import math

import numpy as np


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise ValueError("metrics need at least one point")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return math.sqrt(float(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def _bounds(lower, upper):
    lower, upper = _pair(lower, upper)
    if np.any(lower > upper):
        raise ValueError("interval bounds inverted (lower > upper)")
    return lower, upper


def ci_width(lower, upper) -> float:
    lower, upper = _bounds(lower, upper)
    return float(np.mean(upper - lower))


def picp(y, lower, upper) -> float:
    """Percent of points inside the closed interval."""
    lower, upper = _bounds(lower, upper)
    y, _ = _pair(y, lower)
    return 100.0 * float(np.mean((y >= lower) & (y <= upper)))


def relativize(metric_ah, reference_ah) -> float:
    if reference_ah == 0 or not math.isfinite(reference_ah):
        raise ValueError(f"invalid reference capacity {reference_ah!r}")
    return 100.0 * float(metric_ah) / float(reference_ah)


def pooled_relative(per_vehicle: dict[str, tuple[float, int]]) -> float:
    """Point-count weighted mean of per-vehicle relative values."""
    total = sum(n for _, n in per_vehicle.values())
    if total == 0:
        raise ValueError("no points to pool")
    return math.fsum(v * n for v, n in per_vehicle.values()) / total


def summarize(vehicle_ids, y, mean, lower, upper, reference: dict[str, float]) -> dict[str, float]:
    """Fleet metrics from per-point arrays: each vehicle's metrics are relativized to
    its reference, then pooled by point count. PICP pools points directly."""
    vehicle_ids = np.asarray(vehicle_ids, dtype=object)
    y, mean = _pair(y, mean)
    lower, upper = _bounds(lower, upper)
    parts = {"rmse_rel": {}, "mae_rel": {}, "ci_width_rel": {}}
    for vid in sorted(set(vehicle_ids.tolist())):
        m = vehicle_ids == vid
        n = int(m.sum())
        ref = reference[vid]
        parts["rmse_rel"][vid] = (relativize(rmse(y[m], mean[m]), ref), n)
        parts["mae_rel"][vid] = (relativize(mae(y[m], mean[m]), ref), n)
        parts["ci_width_rel"][vid] = (relativize(ci_width(lower[m], upper[m]), ref), n)
    out = {k: pooled_relative(v) for k, v in parts.items()}
    out["picp"] = picp(y, lower, upper)
    out["n_points"] = int(y.size)
    return out
