"""Independent reference computations used by the tests (plain Python, no package code)."""

import csv
import math


def naive_median(x, w):
    h = w // 2
    n = len(x)
    return [sorted(x[min(max(j, 0), n - 1)] for j in range(i - h, i + h + 1))[h] for i in range(n)]


def pearson_direct(x, z):
    n = len(x)
    mx, mz = math.fsum(x) / n, math.fsum(z) / n
    num = math.fsum((a - mx) * (b - mz) for a, b in zip(x, z))
    den = math.sqrt(math.fsum((a - mx) ** 2 for a in x)) * math.sqrt(math.fsum((b - mz) ** 2 for b in z))
    return num / den


def alpha_bar_terminal(T=700, b0=1e-4, b1=2e-2):
    prod = 1.0
    for i in range(T):
        prod *= 1.0 - (b0 + (b1 - b0) * i / (T - 1))
    return prod


def recompute_metrics(path):
    """Metrics per (variant, feature_set, horizon, fold) from a dumped trajectories.csv:
    per-vehicle values relative to the vehicle's reference, pooled by point count."""
    groups = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (r["variant"], r["feature_set"], int(r["horizon"]), int(r["fold"]))
            groups.setdefault(key, []).append(r)
    out = {}
    for key, rows in groups.items():
        per = {}
        inside = 0
        for r in rows:
            traj = [float(v) for k, v in r.items() if k.startswith("t") and k[1:].isdigit()]
            n = len(traj)
            mean = sum(traj) / n
            std = math.sqrt(sum((v - mean) ** 2 for v in traj) / n)
            y = float(r["true_ah"])
            lo, hi = mean - 1.96 * std, mean + 1.96 * std
            inside += lo <= y <= hi
            per.setdefault(r["vehicle_id"], []).append((y, mean, hi - lo, float(r["reference_ah"])))
        total = len(rows)
        rm = sum(100 * math.sqrt(sum((a - b) ** 2 for a, b, _, _ in v) / len(v)) / v[0][3] * len(v)
                 for v in per.values()) / total
        ma = sum(100 * sum(abs(a - b) for a, b, _, _ in v) / v[0][3] for v in per.values()) / total
        wd = sum(100 * sum(w for _, _, w, _ in v) / v[0][3] for v in per.values()) / total
        out[key] = dict(rmse_rel=rm, mae_rel=ma, ci_width_rel=wd, picp=100 * inside / total, n_points=total)
    return out
