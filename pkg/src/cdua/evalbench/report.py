"""Report files: metrics.json, forecast and trajectory CSVs, SVG plots."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..diffusion import CI_Z
from .experiment import MetricsReport, RunResult

FORECAST_COLUMNS = ("vehicle_id", "week", "mean_ah", "std_ah", "lower95_ah", "upper95_ah", "origin_week", "true_ah")


def _arm_name(run: RunResult) -> str:
    return f"{run.variant}_{run.feature_set}_L{run.horizon}"


def write_metrics_json(rows: list[dict], path) -> None:
    Path(path).write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_metrics_json(path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_trajectories(runs: list[RunResult], path) -> None:
    n = max((r.trajectories.shape[1] for r in runs), default=0)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "feature_set", "horizon", "fold", "vehicle_id", "origin_week", "week", "true_ah",
                    "reference_ah"] + [f"t{i:02d}" for i in range(n)])
        for r in runs:
            for p in range(len(r.y_true)):
                vid = r.vehicle_ids[p]
                w.writerow([r.variant, r.feature_set, r.horizon, r.fold, vid, int(r.origin_weeks[p]), int(r.weeks[p]),
                            repr(float(r.y_true[p])), repr(float(r.reference[vid]))]
                           + [repr(float(v)) for v in r.trajectories[p]])


def write_forecasts(run: RunResult, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    mean, std = run.trajectories.mean(axis=1), run.trajectories.std(axis=1)
    paths = []
    for vid in sorted(set(run.vehicle_ids.tolist())):
        m = np.nonzero(run.vehicle_ids == vid)[0]
        path = out_dir / f"{vid}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(FORECAST_COLUMNS)
            for p in m:
                w.writerow([vid, int(run.weeks[p]), repr(float(mean[p])), repr(float(std[p])),
                            repr(float(mean[p] - CI_Z * std[p])), repr(float(mean[p] + CI_Z * std[p])),
                            int(run.origin_weeks[p]), repr(float(run.y_true[p]))])
        paths.append(path)
    return paths


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cdua"
    return plt


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    _pyplot().close(fig)
    return path


def plot_forecast_band(run: RunResult, path: Path, vehicle: str | None = None) -> Path:
    plt = _pyplot()
    vid = vehicle or sorted(set(run.vehicle_ids.tolist()))[0]
    m = run.vehicle_ids == vid
    order = np.argsort(run.weeks[m], kind="stable")
    weeks = run.weeks[m][order]
    traj = run.trajectories[m][order]
    mean, std = traj.mean(axis=1), traj.std(axis=1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.fill_between(weeks, mean - CI_Z * std, mean + CI_Z * std, alpha=0.3, label="95% interval")
    ax.plot(weeks, mean, lw=1.2, label="forecast mean")
    ax.plot(weeks, run.y_true[m][order], "k.", ms=3, label="observed")
    ax.set_xlabel("week")
    ax.set_ylabel("capacity (Ah)")
    ax.set_title(f"{vid} ({_arm_name(run)})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_scatter(runs: list[RunResult], path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    y = np.concatenate([r.y_true for r in runs])
    pred = np.concatenate([r.trajectories.mean(axis=1) for r in runs])
    ax.plot(y, pred, ".", ms=3, alpha=0.6)
    lo, hi = float(min(y.min(), pred.min())), float(max(y.max(), pred.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("true capacity (Ah)")
    ax.set_ylabel("predicted capacity (Ah)")
    inset = ax.inset_axes([0.58, 0.1, 0.38, 0.3])
    inset.hist(pred - y, bins=30)
    inset.set_title("error", fontsize=7)
    inset.tick_params(labelsize=6)
    fig.tight_layout()
    return _save(fig, path)


def plot_error_boxes(groups: dict[str, list[RunResult]], path: Path) -> Path:
    plt = _pyplot()
    labels = list(groups)
    data = [np.abs(np.concatenate([r.trajectories.mean(axis=1) - r.y_true for r in runs])) for runs in groups.values()]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels)), 3.5))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("absolute error (Ah)")
    fig.tight_layout()
    return _save(fig, path)


def emit_report(report: MetricsReport, out_dir, plots: bool = True) -> list[Path]:
    """Write every report artifact under ``out_dir``; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "metrics.json"]
    write_metrics_json(report.rows, files[0])
    if report.fold_plan is not None:
        files.append(out / "folds.json")
        files[-1].write_text(json.dumps(report.fold_plan.to_dict(), indent=1, sort_keys=True) + "\n")
    if report.selections:
        files.append(out / "selection.json")
        files[-1].write_text(json.dumps({str(k): v.to_dict() for k, v in sorted(report.selections.items())},
                                        indent=1, sort_keys=True) + "\n")
    if not report.runs:
        return files
    files.append(out / "trajectories.csv")
    write_trajectories(report.runs, files[-1])
    groups: dict[str, list[RunResult]] = {}
    for r in report.runs:
        groups.setdefault(_arm_name(r), []).append(r)
    for name, runs in groups.items():
        for r in runs:
            files += write_forecasts(r, out / "forecasts" / name / f"fold{r.fold}")
    if plots:
        pdir = out / "plots"
        pdir.mkdir(exist_ok=True)
        for name, runs in groups.items():
            files.append(plot_forecast_band(runs[0], pdir / f"band_{name}.svg"))
            files.append(plot_scatter(runs, pdir / f"scatter_{name}.svg"))
        files.append(plot_error_boxes(groups, pdir / "abs_error_box.svg"))
    return files
