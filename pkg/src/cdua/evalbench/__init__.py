"""Metrics, folds, rolling windows, experiments, ablations and report emission."""

from .experiment import (ExperimentConfig, MetricsReport, RunResult, run_experiment, run_feature_ablation,
                         run_fold, run_model_ablation)
from .metrics import ci_width, mae, picp, relativize, rmse, summarize
from .report import emit_report, read_metrics_json
from .windows import FoldPlan, VehicleSeries, make_folds, make_windows, vehicle_series

__all__ = [
    "ExperimentConfig", "FoldPlan", "MetricsReport", "RunResult", "VehicleSeries", "ci_width", "emit_report",
    "mae", "make_folds", "make_windows", "picp", "read_metrics_json", "relativize", "rmse", "run_experiment",
    "run_feature_ablation", "run_fold", "run_model_ablation", "summarize", "vehicle_series",
]
