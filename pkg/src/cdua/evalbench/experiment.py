"""Cross-validated rolling-forecast experiments and the ablation drivers.

Every random choice derives from the master seed and a label that names the
fold and history length but never the ablation arm, so arms share folds,
initial weights, batch order and sampling noise.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .. import gbdt
from ..diffusion import (CI_Z, NoiseSchedule, SupervisedWindow, TrainConfig, build_schedule, forecast_windows,
                         rescaled_schedule, train)
from ..features import CATALOG, REFERENCE_F3, FeatureSelection, FeatureTable, fit_normalizer, select_features
from ..model import VARIANTS, CduaConfig, CduaModel
from ..seeding import derive_seed
from .metrics import summarize
from .windows import FoldPlan, make_folds, normalized_windows, vehicle_series

log = logging.getLogger(__name__)

METRIC_KEYS = ("rmse_rel", "mae_rel", "ci_width_rel", "picp", "n_points")


@dataclass(frozen=True)
class ExperimentConfig:
    history_lens: tuple[int, ...] = (8, 16, 24, 32)
    horizon: int = 8
    feature_set: str | tuple[str, ...] = "f3"  # f1 | f2 | f3 | reference | explicit names
    variant: str = "full"
    use_capacity: bool = True
    channels: tuple[int, ...] = (32, 64, 128)
    heads: int = 4
    time_embed_dim: int = 64
    upsample: str = "transposed"
    parametrization: str = "v"
    diffusion_steps: int = 700
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    rescale_betas: bool = False
    epochs: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    lr_schedule: str = "constant"
    noise_draws: int = 1
    n_samples: int = 40
    folds: int = 5
    fold_indices: tuple[int, ...] | None = None
    smooth_window: int = 5
    train_stride: int = 1
    eval_stride: int | None = None  # defaults to the horizon
    pearson_threshold: float = 0.6
    importance_threshold: float = 0.01
    gbdt_rounds: int = 100
    gbdt_depth: int = 3
    gbdt_lr: float = 0.1
    gbdt_min_samples_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("history_lens", "channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if isinstance(self.feature_set, (list, tuple)):
            object.__setattr__(self, "feature_set", tuple(self.feature_set))
            unknown = [n for n in self.feature_set if n not in CATALOG]
            if unknown:
                raise ValueError(f"unknown features {unknown}")
        elif self.feature_set not in ("f1", "f2", "f3", "reference"):
            raise ValueError(f"feature_set must be f1/f2/f3/reference or a name list, got {self.feature_set!r}")
        if self.fold_indices is not None:
            object.__setattr__(self, "fold_indices", tuple(int(i) for i in self.fold_indices))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be a positive odd integer")

    @property
    def feature_set_label(self) -> str:
        return self.feature_set if isinstance(self.feature_set, str) else "custom"

    def schedule(self) -> NoiseSchedule:
        if self.rescale_betas:
            return rescaled_schedule(self.diffusion_steps, 700, self.beta_start, self.beta_end)
        return build_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def gbdt_config(self) -> gbdt.GBDTConfig:
        return gbdt.GBDTConfig(self.gbdt_rounds, self.gbdt_depth, self.gbdt_lr, self.gbdt_min_samples_leaf)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, seed, self.noise_draws, self.lr_schedule)

    def model_config(self, L: int, n_features: int, seed: int) -> CduaConfig:
        return CduaConfig(history_len=L, horizon=self.horizon, feature_dim=n_features,
                          use_capacity=self.use_capacity, channels=self.channels, heads=self.heads,
                          time_embed_dim=self.time_embed_dim, variant=self.variant, upsample=self.upsample,
                          parametrization=self.parametrization, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunResult:
    """Point-level forecasts of one (history length, fold, arm) run, in Ah."""

    variant: str
    feature_set: str
    horizon: int
    fold: int
    vehicle_ids: np.ndarray
    origin_weeks: np.ndarray
    weeks: np.ndarray
    y_true: np.ndarray
    trajectories: np.ndarray  # points x N
    reference: dict[str, float]
    loss_history: list[float] = field(default_factory=list)
    features: list[str] = field(default_factory=list)
    parameter_count: int = 0

    def summary(self) -> dict:
        t = self.trajectories
        mean, std = t.mean(axis=1), t.std(axis=1)
        return summarize(self.vehicle_ids, self.y_true, mean, mean - CI_Z * std, mean + CI_Z * std,
                         self.reference)


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    runs: list[RunResult] = field(default_factory=list)
    fold_plan: FoldPlan | None = None
    selections: dict[int, FeatureSelection] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        self.rows += other.rows
        self.runs += other.runs
        return self


def resolve_features(cfg: ExperimentConfig, selection: FeatureSelection | None) -> list[str]:
    if isinstance(cfg.feature_set, tuple):
        return list(cfg.feature_set)
    if cfg.feature_set == "reference":
        return list(REFERENCE_F3)
    assert selection is not None
    names = selection.get(cfg.feature_set)
    if not names:
        raise ValueError(f"feature set {cfg.feature_set} is empty on this fold")
    return names


def fold_selection(table: FeatureTable, train_ids: Sequence[str], cfg: ExperimentConfig) -> FeatureSelection:
    """Hybrid selection on training vehicles only, against their smoothed capacity."""
    series = vehicle_series(table.for_vehicles(train_ids), CATALOG, cfg.smooth_window)
    train_rows = table.for_vehicles(train_ids)
    smoothed = np.array([series[v].capacity[w] for v, w in zip(train_rows.vehicle_ids, train_rows.weeks)])
    return select_features(train_rows.with_capacity(smoothed), cfg.pearson_threshold, cfg.importance_threshold,
                           cfg.gbdt_config())


def default_trainer(windows: list[SupervisedWindow], model_cfg: CduaConfig, schedule: NoiseSchedule,
                    train_cfg: TrainConfig):
    model = CduaModel(model_cfg)
    result = train(model, windows, schedule, train_cfg)
    return model, result.history


Trainer = Callable[[list, CduaConfig, NoiseSchedule, TrainConfig], tuple]


def run_fold(table: FeatureTable, cfg: ExperimentConfig, plan: FoldPlan, fold: int, L: int,
             selection: FeatureSelection | None = None, trainer: Trainer | None = None) -> RunResult:
    train_ids, test_ids = plan.split(fold)
    if not plan.train_equals_test and set(train_ids) & set(test_ids):
        raise RuntimeError("train/test vehicle overlap")
    if selection is None and not isinstance(cfg.feature_set, tuple) and cfg.feature_set != "reference":
        selection = fold_selection(table, train_ids, cfg)
    names = resolve_features(cfg, selection)
    train_table = table.for_vehicles(train_ids)
    norm = fit_normalizer(train_table, names, fold=f"train:{fold}")
    series_train = vehicle_series(train_table, names, cfg.smooth_window)
    series_test = vehicle_series(table.for_vehicles(test_ids), names, cfg.smooth_window)
    H = cfg.horizon
    train_windows = [w for vid in train_ids if vid in series_train
                     for w in normalized_windows(series_train[vid], norm, L, H, cfg.train_stride, cfg.use_capacity)]
    if not train_windows:
        raise ValueError(f"fold {fold}: no training windows at L={L}")
    schedule = cfg.schedule()
    model_cfg = cfg.model_config(L, len(names), derive_seed(cfg.seed, "init", L, fold) % 2**32)
    train_cfg = cfg.train_config(derive_seed(cfg.seed, "train", L, fold) % 2**32)
    t0 = time.perf_counter()
    model, history = (trainer or default_trainer)(train_windows, model_cfg, schedule, train_cfg)
    log.info("L=%d fold=%d %s/%s: %d windows, trained in %.1fs", L, fold, cfg.variant,
             cfg.feature_set_label, len(train_windows), time.perf_counter() - t0)

    stride = cfg.eval_stride or H
    vids, origins, weeks, ys, trajs = [], [], [], [], []
    for vid in test_ids:
        if vid not in series_test:
            continue
        ws = normalized_windows(series_test[vid], norm, L, H, stride, cfg.use_capacity)
        if not ws:
            continue
        x = np.stack([w.x for w in ws])
        seeds = [derive_seed(cfg.seed, "sample", L, vid, int(w.target_weeks[0])) % 2**32 for w in ws]
        traj = norm.inverse_capacity(forecast_windows(model, schedule, x, cfg.n_samples, seeds))
        for w, tr in zip(ws, traj):
            for h in np.nonzero(w.mask)[0]:
                vids.append(vid)
                origins.append(int(w.target_weeks[0]) - 1)
                weeks.append(int(w.target_weeks[h]))
                ys.append(float(series_test[vid].capacity[w.target_weeks[h]]))
                trajs.append(tr[:, h])
    if not ys:
        raise ValueError(f"fold {fold}: no evaluation windows at L={L}")
    reference = {vid: series_test[vid].reference for vid in sorted(set(vids))}
    count = model.parameter_count() if hasattr(model, "parameter_count") else 0
    return RunResult(cfg.variant, cfg.feature_set_label, L, fold, np.array(vids, dtype=object),
                     np.array(origins), np.array(weeks), np.array(ys), np.stack(trajs), reference,
                     list(history), names, count)


def _row(run: RunResult, fold) -> dict:
    s = run.summary()
    return {"variant": run.variant, "feature_set": run.feature_set, "horizon": run.horizon, "fold": fold,
            **{k: s[k] for k in METRIC_KEYS}}


def pooled_row(runs: Sequence[RunResult]) -> dict:
    """Metrics over the union of points from several folds of one arm and history length."""
    first = runs[0]
    merged = RunResult(first.variant, first.feature_set, first.horizon, -1,
                       np.concatenate([r.vehicle_ids for r in runs]), np.concatenate([r.origin_weeks for r in runs]),
                       np.concatenate([r.weeks for r in runs]), np.concatenate([r.y_true for r in runs]),
                       np.concatenate([r.trajectories for r in runs]),
                       {k: v for r in runs for k, v in r.reference.items()})
    return _row(merged, "all")


def rows_for(runs: Sequence[RunResult]) -> list[dict]:
    rows = [_row(r, r.fold) for r in runs]
    groups: dict[tuple, list[RunResult]] = {}
    for r in runs:
        groups.setdefault((r.variant, r.feature_set, r.horizon), []).append(r)
    rows += [pooled_row(g) for g in groups.values() if len(g) > 1]
    for row in rows:
        if row["rmse_rel"] < row["mae_rel"] - 1e-12:
            raise AssertionError(f"rmse < mae in row {row}")
    return rows


def _job(args):
    table, cfg, plan, fold, L, selection = args
    return run_fold(table, cfg, plan, fold, L, selection)


def run_experiment(table: FeatureTable, cfg: ExperimentConfig, plan: FoldPlan | None = None,
                   selections: dict[int, FeatureSelection] | None = None, trainer: Trainer | None = None,
                   workers: int = 1) -> MetricsReport:
    """Train on each fold's training vehicles and forecast its test vehicles for every history length."""
    plan = plan or make_folds(table.vehicles(), cfg.folds, derive_seed(cfg.seed, "folds") % 2**32)
    folds = cfg.fold_indices if cfg.fold_indices is not None else tuple(range(plan.k))
    needs_selection = not isinstance(cfg.feature_set, tuple) and cfg.feature_set != "reference"
    selections = dict(selections or {})
    if needs_selection:
        for f in folds:
            if f not in selections:
                selections[f] = fold_selection(table, plan.split(f)[0], cfg)
    jobs = [(table, cfg, plan, f, L, selections.get(f)) for L in cfg.history_lens for f in folds]
    if workers > 1 and trainer is None and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_job, jobs))
    else:
        runs = [run_fold(t, c, p, f, L, s, trainer) for t, c, p, f, L, s in jobs]
    return MetricsReport(rows_for(runs), runs, plan, selections, cfg.to_dict())


def run_feature_ablation(table: FeatureTable, cfg: ExperimentConfig, sets: Sequence[str] = ("f1", "f2", "f3"),
                         trainer: Trainer | None = None, workers: int = 1) -> MetricsReport:
    plan = make_folds(table.vehicles(), cfg.folds, derive_seed(cfg.seed, "folds") % 2**32)
    report = MetricsReport(fold_plan=plan, config=cfg.to_dict())
    selections: dict[int, FeatureSelection] = {}
    for name in sets:
        arm = run_experiment(table, replace(cfg, feature_set=name), plan, selections, trainer, workers)
        selections.update(arm.selections)
        report.extend(arm)
    report.selections = selections
    return report


def run_model_ablation(table: FeatureTable, cfg: ExperimentConfig,
                       variants: Sequence[str] = ("backbone", "no_self_attn", "no_cross_attn", "full"),
                       trainer: Trainer | None = None, workers: int = 1) -> MetricsReport:
    plan = make_folds(table.vehicles(), cfg.folds, derive_seed(cfg.seed, "folds") % 2**32)
    report = MetricsReport(fold_plan=plan, config=cfg.to_dict())
    selections: dict[int, FeatureSelection] = {}
    for v in variants:
        arm = run_experiment(table, replace(cfg, variant=v), plan, selections, trainer, workers)
        selections.update(arm.selections)
        report.extend(arm)
    report.selections = selections
    return report
