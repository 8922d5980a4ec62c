"""Command-line entry point: ``cdua <command> ...``.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 schema, 5 validation, 6 training aborted.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_run_config
from .diffusion import CI_Z, TrainingAborted, forecast_windows, train
from .evalbench import emit_report, run_experiment, run_feature_ablation, run_model_ablation
from .evalbench.windows import _fill_history, normalized_windows, vehicle_series
from .features import CATALOG, FeatureTable, Normalizer, build_feature_table, fit_normalizer, select_features
from .graph.checkpoint import CheckpointError
from .ingest import SchemaError, ingest_records, parse_charging_log, smooth_observed, write_weekly_csv
from .model import VARIANTS, CduaModel
from .seeding import derive_seed
from .synth import generate_fleet

log = logging.getLogger("cdua")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SCHEMA, EXIT_VALIDATION, EXIT_ABORT = 0, 2, 3, 4, 5, 6


# ---- checkpoints -------------------------------------------------------------

def save_checkpoint(model: CduaModel, directory, meta: dict | None = None) -> Path:
    """Model parameters and config, plus ``meta.json`` (normalizer, features, schedule)."""
    directory = Path(directory)
    model.save(directory)
    (directory / "meta.json").write_text(json.dumps(meta or {}, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory) -> CduaModel:
    return CduaModel.load(directory)


def load_checkpoint_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise CheckpointError(f"missing {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def normalizer_to_dict(n: Normalizer) -> dict:
    return {"names": list(n.names), "lo": n.lo.tolist(), "hi": n.hi.tolist(), "cap_lo": n.cap_lo,
            "cap_hi": n.cap_hi, "fold": n.fold}


def normalizer_from_dict(d: dict) -> Normalizer:
    return Normalizer(tuple(d["names"]), np.array(d["lo"], dtype=np.float64), np.array(d["hi"], dtype=np.float64),
                      float(d["cap_lo"]), float(d["cap_hi"]), d["fold"])


# ---- run directory bookkeeping -----------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def finish_run(out: Path, cfg: RunConfig, command: str, inputs: dict | None = None) -> Path:
    """Echo the effective config and write a manifest of every file under ``out``."""
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {"command": command, "seed": cfg.seed, "inputs": inputs or {},
                "files": {str(p.relative_to(out)): _sha256(p) for p in files}}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_table(path) -> FeatureTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return FeatureTable.from_csv(path)


def _apply_feature_set(cfg: RunConfig, choice: str | None) -> RunConfig:
    if choice is None:
        return cfg
    if choice.startswith("custom:"):
        path = Path(choice[len("custom:"):])
        text = path.read_text(encoding="utf-8")
        names = json.loads(text) if text.lstrip().startswith("[") else [t.strip() for t in text.split() if t.strip()]
        unknown = [n for n in names if n not in CATALOG]
        if unknown:
            raise SchemaError(f"custom feature list has unknown names {unknown}")
        return cfg.with_overrides(feature_set=tuple(names))
    return cfg.with_overrides(feature_set=choice)


# ---- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path, raw_logs: bool = True) -> Path:
    fleet = generate_fleet(cfg.synth, cfg.seed)
    fleet.write(out, raw_logs=raw_logs)
    return finish_run(out, cfg, "synth")


def cmd_ingest(raw_csv, cfg: RunConfig, out: Path) -> Path:
    ic = cfg.ingest
    parsed = parse_charging_log(raw_csv)
    result = ingest_records(parsed, ic.max_gap, ic.min_points, ic.min_soc_span, ic.soc_backtrack_tol)
    write_weekly_csv(out / "weekly.csv", result.weekly)
    build_feature_table(result).to_csv(out / "features.csv")
    report = {"records": len(parsed.records), "skipped_rows": parsed.skipped,
              "row_errors": parsed.row_errors[:100], "segments": len(result.segments),
              "segment_status": result.rejection_counts()}
    (out / "ingest_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return finish_run(out, cfg, "ingest", {"raw_csv": str(raw_csv)})


def cmd_features(features_csv, cfg: RunConfig, out: Path) -> Path:
    """Fleet-wide selection report. Experiments repeat selection inside each training fold."""
    table = _read_table(features_csv)
    exp = cfg.experiment
    series = vehicle_series(table, CATALOG, exp.smooth_window)
    smoothed = np.array([series[v].capacity[w] for v, w in zip(table.vehicle_ids, table.weeks)])
    sel = select_features(table.with_capacity(smoothed), exp.pearson_threshold, exp.importance_threshold,
                          exp.gbdt_config())
    (out / "selection.json").write_text(json.dumps(sel.to_dict(), indent=1, sort_keys=True) + "\n")
    return finish_run(out, cfg, "features", {"features_csv": str(features_csv)})


def cmd_train(features_csv, cfg: RunConfig, out: Path) -> Path:
    """Train one model on every vehicle at the first configured history length."""
    from .evalbench.experiment import resolve_features

    table = _read_table(features_csv)
    exp = cfg.experiment
    L = exp.history_lens[0]
    sel = None
    if isinstance(exp.feature_set, str) and exp.feature_set != "reference":
        series = vehicle_series(table, CATALOG, exp.smooth_window)
        smoothed = np.array([series[v].capacity[w] for v, w in zip(table.vehicle_ids, table.weeks)])
        sel = select_features(table.with_capacity(smoothed), exp.pearson_threshold, exp.importance_threshold,
                              exp.gbdt_config())
    names = resolve_features(exp, sel)
    norm = fit_normalizer(table, names, fold="train:all")
    series = vehicle_series(table, names, exp.smooth_window)
    windows = [w for s in series.values() for w in normalized_windows(s, norm, L, exp.horizon, exp.train_stride,
                                                                      exp.use_capacity)]
    if not windows:
        raise ValueError(f"no training windows at history length {L}")
    model = CduaModel(exp.model_config(L, len(names), derive_seed(cfg.seed, "init", L, "all") % 2**32))
    schedule = exp.schedule()
    result = train(model, windows, schedule, exp.train_config(derive_seed(cfg.seed, "train", L, "all") % 2**32))
    meta = {"features": names, "normalizer": normalizer_to_dict(norm), "diffusion_steps": exp.diffusion_steps,
            "beta_start": exp.beta_start, "beta_end": exp.beta_end, "rescale_betas": exp.rescale_betas,
            "smooth_window": exp.smooth_window, "n_samples": exp.n_samples, "seed": cfg.seed}
    save_checkpoint(model, out / "checkpoint", meta)
    (out / "loss_history.json").write_text(json.dumps(result.history) + "\n")
    return finish_run(out, cfg, "train", {"features_csv": str(features_csv)})


def read_history_csv(path, names) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-vehicle (weeks, capacity, feature matrix) from a CSV holding at least the model's columns."""
    need = ["vehicle_id", "week", "capacity_ah"] + [n for n in names if n != "week"]
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: history lacks model feature columns {missing}")
        rows: dict[str, list] = {}
        for row in reader:
            week = int(row["week"])
            feats = [float(week) if n == "week" else float(row[n]) for n in names]
            rows.setdefault(row["vehicle_id"], []).append((week, float(row["capacity_ah"]), feats))
    out = {}
    for vid, items in sorted(rows.items()):
        items.sort(key=lambda r: r[0])
        out[vid] = (np.array([r[0] for r in items]), np.array([r[1] for r in items]),
                    np.array([r[2] for r in items], dtype=np.float64).reshape(len(items), len(names)))
    return out


def cmd_forecast(checkpoint, history_csv, cfg: RunConfig, out: Path) -> Path:
    model = load_checkpoint(checkpoint)
    meta = load_checkpoint_meta(checkpoint)
    names = meta["features"]
    norm = normalizer_from_dict(meta["normalizer"])
    exp = replace(cfg.experiment, diffusion_steps=meta["diffusion_steps"], beta_start=meta["beta_start"],
                  beta_end=meta["beta_end"], rescale_betas=meta["rescale_betas"])
    schedule = exp.schedule()
    L, H = model.cfg.history_len, model.cfg.horizon
    n = cfg.experiment.n_samples
    rows, traj_rows = [], []
    for vid, (weeks, cap, feats) in read_history_csv(history_csv, names).items():
        span = int(weeks.max()) + 1
        dense_cap = np.full(span, np.nan)
        dense_cap[weeks] = cap
        dense_f = np.full((span, len(names)), np.nan)
        dense_f[weeks] = feats
        if span < L:
            log.warning("%s: %d weeks of history, need %d; skipped", vid, span, L)
            continue
        dense_cap = smooth_observed(dense_cap, meta["smooth_window"]) if meta["smooth_window"] > 1 else dense_cap
        u = norm.transform(dense_f[-L:])
        block = np.concatenate([u, norm.transform_capacity(dense_cap[-L:])[:, None]], 1) if model.cfg.use_capacity else u
        block[np.isnan(dense_f[-L:]).any(axis=1)] = np.nan
        hist = _fill_history(block)
        if hist is None:
            log.warning("%s: history has unfillable gaps; skipped", vid)
            continue
        seed = derive_seed(cfg.seed, "forecast", vid, span) % 2**32
        tr = norm.inverse_capacity(forecast_windows(model, schedule, hist[None], n, [seed])[0])
        mean, std = tr.mean(axis=0), tr.std(axis=0)
        for h in range(H):
            week = span + h
            rows.append([vid, week, repr(float(mean[h])), repr(float(std[h])), repr(float(mean[h] - CI_Z * std[h])),
                         repr(float(mean[h] + CI_Z * std[h]))])
            traj_rows.append([vid, week] + [repr(float(v)) for v in tr[:, h]])
    with (out / "forecast.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "week", "mean_ah", "std_ah", "lower95_ah", "upper95_ah"])
        w.writerows(rows)
    with (out / "trajectories.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "week"] + [f"t{i:02d}" for i in range(n)])
        w.writerows(traj_rows)
    return finish_run(out, cfg, "forecast", {"checkpoint": str(checkpoint), "history_csv": str(history_csv)})


def cmd_evaluate(features_csv, cfg: RunConfig, out: Path, plots: bool = True) -> Path:
    table = _read_table(features_csv)
    report = run_experiment(table, cfg.experiment, workers=cfg.threads)
    emit_report(report, out, plots=plots)
    return finish_run(out, cfg, "evaluate", {"features_csv": str(features_csv)})


def cmd_ablate(features_csv, cfg: RunConfig, mode: str, out: Path, plots: bool = True) -> Path:
    table = _read_table(features_csv)
    if mode == "features":
        report = run_feature_ablation(table, cfg.experiment, workers=cfg.threads)
    elif mode == "model":
        report = run_model_ablation(table, cfg.experiment, workers=cfg.threads)
    else:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    emit_report(report, out, plots=plots)
    return finish_run(out, cfg, f"ablate:{mode}", {"features_csv": str(features_csv)})


# ---- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (see --emit-default-config)")
    common.add_argument("--seed", type=int)
    common.add_argument("--horizon", type=int, help="forecast length H in weeks")
    common.add_argument("--history-len", type=int, choices=(8, 16, 24, 32))
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--feature-set", help="f1 | f2 | f3 | reference | custom:PATH")
    common.add_argument("--threads", type=int)
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("--no-plots", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cdua", description="Probabilistic battery capacity forecasting.")
    p.add_argument("--emit-default-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command")
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic fleet")
    s.add_argument("--no-raw-logs", action="store_true")
    s = sub.add_parser("ingest", parents=[common], help="charging log -> weekly labels and features")
    s.add_argument("raw_csv", type=Path)
    s = sub.add_parser("features", parents=[common], help="feature selection report")
    s.add_argument("features_csv", type=Path)
    s = sub.add_parser("train", parents=[common], help="train one model on all vehicles")
    s.add_argument("features_csv", type=Path)
    s = sub.add_parser("forecast", parents=[common], help="forecast from a checkpoint")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("history_csv", type=Path)
    s = sub.add_parser("evaluate", parents=[common], help="cross-validated evaluation")
    s.add_argument("features_csv", type=Path)
    s = sub.add_parser("ablate", parents=[common], help="feature or model ablation")
    s.add_argument("mode", choices=("features", "model"))
    s.add_argument("features_csv", type=Path)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    history = (args.history_len,) if args.history_len else None
    cfg = cfg.with_overrides(seed=args.seed, threads=args.threads, horizon=args.horizon, history_lens=history,
                             variant=args.variant)
    return _apply_feature_set(cfg, args.feature_set)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.emit_default_config:
        sys.stdout.write(RunConfig().dumps())
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        plots = not args.no_plots
        if args.command == "synth":
            cmd_synth(cfg, out, raw_logs=not args.no_raw_logs)
        elif args.command == "ingest":
            cmd_ingest(args.raw_csv, cfg, out)
        elif args.command == "features":
            cmd_features(args.features_csv, cfg, out)
        elif args.command == "train":
            cmd_train(args.features_csv, cfg, out)
        elif args.command == "forecast":
            cmd_forecast(args.checkpoint, args.history_csv, cfg, out)
        elif args.command == "evaluate":
            cmd_evaluate(args.features_csv, cfg, out, plots)
        elif args.command == "ablate":
            cmd_ablate(args.features_csv, cfg, args.mode, out, plots)
    except TrainingAborted as exc:
        log.error("training aborted: %s", exc)
        return EXIT_ABORT
    except (SchemaError, CheckpointError) as exc:
        log.error("schema error: %s", exc)
        return EXIT_SCHEMA
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    print(out / "manifest.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
