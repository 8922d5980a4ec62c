"""Run configuration: one JSON document with every knob, validated on load."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .evalbench.experiment import ExperimentConfig
from .synth import FleetConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass(frozen=True)
class IngestConfig:
    max_gap: float = 10.0
    min_points: int = 100
    min_soc_span: float = 5.0
    soc_backtrack_tol: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    ingest: IngestConfig = field(default_factory=IngestConfig)
    synth: FleetConfig = field(default_factory=FleetConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "threads": self.threads, "ingest": asdict(self.ingest),
                "synth": self.synth.to_dict(), "experiment": self.experiment.to_dict()}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply CLI overrides; ``seed`` propagates into the experiment."""
        exp = {k: v for k, v in kw.items() if v is not None and k in ExperimentConfig.__dataclass_fields__}
        top = {k: v for k, v in kw.items() if v is not None and k in ("seed", "threads")}
        if "seed" in top:
            exp["seed"] = top["seed"]
        try:
            return replace(self, experiment=replace(self.experiment, **exp), **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _check_keys(section: str, d: dict, cls) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def run_config_from_dict(d: dict) -> RunConfig:
    _check_keys("config", d, RunConfig)
    try:
        ingest = d.get("ingest", {})
        _check_keys("ingest", ingest, IngestConfig)
        synth = d.get("synth", {})
        _check_keys("synth", synth, FleetConfig)
        if "sessions" in synth:
            from .synth import SessionConfig
            _check_keys("synth.sessions", synth["sessions"], SessionConfig)
        exp = d.get("experiment", {})
        _check_keys("experiment", exp, ExperimentConfig)
        cfg = RunConfig(seed=int(d.get("seed", 0)), threads=int(d.get("threads", 1)), ingest=IngestConfig(**ingest),
                        synth=FleetConfig.from_dict(synth), experiment=ExperimentConfig.from_dict(exp))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.experiment.seed != cfg.seed and "seed" not in exp:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seed=cfg.seed))
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(data)
