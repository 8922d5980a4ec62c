"""Synthetic fleets with known degradation: weekly truth, charging sessions, and CSVs.

Sessions are stepped constant-current charges built so Coulomb counting
returns the intended capacity exactly (up to float round-off). Voltages drift
with internal resistance, which grows as capacity fades, so several features
carry real signal for the selectors to find.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureTable, compute_weekly_features
from .ingest import (SECONDS_PER_WEEK, ChargingRecord, ChargingSegment, WeeklySeries, write_charging_log,
                     write_weekly_csv)
from .seeding import derive_seed

N_CELLS = 96
FLEET_EPOCH = 1_600_000_000


@dataclass(frozen=True)
class DegradationProfile:
    initial_capacity: float = 150.0
    linear_fade: float = 0.05  # Ah / week
    knee_week: int | None = None
    knee_fade: float = 0.0  # extra Ah / week after the knee
    noise_std: float = 0.3
    weeks: int = 120

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.weeks < 1:
            raise ValueError("weeks must be >= 1")
        if self.true_capacity()[-1] <= 0:
            raise ValueError("profile fades to a non-positive capacity")

    def true_capacity(self) -> np.ndarray:
        w = np.arange(self.weeks, dtype=np.float64)
        cap = self.initial_capacity - self.linear_fade * w
        if self.knee_week is not None:
            cap -= self.knee_fade * np.maximum(w - self.knee_week, 0.0)
        return cap


@dataclass
class ProfileSeries:
    truth: np.ndarray
    observed: np.ndarray


def generate_profile(seed: int, template: DegradationProfile) -> ProfileSeries:
    """Piecewise-linear fade plus i.i.d. Gaussian observation noise."""
    truth = template.true_capacity()
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(truth.shape) * template.noise_std
    return ProfileSeries(truth, truth + noise)


@dataclass(frozen=True)
class SessionConfig:
    sessions_per_week: int = 1
    sample_interval: int = 8
    samples: tuple[int, int] = (140, 200)  # per session, inclusive range
    soc_start: tuple[float, float] = (15.0, 40.0)
    soc_span: tuple[float, float] = (40.0, 55.0)
    stage_fractions: tuple[float, ...] = (0.5, 0.3, 0.2)
    sensor_noise: float = 0.0  # std of voltage/temperature noise; current and SOC stay exact


def synthesize_sessions(true_capacity: float, week: int, seed: int, vehicle_id: str = "V00",
                        epoch: int = FLEET_EPOCH, fade: float = 0.0,
                        config: SessionConfig = SessionConfig()) -> list[ChargingSegment]:
    """Charging sessions for one vehicle-week whose Coulomb count equals ``true_capacity``.

    ``fade`` (fraction of capacity lost so far) raises internal resistance,
    which shows up in the voltage signals.
    """
    if true_capacity <= 0:
        raise ValueError("capacity must be positive")
    rng = np.random.default_rng(seed)
    dt = config.sample_interval
    segments = []
    slot = SECONDS_PER_WEEK // (config.sessions_per_week + 1)
    ambient = 20.0 + 8.0 * np.sin(2 * np.pi * week / 52.0)
    for k in range(config.sessions_per_week):
        n = int(rng.integers(config.samples[0], config.samples[1] + 1))
        soc0 = float(rng.uniform(*config.soc_start))
        span = float(rng.uniform(*config.soc_span))
        charge = true_capacity * span / 100.0  # Ah
        # split the n-1 charging samples (the last record carries zero current) across stages
        fr = np.asarray(config.stage_fractions, dtype=np.float64)
        counts = np.maximum(1, np.floor(fr * (n - 1)).astype(int))
        counts[0] += (n - 1) - counts.sum()
        stage_charge = charge * fr / fr.sum()
        current = np.concatenate([np.full(c, -q * 3600.0 / (c * dt)) for c, q in zip(counts, stage_charge)])
        current = np.append(current, 0.0)
        delivered = np.concatenate([[0.0], np.cumsum(-current[:-1] * dt / 3600.0)])
        soc = soc0 + 100.0 * delivered / true_capacity
        resistance = 0.08 * (1.0 + 4.0 * fade)  # pack ohms
        ocv_cell = 3.35 + 0.0085 * soc
        cell_spread = 0.006 + 0.05 * fade + 0.0002 * (soc - 50.0) ** 2 / 50.0
        pack_v = N_CELLS * ocv_cell - current * resistance
        mid_cell = pack_v / N_CELLS
        max_cell = mid_cell + cell_spread / 2
        min_cell = mid_cell - cell_spread / 2
        heat = 0.004 * (current**2) * resistance
        max_t = ambient + 2.0 + np.cumsum(heat) * dt / 3000.0
        min_t = ambient + 0.5 + 0.6 * (max_t - ambient - 2.0)
        if config.sensor_noise > 0:
            e = rng.standard_normal((4, n)) * config.sensor_noise
            pack_v = pack_v + e[0] * N_CELLS * 0.01
            max_cell = max_cell + np.abs(e[1]) * 0.01
            min_cell = min_cell - np.abs(e[2]) * 0.01
            max_t = max_t + np.abs(e[3])
        # the vehicle's first session carries no jitter so it anchors week 0
        jitter = 0 if (week == 0 and k == 0) else int(rng.integers(0, 3600))
        start = epoch + week * SECONDS_PER_WEEK + slot * (k + 1) + jitter
        stamps = start + dt * np.arange(n)
        records = [
            ChargingRecord(vehicle_id, int(stamps[i]), float(current[i]), float(pack_v[i]), float(soc[i]),
                           float(max_cell[i]), float(min_cell[i]), float(max_t[i]), float(min_t[i]))
            for i in range(n)
        ]
        segments.append(ChargingSegment(vehicle_id, records, float(dt)))
    return segments


@dataclass(frozen=True)
class FleetConfig:
    n_vehicles: int = 20
    weeks: int = 120
    initial_capacity: tuple[float, float] = (148.0, 152.0)
    linear_fade: tuple[float, float] = (0.04, 0.12)
    knee_probability: float = 0.3
    knee_week: tuple[int, int] = (60, 100)
    knee_fade: tuple[float, float] = (0.03, 0.1)
    noise_std: float = 0.3
    missing_rate: float = 0.0
    sessions: SessionConfig = field(default_factory=SessionConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FleetConfig":
        d = dict(d)
        if "sessions" in d and isinstance(d["sessions"], dict):
            d["sessions"] = SessionConfig(**{k: tuple(v) if isinstance(v, list) else v
                                             for k, v in d["sessions"].items()})
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SyntheticVehicle:
    vehicle_id: str
    profile: DegradationProfile
    truth: np.ndarray
    observed: np.ndarray
    present: np.ndarray  # weeks that have charging sessions


@dataclass
class SyntheticFleet:
    config: FleetConfig
    seed: int
    vehicles: list[SyntheticVehicle]

    def vehicle_ids(self) -> list[str]:
        return [v.vehicle_id for v in self.vehicles]

    def sessions(self, v: SyntheticVehicle, week: int) -> list[ChargingSegment]:
        if not v.present[week]:
            return []
        fade = 1.0 - v.truth[week] / v.profile.initial_capacity
        return synthesize_sessions(float(v.observed[week]), week, derive_seed(self.seed, "session", v.vehicle_id, week),
                                   v.vehicle_id, FLEET_EPOCH, fade, self.config.sessions)

    def iter_records(self):
        for v in self.vehicles:
            for week in range(self.config.weeks):
                for seg in self.sessions(v, week):
                    yield from seg.records

    def feature_table(self) -> FeatureTable:
        """Weekly features computed directly from the synthetic sessions."""
        rows = []
        for v in self.vehicles:
            for week in range(self.config.weeks):
                row = compute_weekly_features(self.sessions(v, week), week, float(v.observed[week]))
                if row is not None:
                    rows.append(row)
        return FeatureTable.from_rows(rows)

    def weekly(self) -> dict[str, WeeklySeries]:
        out = {}
        for v in self.vehicles:
            cap = np.where(v.present, v.observed, np.nan)
            n = v.present.astype(np.int64) * self.config.sessions.sessions_per_week
            out[v.vehicle_id] = WeeklySeries(v.vehicle_id, np.arange(self.config.weeks), cap, n)
        return out

    def write(self, out_dir, raw_logs: bool = True) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        if raw_logs:
            files["charging_log"] = out / "charging_log.csv"
            write_charging_log(files["charging_log"], self.iter_records())
        files["weekly"] = out / "weekly.csv"
        write_weekly_csv(files["weekly"], self.weekly())
        files["features"] = out / "features.csv"
        self.feature_table().to_csv(files["features"])
        files["ground_truth"] = out / "ground_truth.csv"
        with files["ground_truth"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("vehicle_id", "week", "true_capacity_ah"))
            for v in self.vehicles:
                for week, c in enumerate(v.truth):
                    w.writerow([v.vehicle_id, week, repr(float(c))])
        return files


def generate_fleet(config: FleetConfig = FleetConfig(), seed: int = 0) -> SyntheticFleet:
    vehicles = []
    for i in range(config.n_vehicles):
        vid = f"V{i:02d}"
        rng = np.random.default_rng(derive_seed(seed, "vehicle", vid))
        knee = rng.random() < config.knee_probability
        profile = DegradationProfile(
            initial_capacity=float(rng.uniform(*config.initial_capacity)),
            linear_fade=float(rng.uniform(*config.linear_fade)),
            knee_week=int(rng.integers(config.knee_week[0], config.knee_week[1] + 1)) if knee else None,
            knee_fade=float(rng.uniform(*config.knee_fade)) if knee else 0.0,
            noise_std=config.noise_std,
            weeks=config.weeks,
        )
        series = generate_profile(derive_seed(seed, "noise", vid), profile)
        present = rng.random(config.weeks) >= config.missing_rate
        present[0] = True  # anchors the week index at the first session
        vehicles.append(SyntheticVehicle(vid, profile, series.truth, series.observed, present))
    return SyntheticFleet(config, seed, vehicles)
