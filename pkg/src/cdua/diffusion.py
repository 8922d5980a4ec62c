"""Linear-schedule DDPM over future capacity sequences, conditioned on history.

Symbols follow the usual DDPM convention: ``alpha = 1 - beta`` and
``alpha_bar`` is its running product.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import kernels as K
from .graph.optim import adam_step
from .graph.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CI_Z = 1.96


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; parameters are rolled back to the last good epoch."""

    def __init__(self, message: str, epoch: int, history: list[float]):
        super().__init__(message)
        self.epoch = epoch
        self.history = history


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return t.astype(np.int64)

    def sigma(self, t) -> np.ndarray:
        return np.sqrt(self.beta[self.check_t(t) - 1])


def build_schedule(T: int = 700, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + (beta_end - beta_start) * np.arange(T, dtype=np.float64) / (T - 1)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def rescaled_schedule(T: int, reference_T: int = 700, beta_start: float = 1e-4,
                      beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear schedule for a shorter chain with betas stretched by ``reference_T / T``,
    so the terminal noise level roughly matches the reference chain."""
    k = reference_T / T
    return build_schedule(T, beta_start * k, beta_end * k)


def forward_sample(schedule: NoiseSchedule, y0, t, eps) -> np.ndarray:
    """``y_t = sqrt(alpha_bar_t) y0 + sqrt(1 - alpha_bar_t) eps``; ``t`` scalar or per-row."""
    t = schedule.check_t(t)
    y0 = np.asarray(y0, dtype=np.float64)
    ab = schedule.alpha_bar[t - 1]
    if ab.ndim == 1 and y0.ndim > 1:
        ab = ab.reshape((-1,) + (1,) * (y0.ndim - 1))
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


@dataclass
class SupervisedWindow:
    """History block ``x`` (L x channels), normalized targets ``y0`` and their validity mask."""

    x: np.ndarray
    y0: np.ndarray
    mask: np.ndarray
    vehicle_id: str = ""
    target_weeks: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        # masked entries carry a fixed sentinel so they cannot leak into the loss
        self.y0 = np.where(self.mask, np.asarray(self.y0, dtype=np.float64), 0.0)

    @property
    def full(self) -> bool:
        return bool(self.mask.all())


def stack_windows(windows: Sequence[SupervisedWindow]):
    x = np.stack([w.x for w in windows])
    mask = np.stack([w.mask for w in windows])
    y0 = np.where(mask, np.stack([w.y0 for w in windows]), 0.0)
    return x, y0, mask


def diffusion_loss(model, windows: Sequence[SupervisedWindow], schedule: NoiseSchedule,
                   rng: np.random.Generator, t=None, eps=None) -> Tensor:
    """Masked epsilon-prediction MSE on a batch; call ``.backward()`` for grads.

    ``t`` and ``eps`` are drawn from ``rng`` unless given.
    """
    x, y0, mask = stack_windows(windows)
    if not mask.any():
        raise ValueError("every target in the batch is masked")
    B = y0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    t = schedule.check_t(np.broadcast_to(t, (B,)))
    if eps is None:
        eps = rng.standard_normal(y0.shape)
    y_t = forward_sample(schedule, y0, t, eps)
    ctx = model.encode(x)
    eps_hat = model.predict_noise(y_t, t, ctx, schedule.alpha_bar[t - 1])
    diff = K.sub(eps_hat, eps)
    m = mask.astype(np.float64)
    return K.mul(K.sum_(K.mul(K.mul(diff, diff), m)), 1.0 / m.sum())


def evaluate_loss(model, windows: Sequence[SupervisedWindow], schedule: NoiseSchedule,
                  draws: int = 32, seed: int = 0) -> float:
    """Monte Carlo estimate of the expected masked loss using fixed draws."""
    rng = np.random.default_rng(seed)
    reps = [w for w in windows for _ in range(draws)]
    with no_grad():
        return float(diffusion_loss(model, reps, schedule, rng).data)


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    # independent (t, eps) draws per window in each step; >1 densifies
    # supervision when the window set is small
    noise_draws: int = 1
    # "constant" or "cosine" (anneals to lr_floor * lr by the last epoch)
    lr_schedule: str = "constant"
    lr_floor: float = 0.0

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr * (self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class TrainResult:
    history: list[float] = field(default_factory=list)
    steps: int = 0


def train(model, windows: Sequence[SupervisedWindow], schedule: NoiseSchedule, config: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam over shuffled mini-batches; returns the per-epoch mean loss.

    Parameters are rounded to float32 at the end so saved checkpoints reload
    bit-identically.
    """
    if not windows:
        raise ValueError("no training windows")
    if config.noise_draws < 1 or config.batch_size < 1 or config.epochs < 0:
        raise ValueError("epochs >= 0, batch_size >= 1 and noise_draws >= 1 required")
    if config.lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {config.lr_schedule!r}")
    store = model.store
    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    good = store.snapshot()
    n = len(windows)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        lr = config.lr_at(epoch)
        losses, weights = [], []
        for start in range(0, n, config.batch_size):
            batch = [windows[i] for i in order[start:start + config.batch_size]
                     for _ in range(config.noise_draws)]
            if not any(w.mask.any() for w in batch):
                continue
            store.zero_grad()
            loss = diffusion_loss(model, batch, schedule, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                store.restore(good)
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", epoch, result.history)
            loss.backward()
            try:
                adam_step(store, lr)
            except FloatingPointError as exc:
                store.restore(good)
                raise TrainingAborted(str(exc), epoch, result.history) from exc
            result.steps += 1
            losses.append(value)
            weights.append(len(batch) // config.noise_draws)
        epoch_loss = float(np.average(losses, weights=weights))
        result.history.append(epoch_loss)
        good = store.snapshot()
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
    store.quantize()
    return result


def reverse_step(model, schedule: NoiseSchedule, y_t: np.ndarray, t: int, ctx, z: np.ndarray) -> np.ndarray:
    """One ancestral step ``y_t -> y_{t-1}`` with ``sigma_t = sqrt(beta_t)``; no noise at t=1."""
    t = int(schedule.check_t(t))
    y_t = np.asarray(y_t, dtype=np.float64)
    with no_grad():
        eps_hat = model.predict_noise(y_t, np.full(y_t.shape[0], t), ctx, schedule.alpha_bar[t - 1]).data
    return _step(schedule, y_t, t, eps_hat, z)


def _step(schedule, y_t, t, eps_hat, z):
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    mean = (y_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    if t == 1:
        return mean
    return mean + math.sqrt(schedule.beta[t - 1]) * z


def sample_batch(model, schedule: NoiseSchedule, ctx, seeds: Sequence[int]) -> np.ndarray:
    """Run the full reverse chain for each context row; row ``i`` draws all of its
    noise from ``default_rng(seeds[i])``."""
    T = schedule.T
    H = model.horizon
    noise = np.stack([np.random.default_rng(int(s)).standard_normal((T + 1, H)) for s in seeds])
    y = noise[:, 0, :]
    with no_grad():
        for t in range(T, 0, -1):
            eps_hat = model.predict_noise(y, np.full(y.shape[0], t), ctx, schedule.alpha_bar[t - 1]).data
            y = _step(schedule, y, t, eps_hat, noise[:, T - t + 1, :])
    return y


def sample_trajectory(model, schedule: NoiseSchedule, ctx, seed: int) -> np.ndarray:
    """One trajectory (length H) for a single-row context."""
    return sample_batch(model, schedule, ctx, [seed])[0]


@dataclass
class ForecastEnsemble:
    trajectories: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_trajectories(cls, trajectories, z: float = CI_Z) -> "ForecastEnsemble":
        traj = np.asarray(trajectories, dtype=np.float64)
        if traj.ndim != 2 or traj.shape[0] < 2:
            raise ValueError("need an N x H trajectory array with N >= 2")
        mean = traj.mean(axis=0)
        std = traj.std(axis=0)  # population (1/N)
        return cls(traj, mean, std, mean - z * std, mean + z * std)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ForecastEnsemble":
        """Re-summarize after an elementwise transform of the trajectories (e.g. denormalization)."""
        return ForecastEnsemble.from_trajectories(fn(self.trajectories))


def sample_ensemble(model, schedule: NoiseSchedule, ctx, n: int = 40, base_seed: int = 0,
                    denormalize: Callable[[np.ndarray], np.ndarray] | None = None) -> ForecastEnsemble:
    """``n`` independent trajectories for one context row (seeds ``base_seed + i``)."""
    if n < 2:
        raise ValueError("ensemble needs n >= 2")
    traj = sample_batch(model, schedule, ctx.repeat(n), [base_seed + i for i in range(n)])
    if denormalize is not None:
        traj = denormalize(traj)
    return ForecastEnsemble.from_trajectories(traj)


def forecast_windows(model, schedule: NoiseSchedule, x: np.ndarray, n: int = 40,
                     base_seeds: Sequence[int] | None = None, chunk: int = 2048) -> np.ndarray:
    """Ensembles for a batch of history blocks; returns ``B x n x H`` normalized trajectories.

    Window ``b`` uses seeds ``base_seeds[b] + i``; contexts are encoded once.
    """
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    if base_seeds is None:
        base_seeds = [b * n for b in range(B)]
    with no_grad():
        ctx = model.encode(x)
    full = ctx.repeat(n)
    seeds = [int(base_seeds[b]) + i for b in range(B) for i in range(n)]
    out = np.empty((B * n, model.horizon))
    for start in range(0, B * n, chunk):
        rows = slice(start, min(start + chunk, B * n))
        out[rows] = sample_batch(model, schedule, full.take(rows), seeds[rows])
    return out.reshape(B, n, model.horizon)
