"""Named parameter storage and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamStore:
    """Owns every trainable tensor by unique dotted name, plus Adam moments."""

    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def create(self, name: str, shape, init: str = "normal", fan_in: int | None = None,
               scale: float = 1.0) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            fan = fan_in if fan_in is not None else shape[0]
            data = self.rng.standard_normal(shape) * (scale / np.sqrt(fan))
        else:
            raise ValueError(f"unknown init {init!r}")
        # keep initial weights float32-representable so checkpoints round-trip
        t = Tensor(data.astype(np.float32).astype(np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros(shape)
        self.v[name] = np.zeros(shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].data = arr.copy()

    def quantize(self) -> None:
        """Round every parameter to float32 precision (the storage format)."""
        for p in self.params.values():
            p.data = p.data.astype(np.float32).astype(np.float64)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, grads: dict[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam; uses ``param.grad`` unless ``grads`` is given.

    Parameters without a gradient are treated as having a zero gradient.
    """
    if grads is None:
        grads = {k: p.grad for k, p in store.params.items() if p.grad is not None}
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradients at step {store.step + 1}: {', '.join(bad[:5])}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
