"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                      seed: int = 0, floor: float = 1.0) -> float:
    """Return the worst relative error between backward() and central differences.

    ``fn`` maps Tensors to a Tensor; it is reduced to a scalar by a fixed random
    projection so every output element contributes. Each element's error is
    ``|a - n| / max(|a|, |n|, floor * s)`` where ``s`` is the largest gradient
    magnitude of that input. The default ``floor=1`` makes this the max-norm
    relative error; smaller floors judge tiny entries on their own scale,
    where summation round-off dominates.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def evaluate(vals):
        return fn(*[Tensor(v) for v in vals]).data

    worst = 0.0
    for i, base in enumerate(arrays):
        numeric = np.empty_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            # difference outputs before projecting: untouched elements cancel exactly
            step = plus[i].reshape(-1)[j] - minus[i].reshape(-1)[j]
            flat[j] = float(np.sum((evaluate(plus) - evaluate(minus)) * proj)) / step
        a = analytic[i]
        scale = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(a), initial=0.0)))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), max(floor * scale, 1e-12))
        err = np.abs(a - numeric) / denom
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
