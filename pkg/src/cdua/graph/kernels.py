"""Differentiable kernels. Each returns a Tensor whose closure yields parent grads.

Sequence tensors are laid out batch x channels x length (``B, C, L``); token
tensors used by attention are ``B, T, D``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make(a.data * b.data, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return make(out, (x,), backward)


# ---------------------------------------------------------------- reductions / shape

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return make(x.data.transpose(axes), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


def slice_axis1(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make(x.data[:, start:stop], (x,), backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return make(x.data[..., start:stop], (x,), backward)


# ---------------------------------------------------------------- affine

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the trailing axis; ``w`` is ``D_in x D_out``."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, backward if b is not None else (lambda g: backward(g)[:2]))


def _im2col(xp: np.ndarray, K: int, stride: int, L_out: int) -> np.ndarray:
    span = stride * (L_out - 1) + 1
    cols = np.stack([xp[:, :, k:k + span:stride] for k in range(K)], axis=2)
    return cols.reshape(xp.shape[0], xp.shape[1] * K, L_out)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 1D convolution; ``w`` is ``C_out x C_in x K`` with odd K.

    Stride 1 keeps L; stride 2 yields ``ceil(L / 2)``.
    """
    B, C, L = x.shape
    C_out, C_in, K = w.shape
    if C != C_in:
        raise ValueError(f"conv1d: input has {C} channels, weight expects {C_in}")
    if K % 2 != 1:
        raise ValueError("conv1d: kernel size must be odd for same padding")
    if stride not in (1, 2):
        raise ValueError("conv1d: stride must be 1 or 2")
    pad = K // 2
    if L + 2 * pad < K:
        raise ValueError("conv1d: sequence shorter than kernel")
    L_out = (L + 2 * pad - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    cols = _im2col(xp, K, stride, L_out)
    w2 = w.data.reshape(C_out, C_in * K)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(w2.T, g).reshape(B, C_in, K, L_out)
        gxp = np.zeros_like(xp)
        span = stride * (L_out - 1) + 1
        for k in range(K):
            gxp[:, :, k:k + span:stride] += gcols[:, :, k, :]
        gx = gxp[:, :, pad:pad + L]
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, backward if b is not None else (lambda g: backward(g)[:2]))


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Length-doubling transposed convolution (kernel 4, stride 2, padding 1).

    ``w`` is ``C_in x C_out x 4``; output length is exactly ``2 L``.
    """
    B, C, L = x.shape
    C_in, C_out, K = w.shape
    if C != C_in:
        raise ValueError(f"conv_transpose1d: input has {C} channels, weight expects {C_in}")
    if K != 4:
        raise ValueError("conv_transpose1d: kernel size must be 4")
    stride, pad = 2, 1
    full_len = (L - 1) * stride + K
    # (C_out*K, C_in) @ (B, C_in, L) -> per-tap contributions
    wt = w.data.transpose(1, 2, 0).reshape(C_out * K, C_in)
    taps = np.matmul(wt, x.data).reshape(B, C_out, K, L)
    full = np.zeros((B, C_out, full_len))
    for k in range(K):
        full[:, :, k:k + stride * L:stride] += taps[:, :, k, :]
    out = full[:, :, pad:pad + 2 * L].copy()
    if b is not None:
        out += b.data[None, :, None]

    def backward(g):
        gfull = np.zeros((B, C_out, full_len))
        gfull[:, :, pad:pad + 2 * L] = g
        gtaps = np.stack([gfull[:, :, k:k + stride * L:stride] for k in range(K)], axis=2)
        gtaps = gtaps.reshape(B, C_out * K, L)
        gx = np.matmul(wt.T, gtaps)
        gwt = np.tensordot(gtaps, x.data, axes=([0, 2], [0, 2]))
        gw = gwt.reshape(C_out, K, C_in).transpose(2, 0, 1)
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, backward if b is not None else (lambda g: backward(g)[:2]))


def _interp_matrix(L: int) -> np.ndarray:
    """``L x 2L`` half-pixel linear interpolation weights; columns sum to 1."""
    m = np.zeros((L, 2 * L))
    for j in range(2 * L):
        src = min(max((j + 0.5) / 2.0 - 0.5, 0.0), L - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, L - 1)
        frac = src - i0
        m[i0, j] += 1.0 - frac
        m[i1, j] += frac
    return m


def upsample_linear(x: Tensor) -> Tensor:
    """Double the length by linear interpolation (edge-clamped)."""
    m = _interp_matrix(x.shape[-1])

    def backward(g):
        return (g @ m.T,)

    return make(x.data @ m, (x,), backward)


# ---------------------------------------------------------------- normalization

def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 8, eps: float = 1e-5) -> Tensor:
    """Normalize ``B x C x L`` per (sample, channel group), then per-channel affine."""
    B, C, L = x.shape
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible by {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(B, C, L)
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = (g * gamma.data[None, :, None]).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        n = xg.shape[2]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=2, keepdims=True)
                        - xh * (gxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(B, C, L), ggamma, gbeta

    return make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- attention

def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1,
              key_mask: np.ndarray | None = None, return_weights: bool = False):
    """Multi-head scaled dot-product attention.

    ``q`` is ``B x Tq x D``; ``k`` and ``v`` are ``B x Tk x D``. ``key_mask``
    (``B x Tk``, True = attend) removes keys from the softmax.
    """
    B, Tq, D = q.shape
    if k.shape != v.shape or k.shape[0] != B or k.shape[2] != D:
        raise ValueError(f"attention: shape mismatch q={q.shape} k={k.shape} v={v.shape}")
    if D % heads:
        raise ValueError(f"attention: dim {D} not divisible by {heads} heads")
    Tk = k.shape[1]
    dh = D // heads
    scale = 1.0 / math.sqrt(dh)

    def split(a, T):
        return a.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data, Tq), split(k.data, Tk), split(v.data, Tk)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if key_mask is not None:
        logits = np.where(key_mask[:, None, None, :], logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    oh = p @ vh
    out = oh.transpose(0, 2, 1, 3).reshape(B, Tq, D)

    def backward(g):
        gh = g.reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a, T):
            return a.transpose(0, 2, 1, 3).reshape(B, T, D)

        return merge(gq, Tq), merge(gk, Tk), merge(gv, Tk)

    result = make(out, (q, k, v), backward)
    if return_weights:
        return result, p
    return result


# ---------------------------------------------------------------- encodings

def sinusoidal_encoding(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos encoding; returns ``len(positions) x dim`` (or ``dim``
    for a scalar position). Constant, so no graph entry."""
    if dim % 2:
        raise ValueError(f"sinusoidal_encoding: dim must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)
    scalar = pos.ndim == 0
    pos = np.atleast_1d(pos)
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = pos[:, None] * freqs[None, :]
    enc = np.empty((pos.shape[0], dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc[0] if scalar else enc
