"""Parameterized building blocks composed from the kernels."""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .optim import ParamStore
from .tensor import Tensor


class Layer:
    kind = "layer"

    def sublayers(self) -> list["Layer"]:
        return [v for v in vars(self).values() if isinstance(v, Layer)] + [
            item for v in vars(self).values() if isinstance(v, list) for item in v if isinstance(item, Layer)
        ]

    def walk(self):
        yield self
        for sub in self.sublayers():
            yield from sub.walk()


class Dense(Layer):
    kind = "dense"

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, zero: bool = False):
        self.w = store.create(f"{name}.w", (d_in, d_out), init="zeros" if zero else "normal", fan_in=d_in)
        self.b = store.create(f"{name}.b", (d_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return K.dense(x, self.w, self.b)


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, zero: bool = False):
        self.stride = stride
        self.w = store.create(f"{name}.w", (c_out, c_in, kernel), init="zeros" if zero else "normal",
                              fan_in=c_in * kernel)
        self.b = store.create(f"{name}.b", (c_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return K.conv1d(x, self.w, self.b, stride=self.stride)


class Upsample(Layer):
    """Doubles the sequence length, by transposed conv or linear interpolation."""

    kind = "upsample"

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, mode: str = "transposed"):
        self.mode = mode
        if mode == "transposed":
            self.w = store.create(f"{name}.w", (c_in, c_out, 4), init="normal", fan_in=c_in * 2)
            self.b = store.create(f"{name}.b", (c_out,), init="zeros")
        elif mode == "linear":
            self.proj = Conv1d(store, f"{name}.proj", c_in, c_out, kernel=1) if c_in != c_out else None
        else:
            raise ValueError(f"unknown upsample mode {mode!r}")

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "transposed":
            return K.conv_transpose1d(x, self.w, self.b)
        y = K.upsample_linear(x)
        return self.proj(y) if self.proj is not None else y


class GroupNorm(Layer):
    kind = "group_norm"

    def __init__(self, store: ParamStore, name: str, channels: int, groups: int = 8):
        if channels % groups:
            raise ValueError(f"{name}: {channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.gamma = store.create(f"{name}.gamma", (channels,), init="ones")
        self.beta = store.create(f"{name}.beta", (channels,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return K.group_norm(x, self.gamma, self.beta, self.groups)


class ResidualBlock(Layer):
    """``GN -> GELU -> conv -> GN -> [FiLM] -> GELU -> conv`` plus identity or 1x1 skip.

    With ``cond_dim`` set, a conditioning vector (``B x cond_dim``) modulates the
    second normalization as ``h * (1 + scale) + shift``. ``norm=False`` drops
    both group norms, which keeps per-sample signal level visible to the branch.
    """

    kind = "residual_block"

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, groups: int = 8,
                 zero_init: bool = False, cond_dim: int | None = None, norm: bool = True):
        self.c_out = c_out
        self.norm1 = GroupNorm(store, f"{name}.norm1", c_in, groups) if norm else None
        self.conv1 = Conv1d(store, f"{name}.conv1", c_in, c_out)
        self.norm2 = GroupNorm(store, f"{name}.norm2", c_out, groups) if norm else None
        self.film = Dense(store, f"{name}.film", cond_dim, 2 * c_out) if cond_dim else None
        self.conv2 = Conv1d(store, f"{name}.conv2", c_out, c_out, zero=zero_init)
        self.skip = Conv1d(store, f"{name}.skip", c_in, c_out, kernel=1) if c_in != c_out else None

    def residual(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        h = self.conv1(K.gelu(self.norm1(x) if self.norm1 else x))
        if self.norm2 is not None:
            h = self.norm2(h)
        if self.film is not None:
            if cond is None:
                raise ValueError("conditioned residual block called without cond")
            ss = K.reshape(self.film(cond), (cond.shape[0], 2 * self.c_out, 1))
            scale = K.slice_axis1(ss, 0, self.c_out)
            shift = K.slice_axis1(ss, self.c_out, 2 * self.c_out)
            h = K.add(K.add(h, K.mul(h, scale)), shift)
        return self.conv2(K.gelu(h))

    def shortcut(self, x: Tensor) -> Tensor:
        return self.skip(x) if self.skip is not None else x

    def __call__(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        return K.add(self.residual(x, cond), self.shortcut(x))


class AttentionBlock(Layer):
    """Pre-norm multi-head attention with output projection and residual add.

    Inputs are ``B x C x L`` (query source); ``context`` is ``B x T x D`` tokens.
    Without ``context`` it is self-attention over the sequence axis.
    """

    kind = "attention"

    def __init__(self, store: ParamStore, name: str, channels: int, heads: int = 4,
                 context_dim: int | None = None, groups: int = 8):
        self.heads = heads
        kv_dim = context_dim or channels
        self.norm = GroupNorm(store, f"{name}.norm", channels, groups)
        self.q = Dense(store, f"{name}.q", channels, channels)
        self.k = Dense(store, f"{name}.k", kv_dim, channels)
        self.v = Dense(store, f"{name}.v", kv_dim, channels)
        self.out = Dense(store, f"{name}.out", channels, channels)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 key_mask: np.ndarray | None = None) -> Tensor:
        tokens = K.transpose(self.norm(x), (0, 2, 1))
        source = tokens if context is None else context
        attended, weights = K.attention(self.q(tokens), self.k(source), self.v(source),
                                        heads=self.heads, key_mask=key_mask, return_weights=True)
        self.last_weights = weights
        return K.add(x, K.transpose(self.out(attended), (0, 2, 1)))
