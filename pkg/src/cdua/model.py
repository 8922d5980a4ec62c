"""The CDUA network: a 1D context U-Net encoder and a cross-attention noise predictor."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph import kernels as K
from .graph.checkpoint import load_params, save_params
from .graph.layers import AttentionBlock, Conv1d, Dense, ResidualBlock, Upsample
from .graph.optim import ParamStore
from .graph.tensor import Tensor

VARIANTS = ("full", "no_self_attn", "no_cross_attn", "backbone")


@dataclass(frozen=True)
class CduaConfig:
    history_len: int = 8
    horizon: int = 8
    feature_dim: int = 9
    use_capacity: bool = True
    channels: tuple[int, ...] = (32, 64, 128)
    heads: int = 4
    time_embed_dim: int = 64
    variant: str = "full"
    upsample: str = "transposed"
    groups: int = 8
    parametrization: str = "v"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.parametrization not in ("eps", "v"):
            raise ValueError(f"parametrization must be 'eps' or 'v', got {self.parametrization!r}")
        if len(self.channels) < 2:
            raise ValueError("channels needs at least two entries (one down stage)")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must strictly increase, got {self.channels}")
        for c in self.channels:
            if c % self.groups or c % self.heads:
                raise ValueError(f"channel width {c} must be divisible by groups={self.groups} and heads={self.heads}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.history_len < 1 or self.horizon < 1:
            raise ValueError("history_len and horizon must be positive")
        if self.in_channels < 1:
            raise ValueError("model needs at least one input channel")

    @property
    def stages(self) -> int:
        return len(self.channels) - 1

    @property
    def in_channels(self) -> int:
        return self.feature_dim + int(self.use_capacity)

    @property
    def padded_len(self) -> int:
        unit = 2**self.stages
        return max(unit, math.ceil(self.history_len / unit) * unit)

    @property
    def self_attention(self) -> bool:
        return self.variant in ("full", "no_cross_attn")

    @property
    def cross_attention(self) -> bool:
        return self.variant in ("full", "no_self_attn")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CduaConfig":
        return cls(**d)


@dataclass
class ContextMap:
    """Encoder output tokens ``B x T_ctx x D_ctx`` plus an optional key mask."""

    tokens: Tensor
    mask: np.ndarray | None = None

    def repeat(self, n: int) -> "ContextMap":
        """Each row repeated ``n`` times consecutively (row-major ensemble layout)."""
        tokens = Tensor(np.repeat(self.tokens.data, n, axis=0))
        mask = None if self.mask is None else np.repeat(self.mask, n, axis=0)
        return ContextMap(tokens, mask)

    def take(self, rows) -> "ContextMap":
        tokens = Tensor(self.tokens.data[rows])
        return ContextMap(tokens, None if self.mask is None else self.mask[rows])


class ContextUnet:
    """Down path of residual blocks, stride-2 convs and optional self-attention,
    a residual bottleneck, and an up path that fuses encoder skips."""

    def __init__(self, store: ParamStore, cfg: CduaConfig, prefix: str = "enc"):
        self.cfg = cfg
        ch = cfg.channels
        g = cfg.groups
        self.inp = Conv1d(store, f"{prefix}.inp", cfg.in_channels, ch[0])
        self.down = []
        for i in range(cfg.stages):
            p = f"{prefix}.down{i}"
            self.down.append({
                "res_a": ResidualBlock(store, f"{p}.res_a", ch[i], ch[i], g),
                "res_b": ResidualBlock(store, f"{p}.res_b", ch[i], ch[i], g),
                "pool": Conv1d(store, f"{p}.pool", ch[i], ch[i + 1], stride=2),
                "attn": AttentionBlock(store, f"{p}.attn", ch[i + 1], cfg.heads, groups=g)
                if cfg.self_attention else None,
            })
        self.mid = ResidualBlock(store, f"{prefix}.mid", ch[-1], ch[-1], g)
        self.up = []
        for i in reversed(range(cfg.stages)):
            p = f"{prefix}.up{i}"
            self.up.append({
                "stage": i,
                "upsample": Upsample(store, f"{p}.upsample", ch[i + 1], ch[i + 1], cfg.upsample),
                "res_a": ResidualBlock(store, f"{p}.res_a", ch[i + 1] + ch[i], ch[i], g),
                "res_b": ResidualBlock(store, f"{p}.res_b", ch[i], ch[i], g),
            })
        self.positional = K.sinusoidal_encoding(np.arange(cfg.padded_len), ch[0]).T
        # stage indices whose skip is zeroed; fault-injection hook for tests
        self.dropped_skips: set[int] = set()
        self.trace_lengths: list[int] = []

    def layers(self):
        yield self.inp
        for stage in self.down:
            yield from (v for v in stage.values() if v is not None)
        yield self.mid
        for stage in self.up:
            yield from (v for k, v in stage.items() if k != "stage")

    def attention_blocks(self) -> list[AttentionBlock]:
        return [l for layer in self.layers() for l in layer.walk() if isinstance(l, AttentionBlock)]

    def __call__(self, x: np.ndarray) -> ContextMap:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.cfg.in_channels:
            raise ValueError(f"history block must be B x L x {self.cfg.in_channels}, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("history block contains NaN or Inf")
        B, L, _ = x.shape
        Lp = self.cfg.padded_len
        if L > Lp:
            raise ValueError(f"history length {L} exceeds configured {self.cfg.history_len}")
        mask = None
        if L < Lp:
            x = np.concatenate([np.zeros((B, Lp - L, x.shape[2])), x], axis=1)
            mask = np.zeros((B, Lp), dtype=bool)
            mask[:, Lp - L:] = True
        h = self.inp(Tensor(x.transpose(0, 2, 1)))
        h = K.add(h, self.positional)
        self.trace_lengths = [h.shape[2]]
        skips = []
        for stage in self.down:
            h = stage["res_b"](stage["res_a"](h))
            skips.append(h)
            h = stage["pool"](h)
            if stage["attn"] is not None:
                h = stage["attn"](h)
            self.trace_lengths.append(h.shape[2])
        h = self.mid(h)
        for stage in self.up:
            h = stage["upsample"](h)
            skip = skips[stage["stage"]]
            if stage["stage"] in self.dropped_skips:
                skip = Tensor(np.zeros(skip.shape))
            h = K.concat([h, skip], axis=1)
            h = stage["res_b"](stage["res_a"](h))
            self.trace_lengths.append(h.shape[2])
        return ContextMap(K.transpose(h, (0, 2, 1)), mask)


class NoisePredictor:
    """Embeds noisy future tokens, adds the timestep embedding to the context map,
    and fuses context by cross-attention (or pooled bias when ablated).

    The output is always a noise estimate. With ``parametrization="v"`` the
    network head predicts ``v`` and the noise follows in closed form as
    ``sqrt(ab) v + sqrt(1 - ab) y_t``, which keeps every gain at or below one.
    """

    def __init__(self, store: ParamStore, cfg: CduaConfig, prefix: str = "den"):
        self.cfg = cfg
        d = cfg.channels[0]
        g = cfg.groups
        self.y_in = Dense(store, f"{prefix}.y_in", 1, d)
        self.t1 = Dense(store, f"{prefix}.t1", cfg.time_embed_dim, d)
        self.t2 = Dense(store, f"{prefix}.t2", d, d)
        self.res1 = ResidualBlock(store, f"{prefix}.res1", d, d, g, cond_dim=d, norm=False)
        if cfg.cross_attention:
            self.cross = AttentionBlock(store, f"{prefix}.cross", d, cfg.heads, context_dim=d, groups=g)
            self.pool = None
        else:
            self.cross = None
            self.pool = Dense(store, f"{prefix}.pool", d, d)
        self.res2 = ResidualBlock(store, f"{prefix}.res2", d, d, g, cond_dim=d, norm=False)
        self.out = Dense(store, f"{prefix}.out", d, 1, zero=True)
        Lp = cfg.padded_len
        # future tokens continue the history's position index
        self.positional = K.sinusoidal_encoding(np.arange(Lp, Lp + cfg.horizon), d)

    def layers(self):
        for layer in (self.y_in, self.t1, self.t2, self.res1, self.cross, self.pool, self.res2, self.out):
            if layer is not None:
                yield layer

    def time_embedding(self, t: np.ndarray) -> Tensor:
        raw = Tensor(K.sinusoidal_encoding(np.asarray(t, dtype=np.float64), self.cfg.time_embed_dim))
        return self.t2(K.gelu(self.t1(raw)))

    def __call__(self, y_t, t, ctx: ContextMap, alpha_bar=None) -> Tensor:
        y = np.asarray(y_t.data if isinstance(y_t, Tensor) else y_t, dtype=np.float64)
        B, H = y.shape
        if H != self.cfg.horizon:
            raise ValueError(f"expected horizon {self.cfg.horizon}, got {H}")
        t = np.broadcast_to(np.asarray(t), (B,))
        d = self.cfg.channels[0]
        tok = K.add(self.y_in(Tensor(y[:, :, None])), self.positional)
        temb = self.time_embedding(t)
        context = K.add(ctx.tokens, K.reshape(temb, (B, 1, d)))
        h = self.res1(K.transpose(tok, (0, 2, 1)), temb)
        if self.cross is not None:
            h = self.cross(h, context=context, key_mask=ctx.mask)
        else:
            if ctx.mask is None:
                pooled = K.mean(context, axis=1)
            else:
                w = ctx.mask / ctx.mask.sum(axis=1, keepdims=True)
                pooled = K.sum_(K.mul(context, w[:, :, None]), axis=1)
            h = K.add(h, K.reshape(self.pool(pooled), (B, d, 1)))
        h = self.res2(h, temb)
        head = K.reshape(self.out(K.transpose(h, (0, 2, 1))), (B, H))
        if self.cfg.parametrization == "eps":
            return head
        if alpha_bar is None:
            raise ValueError("v-parametrized predictor needs alpha_bar for each row")
        # head estimates v = sqrt(ab) eps - sqrt(1 - ab) y0; rewrite as eps
        ab = np.broadcast_to(np.asarray(alpha_bar, dtype=np.float64), (B,))[:, None]
        return K.add(K.mul(head, np.sqrt(ab)), np.sqrt(1.0 - ab) * y)


class CduaModel:
    """Encoder + noise predictor sharing one parameter store."""

    def __init__(self, cfg: CduaConfig):
        self.cfg = cfg
        self.store = ParamStore(seed=cfg.seed)
        self.encoder = ContextUnet(self.store, cfg)
        self.predictor = NoisePredictor(self.store, cfg)

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    def encode(self, x: np.ndarray) -> ContextMap:
        return self.encoder(x)

    def predict_noise(self, y_t, t, ctx: ContextMap, alpha_bar=None) -> Tensor:
        """Noise estimate for ``y_t`` at steps ``t``; ``alpha_bar`` holds the
        cumulative signal level of each row and is required for ``v`` heads."""
        return self.predictor(y_t, t, ctx, alpha_bar)

    def parameter_count(self, prefix: str | None = None) -> int:
        return int(sum(p.data.size for n, p in self.store.params.items()
                       if prefix is None or n.startswith(prefix)))

    def save(self, directory) -> Path:
        directory = Path(directory)
        save_params(self.store, directory)
        (directory / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "CduaModel":
        directory = Path(directory)
        cfg_path = directory / "config.json"
        if not cfg_path.exists():
            from .graph.checkpoint import CheckpointError
            raise CheckpointError(f"missing {cfg_path}")
        model = cls(CduaConfig.from_dict(json.loads(cfg_path.read_text())))
        load_params(model.store, directory)
        return model
