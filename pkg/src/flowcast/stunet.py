"""Spatio-temporal U-Net velocity network with a side encoder.

Both flow models of the cascade share this architecture. The primary
condition is concatenated with the flow state frame-by-frame on the
channel axis; the secondary condition runs through a side encoder whose
pooled features drive zero-initialized FiLM heads, injected only at the
deeper scales so the network cannot shortcut through it. Time (and,
for the rectifier, the segment index) enters through an embedding added
inside every spatial residual block.

Spatial blocks treat frames independently; temporal blocks fold the frame
axis into channels and mix with bottleneck point-wise convolutions plus
channel attention, so inter-frame structure is modeled without any
spatial attention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class STUNetConfig:
    m: int = 5  # frames per segment
    base: int = 8
    mults: tuple[int, ...] = (1, 2, 2)
    blocks: int = 1  # spatial residual blocks per scale
    side_scales: tuple[int, ...] = (1, 2)
    emb_dim: int = 64
    index_vocab: int = 0  # 0 disables the segment-index condition
    temporal_ratio: int = 4
    attn_ratio: int = 4

    def channels(self) -> tuple[int, ...]:
        return tuple(self.base * m for m in self.mults)

    def validate(self) -> "STUNetConfig":
        n_scales = len(self.mults)
        if n_scales < 2:
            raise ConfigError("need at least 2 scales")
        if self.m < 1:
            raise ConfigError(f"segment length must be >= 1, got {self.m}")
        if self.emb_dim % 2:
            raise ConfigError(f"embedding dim must be even, got {self.emb_dim}")
        if not self.side_scales:
            raise ConfigError("side encoder needs at least one injection scale")
        if any(s < 0 or s >= n_scales for s in self.side_scales):
            raise ConfigError(f"side scales {self.side_scales} out of range for {n_scales} scales")
        if min(self.side_scales) < n_scales // 2:
            raise ConfigError(
                f"side injection must stay in the deeper half of the U-Net: "
                f"min scale {min(self.side_scales)} < {n_scales // 2}"
            )
        for c in self.channels():
            mc = self.m * c
            if mc % self.temporal_ratio or mc % self.attn_ratio:
                raise ConfigError(f"temporal channel count {mc} not divisible by ratios")
        return self

    def to_dict(self) -> dict:
        return {
            "m": self.m, "base": self.base, "mults": list(self.mults), "blocks": self.blocks,
            "side_scales": list(self.side_scales), "emb_dim": self.emb_dim,
            "index_vocab": self.index_vocab, "temporal_ratio": self.temporal_ratio,
            "attn_ratio": self.attn_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "STUNetConfig":
        d = dict(d)
        for key in ("mults", "side_scales"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


@dataclass
class ConditionBundle:
    """Per-segment conditioning for one velocity evaluation.

    `backbone_cond` is concatenated with the flow state channel-wise;
    `side_cond` feeds the side encoder. Both are [m,1,H,W] (or batched
    [B,m,1,H,W]). `t` may be a scalar or per-sample array; `segment_index`
    is required iff the network was configured with an index vocabulary.
    """

    backbone_cond: np.ndarray
    side_cond: np.ndarray
    t: float | np.ndarray = 0.0
    segment_index: int | np.ndarray | None = None


class SpatialResBlock(nn.Module):
    """Per-frame conv -> (+emb) -> norm -> act -> conv, with identity skip."""

    def __init__(self, c, emb_dim, rng, dtype=np.float32):
        self.conv1 = nn.Conv2d(c, c, 3, rng, dtype=dtype)
        self.norm = nn.GroupNorm(c, dtype=dtype)
        self.conv2 = nn.Conv2d(c, c, 3, rng, dtype=dtype, zero=True)
        self.emb_proj = nn.Dense(emb_dim, c, rng, dtype=dtype) if emb_dim else None

    def forward(self, x, emb=None, frames_per_sample=1):
        h = self.conv1(x)
        if emb is not None and self.emb_proj is not None:
            n, c, hh, ww = h.data.shape
            b = n // frames_per_sample
            bias = self.emb_proj(emb)  # [B, C]
            h5 = T.reshape(h, (b, frames_per_sample, c, hh, ww))
            h5 = T.add(h5, T.reshape(bias, (b, 1, c, 1, 1)))
            h = T.reshape(h5, (n, c, hh, ww))
        h = self.conv2(T.silu(self.norm(h)))
        return T.add(x, h)


class TemporalBlock(nn.Module):
    """Frame mixing via channel folding: [B,m,C,h,w] -> [B,m*C,h,w] ->
    bottleneck point-wise convs -> channel attention -> residual."""

    def __init__(self, m, c, rng, temporal_ratio=4, attn_ratio=4, dtype=np.float32):
        mc = m * c
        hidden = max(mc // temporal_ratio, 1)
        self.m = m
        self.c = c
        self.pw1 = nn.Conv2d(mc, hidden, 1, rng, dtype=dtype)
        self.pw2 = nn.Conv2d(hidden, mc, 1, rng, dtype=dtype, zero=True)
        self.attn = nn.ChannelAttention(mc, rng, ratio=attn_ratio, dtype=dtype)

    def forward(self, x):
        squeeze = x.data.ndim == 4  # [m,C,h,w] convenience form
        if squeeze:
            x = T.reshape(x, (1, *x.data.shape))
        b, m, c, h, w = x.data.shape
        if m != self.m or c != self.c:
            raise DimensionError(f"temporal block built for [m={self.m}, C={self.c}], got [m={m}, C={c}]")
        u = T.reshape(x, (b, m * c, h, w))
        v = self.pw2(T.silu(self.pw1(u)))
        v = self.attn(v)
        out = T.reshape(T.add(u, v), (b, m, c, h, w))
        return T.reshape(out, (m, c, h, w)) if squeeze else out


class STBlockStack(nn.Module):
    """blocks x SpatialResBlock followed by one TemporalBlock."""

    def __init__(self, m, c, blocks, emb_dim, rng, cfg: STUNetConfig, dtype=np.float32):
        self.res = [SpatialResBlock(c, emb_dim, rng, dtype=dtype) for _ in range(blocks)]
        self.temporal = TemporalBlock(m, c, rng, cfg.temporal_ratio, cfg.attn_ratio, dtype=dtype)
        self.m = m

    def forward(self, x, emb=None):  # x: frames [B*m, C, h, w]
        for block in self.res:
            x = block(x, emb, frames_per_sample=self.m)
        n, c, h, w = x.data.shape
        x5 = T.reshape(x, (n // self.m, self.m, c, h, w))
        x5 = self.temporal(x5)
        return T.reshape(x5, (n, c, h, w))


class SideEncoder(nn.Module):
    """Mirror of the down path that turns the side condition into FiLM params."""

    def __init__(self, cfg: STUNetConfig, rng, dtype=np.float32):
        ch = cfg.channels()
        self.stem = nn.Conv2d(1, ch[0], 3, rng, dtype=dtype)
        self.stages = [STBlockStack(cfg.m, c, cfg.blocks, 0, rng, cfg, dtype=dtype) for c in ch]
        self.downs = [nn.Conv2d(ch[s], ch[s + 1], 3, rng, dtype=dtype) for s in range(len(ch) - 1)]
        self.film_scales = tuple(sorted(cfg.side_scales))
        self.heads = [nn.FiLMHead(ch[s], rng, dtype=dtype) for s in self.film_scales]
        self.cfg = cfg

    def forward(self, side: Tensor) -> dict[int, tuple[Tensor, Tensor]]:
        m = self.cfg.m
        film: dict[int, tuple[Tensor, Tensor]] = {}
        h = self.stem(side)
        for s, stage in enumerate(self.stages):
            h = stage(h)
            if s in self.film_scales:
                n, c, hh, ww = h.data.shape
                pooled = T.mean(T.reshape(h, (n // m, m, c, hh * ww)), axis=3)
                film[s] = self.heads[self.film_scales.index(s)](pooled)  # ([B,m,C], [B,m,C])
            if s < len(self.stages) - 1:
                h = self.downs[s](T.avg_pool2d(h, 2))
        return film


class STUNet(nn.Module):
    def __init__(self, cfg: STUNetConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        ch = cfg.channels()
        n_scales = len(ch)
        self.cfg = cfg
        self.dtype = dtype
        self.stem = nn.Conv2d(2, ch[0], 3, rng, dtype=dtype)
        self.down_stages = [
            STBlockStack(cfg.m, ch[s], cfg.blocks, cfg.emb_dim, rng, cfg, dtype=dtype) for s in range(n_scales)
        ]
        self.downs = [nn.Conv2d(ch[s], ch[s + 1], 3, rng, dtype=dtype) for s in range(n_scales - 1)]
        self.ups = [nn.Conv2d(ch[s + 1], ch[s], 3, rng, dtype=dtype) for s in range(n_scales - 1)]
        self.merges = [nn.Conv2d(2 * ch[s], ch[s], 3, rng, dtype=dtype) for s in range(n_scales - 1)]
        self.up_stages = [
            STBlockStack(cfg.m, ch[s], cfg.blocks, cfg.emb_dim, rng, cfg, dtype=dtype) for s in range(n_scales - 1)
        ]
        self.head_norm = nn.GroupNorm(ch[0], dtype=dtype)
        self.head = nn.Conv2d(ch[0], 1, 3, rng, dtype=dtype, zero=True)
        self.side = SideEncoder(cfg, rng, dtype=dtype)
        self.emb_mlp = nn.MLP([cfg.emb_dim, cfg.emb_dim, cfg.emb_dim], rng, dtype=dtype)
        self.index_emb = (
            nn.Embedding(cfg.index_vocab, cfg.emb_dim, rng, dtype=dtype) if cfg.index_vocab else None
        )

    # -- conditioning ------------------------------------------------------

    def _embed(self, t, segment_index, batch: int) -> Tensor:
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        emb = Tensor(T.sinusoidal_embedding(t_arr, self.cfg.emb_dim).astype(self.dtype))
        if self.index_emb is not None:
            if segment_index is None:
                raise ConfigError("this network conditions on the segment index, but none was given")
            idx = np.broadcast_to(np.asarray(segment_index, dtype=np.int64), (batch,))
            if (idx < 0).any() or (idx >= self.cfg.index_vocab).any():
                raise ConfigError(f"segment index out of range [0, {self.cfg.index_vocab})")
            emb = T.add(emb, self.index_emb(idx))
        return self.emb_mlp(emb)

    def compute_film(self, side_cond: np.ndarray) -> dict[int, tuple[Tensor, Tensor]]:
        side = self._frames(side_cond, "side_cond")
        b, m = side.shape[0], side.shape[1]
        side_t = nn.as_input(side.reshape(b * m, 1, *side.shape[3:]), self.dtype)
        return self.side(side_t)

    @staticmethod
    def _frames(arr: np.ndarray, what: str) -> np.ndarray:
        arr = np.asarray(arr)
        if arr.ndim == 4:
            arr = arr[None]
        if arr.ndim != 5 or arr.shape[2] != 1:
            raise DimensionError(f"{what} must be [m,1,H,W] or [B,m,1,H,W], got {arr.shape}")
        return arr

    # -- forward -------------------------------------------------------------

    def forward(self, z_t, cond: ConditionBundle, film=None) -> Tensor:
        cfg = self.cfg
        z = self._frames(z_t.data if isinstance(z_t, Tensor) else z_t, "z_t")
        bc = self._frames(cond.backbone_cond, "backbone_cond")
        b, m, _, hh, ww = z.shape
        if m != cfg.m:
            raise DimensionError(f"expected {cfg.m} frames per segment, got {m}")
        if bc.shape != z.shape:
            raise DimensionError(f"backbone_cond shape {bc.shape} != z_t shape {z.shape}")
        depth = 2 ** (len(cfg.mults) - 1)
        if hh % depth or ww % depth:
            raise DimensionError(f"spatial dims {(hh, ww)} must be divisible by {depth}")

        emb = self._embed(cond.t, cond.segment_index, b)
        if film is None:
            film = self.compute_film(cond.side_cond)

        x = nn.as_input(np.concatenate([z, bc], axis=2).reshape(b * m, 2, hh, ww), self.dtype)
        h = self.stem(x)
        skips = []
        for s, stage in enumerate(self.down_stages):
            if s in film:
                scale, shift = film[s]
                n, c, sh, sw = h.data.shape
                h5 = T.film_modulate(T.reshape(h, (b, m, c, sh, sw)), scale, shift)
                h = T.reshape(h5, (n, c, sh, sw))
            h = stage(h, emb)
            if s < len(self.down_stages) - 1:
                skips.append(h)
                h = self.downs[s](T.avg_pool2d(h, 2))
        for s in range(len(self.up_stages) - 1, -1, -1):
            h = self.ups[s](T.upsample_nearest2d(h, 2))
            h = self.merges[s](T.concat([h, skips[s]], axis=1))
            h = self.up_stages[s](h, emb)
        out = self.head(T.silu(self.head_norm(h)))
        return T.reshape(out, (b, m, 1, hh, ww))

    def velocity(self, z_t: np.ndarray, cond: ConditionBundle, t, film=None) -> np.ndarray:
        """Gradient-free evaluation for the ODE solver; preserves input rank."""
        single = np.asarray(z_t).ndim == 4
        step = ConditionBundle(cond.backbone_cond, cond.side_cond, t=t, segment_index=cond.segment_index)
        with T.no_grad():
            out = self.forward(z_t, step, film=film).data
        return out[0] if single else out

    def make_sampler(self, cond: ConditionBundle):
        """Bind a segment's conditions once: the side encoder runs a single
        time instead of once per Euler step."""
        with T.no_grad():
            film = self.compute_film(cond.side_cond)

        def fn(x, _cond, t):
            return self.velocity(x, cond, t, film=film)

        return fn


def stunet_forward(model: STUNet, z_t: np.ndarray, cond: ConditionBundle) -> np.ndarray:
    """Single-segment velocity evaluation: [m,1,H,W] in, [m,1,H,W] out."""
    return model.velocity(z_t, cond, cond.t)


def spatial_residual_block(features, block: SpatialResBlock, emb=None, frames_per_sample=1):
    """Functional form of the per-frame residual block (testing hook)."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    return block.forward(x, emb, frames_per_sample=frames_per_sample)


def temporal_attention_block(features, block: TemporalBlock):
    """Functional form of the frame-mixing block (testing hook)."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    return block.forward(x)
