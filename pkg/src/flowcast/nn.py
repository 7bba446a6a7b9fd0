"""Layers and the module tree.

Parameters are discovered by walking attributes; dotted paths become the
stable names used by checkpoints, so attribute order and names must stay
fixed once a model has been released.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import ParamStore, Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[path] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{path}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{i}"] = item
        return out

    def param_store(self) -> ParamStore:
        store = ParamStore()
        for name, p in self.named_parameters().items():
            store.add(name, p)
        return store

    def n_params(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def freeze(self):
        for p in self.named_parameters().values():
            p.requires_grad = False
        return self

    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.named_parameters().values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(rng: np.random.Generator, shape, fan_in: int, dtype, zero: bool = False) -> Tensor:
    """He-style init (or zeros); always a trainable leaf."""
    if zero:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    """Shape-preserving conv by default (padding=(k-1)/2)."""

    def __init__(self, cin, cout, k, rng, dtype=np.float32, zero=False, pad=None):
        if k % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {k}")
        self.k = k
        self.pad = (k - 1) // 2 if pad is None else pad
        self.w = param(rng, (cout, cin, k, k), cin * k * k, dtype, zero=zero)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.conv2d(x, self.w, self.b, padding=self.pad)


class Dense(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32, zero=False, bias=True):
        self.w = param(rng, (cin, cout), cin, dtype, zero=zero)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.w)
        return y if self.b is None else T.add(y, self.b)


class GroupNorm(Module):
    """Group normalization with groups = min(8, C)."""

    def __init__(self, c, dtype=np.float32, eps=1e-5):
        self.groups = min(8, c)
        if c % self.groups:
            raise ConfigError(f"channels {c} not divisible by {self.groups} groups")
        self.eps = eps
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

    def forward(self, x):  # [N, C, H, W]
        return T.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class Embedding(Module):
    def __init__(self, vocab, dim, rng, dtype=np.float32, scale=0.02):
        self.table = Tensor((rng.standard_normal((vocab, dim)) * scale).astype(dtype), requires_grad=True)

    def forward(self, idx):
        return T.embedding(self.table, idx)


class ChannelAttention(Module):
    """Squeeze-excite over the channel axis with bottleneck ratio r."""

    def __init__(self, c, rng, ratio=4, dtype=np.float32):
        if c % ratio:
            raise ConfigError(f"attention ratio {ratio} must divide {c} channels")
        hidden = c // ratio
        self.w1 = param(rng, (hidden, c), c, dtype)
        self.w2 = param(rng, (c, hidden), hidden, dtype)

    def forward(self, x):
        return T.channel_attention(x, self.w1, self.w2)


class FiLMHead(Module):
    """Zero-initialized projection from pooled side features to (scale, shift)."""

    def __init__(self, c, rng, dtype=np.float32):
        self.proj = Dense(c, 2 * c, rng, dtype=dtype, zero=True)
        self.c = c

    def forward(self, pooled):  # [..., C] -> ([..., C], [..., C])
        lead = pooled.data.shape[:-1]
        flat = T.reshape(pooled, (-1, pooled.data.shape[-1]))
        ss = self.proj(flat)
        ss = T.reshape(ss, (*lead, 2 * self.c))
        scale = T.getitem(ss, (..., slice(0, self.c)))
        shift = T.getitem(ss, (..., slice(self.c, 2 * self.c)))
        return scale, shift


class MLP(Module):
    def __init__(self, sizes, rng, dtype=np.float32):
        self.layers = [Dense(a, b, rng, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.silu(x)
        return x


def frames_to_batch(x) -> Tensor:
    """[B, m, C, H, W] -> [B*m, C, H, W] for per-frame spatial layers."""
    b, m, c, h, w = x.data.shape
    return T.reshape(x, (b * m, c, h, w))


def batch_to_frames(x, b: int, m: int) -> Tensor:
    _, c, h, w = x.data.shape
    return T.reshape(x, (b, m, c, h, w))


def as_input(arr: np.ndarray, dtype) -> Tensor:
    """Wrap network input data as a constant (non-trainable) tensor."""
    arr = np.asarray(arr)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def check_frames(arr: np.ndarray, length: int | None, what: str) -> np.ndarray:
    """Validate a [T,1,H,W] frame stack and optionally its length."""
    arr = np.asarray(arr)
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise DimensionError(f"{what} must have shape [T,1,H,W], got {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise DimensionError(f"{what} must have {length} frames, got {arr.shape[0]}")
    return arr
