"""Deterministic predictive backbone.

A recurrent-free encoder / temporal-translator / decoder net (SimVP
lineage): frames are encoded independently, the translator mixes the
frame-stacked channels at half resolution and maps the input horizon to
the output horizon, and the decoder renders each output frame. Trained
with plain MSE, its forecasts are posterior means: sharp at short lead
times, progressively smoothed and damped further out. That decay is the
raw material the rectifier stage feeds on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import optim
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    l_in: int = 5
    l_out: int = 20
    hid_s: int = 8
    hid_t: int = 32
    n_t: int = 3  # translator conv blocks (including in/out projections)

    def validate(self) -> "BackboneConfig":
        if self.l_in < 1 or self.l_out < 1:
            raise ConfigError("horizons must be positive")
        if self.n_t < 2:
            raise ConfigError("translator needs at least in/out projections (n_t >= 2)")
        return self

    def to_dict(self) -> dict:
        return {"l_in": self.l_in, "l_out": self.l_out, "hid_s": self.hid_s,
                "hid_t": self.hid_t, "n_t": self.n_t}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d).validate()


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        hs, ht = cfg.hid_s, cfg.hid_t
        self.enc1 = nn.Conv2d(1, hs, 3, rng, dtype=dtype)
        self.enc_norm1 = nn.GroupNorm(hs, dtype=dtype)
        self.enc2 = nn.Conv2d(hs, hs, 3, rng, dtype=dtype)
        self.enc_norm2 = nn.GroupNorm(hs, dtype=dtype)
        self.trans_in = nn.Conv2d(cfg.l_in * hs, ht, 3, rng, dtype=dtype)
        self.trans_in_norm = nn.GroupNorm(ht, dtype=dtype)
        self.trans_mid = [nn.Conv2d(ht, ht, 3, rng, dtype=dtype) for _ in range(cfg.n_t - 2)]
        self.trans_mid_norm = [nn.GroupNorm(ht, dtype=dtype) for _ in range(cfg.n_t - 2)]
        self.trans_out = nn.Conv2d(ht, cfg.l_out * hs, 3, rng, dtype=dtype)
        self.dec1 = nn.Conv2d(hs, hs, 3, rng, dtype=dtype)
        self.dec_norm = nn.GroupNorm(hs, dtype=dtype)
        self.head = nn.Conv2d(hs, 1, 3, rng, dtype=dtype, zero=True)

    def forward(self, x) -> Tensor:
        """[B, L_in, 1, H, W] -> [B, L_out, 1, H, W], unclamped."""
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if arr.ndim != 5 or arr.shape[2] != 1:
            raise DimensionError(f"expected [B,L_in,1,H,W], got {arr.shape}")
        b, l_in, _, hh, ww = arr.shape
        cfg = self.cfg
        if l_in != cfg.l_in:
            raise DimensionError(f"backbone takes {cfg.l_in} input frames, got {l_in}")
        if hh % 2 or ww % 2:
            raise DimensionError(f"spatial dims {(hh, ww)} must be even")
        x = x if isinstance(x, Tensor) else nn.as_input(arr, self.dtype)

        h = T.reshape(x, (b * l_in, 1, hh, ww))
        h = T.silu(self.enc_norm1(self.enc1(h)))
        h = T.silu(self.enc_norm2(self.enc2(h)))
        h = T.avg_pool2d(h, 2)

        h = T.reshape(h, (b, l_in * cfg.hid_s, hh // 2, ww // 2))
        h = T.silu(self.trans_in_norm(self.trans_in(h)))
        for conv, norm in zip(self.trans_mid, self.trans_mid_norm):
            h = T.add(h, T.silu(norm(conv(h))))
        h = self.trans_out(h)

        h = T.reshape(h, (b * cfg.l_out, cfg.hid_s, hh // 2, ww // 2))
        h = T.upsample_nearest2d(h, 2)
        h = T.silu(self.dec_norm(self.dec1(h)))
        h = self.head(h)
        return T.reshape(h, (b, cfg.l_out, 1, hh, ww))


def backbone_forward(model: Backbone, x: np.ndarray) -> np.ndarray:
    """Posterior-mean forecast of one input window, clamped to the data range."""
    x = nn.check_frames(x, model.cfg.l_in, "input window")
    with T.no_grad():
        out = model.forward(x[None]).data[0]
    return np.clip(out, 0.0, 1.0)


def predict_segment_head(model: Backbone, s: np.ndarray) -> np.ndarray:
    """First segment of the backbone forecast for segment input `s`.

    Only defined when the segment length equals the backbone's input
    horizon, which is how the cascade is configured.
    """
    s = np.asarray(s)
    m = s.shape[0] if s.ndim == 4 else -1
    if m != model.cfg.l_in:
        raise ConfigError(
            f"segment length {m} != backbone input horizon {model.cfg.l_in}; "
            "rectification targets need m == L_in"
        )
    return backbone_forward(model, s)[:m]


def train_backbone(model: Backbone, samples, steps: int, batch: int,
                   rng: np.random.Generator, spec: optim.OptimizerSpec | None = None,
                   schedule_total: int | None = None, start_step: int = 0,
                   state: optim.AdamState | None = None,
                   snapshot_every: int = 50) -> list[float]:
    """MSE training; returns the per-step loss trace.

    Aborts on a non-finite loss after restoring the last snapshot, so the
    model left behind is always usable.
    """
    if not samples:
        raise ConfigError("training needs a non-empty dataset")
    spec = spec or optim.OptimizerSpec()
    store = model.param_store()
    state = state or optim.init_adam(store, spec.beta1, spec.beta2, spec.eps)
    total = schedule_total if schedule_total is not None else start_step + steps

    def make_loss(_step):
        idx = rng.integers(0, len(samples), size=batch)
        x = np.stack([samples[i].input for i in idx])
        y = np.stack([samples[i].target for i in idx])
        pred = model.forward(nn.as_input(x, model.dtype))
        return T.mse(pred, nn.as_input(y, model.dtype))

    return optim.run_training(store, state, make_loss, steps, spec,
                              schedule_total=total, start_step=start_step,
                              snapshot_every=snapshot_every)


def persistence_forecast(x: np.ndarray, l_out: int) -> np.ndarray:
    """Repeat the last observed frame; the no-skill reference."""
    x = nn.check_frames(x, None, "input window")
    return np.repeat(x[-1:], l_out, axis=0)
