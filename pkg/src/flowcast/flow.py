"""Conditional flow matching: linear noise-to-data path, velocity regression,
Euler sampling.

The path is z_t = (1-t)*eps + t*x with constant target velocity v = x - eps;
sampling integrates the learned velocity field from t=0 (pure noise) to t=1
with fixed-step Euler. Both flow models of the cascade share these
routines and differ only in their conditioning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError
from .tensor import Tensor


@dataclass(frozen=True)
class SamplerConfig:
    """Euler solver settings: steps uniform in [0,1], noise from `seed`."""

    steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"sampler needs steps >= 1, got {self.steps}")


@dataclass
class FlowSample:
    """One velocity-regression training tuple."""

    eps: np.ndarray
    x: np.ndarray
    t: float
    z_t: np.ndarray
    v: np.ndarray


def fm_interpolate(eps: np.ndarray, x: np.ndarray, t) -> np.ndarray:
    """Point on the straight path: (1-t)*eps + t*x. Endpoints are exact."""
    eps = np.asarray(eps)
    x = np.asarray(x)
    if eps.shape != x.shape:
        raise DimensionError(f"noise shape {eps.shape} != data shape {x.shape}")
    t = np.asarray(t, dtype=eps.dtype)
    if t.ndim == 1:  # per-sample times against [B, ...] stacks
        t = t.reshape(-1, *([1] * (eps.ndim - 1)))
    return (1.0 - t) * eps + t * x


def make_flow_sample(eps: np.ndarray, x: np.ndarray, t: float) -> FlowSample:
    return FlowSample(eps=eps, x=x, t=float(t), z_t=fm_interpolate(eps, x, t), v=x - eps)


def fm_loss(model, samples: list[FlowSample], cond=None) -> Tensor:
    """Mean squared velocity-regression error over a batch.

    `model` is called once with the stacked batch: model(z_t [B,...],
    cond, t [B]) -> Tensor [B,...]. Returns the scalar loss tensor (mean
    over batch of the per-sample elementwise mean).
    """
    if not samples:
        raise DimensionError("fm_loss needs a non-empty batch")
    z = np.stack([s.z_t for s in samples])
    v = np.stack([s.v for s in samples])
    t = np.array([s.t for s in samples], dtype=z.dtype)
    pred = model(z, cond, t)
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    if not np.isfinite(pred.data).all():
        raise NumericError("velocity model produced non-finite output")
    return T.mse(pred, Tensor(v))


def euler_sample(model, cond, cfg: SamplerConfig, shape, dtype=np.float32) -> np.ndarray:
    """Integrate dx/dt = model(x, cond, t) from seeded noise at t=0 to t=1.

    `model` returns a plain ndarray (or Tensor) of the same shape; the
    solver itself never builds autodiff graph.
    """
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(shape).astype(dtype)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = k / cfg.steps
        v = model(x, cond, t)
        if isinstance(v, Tensor):
            v = v.data
        x = x + dt * np.asarray(v, dtype=dtype)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {k} (t={t:.4f})")
    return x


class ToyFlowNet:
    """Two-layer MLP velocity field on scalars; the flow-core test vehicle."""

    def __init__(self, hidden=64, seed=0, dtype=np.float64):
        from . import nn

        rng = np.random.default_rng(seed)
        self.net = nn.MLP([2, hidden, hidden, 1], rng, dtype=dtype)
        self.dtype = dtype

    def __call__(self, z, cond, t):
        z = np.asarray(z, dtype=self.dtype).reshape(-1, 1)
        t = np.broadcast_to(np.asarray(t, dtype=self.dtype), (z.shape[0],))
        feats = np.concatenate([z, t[:, None]], axis=1)
        return self.net(Tensor(feats))

    def velocity(self, z, cond, t) -> np.ndarray:
        with T.no_grad():
            return self(z, cond, t).data.reshape(np.asarray(z).shape)


def fit_flow_toy(a: float, b: float, hidden=64, train_steps=1500, batch=256,
                 lr_max=3e-3, lr_min=1e-5, seed=0) -> tuple[ToyFlowNet, list[float]]:
    """Train a tiny flow on the two-point target {a w.p. 1/2, b w.p. 1/2}.

    Returns the trained net and the per-step loss trace. The trained ODE's
    sample mean should approach (a+b)/2 (marginal-mean property).
    """
    from . import optim

    model = ToyFlowNet(hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed + 1)
    store = model.net.param_store()
    state = optim.init_adam(store)
    losses = []
    for step in range(train_steps):
        x = np.where(rng.random(batch) < 0.5, a, b).astype(np.float64)
        eps = rng.standard_normal(batch)
        t = rng.random(batch)
        z = fm_interpolate(eps, x, t)
        pred = model(z, None, t)
        loss = T.mse(pred, Tensor((x - eps)[:, None]))
        T.grad_eval(store, loss)
        optim.adam_step(store, state, optim.cosine_lr(step, train_steps, lr_max, lr_min))
        losses.append(loss.item())
    return model, losses
