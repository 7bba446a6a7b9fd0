"""Adam with bias correction and the cosine learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import ParamStore


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
    for name, p in store.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(store: ParamStore, state: AdamState, lr: float) -> None:
    """One in-place Adam update from the gradients currently in `store`."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.items():
        g = p.grad
        if g is None:
            raise DimensionError(f"parameter {name!r} has no gradient; run grad_eval first")
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape:
            raise DimensionError(f"optimizer state for {name!r} has shape {m.shape}, expected {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(step: int, total: int, lr_max: float = 1e-4, lr_min: float = 1e-7) -> float:
    """Cosine decay from lr_max at step 0 to lr_min at step `total`.

    Steps past `total` clamp to lr_min.
    """
    if total < 1:
        raise ConfigError(f"schedule length must be >= 1, got {total}")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step >= total:
        return lr_min
    return lr_min + (lr_max - lr_min) * (1.0 + np.cos(np.pi * step / total)) / 2.0


@dataclass
class OptimizerSpec:
    """Resolved optimizer + schedule settings for one training stage."""

    lr_max: float = 1e-4
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def run_training(store: ParamStore, state: AdamState, make_loss, steps: int,
                 spec: OptimizerSpec, schedule_total: int, start_step: int = 0,
                 snapshot_every: int = 50) -> list[float]:
    """Generic Adam loop with non-finite-loss abort.

    `make_loss(step)` builds one scalar loss tensor. On a non-finite loss
    the parameters are rolled back to the last snapshot before the
    NumericError propagates, so callers can checkpoint a usable model.
    """
    from .errors import NumericError
    from .tensor import grad_eval

    losses: list[float] = []
    snapshot = store.state_dict()
    for k in range(start_step, start_step + steps):
        try:
            loss = make_loss(k)
            grad_eval(store, loss)
        except NumericError as exc:
            store.load_state(snapshot)
            raise NumericError(f"training aborted at step {k}: {exc}; parameters rolled back") from exc
        adam_step(store, state, cosine_lr(k, schedule_total, spec.lr_max, spec.lr_min))
        losses.append(loss.item())
        if (k + 1) % snapshot_every == 0:
            snapshot = store.state_dict()
    return losses
