"""Reverse-mode autodiff over numpy arrays.

A `Tensor` wraps a row-major float32/float64 ndarray and records the ops
applied to it; `backward()` on a scalar loss fills `.grad` on every
reachable tensor. The graph is plain closures over parents (micrograd
style); there is no lazy evaluation. Gradients are accumulated, so a
tensor used twice gets the sum of both paths.

Inference code should run under `no_grad()`: ops then return plain result
tensors with no recorded parents, which is both faster and keeps sampling
loops memory-flat.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- graph machinery -----------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)  # own the buffer
        else:
            self.grad += g

    def zero_grad(self):
        if self.grad is not None and self.grad.shape == self.data.shape:
            self.grad.fill(0.0)
        else:
            self.grad = np.zeros_like(self.data)

    def clear_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a finite scalar."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError(f"loss is non-finite: {self.data!r}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(-self, other) if isinstance(other, (int, float)) else add(_wrap(other), -self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, pow_(other, -1.0))

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):  # keep python scalars weakly typed
        a = _wrap(a)
        c = b

        def bw_scalar(g):
            if a.requires_grad:
                a._accumulate(g.astype(a.dtype, copy=False))

        return _make(a.data + c, (a,), bw_scalar)
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape).astype(b.dtype, copy=False))

    return _make(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _wrap(a)
        c = b

        def bw_scalar(g):
            if a.requires_grad:
                a._accumulate((g * c).astype(a.dtype, copy=False))

        return _make(a.data * c, (a,), bw_scalar)
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape).astype(b.dtype, copy=False))

    return _make(a.data * b.data, (a, b), bw)


def pow_(a, p: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data**p

    def bw(g):
        if a.requires_grad:
            a._accumulate((g * p * a.data ** (p - 1.0)).astype(a.dtype, copy=False))

    return _make(out_data, (a,), bw)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate((g * out_data).astype(a.dtype, copy=False))

    return _make(out_data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        if a.requires_grad:
            a._accumulate((g * s * (1.0 - s)).astype(a.dtype, copy=False))

    return _make(s, (a,), bw)


def silu(a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def bw(g):
        if a.requires_grad:
            a._accumulate((g * (s + a.data * s * (1.0 - s))).astype(a.dtype, copy=False))

    return _make(out_data, (a,), bw)


def clip01(a) -> Tensor:
    """Clamp to [0,1]; gradient is zero outside the range (inference helper)."""
    a = _wrap(a)
    out_data = np.clip(a.data, 0.0, 1.0)

    def bw(g):
        if a.requires_grad:
            inside = (a.data >= 0.0) & (a.data <= 1.0)
            a._accumulate((g * inside).astype(a.dtype, copy=False))

    return _make(out_data, (a,), bw)


# -- shape ops ---------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _make(a.data[idx].copy(), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(np.ascontiguousarray(gp))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bw)


def embedding(table, idx) -> Tensor:
    """Row lookup into a [vocab, dim] parameter; idx is an int array."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    return _make(table.data[idx].copy(), (table,), bw)


# -- spatial ops -------------------------------------------------------------


def conv2d(x, kernel, bias=None, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] or [C,H,W] input with a [Co,Ci,k,k] kernel.

    With padding=(k-1)/2 the spatial shape is preserved.
    """
    x, kernel = _wrap(x), _wrap(kernel)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-d or 4-d, got shape {x.shape}")
    k = kernel.data.shape[2]
    y = kernels.conv2d_fwd(xd, kernel.data, pad=padding)

    def bw(g):
        g4 = g[None] if squeeze else g
        g4 = np.ascontiguousarray(g4)
        if x.requires_grad:
            gx = kernels.conv2d_bwd_input(g4, kernel.data, pad=padding)
            x._accumulate(gx[0] if squeeze else gx)
        if kernel.requires_grad:
            kernel._accumulate(kernels.conv2d_bwd_kernel(xd, g4, k=k, pad=padding))

    out = _make(y[0] if squeeze else y, (x, kernel), bw)
    if bias is not None:
        bias = _wrap(bias)
        if bias.data.shape != (kernel.data.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({kernel.data.shape[0]},)")
        out = add(out, reshape(bias, (-1, 1, 1)))
    return out


def _pool_view(a, k: int):
    lead = a.shape[:-2]
    h, w = a.shape[-2], a.shape[-1]
    if h % k or w % k:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by pool size {k}")
    return a.reshape(*lead, h // k, k, w // k, k), lead, h, w


def max_pool2d(x, k: int) -> Tensor:
    """Maximum over non-overlapping k x k windows of the trailing two axes."""
    x = _wrap(x)
    view, lead, h, w = _pool_view(x.data, k)
    flat = np.ascontiguousarray(view.transpose(*range(len(lead)), -4, -2, -3, -1)).reshape(
        *lead, h // k, w // k, k * k
    )
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(*lead, h // k, w // k, k, k).transpose(
            *range(len(lead)), -4, -2, -3, -1
        )
        x._accumulate(np.ascontiguousarray(gx).reshape(x.data.shape))

    return _make(out_data, (x,), bw)


def avg_pool2d(x, k: int) -> Tensor:
    x = _wrap(x)
    view, lead, h, w = _pool_view(x.data, k)
    out_data = view.mean(axis=(-3, -1))

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.broadcast_to(
            g[..., :, None, :, None] / (k * k),
            (*lead, h // k, k, w // k, k),
        )
        x._accumulate(np.ascontiguousarray(gx).reshape(x.data.shape))

    return _make(out_data, (x,), bw)


def upsample_nearest2d(x, k: int = 2) -> Tensor:
    x = _wrap(x)
    out_data = x.data.repeat(k, axis=-2).repeat(k, axis=-1)

    def bw(g):
        if not x.requires_grad:
            return
        view, lead, h, w = _pool_view(g, k)
        x._accumulate(view.sum(axis=(-3, -1)))

    return _make(out_data, (x,), bw)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Fused group normalization of [N,C,H,W] with per-channel affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    n, c, h, w = x.data.shape
    if c % groups:
        raise DimensionError(f"channels {c} not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out_data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype, copy=False))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)).astype(beta.dtype, copy=False))
        if x.requires_grad:
            gh = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            m1 = gh.mean(axis=2, keepdims=True)
            m2 = (gh * xh).mean(axis=2, keepdims=True)
            gx = (gh - m1 - xh * m2) * inv
            x._accumulate(gx.reshape(n, c, h, w).astype(x.dtype, copy=False))

    return _make(out_data, (x, gamma, beta), bw)


# -- modulation / attention ----------------------------------------------


def film_modulate(features, scale, shift) -> Tensor:
    """Per-channel affine gate: out = (1 + scale) * features + shift.

    `features` is [..., C, H, W]; `scale`/`shift` broadcast against the
    channel axis ([C] or any prefix shape ending in [C]). The additive-one
    form keeps zero-initialized heads an exact identity.
    """
    features, scale, shift = _wrap(features), _wrap(scale), _wrap(shift)
    if scale.data.shape != shift.data.shape:
        raise DimensionError(f"scale {scale.shape} and shift {shift.shape} differ")
    if scale.data.shape[-1] != features.data.shape[-3]:
        raise DimensionError(
            f"modulation channels {scale.data.shape[-1]} != feature channels {features.data.shape[-3]}"
        )
    s = reshape(scale, (*scale.data.shape, 1, 1))
    b = reshape(shift, (*shift.data.shape, 1, 1))
    return add(mul(features, add(s, 1.0)), b)


def channel_attention(features, w1, w2) -> Tensor:
    """Squeeze-excite gate: features * sigmoid(W2 @ silu(W1 @ gap(features))).

    `features` is [C,H,W] or [N,C,H,W]; w1 is [C/r, C], w2 is [C, C/r].
    """
    features = _wrap(features)
    squeeze = features.data.ndim == 3
    f = reshape(features, (1, *features.data.shape)) if squeeze else features
    n, c = f.data.shape[0], f.data.shape[1]
    if _wrap(w1).data.shape[1] != c or _wrap(w2).data.shape[0] != c:
        raise DimensionError(f"attention weights do not match {c} channels")
    pooled = mean(reshape(f, (n, c, -1)), axis=2)  # [N, C]
    hidden = silu(matmul(pooled, transpose(_wrap(w1), (1, 0))))
    gate = sigmoid(matmul(hidden, transpose(_wrap(w2), (1, 0))))
    out = mul(f, reshape(gate, (n, c, 1, 1)))
    return reshape(out, features.data.shape) if squeeze else out


# -- gradient evaluation contract -----------------------------------------


def grad_eval(store, loss: Tensor):
    """Fill the gradient slots of `store` with d(loss)/d(param).

    Parameters the loss does not depend on get zero gradients. Raises
    NumericError for a non-finite loss before touching any slot.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise DimensionError("grad_eval needs a scalar Tensor loss")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"loss is non-finite: {loss.data!r}")
    for p in store.tensors():
        p.clear_grad()
    loss.backward()
    for p in store.tensors():
        if p.grad is None:
            p.zero_grad()
    return store


class ParamStore:
    """Named parameters plus matching gradient slots.

    Names are unique, insertion-ordered, and stable across save/load; every
    gradient slot has the shape of its parameter.
    """

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        if params:
            for name, p in params.items():
                self.add(name, p)

    def add(self, name: str, param: Tensor):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        param.requires_grad = True
        self._params[name] = param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def n_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self._params.items():
            if p.grad is None:
                p.zero_grad()
            assert p.grad.shape == p.data.shape
            out[name] = p.grad
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            p = self._params[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise DimensionError(f"parameter {name!r}: stored shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def assert_finite(arr: np.ndarray, what: str):
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} contains non-finite values")


def sse(a, b) -> Tensor:
    """Sum of squared differences (building block for MSE losses)."""
    d = add(_wrap(a), -_wrap(b))
    return sum_(mul(d, d))


def mse(a, b) -> Tensor:
    a = _wrap(a)
    return mul(sse(a, b), 1.0 / a.data.size)


def sinusoidal_embedding(t, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Classic sin/cos embedding of scalar times t (array [B]) -> [B, dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :] * max_period
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
