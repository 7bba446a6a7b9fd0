"""Convolution kernel dispatch.

The stride-1 cross-correlation inside every conv layer is the hot loop of
both training and sampling, so it exists twice: a Cython extension built at
install time and a pure-numpy im2col fallback. The backend is selected at
import; set FLOWCAST_KERNELS=cython|numpy|auto to override ("auto" prefers
the extension when present). `benchmarks/bench_kernels.py` compares both.

Only the valid-correlation primitives differ per backend; padding, the
input-gradient reduction (expressed as another forward correlation), and
everything else is shared numpy code.
"""
from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError, DimensionError
from . import _conv_np

try:
    from . import _conv_cy

    _HAVE_CYTHON = True
except ImportError:  # extension not built; numpy fallback still works
    _conv_cy = None
    _HAVE_CYTHON = False

_BACKENDS = ("cython", "numpy")
_active = None


def available_backends() -> tuple[str, ...]:
    return _BACKENDS if _HAVE_CYTHON else ("numpy",)


def set_backend(name: str) -> None:
    global _active
    if name == "auto":
        name = "cython" if _HAVE_CYTHON else "numpy"
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}; expected cython|numpy|auto")
    if name == "cython" and not _HAVE_CYTHON:
        raise ConfigError("cython kernel extension is not built; rebuild or use FLOWCAST_KERNELS=numpy")
    _active = name


def backend_name() -> str:
    return _active


set_backend(os.environ.get("FLOWCAST_KERNELS", "auto").lower())


def _impl():
    return _conv_cy if _active == "cython" else _conv_np


def _as_c4(a: np.ndarray) -> np.ndarray:
    if a.ndim != 4:
        raise DimensionError(f"expected a 4-d array, got shape {a.shape}")
    return np.ascontiguousarray(a)


def conv2d_fwd(x: np.ndarray, w: np.ndarray, pad: int = 0) -> np.ndarray:
    """Cross-correlate x [N,Ci,H,W] with w [Co,Ci,k,k] after zero-padding by `pad`."""
    x = _as_c4(x)
    w = _as_c4(w)
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels but kernel expects {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"only square kernels supported, got {w.shape[2:]}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if x.shape[2] < w.shape[2] or x.shape[3] < w.shape[3]:
        raise DimensionError(f"padded input {x.shape[2:]} smaller than kernel {w.shape[2:]}")
    return _impl().conv2d_valid(x, w)


def conv2d_bwd_input(gy: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Input gradient of conv2d_fwd: full correlation with the flipped kernel."""
    gy = _as_c4(gy)
    w = _as_c4(w)
    k = w.shape[2]
    # rotate taps 180 deg and swap in/out channel roles
    wr = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_fwd(gy, wr, pad=k - 1 - pad)


def conv2d_bwd_kernel(x: np.ndarray, gy: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Weight gradient of conv2d_fwd."""
    x = _as_c4(x)
    gy = _as_c4(gy)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if x.shape[2] - gy.shape[2] + 1 != k:
        raise DimensionError(
            f"inconsistent shapes for weight gradient: padded input {x.shape[2:]}, "
            f"output gradient {gy.shape[2:]}, kernel size {k}"
        )
    return _impl().conv2d_bwd_kernel_valid(x, gy)
