"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback backend used when the compiled extension is unavailable; also the
reference the extension is tested against.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of pre-padded x [N,Ci,Hp,Wp] with w [Co,Ci,k,k]."""
    n, ci, hp, wp = x.shape
    co, _, k, _ = w.shape
    ho, wo = hp - k + 1, wp - k + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * k * k)
    out = col @ w.reshape(co, ci * k * k).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def conv2d_bwd_kernel_valid(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Weight gradient: gw[o,c,a,b] = sum_{n,i,j} gy[n,o,i,j] * x[n,c,i+a,j+b]."""
    n, ci, hp, wp = x.shape
    _, co, ho, wo = gy.shape
    k = hp - ho + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * k * k)
    g = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
    return (g @ col).reshape(co, ci, k, k)
