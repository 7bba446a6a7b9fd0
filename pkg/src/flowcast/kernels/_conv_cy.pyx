# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels.

Direct cross-correlation with a hand-specialized 3x3 path. Accumulation
order per output element is fixed (channel, tap-row, tap-col), so results
are bit-identical regardless of the OpenMP thread count: threads partition
whole output planes, never a single reduction.
"""
import numpy as np

from cython.parallel cimport prange

ctypedef fused real:
    float
    double

# Below this many multiply-accumulates the OpenMP fork/join overhead
# exceeds the compute; run single-threaded.
DEF PARALLEL_MIN_MACS = 2_000_000


cdef inline void _corr_plane_k3(const real* xp, const real* wp, real* op,
                                Py_ssize_t wpitch, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef real w0 = wp[0], w1 = wp[1], w2 = wp[2]
    cdef real w3 = wp[3], w4 = wp[4], w5 = wp[5]
    cdef real w6 = wp[6], w7 = wp[7], w8 = wp[8]
    cdef const real *r0
    cdef const real *r1
    cdef const real *r2
    cdef real *orow
    for i in range(ho):
        r0 = xp + i * wpitch
        r1 = r0 + wpitch
        r2 = r1 + wpitch
        orow = op + i * wo
        for j in range(wo):
            orow[j] += (w0 * r0[j] + w1 * r0[j + 1] + w2 * r0[j + 2]
                        + w3 * r1[j] + w4 * r1[j + 1] + w5 * r1[j + 2]
                        + w6 * r2[j] + w7 * r2[j + 1] + w8 * r2[j + 2])


cdef inline void _corr_plane(const real* xp, const real* wp, real* op,
                             Py_ssize_t wpitch, Py_ssize_t k,
                             Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t i, j, a, b
    cdef real wv
    for a in range(k):
        for b in range(k):
            wv = wp[a * k + b]
            for i in range(ho):
                for j in range(wo):
                    op[i * wo + j] += wv * xp[(i + a) * wpitch + j + b]


cdef void _fwd_one(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[:, :, :, ::1] out,
                   Py_ssize_t n, Py_ssize_t o, Py_ssize_t ci, Py_ssize_t k,
                   Py_ssize_t wpitch, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t c
    if k == 3:
        for c in range(ci):
            _corr_plane_k3(&x[n, c, 0, 0], &w[o, c, 0, 0], &out[n, o, 0, 0], wpitch, ho, wo)
    else:
        for c in range(ci):
            _corr_plane(&x[n, c, 0, 0], &w[o, c, 0, 0], &out[n, o, 0, 0], wpitch, k, ho, wo)


def conv2d_valid(real[:, :, :, ::1] x, real[:, :, :, ::1] w):
    """Valid cross-correlation of pre-padded x [N,Ci,Hp,Wp] with w [Co,Ci,k,k]."""
    cdef Py_ssize_t n_ = x.shape[0], ci = x.shape[1], hp = x.shape[2], wp_ = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = hp - k + 1, wo = wp_ - k + 1
    out_np = np.zeros((n_, co, ho, wo), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t no, n, o
    cdef Py_ssize_t macs = n_ * co * ci * k * k * ho * wo
    if macs >= PARALLEL_MIN_MACS:
        for no in prange(n_ * co, nogil=True, schedule='static'):
            _fwd_one(x, w, out, no // co, no % co, ci, k, wp_, ho, wo)
    else:
        with nogil:
            for no in range(n_ * co):
                _fwd_one(x, w, out, no // co, no % co, ci, k, wp_, ho, wo)
    return out_np


cdef void _bwd_one(real[:, :, :, ::1] x, real[:, :, :, ::1] gy, real[:, :, :, ::1] gw,
                   Py_ssize_t o, Py_ssize_t c, Py_ssize_t n_, Py_ssize_t k,
                   Py_ssize_t wpitch, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    # Eight independent partial sums per tap let the compiler vectorize the
    # reduction; the combine order is fixed, so results stay reproducible.
    cdef Py_ssize_t n, a, b, i, j, l
    cdef Py_ssize_t blocked = wo - (wo % 8)
    cdef real lanes[8]
    cdef real tail
    cdef const real *gr
    cdef const real *xr
    for a in range(k):
        for b in range(k):
            for l in range(8):
                lanes[l] = 0
            tail = 0
            for n in range(n_):
                for i in range(ho):
                    gr = &gy[n, o, i, 0]
                    xr = &x[n, c, i + a, b]
                    for j in range(0, blocked, 8):
                        for l in range(8):
                            lanes[l] = lanes[l] + gr[j + l] * xr[j + l]
                    for j in range(blocked, wo):
                        tail = tail + gr[j] * xr[j]
            gw[o, c, a, b] = (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
                              + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) + tail


def conv2d_bwd_kernel_valid(real[:, :, :, ::1] x, real[:, :, :, ::1] gy):
    """Weight gradient: gw[o,c,a,b] = sum_{n,i,j} gy[n,o,i,j] * x[n,c,i+a,j+b]."""
    cdef Py_ssize_t n_ = x.shape[0], ci = x.shape[1], hp = x.shape[2], wp_ = x.shape[3]
    cdef Py_ssize_t co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t k = hp - ho + 1
    gw_np = np.zeros((co, ci, k, k), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, ::1] gw = gw_np
    cdef Py_ssize_t oc
    cdef Py_ssize_t macs = n_ * co * ci * k * k * ho * wo
    if macs >= PARALLEL_MIN_MACS:
        for oc in prange(co * ci, nogil=True, schedule='static'):
            _bwd_one(x, gy, gw, oc // ci, oc % ci, n_, k, wp_, ho, wo)
    else:
        with nogil:
            for oc in range(co * ci):
                _bwd_one(x, gy, gw, oc // ci, oc % ci, n_, k, wp_, ho, wo)
    return gw_np
