"""Convolution kernel correctness: brute-force oracle + backend parity."""
import numpy as np
import pytest

from flowcast import kernels
from flowcast.errors import DimensionError


def conv2d_bruteforce(x, w, pad):
    """Direct quadruple-loop cross-correlation; the reference for everything."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for nn in range(n):
        for o in range(co):
            for c in range(ci):
                for i in range(ho):
                    for j in range(wo):
                        out[nn, o, i, j] += np.sum(
                            xp[nn, c, i : i + k, j : j + k].astype(np.float64) * w[o, c].astype(np.float64)
                        )
    return out


BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = kernels.backend_name()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.mark.parametrize("shape", [(2, 3, 8, 8, 4, 3, 1), (1, 1, 6, 6, 2, 3, 1),
                                   (3, 2, 5, 7, 3, 1, 0), (2, 4, 9, 9, 2, 5, 2)])
def test_fwd_matches_bruteforce(backend, shape):
    n, ci, h, w, co, k, pad = shape
    rng = np.random.default_rng(hash(shape) % 2**31)
    x = rng.standard_normal((n, ci, h, w)).astype(np.float64)
    kern = rng.standard_normal((co, ci, k, k)).astype(np.float64)
    got = kernels.conv2d_fwd(x, kern, pad=pad)
    want = conv2d_bruteforce(x, kern, pad)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_identity_kernel(backend):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
    kern = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        kern[c, c, 0, 0] = 1.0
    np.testing.assert_array_equal(kernels.conv2d_fwd(x, kern, pad=0), x)


def test_ones_kernel_constant_input(backend):
    c = 0.37
    x = np.full((1, 1, 8, 8), c, dtype=np.float64)
    kern = np.ones((1, 1, 3, 3), dtype=np.float64)
    out = kernels.conv2d_fwd(x, kern, pad=1)
    # interior pixels see the full 3x3 window
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * c, rtol=1e-12)
    # corners see only 4 cells of the zero-padded window
    np.testing.assert_allclose(out[0, 0, 0, 0], 4 * c, rtol=1e-12)


def test_bwd_input_matches_fd(backend):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    gy = rng.standard_normal((1, 3, 6, 6))
    gx = kernels.conv2d_bwd_input(gy, w, pad=1)
    h = 1e-6
    for probe in [(0, 0, 2, 3), (0, 1, 0, 0), (0, 1, 5, 5)]:
        xp = x.copy(); xp[probe] += h
        xm = x.copy(); xm[probe] -= h
        fd = (np.sum(kernels.conv2d_fwd(xp, w, 1) * gy) - np.sum(kernels.conv2d_fwd(xm, w, 1) * gy)) / (2 * h)
        assert abs(fd - gx[probe]) < 1e-6 * max(1.0, abs(fd))


def test_bwd_kernel_matches_fd(backend):
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    gy = rng.standard_normal((2, 3, 6, 6))
    gw = kernels.conv2d_bwd_kernel(x, gy, k=3, pad=1)
    assert gw.shape == w.shape
    h = 1e-6
    for probe in [(0, 0, 0, 0), (2, 1, 1, 2), (1, 0, 2, 2)]:
        wp = w.copy(); wp[probe] += h
        wm = w.copy(); wm[probe] -= h
        fd = (np.sum(kernels.conv2d_fwd(x, wp, 1) * gy) - np.sum(kernels.conv2d_fwd(x, wm, 1) * gy)) / (2 * h)
        assert abs(fd - gw[probe]) < 1e-6 * max(1.0, abs(fd))


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_backend_parity(dtype, tol):
    rng = np.random.default_rng(21)
    x = rng.standard_normal((4, 5, 12, 12)).astype(dtype)
    w = rng.standard_normal((6, 5, 3, 3)).astype(dtype)
    gy = rng.standard_normal((4, 6, 12, 12)).astype(dtype)
    results = {}
    for b in BACKENDS:
        kernels.set_backend(b)
        results[b] = (kernels.conv2d_fwd(x, w, 1),
                      kernels.conv2d_bwd_input(gy, w, 1),
                      kernels.conv2d_bwd_kernel(x, gy, 3, 1))
    kernels.set_backend("auto")
    for a, b in zip(results["cython"], results["numpy"]):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol * 10)


def test_channel_mismatch_raises(backend):
    x = np.zeros((1, 2, 4, 4), dtype=np.float32)
    w = np.zeros((1, 3, 3, 3), dtype=np.float32)
    with pytest.raises(DimensionError):
        kernels.conv2d_fwd(x, w, 1)


def test_determinism_within_backend(backend):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 8, 16, 16)).astype(np.float32)
    w = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
    a = kernels.conv2d_fwd(x, w, 1)
    b = kernels.conv2d_fwd(x, w, 1)
    np.testing.assert_array_equal(a, b)
