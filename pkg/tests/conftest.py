import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_diff_grad(loss_fn, param_data: np.ndarray, h: float = 1e-5,
                     sample: np.ndarray | None = None) -> dict[int, float]:
    """Central finite differences of a scalar loss wrt selected flat indices."""
    flat = param_data.reshape(-1)
    idx = range(flat.size) if sample is None else sample
    out = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        out[int(i)] = (lp - lm) / (2.0 * h)
    return out


def max_rel_err(analytic: np.ndarray, fd: dict[int, float], floor: float = 1e-6) -> float:
    ga = analytic.reshape(-1)
    worst = 0.0
    for i, g_fd in fd.items():
        denom = max(abs(g_fd), abs(ga[i]), floor)
        worst = max(worst, abs(g_fd - ga[i]) / denom)
    return worst
