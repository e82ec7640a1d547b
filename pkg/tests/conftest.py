import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def central_diff(f, x, h=1e-5):
    """Finite-difference gradient of scalar ``f()`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grad_close(analytic, numeric, abs_tol=1e-5, rel_tol=1e-4):
    """Elementwise ``|a - n| <= max(abs_tol, rel_tol * |n|)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return bool(np.all(np.abs(a - n) <= np.maximum(abs_tol, rel_tol * np.abs(n))))
