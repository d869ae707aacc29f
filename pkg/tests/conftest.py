"""Shared test utilities.

The finite-difference oracle here is deliberately independent of the tape:
it perturbs raw numpy inputs and re-evaluates the forward map only.
"""

import numpy as np
import pytest


def numerical_grad(f, arrays, wrt, h=1e-5):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. ``arrays[wrt]``.

    ``f`` must accept numpy arrays and return a python float.
    """
    work = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(work[wrt])
    flat_x = work[wrt].reshape(-1)
    flat_g = grad.reshape(-1)
    for k in range(flat_x.size):
        orig = flat_x[k]
        flat_x[k] = orig + h
        f_plus = f(*work)
        flat_x[k] = orig - h
        f_minus = f(*work)
        flat_x[k] = orig
        flat_g[k] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_err(analytic, numeric):
    """Infinity-norm relative error with a floor to tolerate tiny gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-10)
    return float(np.max(np.abs(analytic - numeric))) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(20240810)
