"""Shared test helpers: finite-difference oracles and error measures."""

import numpy as np
import pytest

from fluidground.autodiff import Tensor


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_difference(f, x, h=1e-5):
    """Central finite differences of a scalar function of an ndarray."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return grad


def tape_gradient(f, x):
    """Analytic gradient of a scalar Tensor-valued function of an ndarray."""
    t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = f(t)
    loss.backward()
    return t.grad.copy()


def check_gradient(f_tensor, f_value, x, h=1e-5, tol=1e-4, floor=1e-6):
    """Assert analytic and central-FD gradients agree in relative error."""
    analytic = tape_gradient(f_tensor, x)
    numeric = finite_difference(f_value, x, h=h)
    err = rel_error(analytic, numeric, floor=floor)
    assert err < tol, f"gradient mismatch: rel error {err:.3e}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(0)
