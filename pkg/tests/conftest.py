"""Shared test helpers: finite-difference gradients and small fixtures."""

import numpy as np
import pytest

from tisergcn import autodiff as ad
from tisergcn.geo import StationSet


def fd_gradients(loss_fn, params, eps=1e-5):
    """Central finite-difference gradient of a scalar-valued closure.

    loss_fn rebuilds the forward pass from the params' current data and
    returns a scalar float; every element of every parameter is bumped
    in both directions.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_rel_err(analytic, numeric):
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(build_loss, params, tol=1e-6, eps=1e-5):
    """Assert analytic gradients of build_loss() match finite differences."""
    loss = build_loss()
    ad.backward(loss)
    analytic = [p.grad.copy() for p in params]
    ad.zero_grad(params)
    numeric = fd_gradients(lambda: float(build_loss().data), params, eps=eps)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst


def line_stations(n, spacing_deg=0.1):
    """Stations evenly spaced along the equator; distances are exact multiples."""
    return StationSet.from_pairs([(f"L{i}", 0.0, i * spacing_deg) for i in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
