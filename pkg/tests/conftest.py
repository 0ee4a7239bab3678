"""Shared helpers: independent oracles built on scipy so library math is
cross-checked against a second implementation path."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from volgauss import scenes


def rotmat_scipy(quat_wxyz):
    """Quaternion (w, x, y, z) to rotation matrix via scipy (independent of
    the library's own conversion)."""
    w, x, y, z = np.asarray(quat_wxyz, dtype=float)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def transmittance_quadrature(kappa, peak, beta, gamma=0.0, window=10.0,
                             n=100_000):
    """Trapezoid integration of exp(-integral kappa g(t) dt) for the 1D
    Gaussian with the given peak/beta."""
    t = np.linspace(gamma - window * beta, gamma + window * beta, n)
    g = peak * np.exp(-0.5 * ((t - gamma) / beta) ** 2)
    return float(np.exp(-kappa * np.trapezoid(g, t)))


def composite_reference(alphas, colors, background):
    """High-precision direct evaluation of sum c_i a_i prod_{j<i}(1 - a_j)."""
    color = np.zeros(3, dtype=np.longdouble)
    t = np.longdouble(1.0)
    for a, c in zip(alphas, colors):
        color += np.longdouble(a) * t * np.asarray(c, dtype=np.longdouble)
        t *= np.longdouble(1.0) - np.longdouble(a)
    color += t * np.asarray(background, dtype=np.longdouble)
    return np.asarray(color, dtype=float), float(t)


@pytest.fixture
def rng():
    return scenes.make_rng(12345)


@pytest.fixture
def small_camera():
    return scenes.front_camera(width=32, height=32)
