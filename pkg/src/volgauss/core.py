"""Per-primitive math for 3D Gaussian mixtures.

A primitive is an anisotropic 3D Gaussian with a density multiplier. The
module provides the covariance factorization, the restriction of a 3D
Gaussian to a ray (which is again Gaussian in the ray parameter), the
closed-form transmittance of a single primitive along a ray, and the
EWA-style perspective projection used by the splatting baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Scales are floored before inversion so precision matrices stay finite.
SCALE_FLOOR = 1e-7

# Density saturation: theta = 1 maps to the kappa that leaves 1% transmittance
# through a unit isotropic Gaussian, so theta behaves like an opacity knob.
THETA_CEILING = 0.99

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class Gaussian3D:
    """One primitive: position, shape, density knob theta, and appearance."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    theta: float = 0.1
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    splat_opacity: float = 0.5

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.color = np.asarray(self.color, dtype=float)
        self.theta = float(self.theta)
        self.splat_opacity = float(self.splat_opacity)


@dataclass
class Ray:
    """Origin plus unit direction; points are origin + t * direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)

    @property
    def unit_direction(self):
        return self.direction / np.linalg.norm(self.direction)


@dataclass
class RayGaussian1D:
    """Restriction of a 3D Gaussian to a ray: peak * exp(-(t-gamma)^2 / (2 beta^2))."""

    peak: float
    gamma: float
    beta: float


@dataclass
class Splat2D:
    """Screen-space footprint produced by the splatting baseline."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


def quat_to_rotmat(q):
    """Unit-normalize quaternions (w, x, y, z) and convert to rotation matrices.

    Accepts shape (4,) or (N, 4); returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def covariance_matrices(scales, quats):
    """Batched Sigma = R diag(s^2) R^T for scales (N, 3), quats (N, 4)."""
    s = np.maximum(np.asarray(scales, dtype=float), SCALE_FLOOR)
    R = quat_to_rotmat(quats)
    return np.einsum("nij,nj,nkj->nik", R, s * s, R)


def precision_matrices(scales, quats):
    """Batched Sigma^{-1} = R diag(s^-2) R^T, built from the factorization.

    Never inverts a full 3x3 matrix; the factored form stays symmetric
    positive definite even for needle-like scale ratios.
    """
    s = np.maximum(np.asarray(scales, dtype=float), SCALE_FLOOR)
    R = quat_to_rotmat(quats)
    return np.einsum("nij,nj,nkj->nik", R, 1.0 / (s * s), R)


def covariance(g: Gaussian3D):
    """Covariance of one primitive."""
    return covariance_matrices(g.scale[None], g.rotation[None])[0]


def covariance_inverse(g: Gaussian3D):
    """Precision matrix of one primitive, from the factored form."""
    return precision_matrices(g.scale[None], g.rotation[None])[0]


def density_kappa(theta, scale):
    """Map the bounded density knob theta in [0, 1] to the multiplier kappa.

    kappa = -log(1 - 0.99 theta) * mean(1 / s); the scale coupling keeps the
    on-axis opacity of an isotropic Gaussian roughly invariant to its size.
    Works elementwise for array theta with scale (..., 3).
    """
    theta = np.asarray(theta, dtype=float)
    s = np.maximum(np.asarray(scale, dtype=float), SCALE_FLOOR)
    inv_mean = np.mean(1.0 / s, axis=-1)
    out = -np.log1p(-THETA_CEILING * theta) * inv_mean
    return float(out) if out.ndim == 0 else out


def theta_for_kappa(kappa, scale):
    """Inverse of density_kappa in theta, clipped to the valid range [0, 1]."""
    kappa = np.asarray(kappa, dtype=float)
    s = np.maximum(np.asarray(scale, dtype=float), SCALE_FLOOR)
    inv_mean = np.mean(1.0 / s, axis=-1)
    theta = -np.expm1(-kappa / inv_mean) / THETA_CEILING
    theta = np.clip(theta, 0.0, 1.0)
    return float(theta) if theta.ndim == 0 else theta


def project_to_ray(g: Gaussian3D, ray: Ray) -> RayGaussian1D:
    """Restrict a 3D Gaussian to a ray.

    With M = Sigma^{-1}, d the unit direction and delta = mean - origin:
        a = d^T M d,  b = delta^T M d,  c = delta^T M delta
    the value along the ray is peak * exp(-(t - gamma)^2 / (2 beta^2)) with
        gamma = b / a,  beta = 1 / sqrt(a),  peak = exp(-(c - b^2 / a) / 2).
    """
    M = covariance_inverse(g)
    d = ray.unit_direction
    delta = g.mean - ray.origin
    Md = M @ d
    a = float(d @ Md)
    b = float(delta @ Md)
    c = float(delta @ M @ delta)
    gamma = b / a
    peak = math.exp(-0.5 * max(c - b * b / a, 0.0))
    return RayGaussian1D(peak=peak, gamma=gamma, beta=1.0 / math.sqrt(a))


def transmittance(g1d: RayGaussian1D, kappa: float) -> float:
    """Closed-form transmittance through one primitive over the whole ray.

    The optical depth of a 1D Gaussian integrates to kappa * peak * sqrt(2 pi) * beta,
    so T = exp(-kappa * peak * sqrt(2 pi) * beta).
    """
    return math.exp(-kappa * g1d.peak * SQRT_2PI * g1d.beta)


def analytic_alpha(g1d: RayGaussian1D, kappa: float) -> float:
    """Opacity 1 - T of one primitive along a ray."""
    return -math.expm1(-kappa * g1d.peak * SQRT_2PI * g1d.beta)


def transmittance_finite(g1d: RayGaussian1D, kappa: float, t_near: float, t_far: float) -> float:
    """Transmittance restricted to [t_near, t_far] via the Gaussian CDF.

    T = exp(-kappa * peak * sqrt(pi/2) * beta * [erf((t_far - gamma) / (sqrt(2) beta))
                                                 - erf((t_near - gamma) / (sqrt(2) beta))]).
    Converges to the infinite-support form as the window grows.
    """
    s = math.sqrt(2.0) * g1d.beta
    window = math.erf((t_far - g1d.gamma) / s) - math.erf((t_near - g1d.gamma) / s)
    return math.exp(-kappa * g1d.peak * math.sqrt(math.pi / 2.0) * g1d.beta * window)


def splat_project(g: Gaussian3D, camera, dilation: float = 0.0):
    """EWA-style projection of a primitive to a screen-space Gaussian.

    Returns None when the mean sits at or behind the camera's near plane
    (the caller culls such primitives). The local affine approximation
    clamps the view-space x/z and y/z used in the Jacobian to 1.3x the
    frustum half-tangents, matching the common splatting convention.
    `dilation` is added to the diagonal of cov2d (used for tile binning
    and by the splat rasterizer; the analytic path never dilates).
    """
    v = camera.world_to_view(g.mean)
    if v[2] <= camera.z_near:
        return None
    x, y, z = v
    lim_x = 1.3 * camera.tan_half_fov_x
    lim_y = 1.3 * camera.tan_half_fov_y
    tx = min(max(x / z, -lim_x), lim_x) * z
    ty = min(max(y / z, -lim_y), lim_y) * z
    J = np.array([
        [camera.fx / z, 0.0, -camera.fx * tx / (z * z)],
        [0.0, camera.fy / z, -camera.fy * ty / (z * z)],
    ])
    U = J @ camera.rotation
    cov2d = U @ covariance(g) @ U.T + dilation * np.eye(2)
    mean2d = np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
    return Splat2D(mean2d=mean2d, cov2d=cov2d, depth=float(z))


def splat_alpha(splat: Splat2D, opacity: float, pixel) -> float:
    """Screen-space Gaussian falloff times opacity, clamped to [0, 0.99]."""
    d = np.asarray(pixel, dtype=float) - splat.mean2d
    c = splat.cov2d
    det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
    maha = (c[1, 1] * d[0] * d[0] - (c[0, 1] + c[1, 0]) * d[0] * d[1] + c[0, 0] * d[1] * d[1]) / det
    return min(float(opacity * math.exp(-0.5 * maha)), 0.99)
