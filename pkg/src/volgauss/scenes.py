"""Test and experiment scene generators.

Everything here is deterministic given a seed (counter-based Philox streams)
so the CLI determinism contract extends to generated scenes and targets.
"""

from __future__ import annotations

import math

import numpy as np

from . import core
from .camera import Camera, look_at
from .raster import Scene


def make_rng(seed, stream=0):
    """Independent deterministic stream: Philox keyed by (seed, stream)."""
    return np.random.Generator(np.random.Philox(key=(np.uint64(seed),
                                                     np.uint64(stream))))


def random_quaternions(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def front_camera(width=64, height=64, fov_x_deg=50.0, distance=3.0):
    """Camera on -z looking at the origin."""
    return look_at([0.0, 0.0, -distance], [0.0, 0.0, 0.0],
                   width=width, height=height, fov_x_deg=fov_x_deg)


def random_scene(rng, n, box=0.6, scale_range=(0.03, 0.25),
                 theta_range=(0.05, 0.8), background=(0.0, 0.0, 0.0)):
    """Random mixture centered on the origin (pair with front_camera)."""
    lo, hi = scale_range
    scales = np.exp(rng.uniform(math.log(lo), math.log(hi), (n, 3)))
    return Scene(
        means=rng.uniform(-box, box, (n, 3)),
        scales=scales,
        rotations=random_quaternions(rng, n),
        thetas=rng.uniform(theta_range[0], theta_range[1], n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        splat_opacities=rng.uniform(0.2, 0.9, n),
        background=np.asarray(background, dtype=float))


def separated_scene(rng, camera: Camera, n=6, s_cap=0.05, z0=2.0,
                    gap_sigmas=12.0):
    """Primitives whose 1D ray footprints cannot overlap: view depths are
    spaced by gap_sigmas * s_cap while every beta is at most s_cap, so the
    depth order equals the gamma order along every ray and the
    non-overlapping transmittance factorization is essentially exact."""
    gap = gap_sigmas * s_cap
    depths = z0 + gap * np.arange(n)
    u = rng.uniform(0.2, 0.8, n) * camera.width
    v = rng.uniform(0.2, 0.8, n) * camera.height
    d_view = np.stack([(u - camera.cx) / camera.fx,
                       (v - camera.cy) / camera.fy, np.ones(n)], axis=1)
    means = camera.center + (d_view * depths[:, None]) @ camera.rotation
    scales = np.exp(rng.uniform(math.log(0.4 * s_cap), math.log(s_cap), (n, 3)))
    return Scene(
        means=means,
        scales=scales,
        rotations=random_quaternions(rng, n),
        thetas=rng.uniform(0.1, 0.8, n),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
        splat_opacities=rng.uniform(0.3, 0.9, n),
        background=rng.uniform(0.0, 0.3, 3))


def overlap_pair_scene():
    """Two interpenetrating opaque Gaussians with clashing colors: the
    worst case for the sorted non-overlapping factorization."""
    return Scene(
        means=np.array([[-0.06, 0.0, 2.0], [0.06, 0.0, 2.08]]),
        scales=np.array([[0.12, 0.12, 0.12], [0.12, 0.12, 0.12]]),
        rotations=np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
        thetas=np.array([0.8, 0.75]),
        colors=np.array([[0.9, 0.1, 0.1], [0.1, 0.2, 0.9]]),
        splat_opacities=np.array([0.8, 0.75]),
        background=np.zeros(3))


def overlap_camera(width=96, height=96):
    return Camera(width=width, height=height, fx=1.2 * width, fy=1.2 * width,
                  cx=width / 2.0, cy=height / 2.0)


def zscale_scene(z_scale, base=0.2, theta=0.6, depth=2.0):
    """Single axis-aligned Gaussian on the optical axis whose view-depth
    scale is multiplied by z_scale."""
    return Scene(
        means=np.array([[0.0, 0.0, depth]]),
        scales=np.array([[base, base, base * z_scale]]),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        thetas=np.array([theta]),
        colors=np.array([[1.0, 1.0, 1.0]]),
        splat_opacities=np.array([0.6]),
        background=np.zeros(3))


def zscale_camera(size=65, fov_x_deg=40.0):
    """Odd resolution: the middle pixel center sits exactly on the axis."""
    fx = 0.5 * size / math.tan(math.radians(fov_x_deg) / 2.0)
    return Camera(width=size, height=size, fx=fx, fy=fx,
                  cx=size / 2.0, cy=size / 2.0)


# ---------------------------------------------------------------------------
# fit targets (Fig. 2 / Fig. 3 style protocols)

def _supersample(mask_fn, size, factor=4):
    n = size * factor
    c = (np.arange(n) + 0.5) / factor
    xx, yy = np.meshgrid(c, c)
    fine = mask_fn(xx, yy).astype(float)
    return fine.reshape(size, factor, size, factor).mean(axis=(1, 3))


def disk_target(size=64, radius_frac=0.28, fg=1.0, bg=0.0):
    """Antialiased filled disk, the single-Gaussian opacity stress target."""
    r = radius_frac * size
    cx = cy = size / 2.0
    cov = _supersample(lambda x, y: (x - cx) ** 2 + (y - cy) ** 2 <= r * r,
                       size)
    img = bg + (fg - bg) * cov
    return np.repeat(img[:, :, None], 3, axis=2)


def disk_protocol(size=64):
    """(target, camera, init_scene) for the single-primitive disk fit; both
    rendering modes start from this same init."""
    target = disk_target(size)
    cam = front_camera(width=size, height=size, fov_x_deg=50.0, distance=3.0)
    init = Scene(
        means=np.array([[0.0, 0.0, 0.0]]),
        scales=np.array([[0.35, 0.35, 0.35]]),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        thetas=np.array([0.5]),
        colors=np.array([[0.5, 0.5, 0.5]]),
        splat_opacities=np.array([0.5]),
        background=np.zeros(3))
    return target, cam, init


def shapes_target(size=64):
    """Piecewise-constant arrangement: rectangles, a disk, and a triangle
    over a gray background, all hard-edged."""
    img = np.full((size, size, 3), 0.35)
    s = size / 64.0

    def box(r0, r1, c0, c1, color):
        img[int(r0 * s):int(r1 * s), int(c0 * s):int(c1 * s)] = color

    box(6, 26, 6, 30, [0.85, 0.2, 0.15])
    box(34, 58, 4, 22, [0.15, 0.35, 0.8])
    box(10, 20, 38, 60, [0.95, 0.85, 0.25])
    yy, xx = np.mgrid[0:size, 0:size]
    disk = (xx - 44 * s) ** 2 + (yy - 44 * s) ** 2 <= (11 * s) ** 2
    img[disk] = [0.2, 0.7, 0.3]
    tri = (yy >= 24 * s) & (yy <= 40 * s) \
        & (xx >= 26 * s + (yy - 24 * s) * 0.4) \
        & (xx <= 42 * s - (yy - 24 * s) * 0.4)
    img[tri] = [0.9, 0.9, 0.9]
    return img


def shapes_protocol(size=64):
    """(target, camera) for the fixed-budget mosaic fit; init comes from the
    fit's own seeded slab initialization so both modes share it."""
    return shapes_target(size), front_camera(width=size, height=size,
                                             fov_x_deg=50.0, distance=3.0)
