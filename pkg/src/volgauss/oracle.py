"""Ground-truth renderers used to validate the rasterizer.

raymarch numerically integrates the volume rendering equation through the
Gaussian mixture density (midpoint rule, no skip heuristics), independent of
the closed-form transmittance path. exact_sorted_composite instead reuses the
per-primitive closed form but composites in exact per-ray order, isolating
the error contributed by the global depth sort alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .raster import (ALPHA_CLAMP, ALPHA_CUT, EARLY_STOP_T, Scene,
                     composite_pixel)


@dataclass
class MarchConfig:
    """Quadrature settings. t bounds of None auto-fit the mixture support:
    the hull of [gamma - k beta, gamma + k beta] per ray, clipped to t >= 0."""

    n_steps: int = 10_000
    t_min: float = None
    t_max: float = None
    support_sigmas: float = 8.0


def mixture_field(scene: Scene, points):
    """Density and color of the mixture at world points (..., 3).

    sigma(x) = sum_i kappa_i G_i(x); the color field is the kappa G weighted
    mean of primitive colors (zero where the density vanishes).
    """
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, 3)
    sigma = np.zeros(len(flat))
    csum = np.zeros((len(flat), 3))
    if len(scene):
        minv = core.precision_matrices(scene.scales, scene.rotations)
        kappa = scene.kappas()
        for i in range(len(scene)):
            d = flat - scene.means[i]
            q = np.einsum("pi,ij,pj->p", d, minv[i], d)
            w = kappa[i] * np.exp(-0.5 * q)
            sigma += w
            csum += w[:, None] * scene.colors[i]
    color = np.where(sigma[:, None] > 0,
                     csum / np.maximum(sigma, 1e-300)[:, None],
                     scene.background)
    return sigma.reshape(pts.shape[:-1]), color.reshape(pts.shape[:-1] + (3,))


def _ray_bounds(scene, origins, dirs, cfg):
    """Per-ray integration bounds covering the mixture support."""
    b_rays = len(dirs)
    if cfg.t_min is not None and cfg.t_max is not None:
        return (np.full(b_rays, float(cfg.t_min)), np.full(b_rays, float(cfg.t_max)))
    minv = core.precision_matrices(scene.scales, scene.rotations)
    delta = scene.means[:, None, :] - origins[None, :, :]    # (N, B, 3)
    md = np.einsum("nij,npj->npi", minv, delta)
    a = np.einsum("nij,pj,pi->np", minv, dirs, dirs)
    b = np.einsum("npi,pi->np", md, dirs)
    gamma = b / a
    beta = 1.0 / np.sqrt(a)
    lo = gamma - cfg.support_sigmas * beta
    hi = gamma + cfg.support_sigmas * beta
    t0 = np.maximum(lo.min(axis=0), 0.0)
    t1 = np.maximum(hi.max(axis=0), t0)
    if cfg.t_min is not None:
        t0 = np.full(b_rays, float(cfg.t_min))
    if cfg.t_max is not None:
        t1 = np.full(b_rays, float(cfg.t_max))
    return t0, t1


def _march_batch(scene, origins, dirs, cfg):
    """Midpoint-rule integration for a batch of rays sharing one origin array.

    Returns (colors (B, 3), final transmittance (B,)).
    """
    b_rays = len(dirs)
    if len(scene) == 0:
        return (np.broadcast_to(scene.background, (b_rays, 3)).copy(),
                np.ones(b_rays))
    t0, t1 = _ray_bounds(scene, origins, dirs, cfg)
    dt = (t1 - t0) / cfg.n_steps
    steps = (np.arange(cfg.n_steps) + 0.5)
    t = t0[:, None] + steps[None, :] * dt[:, None]            # (B, S)

    minv = core.precision_matrices(scene.scales, scene.rotations)
    kappa = scene.kappas()
    sigma = np.zeros_like(t)
    tt = t * t
    per_prim = []
    for i in range(len(scene)):
        delta = origins - scene.means[i]                      # (B, 3)
        a = np.einsum("ij,pj,pi->p", minv[i], dirs, dirs)     # (B,)
        mdel = delta @ minv[i]
        bq = np.einsum("pi,pi->p", mdel, dirs)
        cq = np.einsum("pi,pi->p", mdel, delta)
        # beyond 120 the Gaussian is ~1e-27 of its peak: numerically zero;
        # a primitive whose closest approach to every ray in the batch is
        # already past the cut contributes nothing at all
        if np.min(cq - bq * bq / a) >= 120.0:
            per_prim.append(None)
            continue
        q = a[:, None] * tt + 2.0 * bq[:, None] * t + cq[:, None]
        np.maximum(q, 0.0, out=q)
        w = np.zeros_like(q)
        live = q < 120.0
        w[live] = kappa[i] * np.exp(-0.5 * q[live])
        sigma += w
        per_prim.append(w)

    alpha = -np.expm1(-sigma * dt[:, None])                   # (B, S)
    trans = np.cumprod(1.0 - alpha, axis=1)
    t_prev = np.empty_like(trans)
    t_prev[:, 0] = 1.0
    t_prev[:, 1:] = trans[:, :-1]
    # color = sum_i c_i sum_s weight_s w_is / sigma_s, factored per primitive
    # to avoid a (B, S, 3) intermediate
    ratio = t_prev * alpha / np.maximum(sigma, 1e-300)
    colors = np.zeros((b_rays, 3))
    for i, w in enumerate(per_prim):
        if w is None:
            continue
        coeff = np.einsum("bs,bs->b", ratio, w)
        colors += coeff[:, None] * scene.colors[i]
    t_final = trans[:, -1]
    degenerate = dt <= 0
    if degenerate.any():
        colors[degenerate] = 0.0
        t_final[degenerate] = 1.0
    colors += t_final[:, None] * scene.background
    return colors, t_final


def raymarch(scene: Scene, ray: core.Ray, cfg: MarchConfig = None):
    """Quadrature color and final transmittance along one ray."""
    cfg = cfg or MarchConfig()
    d = ray.unit_direction
    colors, t_final = _march_batch(scene, ray.origin[None, :], d[None, :], cfg)
    return colors[0], float(t_final[0])


def raymarch_image(scene: Scene, camera, cfg: MarchConfig = None, batch=256):
    """Quadrature render of a full camera; rays are marched in batches."""
    cfg = cfg or MarchConfig()
    dirs = camera.pixel_directions().reshape(-1, 3)
    origin = np.broadcast_to(camera.center, dirs.shape)
    colors = np.empty((len(dirs), 3))
    t_final = np.empty(len(dirs))
    for s in range(0, len(dirs), batch):
        e = min(s + batch, len(dirs))
        colors[s:e], t_final[s:e] = _march_batch(scene, origin[s:e], dirs[s:e], cfg)
    h, w = camera.height, camera.width
    return colors.reshape(h, w, 3), t_final.reshape(h, w)


def exact_sorted_composite(scene: Scene, ray: core.Ray, *,
                           early_stop=EARLY_STOP_T, alpha_cut=ALPHA_CUT,
                           alpha_clamp=ALPHA_CLAMP):
    """Closed-form per-primitive alphas composited in exact per-ray gamma
    order, with the rasterizer's clamp/skip settings. Differences from
    render() come only from its global depth ordering."""
    entries = []
    kappa = scene.kappas()
    for i in range(len(scene)):
        g1 = core.project_to_ray(scene.gaussian(i), ray)
        alpha = min(core.analytic_alpha(g1, kappa[i]), alpha_clamp)
        if alpha < alpha_cut:
            alpha = 0.0
        entries.append((g1.gamma, i, alpha))
    entries.sort(key=lambda e: (e[0], e[1]))
    contribs = [(alpha, scene.colors[i]) for _, i, alpha in entries]
    return composite_pixel(contribs, scene.background, early_stop)


def exact_sorted_image(scene: Scene, camera, *, early_stop=EARLY_STOP_T,
                       alpha_cut=ALPHA_CUT, alpha_clamp=ALPHA_CLAMP):
    """Image-sized exact_sorted_composite, vectorized over pixels."""
    h, w = camera.height, camera.width
    dirs = camera.pixel_directions().reshape(-1, 3)
    if len(scene) == 0:
        return (np.broadcast_to(scene.background, (h, w, 3)).copy(),
                np.ones((h, w)))
    origin = camera.center
    minv = core.precision_matrices(scene.scales, scene.rotations)
    kappa = scene.kappas()
    delta = scene.means - origin
    md = np.einsum("nij,nj->ni", minv, delta)
    a = np.einsum("nij,pj,pi->np", minv, dirs, dirs)
    b = md @ dirs.T
    cq = np.einsum("ni,ni->n", delta, md)
    gamma = b / a
    beta = 1.0 / np.sqrt(a)
    peak = np.exp(-0.5 * np.maximum(cq[:, None] - b * b / a, 0.0))
    alpha = -np.expm1(-kappa[:, None] * core.SQRT_2PI * beta * peak)
    alpha = np.minimum(alpha, alpha_clamp)
    alpha = np.where(alpha < alpha_cut, 0.0, alpha)

    order = np.argsort(gamma, axis=0, kind="stable")
    alpha_s = np.take_along_axis(alpha, order, axis=0)
    colors_s = scene.colors[order]                            # (N, P, 3)
    cp = np.cumprod(1.0 - alpha_s, axis=0)
    w_prev = np.empty_like(alpha_s)
    w_prev[0] = 1.0
    w_prev[1:] = cp[:-1]
    active = w_prev >= early_stop if early_stop else np.ones_like(alpha_s, bool)
    contrib = np.where(active, alpha_s * w_prev, 0.0)
    color = np.einsum("np,npc->pc", contrib, colors_s)
    n_active = active.sum(axis=0)
    w_ext = np.vstack([np.ones((1, alpha_s.shape[1])), cp])
    t_final = np.take_along_axis(w_ext, n_active[None, :], axis=0)[0]
    color += t_final[:, None] * scene.background
    return color.reshape(h, w, 3), t_final.reshape(h, w)
