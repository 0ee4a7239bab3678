"""Tiled rasterizer for 3D Gaussian scenes.

Two alpha models share one compositing pipeline:
  analytic - per-primitive opacity from the closed-form Gaussian transmittance
             along each pixel ray (volumetrically consistent),
  splat    - the EWA splatting baseline: project to a screen-space Gaussian,
             alpha = opacity * falloff at the pixel center.

Rendering is deterministic: tiles write disjoint pixels, per-tile math is
vectorized with a fixed operation order, so 1-thread and N-thread renders
are bit-identical.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import core
from .camera import Camera

TILE_SIZE = 16
ALPHA_CLAMP = 0.99
ALPHA_CUT = 1.0 / 255.0
EARLY_STOP_T = 1e-4
COV2D_DILATION = 0.3
# Binning keeps every primitive whose alpha anywhere in a tile can exceed
# ALPHA_CUT. 3 sigma suffices for splat opacities <= 1; the analytic alpha
# scales with kappa * beta, so its radius grows logarithmically with that
# amplitude (see _bounding_radii).
BASE_RADIUS_SIGMA = 3.0


class Scene:
    """Struct-of-arrays Gaussian mixture plus a background color."""

    def __init__(self, means, scales, rotations, thetas, colors,
                 splat_opacities=None, background=(0.0, 0.0, 0.0)):
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        n = len(self.means)
        self.scales = np.broadcast_to(np.asarray(scales, dtype=float), (n, 3)).copy()
        self.rotations = np.broadcast_to(np.asarray(rotations, dtype=float), (n, 4)).copy()
        self.thetas = np.broadcast_to(np.asarray(thetas, dtype=float), (n,)).copy()
        self.colors = np.broadcast_to(np.asarray(colors, dtype=float), (n, 3)).copy()
        if splat_opacities is None:
            splat_opacities = np.full(n, 0.5)
        self.splat_opacities = np.broadcast_to(
            np.asarray(splat_opacities, dtype=float), (n,)).copy()
        self.background = np.asarray(background, dtype=float)

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0)):
        gs = list(gaussians)
        if not gs:
            return cls.empty(background)
        return cls(
            means=[g.mean for g in gs],
            scales=[g.scale for g in gs],
            rotations=[g.rotation for g in gs],
            thetas=[g.theta for g in gs],
            colors=[g.color for g in gs],
            splat_opacities=[g.splat_opacity for g in gs],
            background=background,
        )

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)):
        s = cls.__new__(cls)
        s.means = np.zeros((0, 3))
        s.scales = np.zeros((0, 3))
        s.rotations = np.zeros((0, 4))
        s.thetas = np.zeros(0)
        s.colors = np.zeros((0, 3))
        s.splat_opacities = np.zeros(0)
        s.background = np.asarray(background, dtype=float)
        return s

    def __len__(self):
        return len(self.means)

    def gaussian(self, i) -> core.Gaussian3D:
        return core.Gaussian3D(
            mean=self.means[i].copy(), scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(), theta=float(self.thetas[i]),
            color=self.colors[i].copy(), splat_opacity=float(self.splat_opacities[i]))

    def copy(self):
        return Scene(self.means.copy(), self.scales.copy(), self.rotations.copy(),
                     self.thetas.copy(), self.colors.copy(),
                     self.splat_opacities.copy(), self.background.copy())

    def kappas(self):
        return core.density_kappa(self.thetas, self.scales)


@dataclass
class TileGrid:
    """Per-tile primitive lists, each sorted by the compositing key."""

    tile_size: int
    n_tiles_x: int
    n_tiles_y: int
    tiles: list          # flat list, index ty * n_tiles_x + tx -> int array
    sort_keys: np.ndarray  # per-primitive key (view depth, or gamma when flagged)

    def entries(self, tx, ty):
        ids = self.tiles[ty * self.n_tiles_x + tx]
        return [(int(i), float(self.sort_keys[i])) for i in ids]


@dataclass
class RenderOutput:
    color: np.ndarray                # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    n_contrib: np.ndarray            # (H, W) int32, composited primitives per pixel
    mode: str


@dataclass
class _Prep:
    """Everything render/backward needs, precomputed per (scene, camera, mode)."""

    camera: Camera
    mode: str
    tile_size: int
    origin: np.ndarray
    dirs: np.ndarray          # (H, W, 3) unit world directions
    valid: np.ndarray         # (N,) mean in front of the near plane
    depth: np.ndarray         # (N,) view-space z
    view: np.ndarray          # (N, 3)
    mean2d: np.ndarray        # (N, 2)
    cov2d: np.ndarray         # (N, 2, 2) dilated
    lam: np.ndarray           # (N, 2, 2) inverse of dilated cov2d
    radius: np.ndarray        # (N,) binning radius in pixels
    kappa: np.ndarray         # (N,)
    minv: np.ndarray          # (N, 3, 3) precision matrices
    minv_delta: np.ndarray    # (N, 3) Sigma^-1 (mean - origin)
    cq: np.ndarray            # (N,) (mean - origin)^T Sigma^-1 (mean - origin)
    rotmats: np.ndarray       # (N, 3, 3)
    grid: TileGrid = None
    proj_cache: dict = field(default_factory=dict)  # splat-backward intermediates


def _resolve_threads(threads):
    if threads is None:
        threads = os.environ.get("VOLGAUSS_THREADS", "1")
    return max(1, int(threads))


def _bounding_radii(kappa, scales, cov2d, mode, alpha_cut):
    """Per-primitive pixel radius so any pixel with alpha > alpha_cut is binned.

    The analytic opacity at a pixel is 1 - exp(-A * peak) with amplitude
    A = sqrt(2 pi) * kappa * beta <= sqrt(2 pi) * kappa * s_max, hence
    alpha > cut needs peak > roughly cut / A, i.e. squared Mahalanobis
    below 2 log(A / cut). The splat alpha is bounded by the opacity <= 1
    so 3 sigma always covers it.
    """
    m = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    lam_max = m + np.sqrt(np.maximum(m * m - det, 0.0))
    mult = np.full(len(kappa), BASE_RADIUS_SIGMA)
    if mode == "analytic":
        amp = core.SQRT_2PI * kappa * np.max(np.maximum(scales, core.SCALE_FLOOR), axis=1)
        cut = max(alpha_cut, 1e-12)
        need = np.sqrt(2.0 * np.log(np.maximum(1.05 * amp / cut, 1.0)))
        mult = np.maximum(mult, need + 0.5)  # margin for the perspective approximation
    return mult * np.sqrt(lam_max)


def _project_all(scene: Scene, camera: Camera):
    """Vectorized EWA projection of every primitive. Returns view coords,
    pixel means, dilated 2D covariances, and the intermediates the splat
    backward pass chains through."""
    v = camera.world_to_view(scene.means)
    valid = v[:, 2] > camera.z_near
    z = np.where(valid, v[:, 2], 1.0)
    x, y = v[:, 0], v[:, 1]
    mean2d = np.stack([camera.fx * x / z + camera.cx,
                       camera.fy * y / z + camera.cy], axis=1)

    lim_x = 1.3 * camera.tan_half_fov_x
    lim_y = 1.3 * camera.tan_half_fov_y
    cx_ratio = np.clip(x / z, -lim_x, lim_x)
    cy_ratio = np.clip(y / z, -lim_y, lim_y)
    clamped_x = np.abs(x / z) > lim_x
    clamped_y = np.abs(y / z) > lim_y

    n = len(scene)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 1, 1] = camera.fy / z
    J[:, 0, 2] = -camera.fx * cx_ratio / z
    J[:, 1, 2] = -camera.fy * cy_ratio / z
    U = J @ camera.rotation

    sigma = core.covariance_matrices(scene.scales, scene.rotations)
    cov2d = np.einsum("nij,njk,nlk->nil", U, sigma, U)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    cache = dict(view=v, z=z, U=U, sigma=sigma,
                 cx_ratio=cx_ratio, cy_ratio=cy_ratio,
                 clamped_x=clamped_x, clamped_y=clamped_y)
    return v, valid, mean2d, cov2d, cache


def _inv2x2(c):
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    inv = np.empty_like(c)
    inv[:, 0, 0] = c[:, 1, 1]
    inv[:, 1, 1] = c[:, 0, 0]
    inv[:, 0, 1] = -c[:, 0, 1]
    inv[:, 1, 0] = -c[:, 1, 0]
    return inv / det[:, None, None]


def _build_grid(valid, mean2d, depth, radius, width, height, tile_size, sort_keys):
    """Duplicate (primitive, tile) pairs for every tile the bounding circle's
    box overlaps, then sort by (tile, key, index)."""
    n_tiles_x = (width + tile_size - 1) // tile_size
    n_tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = n_tiles_x * n_tiles_y

    ids = np.flatnonzero(valid)
    if len(ids) == 0:
        return TileGrid(tile_size, n_tiles_x, n_tiles_y,
                        [np.empty(0, dtype=np.int64)] * n_tiles, sort_keys)
    u, v = mean2d[ids, 0], mean2d[ids, 1]
    r = radius[ids]
    x0 = np.clip(np.floor((u - r) / tile_size), 0, n_tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((u + r) / tile_size), 0, n_tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((v - r) / tile_size), 0, n_tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((v + r) / tile_size), 0, n_tiles_y - 1).astype(np.int64)
    outside = (u + r < 0) | (u - r >= width) | (v + r < 0) | (v - r >= height)
    keep = ~outside
    ids, x0, x1, y0, y1 = ids[keep], x0[keep], x1[keep], y0[keep], y1[keep]

    span_x = x1 - x0 + 1
    count = span_x * (y1 - y0 + 1)
    total = int(count.sum())
    if total == 0:
        return TileGrid(tile_size, n_tiles_x, n_tiles_y,
                        [np.empty(0, dtype=np.int64)] * n_tiles, sort_keys)
    rep = np.repeat(np.arange(len(ids)), count)
    start = np.concatenate([[0], np.cumsum(count)[:-1]])
    offset = np.arange(total) - np.repeat(start, count)
    lx = offset % span_x[rep]
    ly = offset // span_x[rep]
    tile = (y0[rep] + ly) * n_tiles_x + (x0[rep] + lx)
    prim = ids[rep]
    order = np.lexsort((prim, sort_keys[prim], tile))
    tile, prim = tile[order], prim[order]
    bounds = np.searchsorted(tile, np.arange(n_tiles + 1))
    tiles = [prim[bounds[t]:bounds[t + 1]] for t in range(n_tiles)]
    return TileGrid(tile_size, n_tiles_x, n_tiles_y, tiles, sort_keys)


def prepare(scene: Scene, camera: Camera, mode="analytic", tile_size=TILE_SIZE,
            sort_by="depth", alpha_cut=ALPHA_CUT) -> _Prep:
    """Shared front end of render/backward: project, bin, and cache per-primitive
    quantities. sort_by='gamma' re-sorts each tile by the 1D Gaussian center
    along the tile's central ray instead of view depth."""
    if mode not in ("analytic", "splat"):
        raise ValueError(f"unknown mode {mode!r}")
    view, valid, mean2d, cov2d, cache = _project_all(scene, camera)
    depth = view[:, 2]
    kappa = scene.kappas() if len(scene) else np.zeros(0)
    radius = _bounding_radii(kappa, scene.scales, cov2d, mode, alpha_cut) \
        if len(scene) else np.zeros(0)

    minv = core.precision_matrices(scene.scales, scene.rotations) \
        if len(scene) else np.zeros((0, 3, 3))
    origin = camera.center
    delta = scene.means - origin
    minv_delta = np.einsum("nij,nj->ni", minv, delta)
    cq = np.einsum("ni,ni->n", delta, minv_delta)
    rotmats = core.quat_to_rotmat(scene.rotations) if len(scene) else np.zeros((0, 3, 3))

    prep = _Prep(camera=camera, mode=mode, tile_size=tile_size, origin=origin,
                 dirs=camera.pixel_directions(), valid=valid, depth=depth,
                 view=view, mean2d=mean2d, cov2d=cov2d, lam=_inv2x2(cov2d),
                 radius=radius, kappa=kappa, minv=minv, minv_delta=minv_delta,
                 cq=cq, rotmats=rotmats, proj_cache=cache)
    grid = _build_grid(valid, mean2d, depth, radius,
                       camera.width, camera.height, tile_size, sort_keys=depth.copy())
    if sort_by == "gamma":
        _resort_by_gamma(prep, grid)
    elif sort_by != "depth":
        raise ValueError(f"unknown sort key {sort_by!r}")
    prep.grid = grid
    return prep


def _resort_by_gamma(prep, grid):
    """Stable re-sort of each tile list by gamma along the tile's central ray."""
    cam = prep.camera
    for t, ids in enumerate(grid.tiles):
        if len(ids) < 2:
            continue
        ty, tx = divmod(t, grid.n_tiles_x)
        row = min(ty * grid.tile_size + grid.tile_size // 2, cam.height - 1)
        col = min(tx * grid.tile_size + grid.tile_size // 2, cam.width - 1)
        d = prep.dirs[row, col]
        a = np.einsum("kij,i,j->k", prep.minv[ids], d, d)
        b = prep.minv_delta[ids] @ d
        gamma = b / a
        grid.tiles[t] = ids[np.argsort(gamma, kind="stable")]


def bin_tiles(scene: Scene, camera: Camera, tile_size=TILE_SIZE,
              mode="analytic", sort_by="depth") -> TileGrid:
    """Conservative tile binning; see prepare() for the sort options."""
    return prepare(scene, camera, mode=mode, tile_size=tile_size,
                   sort_by=sort_by).grid


def _tile_pixels(prep, t):
    """Row/col extent of flat tile index t plus its pixel-center coordinates."""
    ty, tx = divmod(t, prep.grid.n_tiles_x)
    ts = prep.tile_size
    y0, x0 = ty * ts, tx * ts
    h = min(ts, prep.camera.height - y0)
    w = min(ts, prep.camera.width - x0)
    return y0, x0, h, w


def _tile_alphas(prep, t, scene, alpha_cut=ALPHA_CUT, alpha_clamp=ALPHA_CLAMP,
                 keep_aux=False):
    """Alpha of every binned primitive at every pixel of tile t, plus the
    intermediates the backward pass needs (when keep_aux)."""
    ids = prep.grid.tiles[t]
    y0, x0, h, w = _tile_pixels(prep, t)
    aux = {"ids": ids, "y0": y0, "x0": x0, "h": h, "w": w}
    if len(ids) == 0:
        return None, aux
    if prep.mode == "analytic":
        d = prep.dirs[y0:y0 + h, x0:x0 + w].reshape(-1, 3)
        md = np.einsum("kij,pj->kpi", prep.minv[ids], d)
        a = np.einsum("kpi,pi->kp", md, d)
        b = prep.minv_delta[ids] @ d.T
        expo = np.maximum(prep.cq[ids][:, None] - b * b / a, 0.0)
        peak = np.exp(-0.5 * expo)
        beta = 1.0 / np.sqrt(a)
        e = prep.kappa[ids][:, None] * core.SQRT_2PI * beta * peak
        alpha_raw = -np.expm1(-e)
        if keep_aux:
            aux.update(d=d, md=md, a=a, b=b, beta=beta, peak=peak, e=e)
    else:
        px = np.stack(np.meshgrid(np.arange(x0, x0 + w) + 0.5,
                                  np.arange(y0, y0 + h) + 0.5), axis=-1).reshape(-1, 2)
        dlt = px[None, :, :] - prep.mean2d[ids][:, None, :]
        maha = np.einsum("kpi,kij,kpj->kp", dlt, prep.lam[ids], dlt)
        falloff = np.exp(-0.5 * maha)
        alpha_raw = scene.splat_opacities[ids][:, None] * falloff
        if keep_aux:
            aux.update(dlt=dlt, falloff=falloff)
    alpha = np.minimum(alpha_raw, alpha_clamp)
    if alpha_cut > 0.0:
        cut = alpha < alpha_cut
        alpha = np.where(cut, 0.0, alpha)
    else:
        # cut disabled: keep signed alphas so the loss stays smooth through
        # zero density (the finite-difference verifier perturbs across it)
        cut = np.zeros(alpha.shape, dtype=bool)
    if keep_aux:
        aux.update(alpha_raw=alpha_raw, cut=cut)
    return alpha, aux


def _composite(alpha, colors, background, early_stop):
    """Front-to-back compositing of (K, P) alphas; returns the per-pixel color
    sum, final transmittance, contribution count, and the weights the backward
    pass reuses."""
    k, p = alpha.shape
    cp = np.cumprod(1.0 - alpha, axis=0)
    w_prev = np.empty_like(alpha)
    w_prev[0] = 1.0
    w_prev[1:] = cp[:-1]
    if early_stop is not None and early_stop > 0:
        active = w_prev >= early_stop
    else:
        active = np.ones_like(alpha, dtype=bool)
    contrib = np.where(active, alpha * w_prev, 0.0)
    color = np.einsum("kp,kc->pc", contrib, colors)
    n_active = active.sum(axis=0)
    w_ext = np.vstack([np.ones((1, p)), cp])
    t_final = np.take_along_axis(w_ext, n_active[None, :], axis=0)[0]
    n_contrib = (active & (alpha > 0)).sum(axis=0).astype(np.int32)
    color += t_final[:, None] * background
    return color, t_final, n_contrib, dict(w_prev=w_prev, active=active, contrib=contrib)


def _render_tile(prep, t, scene, early_stop, alpha_cut, alpha_clamp):
    y0, x0, h, w = _tile_pixels(prep, t)
    alpha, aux = _tile_alphas(prep, t, scene, alpha_cut, alpha_clamp)
    if alpha is None:
        color = np.broadcast_to(scene.background, (h * w, 3)).copy()
        return y0, x0, h, w, color, np.ones(h * w), np.zeros(h * w, dtype=np.int32)
    ids = aux["ids"]
    color, t_final, n_contrib, _ = _composite(alpha, scene.colors[ids],
                                              scene.background, early_stop)
    return y0, x0, h, w, color, t_final, n_contrib


def render(scene: Scene, camera: Camera, mode="analytic", *, tile_size=TILE_SIZE,
           threads=None, sort_by="depth", early_stop=EARLY_STOP_T,
           alpha_cut=ALPHA_CUT, alpha_clamp=ALPHA_CLAMP,
           prep: _Prep = None) -> RenderOutput:
    """Render the scene. Pass early_stop=None and alpha_cut=0 to disable the
    termination and skip heuristics (the gradient checker does)."""
    threads = _resolve_threads(threads)
    if prep is None:
        prep = prepare(scene, camera, mode, tile_size, sort_by, alpha_cut)
    h, w = camera.height, camera.width
    color = np.empty((h, w, 3))
    t_final = np.empty((h, w))
    n_contrib = np.empty((h, w), dtype=np.int32)

    def job(t):
        ty0, tx0, th, tw, c, tf, nc = _render_tile(prep, t, scene, early_stop,
                                                   alpha_cut, alpha_clamp)
        color[ty0:ty0 + th, tx0:tx0 + tw] = c.reshape(th, tw, 3)
        t_final[ty0:ty0 + th, tx0:tx0 + tw] = tf.reshape(th, tw)
        n_contrib[ty0:ty0 + th, tx0:tx0 + tw] = nc.reshape(th, tw)

    tids = range(len(prep.grid.tiles))
    if threads == 1:
        for t in tids:
            job(t)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(job, tids))
    return RenderOutput(color=color, final_transmittance=t_final,
                        n_contrib=n_contrib, mode=mode)


def composite_pixel(contributions, background, early_stop=EARLY_STOP_T):
    """Reference scalar compositor: front-to-back over (alpha, color) pairs
    already sorted along the ray; background enters weighted by the final
    transmittance. Returns (color, final_transmittance)."""
    color = np.zeros(3)
    t = 1.0
    stop = early_stop if early_stop is not None else 0.0
    for alpha, c in contributions:
        if t < stop:
            break
        color += t * alpha * np.asarray(c, dtype=float)
        t *= 1.0 - alpha
    return color + t * np.asarray(background, dtype=float), t
