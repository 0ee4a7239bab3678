"""Hand-derived reverse-mode gradients for both render modes.

The backward pass replays the tiled forward (same binning, same order, same
clamps) and chains pixel gradients through compositing to every primitive
parameter. Compositing is differentiated with the usual suffix trick: for
front-to-back weights w_i = alpha_i prod_{j<i}(1 - alpha_j),

    dL/dalpha_i = w_i/alpha_i * (dL.c_i) - (1/(1-alpha_i)) * sum_{j>i} (dL.c_j) w_j

plus the background term, which behaves like a final layer with weight equal
to the surviving transmittance. Analytic mode then chains through the
closed-form transmittance (quadratic-form coefficients a, b, c and the
precision matrix), splat mode through the EWA projection Jacobian.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import core, metrics, raster
from .raster import (ALPHA_CLAMP, ALPHA_CUT, EARLY_STOP_T, TILE_SIZE, Scene,
                     _composite, _tile_alphas, _tile_pixels)


@dataclass
class ParamGrad:
    """Loss gradient for one primitive, in stored-parameter space."""

    index: int
    d_mean: np.ndarray
    d_scale: np.ndarray
    d_rotation: np.ndarray
    d_theta: float
    d_color: np.ndarray
    d_splat_opacity: float


class SceneGrads:
    """Struct-of-arrays gradients; iterates as a sequence of ParamGrad."""

    def __init__(self, n, mode):
        self.mode = mode
        self.d_means = np.zeros((n, 3))
        self.d_scales = np.zeros((n, 3))
        self.d_rotations = np.zeros((n, 4))
        self.d_thetas = np.zeros(n)
        self.d_colors = np.zeros((n, 3))
        self.d_splat_opacities = np.zeros(n)
        self.d_background = np.zeros(3)
        self.d_kappas = np.zeros(n)          # diagnostic: dL/d kappa
        self.visible = np.zeros(n, dtype=bool)

    def __len__(self):
        return len(self.d_thetas)

    def __getitem__(self, i) -> ParamGrad:
        return ParamGrad(index=i, d_mean=self.d_means[i], d_scale=self.d_scales[i],
                         d_rotation=self.d_rotations[i], d_theta=float(self.d_thetas[i]),
                         d_color=self.d_colors[i],
                         d_splat_opacity=float(self.d_splat_opacities[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def position_norms(self):
        return np.linalg.norm(self.d_means, axis=1)


def _rotmat_quat_jacobian(qhat):
    """d(R entries)/d(unit quaternion (w,x,y,z)), shape (N, 4, 3, 3)."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    zero = np.zeros_like(w)
    jw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    jx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    jy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    jz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    return 2.0 * np.stack([jw, jx, jy, jz], axis=1).reshape(-1, 4, 3, 3)


def _quat_grads(d_rotmats, quats):
    """Chain dL/dR back to the raw (unnormalized) quaternion storage."""
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    qhat = quats / norms
    dqhat = np.einsum("nij,nqij->nq", d_rotmats, _rotmat_quat_jacobian(qhat))
    # q = qhat * |q|: project out the radial component, then divide by |q|.
    dq = (dqhat - qhat * np.einsum("nq,nq->n", qhat, dqhat)[:, None]) / norms
    return dq


def _factored_grads(g_mat, rotmats, diag, d_diag_d_scale):
    """Gradients of L through F = R diag(diag) R^T given dL/dF = g_mat.

    Returns (d_scale contribution, dL/dR). d_diag_d_scale maps the diagonal
    derivative to scale space (elementwise, already evaluated).
    """
    a = np.einsum("nji,njk,nkl->nil", rotmats, g_mat, rotmats)
    d_diag = np.einsum("nii->ni", a)
    d_scale = d_diag * d_diag_d_scale
    g_sym = g_mat + np.transpose(g_mat, (0, 2, 1))
    d_rot = np.einsum("nij,njk->nik", g_sym, rotmats * diag[:, None, :])
    return d_scale, d_rot


def backward(scene: Scene, camera, d_color, mode="analytic", *,
             d_transmittance=None, tile_size=TILE_SIZE, sort_by="depth",
             early_stop=EARLY_STOP_T, alpha_cut=ALPHA_CUT,
             alpha_clamp=ALPHA_CLAMP, threads=None, prep=None) -> SceneGrads:
    """Pixel-gradient pullback onto scene parameters.

    d_color is dL/d(rendered color), shape (H, W, 3); d_transmittance
    optionally supplies dL/d(final transmittance) per pixel. Flags must match
    the forward render they differentiate.
    """
    n = len(scene)
    grads = SceneGrads(n, mode)
    if prep is None:
        prep = raster.prepare(scene, camera, mode, tile_size, sort_by, alpha_cut)
    d_color = np.asarray(d_color, dtype=float)
    if not np.all(np.isfinite(d_color)) or (
            d_transmittance is not None
            and not np.all(np.isfinite(d_transmittance))):
        raise ValueError("non-finite upstream pixel gradient")
    if n == 0:
        grads.d_background = d_color.reshape(-1, 3).sum(axis=0)
        return grads

    delta = scene.means - prep.origin
    g_m = np.zeros((n, 3, 3))        # dL/d(precision matrix), analytic mode
    g_lam2d = np.zeros((n, 2, 2))    # dL/d(2D conic), splat mode
    d_mean2d = np.zeros((n, 2))

    def tile_job(t):
        alpha, aux = _tile_alphas(prep, t, scene, alpha_cut, alpha_clamp,
                                  keep_aux=True)
        y0, x0, h, w = aux["y0"], aux["x0"], aux["h"], aux["w"]
        dc = d_color[y0:y0 + h, x0:x0 + w].reshape(-1, 3)
        dt_up = None
        if d_transmittance is not None:
            dt_up = d_transmittance[y0:y0 + h, x0:x0 + w].reshape(-1)
        if alpha is None:
            return None, dc.sum(axis=0), None
        ids = aux["ids"]
        colors = scene.colors[ids]
        _, t_final, _, caux = _composite(alpha, colors, scene.background, early_stop)
        w_prev, active, contrib = caux["w_prev"], caux["active"], caux["contrib"]

        dot = np.einsum("pc,kc->kp", dc, colors)
        dt_total = dc @ scene.background
        if dt_up is not None:
            dt_total = dt_total + dt_up
        u = dot * contrib
        csum = np.cumsum(u, axis=0)
        suffix = (csum[-1] - csum) + dt_total[None, :] * t_final[None, :]
        d_alpha = np.where(active, dot * w_prev - suffix / (1.0 - alpha), 0.0)
        live = ~aux["cut"] & (aux["alpha_raw"] < alpha_clamp)
        d_alpha_raw = np.where(live, d_alpha, 0.0)

        out = {"ids": ids,
               "d_colors": np.einsum("kp,pc->kc", contrib, dc),
               "d_background": dc.T @ t_final,
               "visible": (active & (alpha > 0)).any(axis=1)}

        if prep.mode == "analytic":
            de = d_alpha_raw * (1.0 - aux["alpha_raw"])
            out.update(e_chain(prep, aux, de, delta[ids]))
        else:
            falloff, dlt = aux["falloff"], aux["dlt"]
            opac = scene.splat_opacities[ids][:, None]
            out["d_opac"] = np.einsum("kp,kp->k", d_alpha_raw, falloff)
            d_fall = d_alpha_raw * opac
            d_maha = -0.5 * falloff * d_fall
            out["g_lam"] = np.einsum("kp,kpi,kpj->kij", d_maha, dlt, dlt)
            v = np.einsum("kij,kpj->kpi", prep.lam[ids], dlt)
            out["d_mean2d"] = -2.0 * np.einsum("kp,kpi->ki", d_maha, v)
        return out, None, None

    n_tiles = len(prep.grid.tiles)
    threads = raster._resolve_threads(threads)
    if threads == 1:
        results = [tile_job(t) for t in range(n_tiles)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(tile_job, range(n_tiles)))

    # Fixed tile-order reduction keeps gradients bit-identical across thread counts.
    for out, bg_only, _ in results:
        if out is None:
            grads.d_background += bg_only
            continue
        ids = out["ids"]
        grads.d_colors[ids] += out["d_colors"]
        grads.d_background += out["d_background"]
        grads.visible[ids] |= out["visible"]
        if prep.mode == "analytic":
            grads.d_kappas[ids] += out["d_kappas"]
            g_m[ids] += out["g_m"]
            grads.d_means[ids] += out["d_means"]
        else:
            grads.d_splat_opacities[ids] += out["d_opac"]
            g_lam2d[ids] += out["g_lam"]
            d_mean2d[ids] += out["d_mean2d"]

    if mode == "analytic":
        analytic_param_chain(scene, prep.rotmats, grads, g_m)
    else:
        scales = np.maximum(scene.scales, core.SCALE_FLOOR)
        live_scale = scene.scales >= core.SCALE_FLOOR
        _splat_projection_backward(scene, prep, g_lam2d, d_mean2d, grads,
                                   scales, live_scale)
    return grads


def e_chain(prep, aux, de, delta_ids):
    """Backward of the per-pixel exponents e = kappa sqrt(2 pi) beta peak
    given dL/de: gradients w.r.t. kappa, the precision matrix M, and the
    means' direct (delta) route. Shared by image and tomography passes."""
    ids = aux["ids"]
    a, b = aux["a"], aux["b"]
    beta, peak, d = aux["beta"], aux["peak"], aux["d"]
    kap = prep.kappa[ids][:, None]
    d_beta = de * kap * core.SQRT_2PI * peak
    d_peak = de * kap * core.SQRT_2PI * beta
    g_expo = -0.5 * peak * d_peak
    gc = g_expo
    gb = g_expo * (-2.0 * b / a)
    ga = g_expo * (b * b) / (a * a) - 0.5 * d_beta * beta ** 3
    gc_sum = gc.sum(axis=1)
    g_m = (np.einsum("kp,pi,pj->kij", ga, d, d)
           + np.einsum("ki,kj->kij", delta_ids,
                       np.einsum("kp,pj->kj", gb, d))
           + gc_sum[:, None, None]
           * np.einsum("ki,kj->kij", delta_ids, delta_ids))
    return {"d_kappas": np.einsum("kp->k", de * core.SQRT_2PI * beta * peak),
            "g_m": g_m,
            "d_means": (np.einsum("kp,kpi->ki", gb, aux["md"])
                        + 2.0 * gc_sum[:, None] * prep.minv_delta[ids])}


def analytic_param_chain(scene, rotmats, grads, g_m):
    """Convert accumulated dL/d kappa and dL/dM (precision matrix) into
    theta/scale/rotation gradients. Shared by the image and tomography
    backward passes."""
    scales = np.maximum(scene.scales, core.SCALE_FLOOR)
    live_scale = scene.scales >= core.SCALE_FLOOR
    # kappa = -log1p(-0.99 theta) * mean(1/s)
    lfac = -np.log1p(-core.THETA_CEILING * scene.thetas)
    inv_mean = np.mean(1.0 / scales, axis=1)
    grads.d_thetas = grads.d_kappas * inv_mean * core.THETA_CEILING \
        / (1.0 - core.THETA_CEILING * scene.thetas)
    d_scale_kappa = grads.d_kappas[:, None] * (-lfac[:, None] / (3.0 * scales ** 2))
    # precision matrix M = R diag(1/s^2) R^T
    inv_s2 = 1.0 / (scales * scales)
    d_scale_m, d_rot = _factored_grads(g_m, rotmats, inv_s2, -2.0 / scales ** 3)
    grads.d_scales = (d_scale_kappa + d_scale_m) * live_scale
    grads.d_rotations = _quat_grads(d_rot, scene.rotations)
    return grads


def _splat_projection_backward(scene, prep, g_lam2d, d_mean2d, grads,
                               scales, live_scale):
    """Chain dL/d(conic) and dL/d(pixel mean) through the EWA projection."""
    cam = prep.camera
    cache = prep.proj_cache
    valid = prep.valid
    u_mat, sigma = cache["U"], cache["sigma"]
    z = cache["z"]
    x, y = cache["view"][:, 0], cache["view"][:, 1]

    # conic = inverse of dilated cov2d
    lam = prep.lam
    g_cov = -np.einsum("nij,njk,nkl->nil", lam, g_lam2d, lam)
    d_sigma = np.einsum("nji,njk,nkl->nil", u_mat, g_cov, u_mat)
    g_cov_sym = g_cov + np.transpose(g_cov, (0, 2, 1))
    d_u = np.einsum("nij,njk,nkl->nil", g_cov_sym, u_mat, sigma)
    d_j = np.einsum("nij,kj->nik", d_u, cam.rotation)

    fx, fy = cam.fx, cam.fy
    rx, ry = cache["cx_ratio"], cache["cy_ratio"]
    open_x = ~cache["clamped_x"]
    open_y = ~cache["clamped_y"]
    dj00, dj02 = d_j[:, 0, 0], d_j[:, 0, 2]
    dj11, dj12 = d_j[:, 1, 1], d_j[:, 1, 2]
    du_px, dv_px = d_mean2d[:, 0], d_mean2d[:, 1]

    dv = np.zeros((len(scene), 3))
    dv[:, 0] = dj02 * (-fx / z ** 2) * open_x + du_px * fx / z
    dv[:, 1] = dj12 * (-fy / z ** 2) * open_y + dv_px * fy / z
    dv[:, 2] = (dj00 * (-fx / z ** 2) + dj11 * (-fy / z ** 2)
                + dj02 * (fx * rx / z ** 2 + (fx * x / z ** 3) * open_x)
                + dj12 * (fy * ry / z ** 2 + (fy * y / z ** 3) * open_y)
                + du_px * (-fx * x / z ** 2) + dv_px * (-fy * y / z ** 2))
    dv[~valid] = 0.0
    grads.d_means += dv @ cam.rotation

    d_sigma[~valid] = 0.0
    s2 = scales * scales
    d_scale_s, d_rot = _factored_grads(d_sigma, prep.rotmats, s2, 2.0 * scales)
    grads.d_scales += d_scale_s * live_scale
    grads.d_rotations += _quat_grads(d_rot, scene.rotations)


# ---------------------------------------------------------------------------
# losses

@dataclass
class LossSpec:
    """Photometric loss: 'l1', 'l2', 'dssim', or 'mixed' ((1-lam) L1 + lam DSSIM)."""

    kind: str = "mixed"
    lam: float = 0.2

    @classmethod
    def parse(cls, text):
        if ":" in text:
            kind, lam = text.split(":", 1)
            return cls(kind=kind.strip(), lam=float(lam))
        return cls(kind=text.strip())


def loss_value(image, target, spec: LossSpec):
    image = np.asarray(image, dtype=float)
    target = np.asarray(target, dtype=float)
    if spec.kind == "l1":
        return float(np.mean(np.abs(image - target)))
    if spec.kind == "l2":
        return float(np.mean((image - target) ** 2))
    if spec.kind == "dssim":
        return 1.0 - metrics.ssim(image, target)
    if spec.kind == "mixed":
        l1 = float(np.mean(np.abs(image - target)))
        return (1.0 - spec.lam) * l1 + spec.lam * (1.0 - metrics.ssim(image, target))
    raise ValueError(f"unknown loss kind {spec.kind!r}")


def loss_and_grad(image, target, spec: LossSpec):
    """Loss value and dL/d(image)."""
    image = np.asarray(image, dtype=float)
    target = np.asarray(target, dtype=float)
    n = image.size
    if spec.kind == "l1":
        r = image - target
        return float(np.mean(np.abs(r))), np.sign(r) / n
    if spec.kind == "l2":
        r = image - target
        return float(np.mean(r * r)), 2.0 * r / n
    if spec.kind == "dssim":
        s, ds = metrics.ssim_with_grad(image, target)
        return 1.0 - s, -ds
    if spec.kind == "mixed":
        r = image - target
        l1 = float(np.mean(np.abs(r)))
        s, ds = metrics.ssim_with_grad(image, target)
        value = (1.0 - spec.lam) * l1 + spec.lam * (1.0 - s)
        return value, (1.0 - spec.lam) * np.sign(r) / n - spec.lam * ds
    raise ValueError(f"unknown loss kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class FdRecord:
    primitive: int
    param: str
    analytic: float
    numeric: float

    @property
    def abs_err(self):
        return abs(self.analytic - self.numeric)

    @property
    def rel_err(self):
        # relative to max(|analytic|, |numeric|, 1e-8) so near-zero pairs pass
        return self.abs_err / max(abs(self.analytic), abs(self.numeric), 1e-8)

    def within(self, tol):
        return self.rel_err <= tol


@dataclass
class FdReport:
    mode: str
    loss: str
    records: list = field(default_factory=list)

    def fraction_within(self, tol):
        if not self.records:
            return 1.0
        return sum(r.within(tol) for r in self.records) / len(self.records)

    def worst(self):
        failing = [r for r in self.records if not r.within(1e-3)]
        pool = failing or self.records
        return max(pool, key=lambda r: r.rel_err, default=None)

    def rows(self):
        for r in self.records:
            yield (self.mode, r.primitive, r.param, r.analytic, r.numeric,
                   r.abs_err, r.rel_err)


def _param_slots(mode):
    slots = [("mean", i) for i in range(3)] + [("scale", i) for i in range(3)] \
        + [("rotation", i) for i in range(4)]
    slots += [("theta", 0)] if mode == "analytic" else [("splat_opacity", 0)]
    slots += [("color", i) for i in range(3)]
    return slots


def _get_array(scene, name):
    return {"mean": scene.means, "scale": scene.scales, "rotation": scene.rotations,
            "theta": scene.thetas, "splat_opacity": scene.splat_opacities,
            "color": scene.colors}[name]


def fd_check(scene: Scene, camera, target, loss_spec: LossSpec = None,
             mode="analytic", tile_size=TILE_SIZE) -> FdReport:
    """Central-difference check of every scalar parameter of every primitive,
    with scale-aware step h = max(1e-5, 1e-4 |p|).

    The renders disable early termination and the alpha skip so the loss is
    smooth wherever the model is; clamps at exactly the alpha ceiling or the
    scale floor remain genuine kinks and are the caller's responsibility to
    avoid in test scenes. Reports results; never raises on mismatch.
    """
    loss_spec = loss_spec or LossSpec()
    flags = dict(early_stop=None, alpha_cut=0.0, tile_size=tile_size)

    out = raster.render(scene, camera, mode, **flags)
    value, d_img = loss_and_grad(out.color, target, loss_spec)
    grads = backward(scene, camera, d_img, mode, **flags)
    analytic = {"mean": grads.d_means, "scale": grads.d_scales,
                "rotation": grads.d_rotations, "theta": grads.d_thetas,
                "splat_opacity": grads.d_splat_opacities, "color": grads.d_colors}

    def loss_of(s):
        img = raster.render(s, camera, mode, **flags).color
        return loss_value(img, target, loss_spec)

    report = FdReport(mode=mode, loss=loss_spec.kind)
    for prim in range(len(scene)):
        for name, comp in _param_slots(mode):
            base = _get_array(scene, name)
            p0 = float(base[prim]) if base.ndim == 1 else float(base[prim, comp])
            h = max(1e-5, 1e-4 * abs(p0))
            vals = []
            # five-point central stencil: truncation O(h^4), so genuinely
            # zero gradients come back at rounding level instead of h^2
            for step in (h, -h, 2.0 * h, -2.0 * h):
                pert = scene.copy()
                arr = _get_array(pert, name)
                if arr.ndim == 1:
                    arr[prim] += step
                else:
                    arr[prim, comp] += step
                vals.append(loss_of(pert))
            numeric = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) \
                / (12.0 * h)
            a = analytic[name]
            a_val = float(a[prim]) if a.ndim == 1 else float(a[prim, comp])
            label = name if a.ndim == 1 else f"{name}[{comp}]"
            report.records.append(FdRecord(prim, label, a_val, numeric))
    return report
