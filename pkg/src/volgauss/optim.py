"""Scene fitting: Adam over parameter groups, the bounded-density
reparameterization's densification rules (kappa halving on split/clone,
high-kappa splits, theta-based pruning, no opacity reset), and the
image-fitting loop shared by the view-synthesis and tomography experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import core, metrics, raster
from .grad import LossSpec, SceneGrads, backward, loss_and_grad
from .raster import Scene


class DivergenceError(RuntimeError):
    """Raised when an optimizer update goes non-finite."""


@dataclass
class TrainConfig:
    iterations: int = 1000
    loss: LossSpec = field(default_factory=LossSpec)
    lr_position: float = 1.6e-4        # scaled by scene extent, decays to lr_position_final
    lr_position_final: float = 1e-5
    lr_theta: float = 0.03
    lr_color: float = 0.003
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    densify: bool = False
    densify_interval: int = 200
    densify_start: int = 200
    densify_stop_fraction: float = 0.7
    split_grad_threshold: float = 1e-8
    clone_grad_threshold: float = 5e-5
    prune_theta_min: float = 0.005
    prune_scale_fraction: float = 0.01
    scene_extent_multiplier: float = 1.0
    high_kappa_split_fraction: float = 0.9
    max_primitives: int = 20000
    seed: int = 0
    # default-initialization knobs (used when fit_image builds its own scene)
    n_init: int = 200
    init_theta: float = 0.1
    init_scale_pixels: float = 1.0

    def __post_init__(self):
        if isinstance(self.loss, str):
            self.loss = LossSpec.parse(self.loss)


@dataclass
class DensifyEvent:
    iteration: int
    kind: str                   # split | clone | prune
    parent: int
    parent_kappa: float = 0.0
    parent_theta: float = 0.0
    child_thetas: tuple = ()
    child_scales: tuple = ()    # tuple of (3,) tuples
    child_kappas: tuple = ()
    clamped: bool = False
    reason: str = ""
    theta: float = 0.0          # prune diagnostics
    max_scale: float = 0.0
    theta_bound: float = 0.0
    scale_bound: float = 0.0


@dataclass
class FitReport:
    mode: str
    losses: list = field(default_factory=list)
    primitive_counts: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final_metrics: list = field(default_factory=list)  # dict per target view
    diverged: bool = False
    iterations_run: int = 0


class Adam:
    """Per-array Adam moments; lr can be overridden per step."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grad, lr=None):
        """Return the update to subtract from the parameter."""
        self.t += 1
        g = np.asarray(grad, dtype=float)
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return (self.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + self.eps)

    def surgery(self, keep, n_new):
        """Drop rows not in keep, append zero-moment rows for new primitives."""
        self.m = np.concatenate([self.m[keep], np.zeros((n_new,) + self.m.shape[1:])])
        self.v = np.concatenate([self.v[keep], np.zeros((n_new,) + self.v.shape[1:])])


def _softplus(x):
    return np.logaddexp(0.0, 10.0 * x) / 10.0


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log1p(-np.exp(-10.0 * y)) / 10.0


class Trainer:
    """Owns raw parameters (colors live pre-softplus) and Adam state; applies
    constraint projections after every step (theta/opacity clipped, scales
    floored, quaternions renormalized)."""

    def __init__(self, scene: Scene, config: TrainConfig, mode: str, extent: float):
        self.scene = scene
        self.config = config
        self.mode = mode
        self.extent = extent
        self.color_raw = _softplus_inv(np.clip(scene.colors, 1e-6, None))
        n = len(scene)
        c = config
        self.opts = {
            "position": Adam((n, 3), c.lr_position),
            "scale": Adam((n, 3), c.lr_scale),
            "rotation": Adam((n, 4), c.lr_rotation),
            "color": Adam((n, 3), c.lr_color),
            "density": Adam((n,), c.lr_theta),
        }

    def lr_position_at(self, iteration):
        c = self.config
        frac = iteration / max(c.iterations - 1, 1)
        return c.lr_position * (c.lr_position_final / c.lr_position) ** frac \
            * self.extent

    def step(self, grads: SceneGrads, iteration):
        s = self.scene
        d_color_raw = grads.d_colors * expit(10.0 * self.color_raw)
        density_grad = grads.d_thetas if self.mode == "analytic" \
            else grads.d_splat_opacities
        updates = {
            "position": self.opts["position"].step(grads.d_means,
                                                   lr=self.lr_position_at(iteration)),
            "scale": self.opts["scale"].step(grads.d_scales),
            "rotation": self.opts["rotation"].step(grads.d_rotations),
            "color": self.opts["color"].step(d_color_raw),
            "density": self.opts["density"].step(density_grad),
        }
        for name, u in updates.items():
            bad = ~np.isfinite(u)
            if bad.any():
                prim = int(np.argwhere(bad)[0][0])
                raise DivergenceError(
                    f"non-finite {name} update for primitive {prim}")
        s.means -= updates["position"]
        s.scales = np.maximum(s.scales - updates["scale"], core.SCALE_FLOOR)
        s.rotations -= updates["rotation"]
        s.rotations /= np.linalg.norm(s.rotations, axis=1, keepdims=True)
        self.color_raw -= updates["color"]
        s.colors = _softplus(self.color_raw)
        if self.mode == "analytic":
            s.thetas = np.clip(s.thetas - updates["density"], 0.0, 1.0)
        else:
            s.splat_opacities = np.clip(
                s.splat_opacities - updates["density"], 0.0, 1.0)

def scene_extent(cameras, scene: Scene, multiplier=1.0):
    """Scene extent for densification bounds: the camera spread radius, or the
    primitive bounding-box diagonal when a single camera makes that zero."""
    centers = np.array([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    r = float(np.linalg.norm(centers - centroid, axis=1).max())
    if r < 1e-9:
        if len(scene):
            diag = float(np.linalg.norm(scene.means.max(0) - scene.means.min(0)))
        else:
            diag = 0.0
        r = max(diag, 1.0)
    return multiplier * r


class GradAccum:
    """Windowed world-space positional gradient norms (averaged at densify)."""

    def __init__(self, n):
        self.norm_sum = np.zeros(n)
        self.count = np.zeros(n)

    def update(self, grads: SceneGrads):
        norms = grads.position_norms()
        vis = grads.visible
        self.norm_sum[vis] += norms[vis]
        self.count[vis] += 1

    def averages(self):
        return self.norm_sum / np.maximum(self.count, 1.0)


def _children_theta(parent_kappa, child_scales):
    """theta so the child's kappa is half the parent's; returns (theta, clamped)."""
    target = 0.5 * parent_kappa
    theta = core.theta_for_kappa(target, child_scales)
    ceiling = core.density_kappa(1.0, child_scales)
    clamped = target > ceiling * (1.0 + 1e-12)
    return (1.0 if clamped else float(theta)), clamped


def densify_and_prune(scene: Scene, trainer: Trainer, accum: GradAccum,
                      config: TrainConfig, extent, rng, iteration,
                      mode="analytic"):
    """Split / clone / prune per the density-aware rules. Mutates scene and
    trainer state in place; returns the list of DensifyEvents."""
    n = len(scene)
    if n == 0:
        return []
    avg = accum.averages()
    kappas = scene.kappas()
    ceilings = core.density_kappa(np.ones(n), scene.scales)
    max_scale = scene.scales.max(axis=1)
    big = max_scale > config.prune_scale_fraction * extent

    split_mask = ((avg > config.split_grad_threshold) & big) \
        | (kappas > config.high_kappa_split_fraction * ceilings)
    clone_mask = (avg > config.clone_grad_threshold) & ~big & ~split_mask

    budget = max(config.max_primitives - n, 0)
    grow = np.flatnonzero(split_mask | clone_mask)
    if len(grow) > budget:           # each split/clone adds one net primitive
        drop = grow[budget:]
        split_mask[drop] = False
        clone_mask[drop] = False

    events = []
    new = {k: [] for k in ("means", "scales", "rotations", "thetas",
                           "colors", "splat_opacities")}

    def emit_children(parent, child_means, child_scales, kind):
        pk = float(kappas[parent])
        thetas, clamps = [], False
        for cs in child_scales:
            th, cl = _children_theta(pk, cs)
            thetas.append(th)
            clamps = clamps or cl
        o = float(scene.splat_opacities[parent])
        child_opac = 1.0 - np.sqrt(max(1.0 - o, 0.0))
        for cm, cs, th in zip(child_means, child_scales, thetas):
            new["means"].append(cm)
            new["scales"].append(cs)
            new["rotations"].append(scene.rotations[parent].copy())
            new["thetas"].append(th)
            new["colors"].append(scene.colors[parent].copy())
            new["splat_opacities"].append(child_opac)
        events.append(DensifyEvent(
            iteration=iteration, kind=kind, parent=int(parent),
            parent_kappa=pk, parent_theta=float(scene.thetas[parent]),
            child_thetas=tuple(thetas),
            child_scales=tuple(tuple(cs) for cs in child_scales),
            child_kappas=tuple(float(core.density_kappa(th, cs))
                               for th, cs in zip(thetas, child_scales)),
            clamped=clamps,
            reason="high_kappa" if kind == "split"
                   and kappas[parent] > config.high_kappa_split_fraction
                   * ceilings[parent] and not (avg[parent] > config.split_grad_threshold
                                               and big[parent]) else "gradient"))

    rotmats = core.quat_to_rotmat(scene.rotations)
    for parent in np.flatnonzero(split_mask):
        cs = scene.scales[parent] / 1.6
        xi = rng.standard_normal((2, 3))
        means = scene.means[parent] + (rotmats[parent]
                                       @ (scene.scales[parent] * xi).T).T
        emit_children(parent, list(means), [cs.copy(), cs.copy()], "split")
    for parent in np.flatnonzero(clone_mask):
        cs = scene.scales[parent].copy()
        means = [scene.means[parent].copy(), scene.means[parent].copy()]
        emit_children(parent, means, [cs, cs.copy()], "clone")

    # parents of splits and clones are replaced by their children
    replaced = split_mask | clone_mask
    density = scene.thetas if mode == "analytic" else scene.splat_opacities
    prune = (density < config.prune_theta_min) \
        | (max_scale > config.prune_scale_fraction * extent)
    for i in np.flatnonzero(prune & ~replaced):
        events.append(DensifyEvent(
            iteration=iteration, kind="prune", parent=int(i),
            theta=float(density[i]), max_scale=float(max_scale[i]),
            theta_bound=config.prune_theta_min,
            scale_bound=config.prune_scale_fraction * extent,
            reason="theta" if density[i] < config.prune_theta_min else "scale"))
    keep = ~(replaced | prune)

    n_new = len(new["means"])
    scene.means = np.concatenate([scene.means[keep], np.array(new["means"]).reshape(n_new, 3)])
    scene.scales = np.concatenate([scene.scales[keep], np.array(new["scales"]).reshape(n_new, 3)])
    scene.rotations = np.concatenate([scene.rotations[keep],
                                      np.array(new["rotations"]).reshape(n_new, 4)])
    scene.thetas = np.concatenate([scene.thetas[keep], np.array(new["thetas"])])
    scene.colors = np.concatenate([scene.colors[keep],
                                   np.array(new["colors"]).reshape(n_new, 3)])
    scene.splat_opacities = np.concatenate([scene.splat_opacities[keep],
                                            np.array(new["splat_opacities"])])
    for opt in trainer.opts.values():
        opt.surgery(keep, n_new)
    trainer.color_raw = np.concatenate(
        [trainer.color_raw[keep],
         _softplus_inv(np.clip(scene.colors[len(scene) - n_new:], 1e-6, None))])
    return events


def _default_init(cameras, config: TrainConfig, rng, background):
    """Means uniform over the viewed slab, scales at the pixel footprint,
    theta (and splat opacity) at the configured starting density, mid-gray."""
    cam = cameras[0]
    dist = float(np.mean([np.linalg.norm(c.center) for c in cameras]))
    if dist < 1e-6:
        dist = 1.0
    n = config.n_init
    u = rng.uniform(0.05, 0.95, n) * cam.width
    v = rng.uniform(0.05, 0.95, n) * cam.height
    z = rng.uniform(0.7, 1.3, n) * dist
    d_view = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy,
                       np.ones(n)], axis=1)
    means = cam.center + (d_view * z[:, None]) @ cam.rotation
    s = config.init_scale_pixels * dist / cam.fx
    return Scene(means=means, scales=np.full((n, 3), s),
                 rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                 thetas=np.full(n, config.init_theta),
                 colors=np.full((n, 3), 0.5),
                 splat_opacities=np.full(n, config.init_theta),
                 background=background)


def fit_image(targets, cameras, config: TrainConfig, mode="analytic",
              init_scene: Scene = None, threads=None, background=(0, 0, 0),
              callback=None):
    """Fit a scene to one or more target images. Returns (scene, FitReport).

    With init_scene given the caller controls initialization (comparative runs
    pass copies of one scene to both modes); otherwise a seeded default init
    is built from the first camera's viewing slab.
    """
    if not isinstance(targets, (list, tuple)):
        targets = [targets]
        cameras = [cameras] if not isinstance(cameras, (list, tuple)) else cameras
    targets = [np.asarray(t, dtype=float) for t in targets]
    if len(targets) != len(cameras) or not cameras:
        raise ValueError("need one camera per target image")

    rng = np.random.Generator(np.random.Philox(key=config.seed))
    scene = init_scene.copy() if init_scene is not None \
        else _default_init(cameras, config, rng, background)
    extent = scene_extent(cameras, scene, config.scene_extent_multiplier)
    trainer = Trainer(scene, config, mode, extent)
    accum = GradAccum(len(scene))
    report = FitReport(mode=mode)

    if len(cameras) > 1:
        epochs = -(-config.iterations // len(cameras))
        order = np.concatenate([rng.permutation(len(cameras))
                                for _ in range(epochs)])[:config.iterations]
    else:
        order = np.zeros(config.iterations, dtype=int)

    checkpoint = scene.copy()
    densify_stop = config.densify_stop_fraction * config.iterations
    for it in range(config.iterations):
        cam = cameras[order[it]]
        target = targets[order[it]]
        prep = raster.prepare(scene, cam, mode)
        out = raster.render(scene, cam, mode, threads=threads, prep=prep)
        value, d_img = loss_and_grad(out.color, target, config.loss)
        if not np.isfinite(value):
            report.diverged = True
            scene = checkpoint
            break
        grads = backward(scene, cam, d_img, mode, threads=threads, prep=prep)
        accum.update(grads)
        try:
            trainer.step(grads, it)
        except DivergenceError:
            report.diverged = True
            scene = checkpoint
            break
        report.losses.append(value)
        report.primitive_counts.append(len(scene))
        if callback is not None:
            callback(it, scene, value)

        step_no = it + 1
        if config.densify and step_no % config.densify_interval == 0 \
                and config.densify_start <= step_no <= densify_stop:
            events = densify_and_prune(scene, trainer, accum, config, extent,
                                       rng, step_no, mode)
            report.events.extend(events)
            accum = GradAccum(len(scene))
            checkpoint = scene.copy()
        report.iterations_run = step_no

    for cam, target in zip(cameras, targets):
        img = raster.render(scene, cam, mode, threads=threads).color
        report.final_metrics.append({
            "mse": metrics.mse(img, target),
            "psnr": metrics.psnr(np.clip(img, 0, 1), np.clip(target, 0, 1)),
            "ssim": metrics.ssim(img, target),
        })
    return scene, report


def save_checkpoint(prefix, scene: Scene, trainer: Trainer = None, iteration=0):
    """Scene text dump plus optimizer moments; prefix_scene.txt / prefix_optim.npz."""
    from . import sceneio

    sceneio.save_scene(f"{prefix}_scene.txt", scene)
    payload = {"iteration": np.array(iteration)}
    if trainer is not None:
        payload["color_raw"] = trainer.color_raw
        for name, opt in trainer.opts.items():
            payload[f"{name}_m"] = opt.m
            payload[f"{name}_v"] = opt.v
            payload[f"{name}_t"] = np.array(opt.t)
    np.savez(f"{prefix}_optim.npz", **payload)


def load_checkpoint(prefix, config: TrainConfig = None, mode="analytic",
                    cameras=None):
    """Inverse of save_checkpoint; returns (scene, trainer or None, iteration)."""
    from . import sceneio

    scene, _ = sceneio.load_scene(f"{prefix}_scene.txt")
    data = np.load(f"{prefix}_optim.npz")
    iteration = int(data["iteration"])
    trainer = None
    if config is not None and "color_raw" in data:
        extent = scene_extent(cameras, scene, config.scene_extent_multiplier) \
            if cameras else 1.0
        trainer = Trainer(scene, config, mode, extent)
        trainer.color_raw = data["color_raw"]
        for name, opt in trainer.opts.items():
            opt.m = data[f"{name}_m"]
            opt.v = data[f"{name}_v"]
            opt.t = int(data[f"{name}_t"])
    return scene, trainer, iteration
