"""Command-line front end.

Subcommands: render, compare, fit, tomo, gradcheck, metrics. Every command
is deterministic given --seed and writes its artifacts under --out:
machine-readable text (key-value report, CSV tables) next to images, volumes,
and matplotlib figures. Wall-clock timings go to a separate timings.txt so
deterministic outputs can be compared byte for byte.

Exit codes: 0 success, 1 validation failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import metrics, oracle, raster, report, sceneio, scenes, tomo
from .grad import LossSpec, fd_check
from .optim import DivergenceError, TrainConfig, fit_image
from .sceneio import FormatError


class CliError(ValueError):
    """Validation failure: bad flags, files, or config fields (exit 1)."""


class NumericalError(RuntimeError):
    """Numerical failure: divergence or a failed check (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


class Timings:
    """Phase wall-clock log, written to its own file and excluded from
    determinism comparisons."""

    def __init__(self):
        self.rows = []
        self._t = time.perf_counter()

    def mark(self, label):
        now = time.perf_counter()
        self.rows.append((label, now - self._t))
        self._t = now

    def write(self, out_dir):
        with open(os.path.join(out_dir, "timings.txt"), "w") as f:
            for label, seconds in self.rows:
                f.write(f"{label} {seconds:.6f}\n")


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _bool(text):
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return t
    return parse


def _parse_config(path, schema):
    """Validate a config file against {key: parser}; collects every bad
    field before failing. Returns {key: parsed} for the provided keys."""
    entries = sceneio.load_config(path) if path else []
    errors = []
    values = {}
    for line_no, key, raw in entries:
        if key not in schema:
            errors.append(f"line {line_no}: unknown field '{key}'")
            continue
        try:
            values[key] = schema[key](raw)
        except ValueError as e:
            errors.append(f"line {line_no}: field '{key}': {e}")
    if errors:
        raise CliError("config validation failed:\n  " + "\n  ".join(errors))
    return values


_FIT_SCHEMA = {
    "protocol": _choice("disk", "shapes", "custom"),
    "target": str,
    "size": int,
    "iterations": int,
    "mode": _choice("analytic", "splat", "both"),
    "loss": LossSpec.parse,
    "seed": int,
    "n_init": int,
    "densify": _bool,
    "densify_interval": int,
    "max_primitives": int,
    "lr_position": float,
    "lr_theta": float,
    "lr_color": float,
    "lr_scale": float,
    "lr_rotation": float,
}

_TOMO_SCHEMA = {
    "phantom": _choice("blob", "nested"),
    "n_views": int,
    "size": int,
    "iterations": int,
    "noise": float,
    "seed": int,
    "n_init": int,
    "resolution": int,
    "densify": _bool,
    "densify_interval": int,
    "max_primitives": int,
    "loss": LossSpec.parse,
    "source_radius": float,
    "fov_x_deg": float,
    "lr_position": float,
    "lr_theta": float,
    "lr_scale": float,
    "lr_rotation": float,
    "init_theta": float,
    "init_scale_pixels": float,
}

_GRADCHECK_SCHEMA = {
    "scenes": int,
    "primitives": int,
    "size": int,
    "loss": LossSpec.parse,
    "tolerance": float,
    "min_fraction": float,
    "mode": _choice("analytic", "splat", "both"),
    "seed": int,
}


def _apply_lr(config: TrainConfig, values):
    for key in ("lr_position", "lr_theta", "lr_color", "lr_scale",
                "lr_rotation", "densify_interval", "max_primitives",
                "init_theta", "init_scale_pixels"):
        if key in values:
            setattr(config, key, values[key])


def _load_scene_camera(args):
    if not os.path.exists(args.scene):
        raise CliError(f"scene file not found: {args.scene}")
    scene, cams = sceneio.load_scene(args.scene)
    if args.camera:
        if not os.path.exists(args.camera):
            raise CliError(f"camera file not found: {args.camera}")
        camera = sceneio.load_camera(args.camera)
    elif cams:
        camera = next(iter(cams.values()))
    else:
        raise CliError("no camera: pass --camera or embed one in the scene file")
    return scene, camera


def _write_report(out_dir, name, lines):
    with open(os.path.join(out_dir, name), "w") as f:
        f.write("volgauss report v1\n")
        for key, value in lines:
            f.write(f"{key} {value}\n")


def _fmt_float(v):
    return repr(float(v))


# ---------------------------------------------------------------------------
# commands

def cmd_render(args):
    out_dir = _out_dir(args)
    timings = Timings()
    scene, camera = _load_scene_camera(args)
    if len(scene):
        z = camera.world_to_view(scene.means)[:, 2]
        if np.all(z <= camera.z_near):
            print("warning: all primitives behind the camera; "
                  "rendering background only", file=sys.stderr)
    timings.mark("load")
    out = raster.render(scene, camera, args.mode, threads=args.threads)
    timings.mark("render")
    sceneio.write_pfm(os.path.join(out_dir, "render.pfm"), out.color)
    sceneio.write_png(os.path.join(out_dir, "render.png"), out.color)
    timings.mark("write")
    timings.write(out_dir)
    return 0


def cmd_compare(args):
    out_dir = _out_dir(args)
    timings = Timings()
    scene, camera = _load_scene_camera(args)
    timings.mark("load")

    renders = {}
    renders["analytic"] = raster.render(scene, camera, "analytic",
                                        threads=args.threads,
                                        early_stop=None, alpha_cut=0.0).color
    renders["splat"] = raster.render(scene, camera, "splat",
                                     threads=args.threads,
                                     early_stop=None, alpha_cut=0.0).color
    timings.mark("render")
    renders["exact_sorted"] = oracle.exact_sorted_image(
        scene, camera, early_stop=None, alpha_cut=0.0)[0]
    renders["raymarch"] = oracle.raymarch_image(
        scene, camera, oracle.MarchConfig(n_steps=args.steps))[0]
    timings.mark("oracles")

    pairs = [("analytic", "raymarch"), ("splat", "raymarch"),
             ("analytic", "exact_sorted"), ("splat", "analytic")]
    rows = []
    for a, b in pairs:
        diff = np.abs(renders[a] - renders[b])
        rows.append((f"{a}_vs_{b}", _fmt_float(diff.max()),
                     _fmt_float(diff.mean())))
    sceneio.write_csv(os.path.join(out_dir, "compare.csv"),
                      ["pair", "max_err", "mean_err"], rows)
    for name, img in renders.items():
        sceneio.write_pfm(os.path.join(out_dir, f"{name}.pfm"), img)
    report.compare_figure(os.path.join(out_dir, "compare.png"), renders,
                          reference_key="raymarch")
    timings.mark("write")
    timings.write(out_dir)
    return 0


def _fit_setup(values, seed_override):
    protocol = values.get("protocol", "shapes")
    size = values.get("size", 64)
    init_scene = None
    if protocol == "disk":
        target, camera, init_scene = scenes.disk_protocol(size)
        config = TrainConfig(iterations=600, loss=LossSpec("l2"), n_init=1)
    elif protocol == "shapes":
        target, camera = scenes.shapes_protocol(size)
        config = TrainConfig(iterations=1500, loss=LossSpec("mixed", 0.2),
                             n_init=500)
    else:
        path = values.get("target", "")
        if not path or not os.path.exists(path):
            raise CliError(f"custom protocol needs an existing 'target' "
                           f"image, got {path!r}")
        target = sceneio.read_image(path)
        if target.ndim == 2:
            target = np.repeat(target[:, :, None], 3, axis=2)
        camera = scenes.front_camera(width=target.shape[1],
                                     height=target.shape[0])
        config = TrainConfig(iterations=1000, loss=LossSpec("mixed", 0.2),
                             n_init=300)
    config.iterations = values.get("iterations", config.iterations)
    config.loss = values.get("loss", config.loss)
    config.seed = seed_override if seed_override is not None \
        else values.get("seed", 0)
    config.n_init = values.get("n_init", config.n_init)
    config.densify = values.get("densify", False)
    _apply_lr(config, values)
    return target, camera, init_scene, config


def cmd_fit(args):
    out_dir = _out_dir(args)
    timings = Timings()
    values = _parse_config(args.config, _FIT_SCHEMA)
    target, camera, init_scene, config = _fit_setup(values, args.seed)
    mode_sel = values.get("mode", "both")
    modes = ["analytic", "splat"] if mode_sel == "both" else [mode_sel]
    timings.mark("setup")

    sceneio.write_png(os.path.join(out_dir, "target.png"), target)
    reports = {}
    finals = {}
    diverged = False
    for mode in modes:
        scene, rep = fit_image(target, camera, config, mode,
                               init_scene=init_scene, threads=args.threads)
        reports[mode] = rep
        finals[mode] = raster.render(scene, camera, mode,
                                     threads=args.threads).color
        sceneio.write_pfm(os.path.join(out_dir, f"fit_{mode}.pfm"),
                          finals[mode])
        sceneio.write_png(os.path.join(out_dir, f"fit_{mode}.png"),
                          finals[mode])
        sceneio.save_scene(os.path.join(out_dir, f"scene_{mode}.txt"), scene,
                           cameras={"fit": camera})
        diverged = diverged or rep.diverged
        timings.mark(f"fit_{mode}")

    rows = []
    for mode in modes:
        for it, (loss, count) in enumerate(zip(reports[mode].losses,
                                               reports[mode].primitive_counts)):
            rows.append((it, mode, _fmt_float(loss), count))
    sceneio.write_csv(os.path.join(out_dir, "fit.csv"),
                      ["iteration", "mode", "loss", "primitives"], rows)

    lines = [("protocol", values.get("protocol", "shapes")),
             ("seed", config.seed), ("iterations", config.iterations)]
    metric_rows = []
    for mode in modes:
        m = reports[mode].final_metrics[0]
        lines += [(f"{mode}_mse", _fmt_float(m["mse"])),
                  (f"{mode}_psnr", _fmt_float(m["psnr"])),
                  (f"{mode}_ssim", _fmt_float(m["ssim"])),
                  (f"{mode}_primitives", reports[mode].primitive_counts[-1]
                   if reports[mode].primitive_counts else 0),
                  (f"{mode}_diverged", int(reports[mode].diverged))]
        metric_rows.append((mode, _fmt_float(m["mse"]), _fmt_float(m["psnr"]),
                            _fmt_float(m["ssim"])))
    _write_report(out_dir, "report.txt", lines)
    sceneio.write_csv(os.path.join(out_dir, "metrics.csv"),
                      ["mode", "mse", "psnr", "ssim"], metric_rows)
    report.loss_curves(os.path.join(out_dir, "fit_loss.png"),
                       {m: reports[m].losses for m in modes})
    report.image_grid(os.path.join(out_dir, "fit_summary.png"),
                      [target] + [finals[m] for m in modes],
                      ["target"] + modes)
    timings.mark("write")
    timings.write(out_dir)
    return 2 if diverged else 0


def cmd_tomo(args):
    out_dir = _out_dir(args)
    timings = Timings()
    values = _parse_config(args.config, _TOMO_SCHEMA)
    kind = values.get("phantom", "blob")
    phantom = tomo.blob_phantom() if kind == "blob" \
        else tomo.nested_ellipsoid_phantom()
    n_views = values.get("n_views", 8 if kind == "blob" else 25)
    resolution = values.get("resolution", 64)
    seed = args.seed if args.seed is not None else values.get("seed", 0)

    geometry = tomo.TomoGeometry(
        source_radius=values.get("source_radius", 4.0),
        width=values.get("size", 64), height=values.get("size", 64),
        fov_x_deg=values.get("fov_x_deg", 30.0))
    projections = tomo.make_phantom_projections(
        phantom, n_views, geometry, noise_sigma=values.get("noise", 0.0),
        seed=seed)
    timings.mark("projections")

    config = TrainConfig(iterations=values.get("iterations", 2000),
                         loss=values.get("loss", LossSpec("mixed", 0.2)),
                         seed=seed,
                         n_init=values.get("n_init", 64),
                         densify=values.get("densify", False))
    _apply_lr(config, values)
    bbox = (-np.ones(3), np.ones(3))
    reference = tomo.grid_from_phantom(phantom, resolution, bbox)
    scene, grid, rep = tomo.reconstruct(projections, config, bbox=bbox,
                                        resolution=resolution,
                                        reference=reference,
                                        threads=args.threads)
    timings.mark("reconstruct")

    for k, proj in enumerate(projections):
        sceneio.write_pfm(os.path.join(out_dir, f"proj_{k:03d}.pfm"),
                          proj.image)
    tomo.save_density_grid(os.path.join(out_dir, "recon"), grid)
    tomo.save_density_grid(os.path.join(out_dir, "reference"), reference)
    sceneio.save_scene(os.path.join(out_dir, "scene.txt"), scene)
    sceneio.write_csv(os.path.join(out_dir, "tomo.csv"),
                      ["iteration", "loss", "primitives"],
                      [(i, _fmt_float(l), c) for i, (l, c) in
                       enumerate(zip(rep["losses"], rep["primitive_counts"]))])
    lines = [("phantom", kind), ("n_views", n_views), ("seed", seed),
             ("iterations", config.iterations),
             ("final_primitives", rep["final_count"]),
             ("psnr_3d", _fmt_float(rep["psnr_3d"])),
             ("ssim_3d", _fmt_float(rep["ssim_3d"])),
             ("diverged", int(rep["diverged"]))]
    _write_report(out_dir, "report.txt", lines)
    report.slice_panel(os.path.join(out_dir, "tomo_slices.png"), grid.values,
                       reference.values)
    report.loss_curves(os.path.join(out_dir, "tomo_loss.png"),
                       {"tomo": rep["losses"]})
    timings.mark("write")
    timings.write(out_dir)
    return 2 if rep["diverged"] else 0


def cmd_gradcheck(args):
    values = _parse_config(args.config, _GRADCHECK_SCHEMA)
    n_scenes = values.get("scenes", 3)
    n_prims = values.get("primitives", 8)
    size = values.get("size", 32)
    loss = values.get("loss", LossSpec("mixed", 0.2))
    tol = values.get("tolerance", 1e-3)
    min_frac = values.get("min_fraction", 0.99)
    mode_sel = values.get("mode", "both")
    modes = ["analytic", "splat"] if mode_sel == "both" else [mode_sel]
    seed = args.seed if args.seed is not None else values.get("seed", 0)

    camera = scenes.front_camera(width=size, height=size)
    rows = []
    all_pass = True
    for s in range(n_scenes):
        rng = scenes.make_rng(seed, stream=s)
        scene = scenes.random_scene(rng, n_prims)
        target = rng.uniform(0.0, 1.0, (size, size, 3))
        for mode in modes:
            rep = fd_check(scene, camera, target, loss, mode=mode)
            frac = rep.fraction_within(tol)
            worst = rep.worst()
            ok = frac >= min_frac
            all_pass = all_pass and ok
            rows.append((s, mode, _fmt_float(frac),
                         _fmt_float(worst.rel_err if worst else 0.0),
                         "pass" if ok else "fail"))
            print(f"scene {s} mode {mode}: fraction {frac:.4f} "
                  f"(tol {tol:g}) -> {'pass' if ok else 'fail'}")

    if args.out:
        out_dir = _out_dir(args)
        sceneio.write_csv(os.path.join(out_dir, "gradcheck.csv"),
                          ["scene", "mode", "fraction", "worst_rel_err",
                           "status"], rows)
        _write_report(out_dir, "report.txt",
                      [("scenes", n_scenes), ("primitives", n_prims),
                       ("tolerance", _fmt_float(tol)),
                       ("min_fraction", _fmt_float(min_frac)),
                       ("seed", seed),
                       ("status", "pass" if all_pass else "fail")])
    if not all_pass:
        raise NumericalError("gradient check below the pass fraction")
    return 0


def cmd_metrics(args):
    for path in (args.image, args.ref):
        if not os.path.exists(path):
            raise CliError(f"image not found: {path}")
    img = sceneio.read_image(args.image)
    ref = sceneio.read_image(args.ref)
    if img.shape != ref.shape:
        raise CliError(f"shape mismatch: {img.shape} vs {ref.shape}")
    values = [("mse", metrics.mse(img, ref)),
              ("psnr", metrics.psnr(img, ref)),
              ("ssim", metrics.ssim(img, ref))]
    for key, v in values:
        print(f"{key} {_fmt_float(v)}")
    if args.out:
        out_dir = _out_dir(args)
        sceneio.write_csv(os.path.join(out_dir, "metrics.csv"),
                          ["metric", "value"],
                          [(k, _fmt_float(v)) for k, v in values])
        diff = np.abs(np.asarray(img, dtype=float) - ref)
        report.image_grid(os.path.join(out_dir, "metrics.png"),
                          [img, ref, diff.max(axis=-1) if diff.ndim == 3
                           else diff],
                          [os.path.basename(args.image),
                           os.path.basename(args.ref), "abs diff"])
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser():
    parser = _Parser(prog="volgauss",
                     description="Analytic-transmittance Gaussian mixture "
                     "renderer, fitter, and tomography toolkit")
    sub = parser.add_subparsers(dest="command")

    def common(p, config=False, scene=False):
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: VOLGAUSS_THREADS or 1)")
        p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", default=None,
                           help="volgauss config v1 file")
        if scene:
            p.add_argument("--scene", required=True)
            p.add_argument("--camera", default=None)

    p = sub.add_parser("render", help="render a scene to PFM + PNG")
    common(p, scene=True)
    p.add_argument("--mode", choices=["analytic", "splat"], default="analytic")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compare",
                       help="render analytic/splat/raymarch/exact and "
                            "tabulate pairwise errors")
    common(p, scene=True)
    p.add_argument("--steps", type=int, default=5000,
                   help="ray marching steps")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fit", help="fit a scene to a target image")
    common(p, config=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tomo", help="phantom projections + reconstruction")
    common(p, config=True)
    p.set_defaults(func=cmd_tomo)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the backward pass")
    common(p, config=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("metrics", help="PSNR/SSIM/MSE between two images")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        if args.threads is not None and args.threads < 1:
            raise CliError("--threads must be >= 1")
        return args.func(args)
    except (CliError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericalError, DivergenceError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
