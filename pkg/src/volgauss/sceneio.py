"""File formats: versioned key-value text for scenes, cameras, and configs
(diff-able, exact round trip via repr floats), PFM float images for bit-exact
goldens, PNG for viewing, and CSV helpers.
"""

from __future__ import annotations

import csv

import numpy as np
from PIL import Image

from .camera import Camera
from .raster import Scene

SCENE_MAGIC = "volgauss scene v1"
CAMERA_MAGIC = "volgauss camera v1"
CONFIG_MAGIC = "volgauss config v1"


class FormatError(ValueError):
    """Malformed scene/camera/config text; message names the line and field."""


def _fmt(values):
    return " ".join(repr(float(v)) for v in np.atleast_1d(np.asarray(values, dtype=float)))


def _floats(line_no, key, rest, n):
    parts = rest.split()
    if len(parts) != n:
        raise FormatError(f"line {line_no}: field '{key}' needs {n} values, "
                          f"got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise FormatError(f"line {line_no}: field '{key}' has a non-numeric value")


def _ints(line_no, key, rest, n):
    vals = _floats(line_no, key, rest, n)
    out = [int(v) for v in vals]
    if any(o != v for o, v in zip(out, vals)):
        raise FormatError(f"line {line_no}: field '{key}' must be integer")
    return out


# ---------------------------------------------------------------------------
# scenes and cameras

_PRIM_FIELDS = {"mean": 3, "scale": 3, "rotation": 4, "theta": 1,
                "color": 3, "splat_opacity": 1}


def _camera_lines(name, cam: Camera):
    return [f"camera {name}",
            f"width {cam.width}",
            f"height {cam.height}",
            "intrinsics " + _fmt([cam.fx, cam.fy, cam.cx, cam.cy]),
            "z_near " + _fmt([cam.z_near]),
            "rotation " + _fmt(cam.rotation.reshape(-1)),
            "translation " + _fmt(cam.translation),
            "end"]


def save_scene(path, scene: Scene, cameras: dict = None):
    lines = [SCENE_MAGIC,
             "background " + _fmt(scene.background)]
    for i in range(len(scene)):
        lines.append("primitive")
        lines.append("mean " + _fmt(scene.means[i]))
        lines.append("scale " + _fmt(scene.scales[i]))
        lines.append("rotation " + _fmt(scene.rotations[i]))
        lines.append("theta " + _fmt([scene.thetas[i]]))
        lines.append("color " + _fmt(scene.colors[i]))
        lines.append("splat_opacity " + _fmt([scene.splat_opacities[i]]))
    for name, cam in (cameras or {}).items():
        lines.extend(_camera_lines(name, cam))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_camera_block(lines, start):
    """Parse camera fields until 'end'; returns (Camera, next line index)."""
    fields = {}
    i = start
    while i < len(lines):
        line_no, line = i + 1, lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "end":
            missing = {"width", "height", "intrinsics", "rotation",
                       "translation"} - set(fields)
            if missing:
                raise FormatError(f"line {line_no}: camera block missing "
                                  f"{sorted(missing)}")
            fx, fy, cx, cy = fields["intrinsics"]
            cam = Camera(width=fields["width"][0], height=fields["height"][0],
                         fx=fx, fy=fy, cx=cx, cy=cy,
                         rotation=np.array(fields["rotation"]).reshape(3, 3),
                         translation=np.array(fields["translation"]),
                         z_near=fields.get("z_near", [0.01])[0])
            return cam, i
        if key == "width" or key == "height":
            fields[key] = _ints(line_no, key, rest, 1)
        elif key == "intrinsics":
            fields[key] = _floats(line_no, key, rest, 4)
        elif key == "z_near":
            fields[key] = _floats(line_no, key, rest, 1)
        elif key == "rotation":
            fields[key] = _floats(line_no, key, rest, 9)
        elif key == "translation":
            fields[key] = _floats(line_no, key, rest, 3)
        else:
            raise FormatError(f"line {line_no}: unknown field '{key}' in "
                              f"camera block ({CAMERA_MAGIC})")
    raise FormatError("unterminated camera block (missing 'end')")


def load_scene(path):
    """Returns (Scene, {name: Camera})."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != SCENE_MAGIC:
        got = lines[0].strip() if lines else "<empty>"
        raise FormatError(f"line 1: expected '{SCENE_MAGIC}', got '{got}'")

    background = np.zeros(3)
    prims = []
    cameras = {}
    i = 1
    while i < len(lines):
        line_no, line = i + 1, lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "background":
            background = np.array(_floats(line_no, key, rest, 3))
        elif key == "primitive":
            prims.append({})
        elif key in _PRIM_FIELDS:
            if not prims:
                raise FormatError(f"line {line_no}: field '{key}' before any "
                                  "'primitive' line")
            if key in prims[-1]:
                raise FormatError(f"line {line_no}: duplicate field '{key}'")
            prims[-1][key] = _floats(line_no, key, rest, _PRIM_FIELDS[key])
        elif key == "camera":
            name = rest.strip() or "default"
            cameras[name], i = _parse_camera_block(lines, i)
        else:
            raise FormatError(f"line {line_no}: unknown field '{key}' in "
                              f"{SCENE_MAGIC}")

    n = len(prims)
    scene = Scene(
        means=np.array([p.get("mean", [0, 0, 0]) for p in prims]).reshape(n, 3),
        scales=np.array([p.get("scale", [0.1] * 3) for p in prims]).reshape(n, 3),
        rotations=np.array([p.get("rotation", [1, 0, 0, 0])
                            for p in prims]).reshape(n, 4),
        thetas=np.array([p.get("theta", [0.1])[0] for p in prims]),
        colors=np.array([p.get("color", [0.5] * 3) for p in prims]).reshape(n, 3),
        splat_opacities=np.array([p.get("splat_opacity", [0.5])[0]
                                  for p in prims]),
        background=background)
    return scene, cameras


def save_camera(path, cam: Camera):
    lines = [CAMERA_MAGIC] + _camera_lines("default", cam)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_camera(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != CAMERA_MAGIC:
        got = lines[0].strip() if lines else "<empty>"
        raise FormatError(f"line 1: expected '{CAMERA_MAGIC}', got '{got}'")
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        if not line or line.startswith("#"):
            i += 1
            continue
        key, _, rest = line.partition(" ")
        if key != "camera":
            raise FormatError(f"line {i + 1}: expected a 'camera' block, "
                              f"got '{key}'")
        cam, _ = _parse_camera_block(lines, i + 1)
        return cam
    raise FormatError("no camera block found")


# ---------------------------------------------------------------------------
# configs: flat key-value text, schema checked by the consumer

def load_config(path):
    """Returns a list of (line_no, key, value-string); keys may repeat."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != CONFIG_MAGIC:
        got = lines[0].strip() if lines else "<empty>"
        raise FormatError(f"line 1: expected '{CONFIG_MAGIC}', got '{got}'")
    entries = []
    for i, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        entries.append((i, key, rest.strip()))
    return entries


def save_config(path, entries):
    """entries: iterable of (key, value) pairs, written in order."""
    with open(path, "w") as f:
        f.write(CONFIG_MAGIC + "\n")
        for key, value in entries:
            f.write(f"{key} {value}\n")


# ---------------------------------------------------------------------------
# images

def write_pfm(path, image):
    """PFM float image: 'PF' (color) or 'Pf' (grayscale), little-endian,
    rows bottom to top."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
    elif image.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {image.shape}")
    data = image[::-1].astype("<f4")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{image.shape[1]} {image.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(data.tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        endian = "<" if scale < 0 else ">"
        channels = 3 if header == b"PF" else 1
        data = np.frombuffer(f.read(w * h * channels * 4),
                             dtype=endian + "f4")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(float)


def write_png(path, image):
    """8-bit PNG; input clipped to [0, 1]."""
    image = np.asarray(image, dtype=float)
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path)


def read_png(path):
    arr = np.asarray(Image.open(path), dtype=float) / 255.0
    return arr


def read_image(path):
    """PFM or PNG by extension."""
    p = str(path)
    if p.endswith(".pfm"):
        return read_pfm(p)
    return read_png(p)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
