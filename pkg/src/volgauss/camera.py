"""Pinhole camera with a world-to-view rigid transform.

View space follows the usual computer-vision convention: x right, y down,
z forward; pixel (row i, col j) has center (j + 0.5, i + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z_near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def tan_half_fov_x(self):
        return 0.5 * self.width / self.fx

    @property
    def tan_half_fov_y(self):
        return 0.5 * self.height / self.fy

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_view(self, points):
        """Apply x_view = R x_world + t. Accepts (3,) or (N, 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def view_to_pixel(self, v):
        """Perspective-project view-space points (..., 3) to pixel coords (..., 2)."""
        v = np.asarray(v, dtype=float)
        z = v[..., 2]
        return np.stack([self.fx * v[..., 0] / z + self.cx,
                         self.fy * v[..., 1] / z + self.cy], axis=-1)

    def pixel_directions(self):
        """Unit world-space directions through all pixel centers, shape (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        d = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation  # rows of R are view axes, so d_world = R^T d_view

    def ray_through_pixel(self, row, col):
        """World-space ray through the center of pixel (row, col)."""
        from .core import Ray

        d_view = np.array([(col + 0.5 - self.cx) / self.fx,
                           (row + 0.5 - self.cy) / self.fy, 1.0])
        d_world = self.rotation.T @ d_view
        return Ray(origin=self.center, direction=d_world / np.linalg.norm(d_world))


def look_at(position, target, up=(0.0, 1.0, 0.0), width=64, height=64,
            fov_x_deg=50.0, z_near=0.01):
    """Build a camera at `position` looking toward `target`.

    `up` picks the image vertical; y points down in view space, so the
    screen-up direction is -up. fov_x_deg is the full horizontal field of view.
    """
    position = np.asarray(position, dtype=float)
    target = np.asarray(target, dtype=float)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=float)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:
        raise ValueError("up direction parallel to view direction")
    right /= nrm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])  # rows: view axes in world coords
    t = -R @ position
    fx = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_x_deg))
    return Camera(width=width, height=height, fx=fx, fy=fx,
                  cx=width / 2.0, cy=height / 2.0, rotation=R, translation=t,
                  z_near=z_near)
