"""Pinhole camera transforms and the look_at constructor."""

import numpy as np
import pytest

from volgauss import core
from volgauss.camera import Camera, look_at


def test_world_view_round_trip(rng):
    cam = look_at([1.0, -2.0, 0.5], [0.0, 0.0, 3.0], width=32, height=24)
    pts = rng.normal(size=(50, 3))
    v = cam.world_to_view(pts)
    back = (v - cam.translation) @ cam.rotation
    assert np.allclose(back, pts, atol=1e-12)


def test_rotation_orthonormal(rng):
    cam = look_at(rng.normal(size=3), rng.normal(size=3) + 10.0)
    assert np.allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(cam.rotation) == pytest.approx(1.0, abs=1e-12)


def test_look_at_center():
    cam = look_at([0.3, 1.0, -4.0], [0.1, -0.2, 2.0], width=64, height=48)
    assert np.allclose(cam.center, [0.3, 1.0, -4.0], atol=1e-12)
    # the target lands on the principal point
    pix = cam.view_to_pixel(cam.world_to_view([0.1, -0.2, 2.0]))
    assert np.allclose(pix, [cam.cx, cam.cy], atol=1e-9)


def test_look_at_fov():
    cam = look_at([0, 0, -1], [0, 0, 0], width=100, height=80, fov_x_deg=60.0)
    assert cam.tan_half_fov_x == pytest.approx(np.tan(np.deg2rad(30.0)), rel=1e-12)


def test_pixel_directions_match_rays():
    cam = look_at([0.5, 0.2, -3.0], [0.0, 0.0, 0.0], width=8, height=6)
    dirs = cam.pixel_directions()
    assert dirs.shape == (6, 8, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)
    for row in (0, 3, 5):
        for col in (0, 4, 7):
            ray = cam.ray_through_pixel(row, col)
            assert np.allclose(ray.origin, cam.center, atol=1e-12)
            assert np.allclose(ray.unit_direction, dirs[row, col], atol=1e-12)


def test_rays_reproject_to_pixel_centers():
    cam = look_at([1.0, -1.0, -2.5], [0.0, 0.0, 0.5], width=16, height=16)
    for row, col in [(0, 0), (7, 9), (15, 15)]:
        ray = cam.ray_through_pixel(row, col)
        p = ray.origin + 2.3 * ray.unit_direction
        pix = cam.view_to_pixel(cam.world_to_view(p))
        assert np.allclose(pix, [col + 0.5, row + 0.5], atol=1e-9)


def test_screen_up_is_world_up():
    # y grows downward in the image: a point above the target must land
    # at a smaller row coordinate than the principal point
    cam = look_at([0, 0, -3], [0, 0, 0], width=32, height=32)
    pix = cam.view_to_pixel(cam.world_to_view([0.0, 0.5, 0.0]))
    assert pix[1] < cam.cy


def test_principal_point_validation():
    with pytest.raises(ValueError):
        Camera(width=8, height=8, fx=10, fy=10, cx=20.0, cy=4.0)


def test_degenerate_up_rejected():
    with pytest.raises(ValueError):
        look_at([0, 1, 0], [0, 0, 0], up=(0.0, 1.0, 0.0))
