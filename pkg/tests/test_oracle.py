"""Reference renderers: quadrature ray marcher and the per-ray
gamma-sorted compositor."""

import numpy as np
import pytest

from volgauss import core, oracle, raster, scenes
from volgauss.raster import Scene

from conftest import rotmat_scipy


def lone_gaussian(theta=0.6, scale=0.2, color=(0.8, 0.1, 0.2)):
    return Scene(means=[[0.0, 0.0, 2.0]], scales=[[scale] * 3],
                 rotations=[[1.0, 0.0, 0.0, 0.0]], thetas=[theta],
                 colors=[color])


def ray_masses(scene, camera):
    """Integrated line density kappa sqrt(2 pi) beta peak of each primitive
    along every pixel ray, shape (N, H, W)."""
    dirs = camera.pixel_directions().reshape(-1, 3)
    minv = core.precision_matrices(scene.scales, scene.rotations)
    delta = scene.means - camera.center
    md = np.einsum("nij,nj->ni", minv, delta)
    a = np.einsum("nij,pj,pi->np", minv, dirs, dirs)
    b = md @ dirs.T
    cq = np.einsum("ni,ni->n", delta, md)
    peak = np.exp(-0.5 * np.maximum(cq[:, None] - b * b / a, 0.0))
    mass = scene.kappas()[:, None] * core.SQRT_2PI * peak / np.sqrt(a)
    return mass.reshape(len(scene), camera.height, camera.width)


class TestMixtureField:
    def test_single_gaussian_peak(self):
        scale = np.array([0.3, 0.3, 0.3])
        theta = core.theta_for_kappa(2.0, scale)
        scene = Scene(means=[[0.1, -0.2, 1.5]], scales=[scale],
                      rotations=[[1, 0, 0, 0]], thetas=[theta],
                      colors=[[0.9, 0.5, 0.1]])
        sigma, color = oracle.mixture_field(scene, [0.1, -0.2, 1.5])
        assert sigma == pytest.approx(2.0, rel=1e-12)
        assert np.allclose(color, [0.9, 0.5, 0.1], atol=1e-12)

    def test_colocated_pair_averages_colors(self):
        scene = Scene(means=[[0, 0, 1], [0, 0, 1]], scales=[[0.2] * 3] * 2,
                      rotations=[[1, 0, 0, 0]] * 2, thetas=[0.5, 0.5],
                      colors=[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        _, color = oracle.mixture_field(scene, [0.0, 0.0, 1.0])
        assert np.allclose(color, [0.5, 0.0, 0.5], atol=1e-12)

    def test_matches_independent_sum(self, rng):
        scene = scenes.random_scene(rng, 12)
        pts = rng.uniform(-1, 1, (40, 3))
        sigma, _ = oracle.mixture_field(scene, pts)
        ref = np.zeros(len(pts))
        for i in range(len(scene)):
            R = rotmat_scipy(scene.rotations[i])
            M = R @ np.diag(1.0 / scene.scales[i] ** 2) @ R.T
            d = pts - scene.means[i]
            q = np.einsum("pi,ij,pj->p", d, M, d)
            ref += core.density_kappa(scene.thetas[i], scene.scales[i]) \
                * np.exp(-0.5 * q)
        assert np.allclose(sigma, ref, atol=1e-12, rtol=1e-12)

    def test_vanishing_density_gives_background(self):
        scene = Scene(means=[[0, 0, 1]], scales=[[0.01] * 3],
                      rotations=[[1, 0, 0, 0]], thetas=[0.5],
                      colors=[[1.0, 0.0, 0.0]], background=(0.2, 0.4, 0.6))
        sigma, color = oracle.mixture_field(scene, [100.0, 100.0, 100.0])
        assert sigma == 0.0
        assert np.allclose(color, [0.2, 0.4, 0.6])

    def test_nonnegative(self, rng):
        scene = scenes.random_scene(rng, 8)
        sigma, _ = oracle.mixture_field(scene, rng.uniform(-2, 2, (100, 3)))
        assert np.all(sigma >= 0.0)


class TestRaymarch:
    def axis_ray(self):
        return core.Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))

    def test_empty_scene(self):
        color, t = oracle.raymarch(Scene.empty(background=(0.3, 0.2, 0.1)),
                                   self.axis_ray(), oracle.MarchConfig(n_steps=64))
        assert np.allclose(color, [0.3, 0.2, 0.1])
        assert t == 1.0

    def test_single_gaussian_matches_closed_form(self):
        scene = lone_gaussian()
        _, t = oracle.raymarch(scene, self.axis_ray(),
                               oracle.MarchConfig(n_steps=100_000))
        g1d = core.project_to_ray(scene.gaussian(0), self.axis_ray())
        expect = core.transmittance(g1d, scene.kappas()[0])
        assert t == pytest.approx(expect, abs=1e-5)

    def test_richardson_refinement_monotone(self):
        scene = lone_gaussian(theta=0.7)
        ray = self.axis_ray()

        def t_at(n):
            return oracle.raymarch(scene, ray, oracle.MarchConfig(n_steps=n))[1]

        # coarse grids, where the quadrature error is far above rounding
        diffs = [abs(t_at(2 * n) - t_at(n)) for n in (4, 8, 16, 32)]
        assert all(a > b for a, b in zip(diffs, diffs[1:]))
        # and the fine-grid value is the closed form
        g1d = core.project_to_ray(scene.gaussian(0), ray)
        assert t_at(100_000) == pytest.approx(
            core.transmittance(g1d, scene.kappas()[0]), abs=1e-5)

    def test_transmittance_range_and_kappa_monotone(self, rng):
        cam = scenes.front_camera(width=8, height=8)
        scene = scenes.random_scene(rng, 6)
        _, t = oracle.raymarch_image(scene, cam, oracle.MarchConfig(n_steps=500))
        assert np.all(t > 0.0) and np.all(t <= 1.0)
        denser = scene.copy()
        denser.thetas = np.minimum(denser.thetas + 0.15, 1.0)
        _, t2 = oracle.raymarch_image(denser, cam, oracle.MarchConfig(n_steps=500))
        assert np.all(t2 <= t + 1e-12)

    def test_overlap_error_localized(self):
        # heavily overlapping pair: the analytic factorization is wrong only
        # where the two footprints overlap
        scene = scenes.overlap_pair_scene()
        cam = scenes.overlap_camera()
        out = raster.render(scene, cam, early_stop=None, alpha_cut=0.0)
        ref, _ = oracle.raymarch_image(scene, cam, oracle.MarchConfig(n_steps=4000))
        err = np.abs(out.color - ref).max(axis=2)
        assert err.max() > 1e-2
        # overlap footprint: pixels whose ray crosses substantial line mass
        # of BOTH primitives; outside it the factorization is near exact
        masses = ray_masses(scene, cam)
        both = np.min(masses, axis=0) > 0.01
        assert both.any() and (~both).any()
        assert err[both].max() == err.max()
        assert err[~both].max() < max(err.max() / 10, 2e-3)


class TestExactSorted:
    def test_single_gaussian_matches_render(self):
        scene = lone_gaussian()
        cam = scenes.front_camera(width=16, height=16)
        out = raster.render(scene, cam)
        ref, t_ref = oracle.exact_sorted_image(scene, cam)
        assert np.allclose(out.color, ref, atol=1e-12)
        assert np.allclose(out.final_transmittance, t_ref, atol=1e-12)

    def test_separated_scene_matches_render(self, rng):
        cam = scenes.front_camera(width=32, height=32)
        scene = scenes.separated_scene(rng, cam, n=6)
        out = raster.render(scene, cam, early_stop=None, alpha_cut=0.0)
        ref, _ = oracle.exact_sorted_image(scene, cam, early_stop=None,
                                           alpha_cut=0.0)
        assert np.max(np.abs(out.color - ref)) < 1e-12

    def test_adversarial_order_differs(self):
        # a tilted elongated gaussian in front whose ridge crosses the axis
        # behind a small one: mean-depth order != gamma order
        half = np.deg2rad(22.5)
        tilt = [np.cos(half), 0.0, -np.sin(half), 0.0]
        scene = Scene(
            means=[[-0.35, 0.0, 2.0], [0.0, 0.0, 2.15]],
            scales=[[0.6, 0.05, 0.05], [0.08, 0.08, 0.08]],
            rotations=[tilt, [1, 0, 0, 0]],
            thetas=[0.8, 0.8],
            colors=[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        cam = scenes.zscale_camera()
        ray = cam.ray_through_pixel(cam.height // 2, cam.width // 2)
        g0 = core.project_to_ray(scene.gaussian(0), ray)
        g1 = core.project_to_ray(scene.gaussian(1), ray)
        depth = raster.prepare(scene, cam).depth
        assert depth[0] < depth[1] and g0.gamma > g1.gamma
        out = raster.render(scene, cam)
        ref, _ = oracle.exact_sorted_image(scene, cam)
        assert np.max(np.abs(out.color - ref)) > 1e-3

    def test_scalar_matches_image(self, rng):
        scene = scenes.random_scene(rng, 8)
        cam = scenes.front_camera(width=8, height=8)
        img, t_img = oracle.exact_sorted_image(scene, cam)
        for row, col in [(0, 0), (3, 5), (7, 7)]:
            c, t = oracle.exact_sorted_composite(
                scene, cam.ray_through_pixel(row, col))
            assert np.allclose(c, img[row, col], atol=1e-12)
            assert t == pytest.approx(t_img[row, col], abs=1e-12)
