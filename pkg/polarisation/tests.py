import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ArgError
from geometry.cameras import Intrinsics
from imaging.containers import POLARISER_ANGLES, DepthField
from normals.services import camera_rays, normal_weighted, view_geometry

from .services import (
    DIFFUSE,
    SPECULAR,
    decompose_polarisation,
    degree_of_polarisation,
    diffuse_dop,
    double_azimuth,
    polarisation_intensity,
    polarisation_phase,
    recovered_polarisation,
    render_polarisation,
    shade,
    shading_forward,
    shading_vjp,
    specular_dop,
)


def sphere_depth(size=16, centre=(0.0, 0.0, 3.0), radius=1.5):
    f = float(size)
    intr = Intrinsics(f, f, (size - 1) / 2, (size - 1) / 2)
    rays = camera_rays(intr, size, size)
    c = np.asarray(centre)
    b = np.einsum('khw,k->hw', rays, c)
    aa = np.sum(rays * rays, axis=0)
    disc = b * b - aa * (c @ c - radius ** 2)
    with np.errstate(invalid='ignore'):
        t = (b - np.sqrt(disc)) / aa
    return DepthField(np.where(disc > 0, t, np.nan)), intr


class DegreeOfPolarisationTests(SimpleTestCase):
    def test_zero_at_normal_incidence(self):
        self.assertEqual(degree_of_polarisation(0.0, 1.5, DIFFUSE), 0.0)
        self.assertEqual(degree_of_polarisation(0.0, 1.5, SPECULAR), 0.0)

    def test_brewster_angle(self):
        for eta in (1.3, 1.5, 2.0):
            self.assertAlmostEqual(float(degree_of_polarisation(np.arctan(eta), eta, SPECULAR)), 1.0, delta=1e-6)

    def test_brewster_is_the_only_maximum(self):
        theta = np.linspace(0.0, np.pi / 2, 20001)
        rho = degree_of_polarisation(theta, 1.5, SPECULAR)
        peak = int(np.argmax(rho))
        self.assertAlmostEqual(theta[peak], np.arctan(1.5), delta=1e-3)
        self.assertTrue(np.all(np.diff(rho[:peak + 1]) > 0))
        self.assertTrue(np.all(np.diff(rho[peak:]) < 0))

    def test_diffuse_golden_value(self):
        self.assertAlmostEqual(float(degree_of_polarisation(np.pi / 4, 1.5, DIFFUSE)), 0.04398, places=5)

    def test_diffuse_envelope(self):
        theta = np.linspace(0.0, np.deg2rad(80.0), 500)
        self.assertTrue(np.all(degree_of_polarisation(theta, 1.5, DIFFUSE) < 0.5))

    def test_unit_interval(self):
        theta = np.linspace(0.0, np.pi / 2 - 1e-6, 400)
        for eta in (1.01, 1.5, 2.2, 3.0):
            for reflection in (DIFFUSE, SPECULAR):
                rho = degree_of_polarisation(theta, eta, reflection)
                self.assertTrue(np.all((rho >= 0) & (rho <= 1 + 1e-12)), (eta, reflection))

    def test_specular_grazing_is_finite(self):
        self.assertTrue(np.isfinite(degree_of_polarisation(np.pi / 2, 1.5, SPECULAR)))

    def test_derivatives(self):
        c = np.linspace(0.05, 0.98, 30)
        eps = 1e-7
        for fn in (diffuse_dop, specular_dop):
            _, d = fn(c, 1.5)
            fd = (fn(c + eps, 1.5)[0] - fn(c - eps, 1.5)[0]) / (2 * eps)
            np.testing.assert_allclose(d, fd, rtol=1e-5, atol=1e-7)

    def test_invalid_arguments(self):
        with self.assertRaises(ArgError):
            degree_of_polarisation(0.2, 1.0, DIFFUSE)
        with self.assertRaises(ArgError):
            degree_of_polarisation(0.2, 1.5, 'matte')


class PhaseAndIntensityTests(SimpleTestCase):
    def test_phase(self):
        self.assertEqual(float(polarisation_phase(0.0, DIFFUSE)), 0.0)
        self.assertAlmostEqual(float(polarisation_phase(0.0, SPECULAR)), np.pi / 2)
        self.assertAlmostEqual(float(polarisation_phase(3 * np.pi / 2, DIFFUSE)), np.pi / 2)

    def test_intensity(self):
        for phi_pol in POLARISER_ANGLES:
            self.assertEqual(polarisation_intensity(2.0, 0.0, 0.7, phi_pol), 2.0)
        self.assertAlmostEqual(polarisation_intensity(2.0, 0.3, 0.7, 0.7), 2.6)
        for phi_pol in POLARISER_ANGLES:
            self.assertAlmostEqual(
                polarisation_intensity(1.5, 0.4, 0.3, phi_pol),
                polarisation_intensity(1.5, 0.4, 0.3 + np.pi, phi_pol),
            )

    def test_azimuth_half_turn_invariance(self):
        rng = np.random.default_rng(0)
        nx, ny = rng.normal(size=(2, 5, 5))
        rho = rng.uniform(0, 1, size=(5, 5))
        a = shade(np.ones((5, 5)), rho, *double_azimuth(nx, ny)[:2], DIFFUSE)
        b = shade(np.ones((5, 5)), rho, *double_azimuth(-nx, -ny)[:2], DIFFUSE)
        np.testing.assert_allclose(a, b, atol=1e-14)


class RenderPolarisationTests(SimpleTestCase):
    def test_fronto_parallel_plane(self):
        intr = Intrinsics(10.0, 10.0, 3.5, 3.5)
        i_un = np.random.default_rng(1).uniform(0.2, 1.0, size=(8, 8))
        pol = render_polarisation(DepthField(np.full((8, 8), 2.0)), i_un, intr, 1.5, DIFFUSE)
        # pixels off the optical axis still see a small viewing angle
        centre = pol.data[:, 3:5, 3:5]
        np.testing.assert_allclose(centre, np.broadcast_to(i_un[3:5, 3:5], centre.shape), rtol=1e-2)

    def test_channel_mean_and_stokes(self):
        depth, intr = sphere_depth()
        i_un = np.random.default_rng(2).uniform(0.2, 1.0, size=depth.shape)
        for reflection in (DIFFUSE, SPECULAR):
            pol = render_polarisation(depth, i_un, intr, 1.5, reflection)
            valid = depth.mask
            np.testing.assert_allclose(pol.data.mean(axis=0)[valid], i_un[valid], atol=1e-9)
            i0, i45, i90, i135 = pol.data
            np.testing.assert_allclose((i0 + i90)[valid], (i45 + i135)[valid], atol=1e-9)
            self.assertTrue(np.all(pol.data >= 0))

    def test_off_axis_spread_is_larger(self):
        depth, intr = sphere_depth(size=32)
        pol = render_polarisation(depth, np.ones(depth.shape), intr, 1.5, DIFFUSE)
        spread = pol.data.max(axis=0) - pol.data.min(axis=0)
        self.assertGreater(spread[16, 22], spread[16, 16])

    def test_matches_scalar_pipeline(self):
        depth, intr = sphere_depth(size=12)
        i_un = np.random.default_rng(3).uniform(0.2, 1.0, size=depth.shape)
        for reflection in (DIFFUSE, SPECULAR):
            pol = render_polarisation(depth, i_un, intr, 1.5, reflection)
            view = view_geometry(depth, normal_weighted(depth, i_un, intr), intr)
            rho = degree_of_polarisation(view.theta, 1.5, reflection)
            phi = polarisation_phase(view.alpha, reflection)
            for j, phi_pol in enumerate(POLARISER_ANGLES):
                expected = polarisation_intensity(i_un, rho, phi, phi_pol)
                np.testing.assert_allclose(pol.data[j][view.mask], expected[view.mask], atol=1e-12)

    def test_colour_planes_share_geometry(self):
        depth, intr = sphere_depth()
        i_un = np.random.default_rng(4).uniform(0.2, 1.0, size=(3,) + depth.shape)
        pol = render_polarisation(depth, i_un, intr, 1.5, DIFFUSE)
        self.assertEqual(pol.channels, 12)
        _, rho, phi = decompose_polarisation(pol)
        valid = depth.mask
        np.testing.assert_allclose(rho[0][valid], rho[2][valid], atol=1e-12)
        strong = valid & (rho[0] > 1e-6)
        np.testing.assert_allclose(np.cos(2 * phi[0][strong]), np.cos(2 * phi[1][strong]), atol=1e-6)

    def test_decomposition_recovers_parameters(self):
        depth, intr = sphere_depth()
        i_un = np.full(depth.shape, 0.8)
        pol = render_polarisation(depth, i_un, intr, 1.5, DIFFUSE)
        view = view_geometry(depth, normal_weighted(depth, i_un, intr), intr)
        rec_i, rec_rho, rec_phi = decompose_polarisation(pol)
        valid = view.mask
        np.testing.assert_allclose(rec_i[0][valid], 0.8, atol=1e-12)
        np.testing.assert_allclose(rec_rho[0][valid], degree_of_polarisation(view.theta, 1.5)[valid], atol=1e-12)
        strong = valid & (rec_rho[0] > 1e-6)
        expected = polarisation_phase(view.alpha, DIFFUSE)
        np.testing.assert_allclose(np.cos(2 * rec_phi[0][strong]), np.cos(2 * expected[strong]), atol=1e-6)

    def test_shading_adjoint(self):
        depth, intr = sphere_depth(size=7, centre=(0.3, 0.2, 3.0), radius=2.5)
        d = depth.depth
        guide = np.random.default_rng(5).uniform(0, 1, size=d.shape)
        rays = camera_rays(intr, 7, 7)
        probes = np.random.default_rng(6).normal(size=(4, 7, 7))

        def objective(values):
            state = shading_forward(values, guide, rays, 1.5)
            return float(np.sum(probes[0] * state.rho_diffuse + probes[1] * state.rho_specular
                                + probes[2] * state.cos2 + probes[3] * state.sin2))

        grad = shading_vjp(shading_forward(d, guide, rays, 1.5), *probes)
        eps = 1e-6
        for r in range(7):
            for c in range(7):
                step = np.zeros_like(d)
                step[r, c] = eps
                fd = (objective(d + step) - objective(d - step)) / (2 * eps)
                self.assertAlmostEqual(grad[r, c], fd, delta=1e-5 * max(1.0, abs(fd)))


class RecoveredPolarisationTests(SimpleTestCase):
    def setUp(self):
        self.depth, self.intr = sphere_depth(size=16, radius=1.0)
        self.i_un = np.random.default_rng(7).uniform(0.3, 1.0, size=self.depth.shape)
        rows, cols = np.indices(self.depth.shape)
        self.truth = (rows + cols) % 2 == 1

    def test_picks_the_rendered_reflection(self):
        observed = render_polarisation(self.depth, self.i_un, self.intr, 1.5, self.truth)
        diffuse, specular, combined, mask = recovered_polarisation(self.depth, observed, self.intr, 1.5)
        distinct = np.abs(diffuse.data - specular.data).sum(axis=0) > 1e-6
        self.assertGreater(np.count_nonzero(distinct), 50)
        np.testing.assert_array_equal(mask[distinct], self.truth[distinct])
        np.testing.assert_allclose(combined.data[:, distinct], observed.data[:, distinct], atol=1e-9)

    def test_ties_go_to_diffuse(self):
        observed = render_polarisation(self.depth, self.i_un, self.intr, 1.5, self.truth)
        _, _, combined, mask = recovered_polarisation(self.depth, observed, self.intr, 1.5)
        # off the sphere both variants render 0
        outside = ~self.depth.mask
        self.assertTrue(outside.any())
        self.assertTrue(self.truth[outside].any())
        self.assertFalse(mask[outside].any())
        np.testing.assert_array_equal(combined.data[:, outside], 0.0)

    def test_explicit_reflection_map(self):
        observed = render_polarisation(self.depth, self.i_un, self.intr, 1.5, DIFFUSE)
        _, specular, combined, mask = recovered_polarisation(self.depth, observed, self.intr, 1.5, self.truth)
        np.testing.assert_array_equal(mask, self.truth)
        np.testing.assert_array_equal(combined.data[:, self.truth], specular.data[:, self.truth])
