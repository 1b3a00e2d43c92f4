import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ArgError
from geometry.cameras import Intrinsics
from imaging.containers import DepthField

from .services import (
    NormalField,
    camera_rays,
    normal_simple,
    normal_weighted,
    view_geometry,
    weighted_normal_forward,
    weighted_normal_vjp,
)


def smooth_depth(height, width, seed=0):
    rng = np.random.default_rng(seed)
    v, u = np.mgrid[0:height, 0:width] / max(height, width)
    coeffs = rng.uniform(-0.3, 0.3, size=4)
    return 2.0 + coeffs[0] * u + coeffs[1] * v + coeffs[2] * np.sin(3 * u) + coeffs[3] * u * v


def brute_force_weighted(depth, guide, intr):
    """Per-pixel loop over the four direction pairs with clamped stencils."""
    height, width = depth.shape

    def point(r, c):
        d = depth[r, c]
        return np.array([(c - intr.cx) / intr.fx * d, (r - intr.cy) / intr.fy * d, d])

    def clamp_base(r, c, dx, dy):
        c = min(max(c, max(0, -dx)), width - 1 - max(0, dx))
        r = min(max(r, max(0, -dy)), height - 1 - max(0, dy))
        return r, c

    pairs = (((1, 0), (0, 1)), ((-1, 0), (0, -1)), ((1, 1), (-1, 1)), ((-1, -1), (1, -1)))
    out = np.zeros((3, height, width))
    for r in range(height):
        for c in range(width):
            total = np.zeros(3)
            for step_a, step_b in pairs:
                diffs, weight = [], 1.0
                for dx, dy in (step_a, step_b):
                    br, bc = clamp_base(r, c, dx, dy)
                    diffs.append(point(br + dy, bc + dx) - point(br, bc))
                    weight *= np.exp(-0.5 * abs(guide[br + dy, bc + dx] - guide[br, bc]))
                total += 0.25 * weight * np.cross(diffs[0], diffs[1])
            out[:, r, c] = total / np.linalg.norm(total)
    return out


class NormalSimpleTests(SimpleTestCase):
    def setUp(self):
        self.intr = Intrinsics(10.0, 10.0, 4.0, 4.0)

    def test_constant_depth_faces_camera(self):
        normals = normal_simple(DepthField(np.full((9, 9), 3.0)), self.intr)
        np.testing.assert_allclose(normals.vectors[0], 0.0, atol=1e-15)
        np.testing.assert_allclose(normals.vectors[1], 0.0, atol=1e-15)
        np.testing.assert_allclose(normals.vectors[2], 1.0)

    def test_slanted_plane_at_principal_point(self):
        v, u = np.mgrid[0:9, 0:9].astype(float)
        slope, d0 = 0.01, 2.0
        normals = normal_simple(DepthField(slope * (u - 4.0) + d0), self.intr)
        expected = np.array([-10.0 * slope, 0.0, d0])
        np.testing.assert_allclose(normals.vectors[:, 4, 4], expected / np.linalg.norm(expected), atol=1e-12)

    def test_depth_scale_leaves_flat_normal(self):
        a = normal_simple(DepthField(np.full((5, 6), 1.0)), self.intr)
        b = normal_simple(DepthField(np.full((5, 6), 7.5)), self.intr)
        np.testing.assert_allclose(a.vectors, b.vectors)

    def test_single_pixel_rejected(self):
        with self.assertRaises(ArgError):
            normal_simple(DepthField(np.ones((1, 1))), self.intr)
        with self.assertRaises(ArgError):
            normal_weighted(DepthField(np.ones((1, 5))), np.ones((1, 5)), self.intr)


class NormalWeightedTests(SimpleTestCase):
    def setUp(self):
        self.intr = Intrinsics(12.0, 11.0, 3.5, 2.5)

    def test_matches_brute_force(self):
        depth = smooth_depth(6, 8)
        guide = np.random.default_rng(1).uniform(0, 1, size=(6, 8))
        normals = normal_weighted(DepthField(depth), guide, self.intr)
        np.testing.assert_allclose(normals.vectors, brute_force_weighted(depth, guide, self.intr), atol=1e-12)

    def test_uniform_intensity_gives_unit_weights(self):
        depth = smooth_depth(6, 8, seed=2)
        normals = normal_weighted(DepthField(depth), np.full((6, 8), 0.4), self.intr)
        np.testing.assert_allclose(normals.vectors, brute_force_weighted(depth, np.zeros((6, 8)), self.intr), atol=1e-12)

    def test_constant_depth_any_intensity(self):
        guide = np.random.default_rng(3).uniform(0, 5, size=(6, 8))
        normals = normal_weighted(DepthField(np.full((6, 8), 2.0)), guide, self.intr)
        np.testing.assert_allclose(normals.vectors[2], 1.0)
        np.testing.assert_allclose(normals.vectors[:2], 0.0, atol=1e-12)

    def test_unit_length(self):
        normals = normal_weighted(DepthField(smooth_depth(7, 7, seed=4)), np.ones((7, 7)), self.intr)
        np.testing.assert_allclose(np.linalg.norm(normals.vectors, axis=0), 1.0, atol=1e-12)

    def test_adjoint_matches_finite_differences(self):
        depth = smooth_depth(5, 6, seed=5)
        guide = np.random.default_rng(6).uniform(0, 1, size=(5, 6))
        rays = camera_rays(self.intr, 6, 5)
        probe = np.random.default_rng(7).normal(size=(3, 5, 6))

        def objective(d):
            return float(np.sum(probe * weighted_normal_forward(d, guide, rays).unit))

        grad = weighted_normal_vjp(weighted_normal_forward(depth, guide, rays), probe)
        eps = 1e-6
        for r in range(5):
            for c in range(6):
                step = np.zeros_like(depth)
                step[r, c] = eps
                fd = (objective(depth + step) - objective(depth - step)) / (2 * eps)
                self.assertAlmostEqual(grad[r, c], fd, delta=1e-6 * max(1.0, abs(fd)))

    def test_sphere_normals_converge(self):
        errors = []
        for size in (16, 32, 64):
            f = size * 1.0
            intr = Intrinsics(f, f, (size - 1) / 2, (size - 1) / 2)
            rays = camera_rays(intr, size, size)
            centre, radius = np.array([0.0, 0.0, 5.0]), 3.5
            # nearest ray-sphere hit
            b = np.einsum('khw,k->hw', rays, centre)
            aa = np.sum(rays * rays, axis=0)
            t = (b - np.sqrt(b * b - aa * (centre @ centre - radius ** 2))) / aa
            points = rays * t
            analytic = -(points - centre[:, None, None]) / radius
            normals = normal_weighted(DepthField(t), np.ones((size, size)), intr)
            errors.append(np.mean(np.linalg.norm(normals.vectors - analytic, axis=0)))
        self.assertLess(errors[1], 0.75 * errors[0])
        self.assertLess(errors[2], 0.75 * errors[1])


class ViewGeometryTests(SimpleTestCase):
    def setUp(self):
        self.intr = Intrinsics(10.0, 10.0, 2.0, 2.0)
        self.depth = DepthField(np.full((5, 5), 2.0))

    def field(self, vector):
        vectors = np.broadcast_to(np.asarray(vector, float)[:, None, None], (3, 5, 5)).copy()
        return NormalField(vectors=vectors, mask=np.ones((5, 5), bool))

    def test_fronto_parallel_centre(self):
        view = view_geometry(self.depth, normal_simple(self.depth, self.intr), self.intr)
        self.assertAlmostEqual(view.theta[2, 2], 0.0, places=12)

    def test_azimuth_axes(self):
        self.assertAlmostEqual(view_geometry(self.depth, self.field([1, 0, 0]), self.intr).alpha[2, 2], 0.0)
        self.assertAlmostEqual(view_geometry(self.depth, self.field([0, 1, 0]), self.intr).alpha[2, 2], np.pi / 2)

    def test_cosine_matches_dot_product(self):
        n = np.array([0.3, -0.2, 0.9])
        n /= np.linalg.norm(n)
        view = view_geometry(self.depth, self.field(n), self.intr)
        ray = np.array([(4 - 2.0) / 10.0, (1 - 2.0) / 10.0, 1.0])
        self.assertAlmostEqual(np.cos(view.theta[1, 4]), n @ ray / np.linalg.norm(ray), places=12)

    def test_ranges(self):
        rng = np.random.default_rng(8)
        vectors = rng.normal(size=(3, 5, 5))
        vectors /= np.linalg.norm(vectors, axis=0)
        view = view_geometry(self.depth, NormalField(vectors=vectors, mask=np.ones((5, 5), bool)), self.intr)
        self.assertTrue(np.all((view.theta >= 0) & (view.theta <= np.pi / 2)))
        self.assertTrue(np.all((view.alpha >= 0) & (view.alpha < 2 * np.pi)))

    def test_antiparallel_clamps_to_grazing(self):
        view = view_geometry(self.depth, self.field([0, 0, -1]), self.intr)
        self.assertAlmostEqual(view.theta[2, 2], np.pi / 2)
