import numpy as np
from django.test import SimpleTestCase

from geometry.cameras import Intrinsics, RigidTransform
from geometry.services import make_camera, pixel_grid
from imaging.containers import DepthField, ImagePlane
from normals.services import camera_rays

from .services import (
    FlowField,
    align_depth,
    backward_warp,
    bilinear_forward,
    bilinear_vjp_coords,
    bilinear_vjp_source,
    infinity_coords,
    reproject_coords,
    reprojection_forward,
)


def grid_flow(height, width, du=0.0, dv=0.0):
    grid = np.moveaxis(pixel_grid(width, height), -1, 0).copy()
    grid[0] += du
    grid[1] += dv
    mask = (grid[0] >= 0) & (grid[0] <= width - 1) & (grid[1] >= 0) & (grid[1] <= height - 1)
    return FlowField(coords=grid, mask=mask)


class ReprojectionTests(SimpleTestCase):
    def setUp(self):
        self.intr = Intrinsics(100.0, 100.0, 15.5, 11.5)

    def test_identity_maps_pixels_to_themselves(self):
        flow = reproject_coords(DepthField(np.full((24, 32), 3.0)), self.intr, self.intr, RigidTransform.identity())
        np.testing.assert_allclose(flow.coords, np.moveaxis(pixel_grid(32, 24), -1, 0), atol=1e-12)
        self.assertTrue(flow.mask.all())

    def test_baseline_disparity(self):
        transform = RigidTransform(np.eye(3), [0.1, 0.0, 0.0])
        flow = reproject_coords(DepthField(np.full((24, 32), 2.0)), self.intr, self.intr, transform, (24, 48))
        grid = np.moveaxis(pixel_grid(32, 24), -1, 0)
        np.testing.assert_allclose(flow.coords[0] - grid[0], 5.0, atol=1e-12)
        np.testing.assert_allclose(flow.coords[1], grid[1], atol=1e-12)

    def test_far_depth_approaches_rotation_only_flow(self):
        transform = RigidTransform.from_rotvec([0.01, -0.02, 0.005], [0.3, -0.1, 0.2])
        far = reproject_coords(DepthField(np.full((24, 32), 1e9)), self.intr, self.intr, transform)
        inf = infinity_coords(self.intr, self.intr, transform.rotation, (24, 32))
        both = far.mask & inf.mask
        self.assertTrue(both.any())
        np.testing.assert_allclose(far.coords[:, both], inf.coords[:, both], atol=1e-6)

    def test_out_of_view_and_behind_camera_are_masked(self):
        shift = RigidTransform(np.eye(3), [0.3, 0.0, 0.0])
        flow = reproject_coords(DepthField(np.full((24, 32), 2.0)), self.intr, self.intr, shift)
        self.assertFalse(flow.mask[:, -1].any())
        self.assertTrue(flow.mask[:, 0].all())
        behind = RigidTransform(np.eye(3), [0.0, 0.0, -5.0])
        flow = reproject_coords(DepthField(np.full((24, 32), 2.0)), self.intr, self.intr, behind)
        self.assertFalse(flow.mask.any())

    def test_depth_derivative(self):
        intr = Intrinsics(40.0, 42.0, 7.5, 5.5, (0.02, -0.01, 0.001, 0.002, 0.0))
        transform = RigidTransform.from_rotvec([0.02, 0.03, -0.01], [-0.1, 0.02, 0.05])
        rays = camera_rays(intr, 16, 12)
        depth = np.random.default_rng(0).uniform(1.5, 3.0, size=(12, 16))
        state = reprojection_forward(depth, rays, intr, transform, (12, 16))
        eps = 1e-6
        up = reprojection_forward(depth + eps, rays, intr, transform, (12, 16))
        down = reprojection_forward(depth - eps, rays, intr, transform, (12, 16))
        keep = state.mask & up.mask & down.mask
        fd = (up.coords - down.coords) / (2 * eps)
        np.testing.assert_allclose(state.du_dd[:, keep], fd[:, keep], rtol=1e-6, atol=1e-7)


class BackwardWarpTests(SimpleTestCase):
    def setUp(self):
        v, u = np.mgrid[0:10, 0:12].astype(float)
        self.ramp = ImagePlane(np.stack([u * 0.5 + v, 3.0 - u]))

    def test_identity(self):
        out = backward_warp(self.ramp, grid_flow(10, 12))
        np.testing.assert_array_equal(out.data, self.ramp.data)

    def test_integer_shift(self):
        out = backward_warp(self.ramp, grid_flow(10, 12, du=1.0))
        np.testing.assert_allclose(out.data[:, :, :-1], self.ramp.data[:, :, 1:], atol=1e-12)
        np.testing.assert_array_equal(out.data[:, :, -1], 0.0)

    def test_half_pixel_shift(self):
        out = backward_warp(self.ramp, grid_flow(10, 12, du=0.5, dv=0.5))
        v, u = np.mgrid[0:10, 0:12].astype(float)
        expected = np.stack([(u + 0.5) * 0.5 + (v + 0.5), 3.0 - (u + 0.5)])
        valid = (u <= 10.5) & (v <= 8.5)
        np.testing.assert_allclose(out.data[:, valid], expected[:, valid], atol=1e-12)

    def test_linear_in_source(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(2, 2, 10, 12))
        flow = FlowField(coords=np.stack([rng.uniform(-1, 12, (10, 12)), rng.uniform(-1, 10, (10, 12))]),
                         mask=np.ones((10, 12), bool))
        flow = FlowField(coords=flow.coords, mask=(flow.coords[0] >= 0) & (flow.coords[0] <= 11)
                         & (flow.coords[1] >= 0) & (flow.coords[1] <= 9))
        lhs = backward_warp(2.0 * x - 3.0 * y, flow).data
        rhs = 2.0 * backward_warp(x, flow).data - 3.0 * backward_warp(y, flow).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_coordinate_gradient(self):
        v, u = np.mgrid[0:12, 0:12].astype(float)
        smooth = np.sin(0.3 * u) * np.cos(0.2 * v) + 0.1 * u
        rng = np.random.default_rng(2)
        coords = np.stack([rng.uniform(1.1, 9.9, (6, 6)), rng.uniform(1.1, 9.9, (6, 6))])
        # keep away from cell boundaries
        coords = np.floor(coords) + np.clip(coords - np.floor(coords), 0.1, 0.9)
        mask = np.ones((6, 6), bool)
        probe = rng.normal(size=(1, 6, 6))
        _, state = bilinear_forward(smooth[None], coords, mask)
        du, dv = bilinear_vjp_coords(state, probe)
        eps = 1e-7
        for axis, grad in ((0, du), (1, dv)):
            step = np.zeros_like(coords)
            step[axis] = eps
            up, _ = bilinear_forward(smooth[None], coords + step, mask)
            down, _ = bilinear_forward(smooth[None], coords - step, mask)
            fd = np.sum(probe * (up - down), axis=0) / (2 * eps)
            np.testing.assert_allclose(grad, fd, atol=1e-5)

    def test_source_gradient_is_adjoint(self):
        rng = np.random.default_rng(3)
        source = rng.normal(size=(2, 8, 9))
        coords = np.stack([rng.uniform(0, 8, (5, 7)), rng.uniform(0, 7, (5, 7))])
        mask = rng.uniform(size=(5, 7)) > 0.2
        probe = rng.normal(size=(2, 5, 7))
        out, state = bilinear_forward(source, coords, mask)
        grad = bilinear_vjp_source(state, probe)
        self.assertAlmostEqual(float(np.sum(probe * out)), float(np.sum(grad * source)), places=10)


class AlignDepthTests(SimpleTestCase):
    def test_same_camera_is_identity(self):
        camera = make_camera('pol_left', 16, 12, 20.0, 20.0, 7.5, 5.5)
        depth = DepthField(np.random.default_rng(4).uniform(1.0, 3.0, size=(12, 16)))
        aligned = align_depth(depth, camera, camera, RigidTransform.identity())
        np.testing.assert_allclose(aligned.depth, depth.depth, atol=1e-12)

    def test_plane_registered_onto_finer_grid(self):
        src = make_camera('structured_light', 24, 24, 30.0, 30.0, 11.5, 11.5)
        dst = make_camera('pol_left', 16, 16, 20.0, 20.0, 7.5, 7.5)
        to_dst = RigidTransform(np.eye(3), [-0.05, 0.0, 0.0])
        aligned = align_depth(DepthField(np.full((24, 24), 2.0)), src, dst, to_dst)
        self.assertTrue(aligned.mask[:, 4:12].all())
        np.testing.assert_allclose(aligned.depth[aligned.mask], 2.0)

    def test_nearest_surface_wins(self):
        camera = make_camera('pol_left', 8, 8, 10.0, 10.0, 3.5, 3.5)
        depth = np.full((8, 8), 5.0)
        depth[2:6, 2:6] = 1.0
        aligned = align_depth(DepthField(depth), camera, camera, RigidTransform(np.eye(3), [0.2, 0.0, 0.0]))
        self.assertEqual(aligned.depth[3, 5], 1.0)

    def test_unfilled_gaps_stay_invalid(self):
        camera = make_camera('pol_left', 8, 8, 10.0, 10.0, 3.5, 3.5)
        depth = np.full((8, 8), 2.0)
        depth[:, :4] = np.nan
        aligned = align_depth(DepthField(depth), camera, camera, RigidTransform.identity(), fill_radius=1.0)
        self.assertTrue(aligned.mask[:, 3].all())
        self.assertFalse(aligned.mask[:, :3].any())
