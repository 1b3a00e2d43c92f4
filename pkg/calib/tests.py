import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ArgError, ParseError, SingularError
from geometry.cameras import RigidTransform
from geometry.services import compose, invert
from synth.services import desk_rig

from .graph import CalibGraph, Observations, RobustKernel, reprojection_residual, residuals
from .services import (
    board_points,
    board_poses,
    calibrate,
    homography_dlt,
    initial_poses,
    optimize,
    parse_observations_text,
    perturb_poses,
    perturb_rig,
    read_observations,
    rotation_error_deg,
    synthetic_observations,
    write_observations,
)

BOARD = board_points(rows=7, cols=9, square=0.06)


def synthetic_setup(noise_px=0.0, count=20, seed=0):
    rig = desk_rig(128)
    poses = board_poses(count, seed=seed)
    return rig, poses, synthetic_observations(rig, poses, BOARD, noise_px=noise_px, seed=seed + 1)


class RobustKernelTests(SimpleTestCase):
    def test_quadratic_then_linear(self):
        kernel = RobustKernel(1.0)
        np.testing.assert_allclose(kernel.cost([0.0, 0.5, 1.0]), [0.0, 0.125, 0.5])
        np.testing.assert_allclose(kernel.cost([2.0, 3.0]), [1.5, 2.5])
        np.testing.assert_allclose(kernel.weight([0.5, 4.0]), [1.0, 0.25])

    def test_slope_is_continuous_at_delta(self):
        kernel = RobustKernel(0.7)
        above = np.nextafter(0.7, 1.0)
        left = kernel.weight(0.7) * 0.7
        right = kernel.weight(above) * above
        self.assertLess(abs(left - right), 1e-12)

    def test_delta_must_be_positive(self):
        with self.assertRaises(ArgError):
            RobustKernel(0.0)
        self.assertEqual(RobustKernel.from_settings().delta, 1.0)


class ResidualTests(SimpleTestCase):
    def setUp(self):
        self.rig, self.poses, self.obs = synthetic_setup(count=4)

    def test_zero_at_ground_truth(self):
        graph = CalibGraph(self.rig, self.poses, self.obs)
        values, usable = residuals(graph)
        self.assertTrue(usable.all())
        self.assertLess(np.abs(values).max(), 1e-10)

    def test_translation_sensitivity(self):
        pose = RigidTransform(np.eye(3), [0.0, 0.0, 1.2])
        obs = synthetic_observations(self.rig, {0: pose}, BOARD)
        delta = 1e-3
        moved = {0: RigidTransform(np.eye(3), [delta, 0.0, 1.2])}
        graph = CalibGraph(self.rig, moved, obs)
        values, _ = residuals(graph)
        left = obs.cameras == 'pol_left'
        fx = self.rig.camera('pol_left').intrinsics.fx
        np.testing.assert_allclose(values[left, 0], fx * delta / 1.2, rtol=1e-9)
        np.testing.assert_allclose(values[left, 1], 0.0, atol=1e-9)

    def test_corner_outside_the_image_is_excluded(self):
        pixels = self.obs.pixels.copy()
        pixels[0] = [-5.0, 10.0]
        obs = Observations(self.obs.cameras, self.obs.images, self.obs.point_ids, self.obs.points, pixels)
        graph = CalibGraph(self.rig, self.poses, obs)
        self.assertFalse(graph.inside[0])
        self.assertIsNone(reprojection_residual(graph, 0))
        self.assertIsNotNone(reprojection_residual(graph, 1))

    def test_point_behind_the_camera_disables_the_edge(self):
        poses = dict(self.poses)
        poses[0] = RigidTransform(np.eye(3), [0.0, 0.0, -1.0])
        _, usable = residuals(CalibGraph(self.rig, poses, self.obs))
        np.testing.assert_array_equal(usable, self.obs.images != 0)

    def test_gauge_invariance(self):
        obs = self.obs.select(self.obs.cameras != 'pol_left')
        gauge = RigidTransform.from_rotvec([0.1, 0.2, -0.1], [0.05, 0.0, 0.02])
        rig = self.rig
        for camera in self.rig.cameras:
            if camera.role != 'pol_left':
                rig = rig.replace(type(camera)(camera.role, camera.width, camera.height, camera.intrinsics,
                                               compose(camera.extrinsic, invert(gauge))))
        poses = {image: compose(gauge, pose) for image, pose in self.poses.items()}
        nudged = {image: compose(RigidTransform.from_rotvec([0.0, 0.01, 0.0]), pose)
                  for image, pose in self.poses.items()}
        base, _ = residuals(CalibGraph(self.rig, nudged, obs))
        moved_poses = {image: compose(gauge, pose) for image, pose in nudged.items()}
        moved, _ = residuals(CalibGraph(rig, moved_poses, obs))
        np.testing.assert_allclose(moved, base, atol=1e-9)
        self.assertLess(np.abs(residuals(CalibGraph(rig, poses, obs))[0]).max(), 1e-9)

    def test_unknown_references(self):
        with self.assertRaises(ArgError):
            CalibGraph(self.rig, {0: self.poses[0]}, self.obs)


class OptimizeTests(SimpleTestCase):
    def test_ground_truth_needs_no_iteration(self):
        rig, poses, obs = synthetic_setup()
        _, _, report = optimize(CalibGraph(rig, poses, obs))
        self.assertEqual(report.iterations, 0)
        self.assertLess(report.final_rmse, 1e-8)

    def test_recovers_from_perturbation(self):
        rig, poses, obs = synthetic_setup()
        start_rig = perturb_rig(rig, seed=3)
        start_poses = perturb_poses(poses, seed=4)
        refined, refined_poses, report = optimize(CalibGraph(start_rig, start_poses, obs))
        self.assertLess(report.final_rmse, 1e-6)
        self.assertGreater(report.initial_rmse, 1.0)
        for camera in rig.cameras:
            got = refined.camera(camera.role)
            self.assertAlmostEqual(got.intrinsics.fx / camera.intrinsics.fx, 1.0, delta=1e-4)
            np.testing.assert_allclose(got.extrinsic.translation, camera.extrinsic.translation, atol=1e-4)
            self.assertLess(rotation_error_deg(got.extrinsic.rotation, camera.extrinsic.rotation), 1e-3)
        np.testing.assert_array_equal(refined.camera('pol_left').extrinsic.rotation, np.eye(3))
        np.testing.assert_array_equal(refined.camera('pol_left').extrinsic.translation, np.zeros(3))

    def test_joint_refinement_improves_noisy_calibration(self):
        rig, _, obs = synthetic_setup(noise_px=0.5, seed=7)
        _, _, report = calibrate(obs, perturb_rig(rig, seed=8))
        self.assertLessEqual(report.final_rmse, 0.95 * report.initial_rmse)
        self.assertTrue(np.all(np.diff(report.cost_history) <= 0))

    def test_too_few_images(self):
        rig, poses, obs = synthetic_setup(count=2)
        with self.assertRaises(ArgError):
            optimize(CalibGraph(rig, poses, obs))


class InitialisationTests(SimpleTestCase):
    def test_homography_poses_match_truth(self):
        rig, poses, obs = synthetic_setup(count=5)
        estimated = initial_poses(rig, obs)
        for image, pose in poses.items():
            self.assertLess(rotation_error_deg(estimated[image].rotation, pose.rotation), 1e-6)
            np.testing.assert_allclose(estimated[image].translation, pose.translation, atol=1e-8)

    def test_collinear_points_are_singular(self):
        line = np.column_stack([np.linspace(0, 1, 6), np.zeros(6)])
        with self.assertRaises(SingularError):
            homography_dlt(line, line * 2.0)
        with self.assertRaises(ArgError):
            homography_dlt(line[:3], line[:3])


class ObservationFileTests(SimpleTestCase):
    def test_write_then_read(self):
        _, _, obs = synthetic_setup(count=3)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'obs.csv'
            write_observations(obs, path)
            again = read_observations(path)
        self.assertEqual(list(again.cameras), list(obs.cameras))
        np.testing.assert_array_equal(again.images, obs.images)
        np.testing.assert_array_equal(again.points, obs.points)
        np.testing.assert_array_equal(again.pixels, obs.pixels)

    def test_parse_errors_carry_positions(self):
        header = 'cam,image,point_id,X,Y,Z,u,v\n'
        with self.assertRaises(ParseError) as ctx:
            parse_observations_text(header + 'pol_left,0,1,0,0,0,1.5,2\npol_left,0,x,0,0,0,1,2\n')
        self.assertEqual((ctx.exception.line, ctx.exception.column), (3, 3))
        with self.assertRaises(ParseError) as ctx:
            parse_observations_text(header + 'pol_left,0,1,0,0,0,abc,2\n')
        self.assertEqual((ctx.exception.line, ctx.exception.column), (2, 7))
        with self.assertRaises(ParseError) as ctx:
            parse_observations_text(header + 'thermal,0,1,0,0,0,1,2\n')
        self.assertEqual(ctx.exception.column, 1)
        with self.assertRaises(ParseError):
            parse_observations_text('camera,image\n')
