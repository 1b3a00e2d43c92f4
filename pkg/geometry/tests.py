import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ArgError, BehindCamera, NumericError, ParseError

from .cameras import CameraRig, Intrinsics, RigidTransform, rotation_drift
from .services import (
    backproject,
    compose,
    format_rig_text,
    invert,
    make_camera,
    parse_rig_text,
    project,
    projection_jacobians,
    undistort_points,
)


def random_transform(rng):
    return RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3))


class ProjectionTests(SimpleTestCase):
    def setUp(self):
        self.intr = Intrinsics(100.0, 100.0, 50.0, 50.0)

    def test_optical_axis_maps_to_principal_point(self):
        np.testing.assert_allclose(project([0.0, 0.0, 1.0], self.intr), [50.0, 50.0])

    def test_optical_axis_ignores_distortion(self):
        intr = Intrinsics(100.0, 120.0, 40.0, 30.0, (0.3, -0.1, 0.01, 0.02, 0.05))
        np.testing.assert_allclose(project([0.0, 0.0, 3.0], intr), [40.0, 30.0])

    def test_pinhole_offset(self):
        np.testing.assert_allclose(project([0.1, 0.0, 1.0], self.intr), [60.0, 50.0])

    def test_radial_distortion_value(self):
        intr = Intrinsics(100.0, 100.0, 50.0, 50.0, (0.1, 0.0, 0.0, 0.0, 0.0))
        # a=0.05, b=0.1, r2=0.0125, radial=1.00125
        np.testing.assert_allclose(project([0.1, 0.2, 2.0], intr), [55.00625, 60.0125], atol=1e-12)

    def test_behind_camera(self):
        with self.assertRaises(BehindCamera):
            project([0.0, 0.0, -1.0], self.intr)
        with self.assertRaises(BehindCamera):
            project([0.0, 0.0, 0.0], self.intr)

    def test_jacobians_match_finite_differences(self):
        intr = Intrinsics(90.0, 110.0, 40.0, 35.0, (0.05, -0.02, 0.003, -0.002, 0.01))
        point = np.array([0.2, -0.15, 1.7])
        d_point, d_intr, d_dist = projection_jacobians(point, intr)
        eps = 1e-6
        for k in range(3):
            step = np.zeros(3)
            step[k] = eps
            fd = (project(point + step, intr) - project(point - step, intr)) / (2 * eps)
            np.testing.assert_allclose(d_point[:, k], fd, rtol=1e-6, atol=1e-6)
        params = [intr.fx, intr.fy, intr.cx, intr.cy]
        for k in range(4):
            up, down = list(params), list(params)
            up[k] += eps
            down[k] -= eps
            fd = (project(point, intr.with_params(*up)) - project(point, intr.with_params(*down))) / (2 * eps)
            np.testing.assert_allclose(d_intr[:, k], fd, rtol=1e-6, atol=1e-6)
        for k in range(5):
            up, down = list(intr.dist), list(intr.dist)
            up[k] += eps
            down[k] -= eps
            fd = (project(point, intr.with_params(dist=up)) - project(point, intr.with_params(dist=down))) / (2 * eps)
            np.testing.assert_allclose(d_dist[:, k], fd, rtol=1e-6, atol=1e-6)


class BackprojectionTests(SimpleTestCase):
    def setUp(self):
        self.intr = Intrinsics(100.0, 100.0, 50.0, 50.0)

    def test_principal_point(self):
        np.testing.assert_allclose(backproject([50.0, 50.0], 2.0, self.intr), [0.0, 0.0, 2.0])

    def test_roundtrip_without_distortion(self):
        rng = np.random.default_rng(3)
        pixels = rng.uniform(0, 100, size=(200, 2))
        depth = rng.uniform(0.2, 10, size=200)
        points = backproject(pixels, depth, self.intr)
        np.testing.assert_allclose(project(points, self.intr), pixels, atol=1e-9)

    def test_roundtrip_with_radial_distortion(self):
        intr = Intrinsics(100.0, 100.0, 50.0, 50.0, (0.05, 0.0, 0.0, 0.0, 0.0))
        rng = np.random.default_rng(4)
        pixels = rng.uniform(0, 100, size=(200, 2))
        depth = rng.uniform(0.2, 10, size=200)
        points = backproject(pixels, depth, intr)
        np.testing.assert_allclose(project(points, intr), pixels, atol=1e-6)

    def test_non_positive_depth(self):
        with self.assertRaises(ArgError):
            backproject([10.0, 10.0], 0.0, self.intr)

    def test_undistortion_budget_exhausted(self):
        intr = Intrinsics(100.0, 100.0, 50.0, 50.0, (0.2, 0.0, 0.0, 0.0, 0.0))
        with self.assertRaises(NumericError):
            undistort_points(np.array([95.0, 90.0]), intr, max_iters=1)


class TransformTests(SimpleTestCase):
    def test_inverse(self):
        rng = np.random.default_rng(5)
        a = random_transform(rng)
        both = compose(a, invert(a))
        np.testing.assert_allclose(both.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(both.translation, np.zeros(3), atol=1e-12)

    def test_identity_is_neutral(self):
        b = random_transform(np.random.default_rng(6))
        out = compose(RigidTransform.identity(), b)
        np.testing.assert_allclose(out.rotation, b.rotation, atol=1e-15)
        np.testing.assert_allclose(out.translation, b.translation, atol=1e-15)

    def test_associativity(self):
        rng = np.random.default_rng(7)
        a, b, c = (random_transform(rng) for _ in range(3))
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(left.rotation, right.rotation, atol=1e-12)
        np.testing.assert_allclose(left.translation, right.translation, atol=1e-12)

    def test_long_chain_stays_orthonormal(self):
        step = RigidTransform.from_rotvec([0.01, -0.02, 0.03], [0.001, 0.0, 0.0])
        chain = RigidTransform.identity()
        for _ in range(1000):
            chain = compose(chain, step)
        self.assertLessEqual(rotation_drift(chain.rotation), 1e-9)

    def test_rejects_non_rotation(self):
        with self.assertRaises(ArgError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class RigFileTests(SimpleTestCase):
    def make_rig(self):
        return CameraRig([
            make_camera('pol_left', 64, 64, 50.0, 50.0, 31.5, 31.5),
            make_camera('pol_right', 64, 64, 50.0, 50.0, 31.5, 31.5, translation=(-0.1, 0.0, 0.0)),
            make_camera(
                'itof', 64, 48, 40.0, 40.0, 31.5, 23.5, dist=(0.01, 0.0, 0.0, 0.0, 0.0),
                rotation=RigidTransform.from_rotvec([0.0, 0.01, 0.0]).rotation,
                translation=(0.03, 0.01, 0.0),
            ),
        ])

    def test_roundtrip(self):
        rig = self.make_rig()
        self.assertEqual(parse_rig_text(format_rig_text(rig)), rig)

    def test_transform_between_cameras(self):
        rig = self.make_rig()
        to_right = rig.transform('pol_left', 'pol_right')
        np.testing.assert_allclose(to_right.apply([0.0, 0.0, 2.0]), [-0.1, 0.0, 2.0])
        back = rig.transform('pol_right', 'pol_left')
        np.testing.assert_allclose(back.apply(to_right.apply([0.3, 0.2, 1.0])), [0.3, 0.2, 1.0], atol=1e-12)

    def test_unknown_key_reports_position(self):
        text = 'role=pol_left width=4 height=4 fx=1 fy=1 cx=1 cy=1\nrole=itof width=4 height=4 fx=1 fy=1 cx=1 cy=1 zoom=2\n'
        with self.assertRaises(ParseError) as ctx:
            parse_rig_text(text)
        self.assertEqual(ctx.exception.line, 2)
        self.assertEqual(ctx.exception.column, text.splitlines()[1].index('zoom') + 1)

    def test_negative_focal_length(self):
        text = 'role=pol_left width=4 height=4 fx=-1 fy=1 cx=1 cy=1\n'
        with self.assertRaises(ParseError) as ctx:
            parse_rig_text(text)
        self.assertEqual(ctx.exception.column, text.index('fx=') + 1)

    def test_reference_camera_must_be_identity(self):
        with self.assertRaises(ParseError):
            parse_rig_text('role=pol_left width=4 height=4 fx=1 fy=1 cx=1 cy=1 translation=0.1,0,0\n')
