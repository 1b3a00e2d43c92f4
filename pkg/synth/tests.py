from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ArgError, ParseError
from geometry.cameras import RigidTransform
from geometry.services import make_camera, read_rig
from itof.services import recover_from_buckets
from polarisation.services import decompose_polarisation

from .scenes import Box, Material, NoiseSpec, Plane, SceneSpec, Sphere
from .services import (
    desk_rig,
    parse_noise_text,
    parse_scene_text,
    read_scene,
    render_depth,
    render_frame,
    render_temporal_frames,
)

FIXTURES = Path(__file__).resolve().parent / 'fixtures'

BACKDROP = Plane([0.0, 0.0, 2.5], [0.0, 0.0, -1.0], Material(albedo=0.6, texture='sine', texture_scale=0.3))


def small_camera(size=5, focal=2.0):
    centre = (size - 1) / 2.0
    return make_camera('pol_left', size, size, focal, focal, centre, centre)


class RenderDepthTests(SimpleTestCase):
    def test_fronto_parallel_plane(self):
        scene = SceneSpec([Plane([0.0, 0.0, 2.0], [0.0, 0.0, 1.0])])
        depth = render_depth(scene, small_camera(9, 6.0))
        self.assertTrue(depth.mask.all())
        np.testing.assert_allclose(depth.depth, 2.0, atol=1e-12)

    def test_sphere_matches_closed_form(self):
        camera = small_camera(5, 2.0)
        centre = np.array([0.0, 0.0, 4.0])
        depth = render_depth(SceneSpec([Sphere(centre, 1.0)]), camera)
        self.assertAlmostEqual(depth.depth[2, 2], 3.0, places=12)
        v, u = np.mgrid[0:5, 0:5].astype(float)
        rays = np.stack([(u - 2.0) / 2.0, (v - 2.0) / 2.0, np.ones((5, 5))], axis=-1)
        rc = rays @ centre
        rr = np.sum(rays * rays, axis=-1)
        disc = rc * rc - rr * (centre @ centre - 1.0)
        expected = np.where(disc >= 0, (rc - np.sqrt(np.maximum(disc, 0))) / rr, np.nan)
        np.testing.assert_array_equal(depth.mask, disc >= 0)
        np.testing.assert_allclose(depth.depth[depth.mask], expected[depth.mask], atol=1e-9)

    def test_box_occludes_plane(self):
        camera = small_camera(15, 10.0)
        plane = Plane([0.0, 0.0, 3.0], [0.0, 0.0, -1.0])
        box = Box([0.05, 0.0, 2.0], [0.4, 0.3, 0.4], [0.0, 0.3, 0.0])
        both = render_depth(SceneSpec([plane, box]), camera)
        plane_only = render_depth(SceneSpec([plane]), camera).filled(np.inf)
        box_only = render_depth(SceneSpec([box]), camera).filled(np.inf)
        np.testing.assert_allclose(both.filled(np.inf), np.minimum(plane_only, box_only), atol=1e-12)
        self.assertTrue(np.isfinite(box_only).any())
        self.assertTrue(np.isinf(box_only).any())

    def test_miss_is_invalid(self):
        depth = render_depth(SceneSpec([Sphere([0.0, 0.0, 4.0], 0.1)]), small_camera(9, 4.0))
        self.assertFalse(depth.mask[0, 0])
        self.assertTrue(np.isnan(depth.depth[0, 0]))
        self.assertTrue(depth.mask[4, 4])

    def test_threads_do_not_change_output(self):
        scene = SceneSpec([BACKDROP, Sphere([0.1, 0.0, 2.0], 0.3)])
        camera = desk_rig(32).camera('pol_left')
        single = render_depth(scene, camera, threads=1)
        several = render_depth(scene, camera, threads=3)
        np.testing.assert_array_equal(single.filled(-1.0), several.filled(-1.0))


class RenderFrameTests(SimpleTestCase):
    def setUp(self):
        self.rig = desk_rig(16)
        self.scene = SceneSpec([BACKDROP])

    def test_bundle_has_every_role(self):
        bundle = render_frame(self.scene, self.rig)
        self.assertEqual(bundle.roles(), ['pol_left', 'pol_right', 'corr', 'struct_depth', 'gt_depth'])
        np.testing.assert_allclose(bundle.gt_depth.depth, 2.5, atol=1e-12)

    def test_same_seed_is_bit_identical(self):
        noise = NoiseSpec(pol=0.01, corr=0.05, struct=0.002, seed=11)
        a = render_frame(self.scene, self.rig, noise)
        b = render_frame(self.scene, self.rig, noise)
        for role in ('pol_left', 'pol_right', 'corr'):
            np.testing.assert_array_equal(getattr(a, role).data, getattr(b, role).data)
        np.testing.assert_array_equal(a.struct_depth.depth, b.struct_depth.depth)
        c = render_frame(self.scene, self.rig, NoiseSpec(pol=0.01, corr=0.05, struct=0.002, seed=12))
        self.assertFalse(np.array_equal(a.pol_left.data, c.pol_left.data))

    def test_structured_light_range_cutoff(self):
        near = render_frame(SceneSpec([Plane([0.0, 0.0, 7.0], [0.0, 0.0, -1.0])]), self.rig)
        far = render_frame(SceneSpec([Plane([0.0, 0.0, 12.0], [0.0, 0.0, -1.0])]), self.rig)
        self.assertTrue(near.struct_depth.mask.all())
        self.assertFalse(far.struct_depth.mask.any())
        self.assertTrue(np.isnan(far.struct_depth.depth).all())

    def test_noiseless_modalities_follow_forward_models(self):
        bundle = render_frame(self.scene, self.rig)
        i_un, _, _ = decompose_polarisation(bundle.pol_left)
        left = self.rig.camera('pol_left')
        self.assertEqual(i_un.shape, (1, left.height, left.width))
        np.testing.assert_allclose(bundle.pol_left.unpolarised(), i_un, atol=1e-12)
        angles = bundle.pol_left.angles()
        np.testing.assert_allclose(angles[:, 0] + angles[:, 2], angles[:, 1] + angles[:, 3], atol=1e-12)
        recovery = recover_from_buckets(bundle.corr)
        np.testing.assert_allclose(bundle.corr.data.mean(axis=0), 0.2, atol=1e-12)
        np.testing.assert_allclose(recovery.amplitude, 1.0, atol=1e-9)

    def test_stereo_pair_sees_the_same_texture(self):
        rig = desk_rig(64)
        bundle = render_frame(self.scene, rig)
        # 2 px disparity at 2.5 m with fx 50 and a 10 cm baseline
        left = bundle.pol_left.unpolarised()[0]
        right = bundle.pol_right.unpolarised()[0]
        np.testing.assert_allclose(left[:, 2:], right[:, :-2], atol=1e-9)

    def test_identity_pose_reproduces_the_left_view(self):
        bundle = render_frame(self.scene, self.rig)
        frames = render_temporal_frames(self.scene, self.rig, [RigidTransform.identity()])
        np.testing.assert_allclose(frames[0].pol.data, bundle.pol_left.data, atol=1e-12)


class SceneFileTests(SimpleTestCase):
    def test_fixtures_parse(self):
        plane = read_scene(FIXTURES / 'plane.scene')
        self.assertEqual(len(plane.primitives), 1)
        self.assertEqual(plane.primitives[0].material.texture, 'sine')
        patch = read_scene(FIXTURES / 'patch.scene')
        self.assertEqual([p.kind for p in patch.primitives], ['plane', 'sphere'])
        self.assertEqual(patch.primitives[1].material.texture, 'none')

    def test_fixture_rig_is_the_desk_rig(self):
        self.assertEqual(read_rig(FIXTURES / 'rig.txt'), desk_rig(64))

    def test_unknown_key_reports_column(self):
        with self.assertRaises(ParseError) as ctx:
            parse_scene_text('sphere center=0,0,4 radius=1 colour=red\n')
        self.assertEqual(ctx.exception.line, 1)
        self.assertEqual(ctx.exception.column, 30)

    def test_unknown_primitive(self):
        with self.assertRaises(ParseError) as ctx:
            parse_scene_text('plane center=0,0,2 normal=0,0,1\n  torus center=0,0,1\n')
        self.assertEqual((ctx.exception.line, ctx.exception.column), (2, 3))

    def test_invalid_values_are_rejected(self):
        with self.assertRaises(ParseError):
            parse_scene_text('sphere center=0,0,4 radius=-1\n')
        with self.assertRaises(ParseError):
            parse_scene_text('plane center=0,0,2 normal=0,0,0\n')
        with self.assertRaises(ParseError):
            parse_scene_text('box center=0,0,2 size=1,1\n')
        with self.assertRaises(ParseError):
            parse_scene_text('scene eta=0.9\nplane center=0,0,2 normal=0,0,1\n')
        with self.assertRaises(ParseError):
            parse_scene_text('# nothing here\n')

    def test_noise_text(self):
        noise = parse_noise_text('pol=0.01 struct=0.002 seed=7')
        self.assertEqual(noise, NoiseSpec(pol=0.01, corr=0.0, struct=0.002, seed=7))
        self.assertEqual(parse_noise_text(''), NoiseSpec())
        with self.assertRaises(ParseError):
            parse_noise_text('pol=-1')

    def test_scene_validation(self):
        with self.assertRaises(ArgError):
            SceneSpec([])
        with self.assertRaises(ArgError):
            Material(texture='marble')
        with self.assertRaises(ArgError):
            NoiseSpec(pol=-0.1)
