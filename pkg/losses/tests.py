import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ArgError, MissingModality
from geometry.cameras import CameraRig, RigidTransform
from geometry.services import make_camera
from imaging.containers import DepthField, FrameBundle
from itof.services import ItofConfig, recover_from_buckets
from synth.scenes import Material, Plane, SceneSpec
from synth.services import desk_rig, render_depth, render_frame, render_temporal_frames

from .photometric import box_filter, box_filter_adjoint, photometric_forward, photometric_vjp
from .services import (
    PHOTOMETRIC_SOURCES,
    DisplacementField,
    LossConfig,
    apply_displacement_field,
    corr_loss,
    corr_to_pol_loss,
    df_ground_truth,
    evaluate,
    parse_strategy,
    photometric_error,
    prepare_inputs,
    stereo_and_mask_loss,
    struct_loss,
    total_loss,
)

CFG = LossConfig()

TEXTURED = Material(albedo=0.6, texture='sine', texture_scale=0.6, texture_contrast=0.6, ambient=0.2)
FRONTAL = SceneSpec([Plane([0.0, 0.0, 2.5], [0.0, 0.0, -1.0], TEXTURED)])
TILTED = SceneSpec([Plane([0.0, 0.0, 2.5], [0.5, 0.0, -np.sqrt(0.75)], TEXTURED)])


def step_depth(size=16, column=8, near=1.0, far=2.0):
    depth = np.full((size, size), near)
    depth[:, column:] = far
    return DepthField(depth)


class PhotometricErrorTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.x = rng.uniform(0.1, 0.9, size=(2, 7, 9))
        self.y = rng.uniform(0.1, 0.9, size=(2, 7, 9))

    def test_identical_images(self):
        np.testing.assert_allclose(photometric_error(self.x, self.x, CFG), 0.0, atol=1e-12)

    def test_alpha_zero_is_l1(self):
        cfg = LossConfig(ssim_alpha=0.0)
        np.testing.assert_allclose(photometric_error(self.x, self.y, cfg), np.abs(self.x - self.y).mean(axis=0))
        np.testing.assert_allclose(photometric_error(self.x, self.y, cfg), photometric_error(self.y, self.x, cfg))

    def test_constant_images(self):
        c1, c2 = CFG.ssim_c1, CFG.ssim_c2
        ssim = (2 * 0.2 * 0.5 + c1) * c2 / ((0.2 ** 2 + 0.5 ** 2 + c1) * c2)
        expected = 0.85 * (1 - ssim) / 2 + 0.15 * 0.3
        emap = photometric_error(np.full((5, 6), 0.2), np.full((5, 6), 0.5), CFG)
        np.testing.assert_allclose(emap, expected, rtol=1e-12)

    def test_non_negative_on_unit_range(self):
        self.assertTrue(np.all(photometric_error(self.x, self.y, CFG) >= 0))

    def test_shape_mismatch(self):
        with self.assertRaises(ArgError):
            photometric_error(self.x, self.y[:, :, :-1], CFG)

    def test_box_filter_adjoint(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(2, 6, 5))
        b = rng.normal(size=(2, 6, 5))
        self.assertAlmostEqual(np.sum(box_filter(a) * b), np.sum(a * box_filter_adjoint(b)), places=12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        weights = rng.uniform(0.5, 1.5, size=(7, 9))
        direction = rng.normal(size=self.y.shape)
        _, state = photometric_forward(self.x, self.y, *CFG.ssim_params)
        analytic = np.sum(photometric_vjp(state, weights) * direction)
        eps = 1e-6

        def value(y):
            return np.sum(weights * photometric_forward(self.x, y, *CFG.ssim_params)[0])

        numeric = (value(self.y + eps * direction) - value(self.y - eps * direction)) / (2 * eps)
        self.assertAlmostEqual(analytic, numeric, delta=1e-6 * max(1.0, abs(numeric)))


class StereoLossTests(SimpleTestCase):
    def setUp(self):
        self.rig = desk_rig(32)

    def test_ground_truth_depth(self):
        bundle = render_frame(FRONTAL, self.rig)
        stereo, mask = stereo_and_mask_loss(bundle.pol_left, bundle.pol_right, bundle.gt_depth, self.rig, CFG)
        self.assertLess(np.nanmean(stereo), 1e-4)
        self.assertTrue(np.isnan(stereo[:, 0]).all())
        self.assertGreater(np.nanmean(mask), np.nanmean(stereo))

    def test_zero_baseline(self):
        left = self.rig.camera('pol_left')
        right = make_camera('pol_right', left.width, left.height, left.intrinsics.fx, left.intrinsics.fy,
                            left.intrinsics.cx, left.intrinsics.cy)
        rig = CameraRig([left, right])
        bundle = render_frame(FRONTAL, rig)
        depth = DepthField(np.full((32, 32), 1.7))
        stereo, mask = stereo_and_mask_loss(bundle.pol_left, bundle.pol_right, depth, rig, CFG)
        np.testing.assert_allclose(stereo, 0.0, atol=1e-12)
        np.testing.assert_allclose(mask, 0.0, atol=1e-12)

    def test_textureless_scene_is_blind_to_depth(self):
        scene = SceneSpec([Plane([0.0, 0.0, 2.5], [0.0, 0.0, -1.0], Material(albedo=0.4))])
        bundle = render_frame(scene, self.rig)
        for value in (1.0, 2.5, 6.0):
            stereo, mask = stereo_and_mask_loss(
                bundle.pol_left, bundle.pol_right, DepthField(np.full((32, 32), value)), self.rig, CFG,
            )
            np.testing.assert_allclose(np.nan_to_num(stereo), 0.0, atol=1e-12)
            np.testing.assert_allclose(np.nan_to_num(mask), 0.0, atol=1e-12)


class CorrLossTests(SimpleTestCase):
    def setUp(self):
        self.rig = desk_rig(16)
        self.bundle = render_frame(FRONTAL, self.rig)
        self.gt = render_depth(FRONTAL, self.rig.camera('itof'))
        self.recovery = recover_from_buckets(self.bundle.corr)

    def loss(self, depth):
        return corr_loss(self.bundle.corr, depth, self.recovery.amplitude, self.recovery.offset, cfg=CFG)

    def test_ground_truth(self):
        np.testing.assert_allclose(self.loss(self.gt), 0.0, atol=1e-9)

    def test_wrapping_invariance(self):
        wrapped = DepthField(self.gt.depth + ItofConfig.from_settings().unambiguous_range)
        np.testing.assert_allclose(self.loss(wrapped), 0.0, atol=1e-9)

    def test_perturbed_half_is_positive(self):
        depth = self.gt.depth.copy()
        depth[:, 8:] += 0.1
        emap = self.loss(DepthField(depth))
        self.assertTrue(np.all(emap[:, 8:] > 0))

    def test_low_amplitude_is_masked(self):
        amplitude = self.recovery.amplitude.copy()
        amplitude[0, 0] = 0.0
        emap = corr_loss(self.bundle.corr, self.gt, amplitude, self.recovery.offset, cfg=CFG)
        self.assertTrue(np.isnan(emap[0, 0]))


class CorrToPolLossTests(SimpleTestCase):
    def setUp(self):
        self.rig = desk_rig(32)

    def test_ground_truth_selects_diffuse(self):
        bundle = render_frame(TILTED, self.rig)
        d_corr = render_depth(TILTED, self.rig.camera('itof'))
        inputs = prepare_inputs(bundle, 'T', CFG)
        breakdown = total_loss(inputs, bundle.gt_depth, d_corr)
        emap = breakdown.maps['corr_to_pol']
        self.assertLess(np.nanmean(emap), 1e-3)
        valid = breakdown.valid['corr_to_pol']
        self.assertGreater(np.mean(~breakdown.specular[valid]), 0.9)
        standalone = corr_to_pol_loss(bundle.pol_left, bundle.corr, d_corr, bundle.gt_depth, self.rig, cfg=CFG)
        np.testing.assert_array_equal(np.isnan(standalone), np.isnan(emap))

    def test_normal_incidence_ties_to_diffuse(self):
        # a very narrow field of view puts every ray at normal incidence
        left = make_camera('pol_left', 8, 8, 1e5, 1e5, 3.5, 3.5)
        itof = make_camera('itof', 8, 8, 1e5, 1e5, 3.5, 3.5)
        rig = CameraRig([left, itof])
        bundle = render_frame(FRONTAL, rig)
        inputs = prepare_inputs(bundle, 'T', CFG)
        evaluation = evaluate(inputs, bundle.gt_depth, render_depth(FRONTAL, itof))
        self.assertFalse(evaluation.breakdown.specular.any())

    def test_slanted_corr_depth_increases_the_loss(self):
        bundle = render_frame(TILTED, self.rig)
        itof = self.rig.camera('itof')
        d_corr = render_depth(TILTED, itof)
        u = np.arange(itof.width) - itof.intrinsics.cx
        slanted = DepthField(d_corr.depth * (1.0 + 0.01 * u)[None, :])
        good = corr_to_pol_loss(bundle.pol_left, bundle.corr, d_corr, bundle.gt_depth, self.rig, cfg=CFG)
        bad = corr_to_pol_loss(bundle.pol_left, bundle.corr, slanted, bundle.gt_depth, self.rig, cfg=CFG)
        self.assertGreater(np.nanmean(bad), np.nanmean(good))


class StructLossTests(SimpleTestCase):
    def setUp(self):
        self.rig = desk_rig(32)
        self.bundle = render_frame(FRONTAL, self.rig)

    def test_ground_truth(self):
        emap, hint = struct_loss(
            self.bundle.pol_left, self.bundle.pol_right, self.bundle.struct_depth,
            self.bundle.gt_depth, self.rig, CFG,
        )
        self.assertLess(np.nanmean(emap), 1e-4)
        np.testing.assert_allclose(np.nan_to_num(hint), 0.0, atol=1e-12)

    def test_ties_prefer_structured_light(self):
        inputs = prepare_inputs(self.bundle, 'SL', CFG)
        breakdown = total_loss(inputs, self.bundle.gt_depth)
        both = breakdown.valid['struct'] & breakdown.valid['stereo']
        self.assertTrue(both.any())
        self.assertTrue(np.all(breakdown.argmin[both] == PHOTOMETRIC_SOURCES.index('struct')))

    def test_wrong_structured_light_never_hints(self):
        wrong = DepthField(self.bundle.struct_depth.depth * 1.5)
        bundle = FrameBundle(
            pol_left=self.bundle.pol_left, rig=self.rig, pol_right=self.bundle.pol_right, struct_depth=wrong,
        )
        breakdown = total_loss(prepare_inputs(bundle, 'SL', CFG), self.bundle.gt_depth)
        stereo_valid = breakdown.valid['stereo']
        np.testing.assert_array_equal(breakdown.hint_map[stereo_valid], 0.0)

    def test_hint_only_where_structured_light_exists(self):
        depth = self.bundle.struct_depth.depth.copy()
        depth[:, 24:] = np.nan
        partial = DepthField(depth)
        _, hint = struct_loss(self.bundle.pol_left, self.bundle.pol_right, partial,
                              DepthField(np.full((32, 32), 2.0)), self.rig, CFG)
        self.assertTrue(np.isnan(hint[:, -4:]).all())
        self.assertTrue(np.isfinite(hint[:, :8]).all())


class DisplacementFieldTests(SimpleTestCase):
    def test_constant_and_ramp_give_zero(self):
        self.assertFalse(df_ground_truth(DepthField(np.full((8, 8), 2.0)), CFG).offsets.any())
        ramp = DepthField(2.0 + 0.01 * np.arange(16)[None, :] * np.ones((16, 1)))
        self.assertFalse(df_ground_truth(ramp, CFG).offsets.any())

    def test_step_edge_matches_brute_force(self):
        depth = step_depth()
        df = df_ground_truth(depth, CFG)
        strong = np.zeros((16, 16), dtype=bool)
        strong[:, 7:9] = True
        smooth = np.argwhere(~strong)
        for r in range(16):
            for c in range(16):
                if not strong[r, c]:
                    self.assertEqual(tuple(df.offsets[:, r, c]), (0.0, 0.0))
                    continue
                distances = np.hypot(smooth[:, 0] - r, smooth[:, 1] - c)
                self.assertEqual(np.hypot(df.offsets[1, r, c], df.offsets[0, r, c]), distances.min())
        np.testing.assert_array_equal(df.offsets[0, :, 7], -1.0)
        np.testing.assert_array_equal(df.offsets[0, :, 8], 1.0)
        self.assertFalse(df.flagged.any())

    def test_flying_pixels_are_removed(self):
        depth = step_depth().depth.copy()
        depth[:, 8] = 1.5
        field = DepthField(depth)
        df = df_ground_truth(field, CFG)
        fixed = apply_displacement_field(field, df)
        values = np.unique(fixed.depth)
        self.assertTrue(set(values.tolist()) <= {1.0, 2.0})
        again = apply_displacement_field(fixed, df)
        np.testing.assert_array_equal(again.depth, fixed.depth)

    def test_zero_field_is_identity(self):
        depth = step_depth()
        out = apply_displacement_field(depth, DisplacementField.zeros((16, 16)))
        np.testing.assert_array_equal(out.depth, depth.depth)

    def test_out_of_radius_is_flagged(self):
        df = df_ground_truth(step_depth(), LossConfig(df_search_radius=0))
        self.assertFalse(df.offsets.any())
        self.assertTrue(df.flagged[:, 7:9].all())

    def test_offset_leaving_the_image_is_ignored(self):
        offsets = np.zeros((2, 4, 4))
        offsets[0, 0, 3] = 5
        out = apply_displacement_field(step_depth(4, 2), DisplacementField(offsets))
        self.assertEqual(out.depth[0, 3], 2.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ArgError):
            apply_displacement_field(step_depth(), DisplacementField.zeros((4, 4)))


class TotalLossTests(SimpleTestCase):
    def setUp(self):
        self.rig = desk_rig(32)
        self.bundle = render_frame(FRONTAL, self.rig)

    def test_strategy_parsing(self):
        self.assertEqual(parse_strategy('STL'), frozenset('STL'))
        for bad in ('', 'X', 'SS', 'st'):
            with self.assertRaises(ArgError):
                parse_strategy(bad)

    def test_missing_modality(self):
        bundle = FrameBundle(pol_left=self.bundle.pol_left, rig=self.rig, pol_right=self.bundle.pol_right)
        with self.assertRaises(MissingModality) as ctx:
            prepare_inputs(bundle, 'ST', CFG)
        self.assertEqual(ctx.exception.modality, 'corr')
        with self.assertRaises(MissingModality):
            prepare_inputs(bundle, 'M', CFG)

    def test_stereo_only_ground_truth(self):
        breakdown = total_loss(prepare_inputs(self.bundle, 'S', CFG), self.bundle.gt_depth)
        self.assertLess(breakdown.total, 1e-4)

    def test_all_sources_ground_truth(self):
        breakdown = total_loss(prepare_inputs(self.bundle, 'STL', CFG), self.bundle.gt_depth)
        self.assertLess(breakdown.total, 1e-3)
        self.assertLess(breakdown.scalars['corr'], 1e-9)

    def test_temporal_frames_with_known_pose(self):
        pose = RigidTransform(np.eye(3), [-0.1, 0.0, 0.0])
        frames = render_temporal_frames(FRONTAL, self.rig, [pose])
        inputs = prepare_inputs(self.bundle, 'M', CFG, temporal_frames=frames)
        self.assertLess(total_loss(inputs, self.bundle.gt_depth).total, 1e-4)

    def test_extra_source_never_raises_the_min(self):
        depth = np.full((32, 32), 3.0)
        stereo = total_loss(prepare_inputs(self.bundle, 'S', CFG), depth)
        more = total_loss(prepare_inputs(self.bundle, 'STL', CFG), depth)
        valid = stereo.pol_valid
        self.assertTrue(np.all(more.pol_valid[valid]))
        self.assertTrue(np.all(more.min_map[valid] <= stereo.min_map[valid]))

    def test_breakdown_sums_to_total(self):
        df = DisplacementField(np.ones((2, 32, 32)))
        inputs = prepare_inputs(self.bundle, 'STL', CFG, candidate_df=df)
        depth = 2.5 + 0.1 * np.sin(np.arange(32))[None, :] * np.ones((32, 1))
        breakdown = total_loss(inputs, depth)
        valid = breakdown.pol_valid
        stack = np.stack([
            np.where(breakdown.valid[name], breakdown.maps[name], np.inf)
            for name in PHOTOMETRIC_SOURCES if name in breakdown.maps
        ])
        np.testing.assert_array_equal(breakdown.min_map[valid], stack.min(axis=0)[valid])
        np.testing.assert_array_equal(
            breakdown.total_map[valid],
            breakdown.min_map[valid] + breakdown.hint_map[valid] + breakdown.df_map[valid],
        )
        np.testing.assert_allclose(breakdown.df_map[valid], np.sqrt(2.0))
        expected = np.mean(breakdown.total_map[valid]) + breakdown.scalars['corr']
        self.assertAlmostEqual(breakdown.total, expected, places=12)
