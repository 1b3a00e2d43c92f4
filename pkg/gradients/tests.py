from unittest import mock

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings

from core.exceptions import ArgError, NumericError
from geometry.cameras import RigidTransform
from imaging.containers import DepthField, FrameBundle, PolarisationImage
from itof.services import ItofConfig
from losses.services import evaluate, prepare_inputs
from synth.scenes import Material, Plane, SceneSpec
from synth.services import desk_rig, render_frame, render_temporal_frames

from .services import backward, check_point, finite_diff_check, loss_gradient, term_gradients

TEXTURED = Material(albedo=0.6, texture='sine', texture_scale=0.6, texture_contrast=0.6, ambient=0.2)
FRONTAL = SceneSpec([Plane([0.0, 0.0, 2.5], [0.0, 0.0, -1.0], TEXTURED)])


def corrupted():
    return override_settings(DEPTHKIT={**settings.DEPTHKIT, 'CORRUPT_ADJOINT': True})


class FiniteDifferenceTests(SimpleTestCase):
    def setUp(self):
        self.bundle = render_frame(FRONTAL, desk_rig(8))

    def check(self, strategy, wrt='pol', term='total', **kwargs):
        inputs = prepare_inputs(self.bundle, strategy, **kwargs)
        d_pol, d_corr = check_point(self.bundle, inputs, seed=1)
        return finite_diff_check(inputs, d_pol, d_corr, wrt=wrt, eps=1e-5, tol=1e-3, term=term)

    def test_stereo(self):
        report = self.check('S')
        self.assertGreater(report.checked, 0)
        self.assertLess(report.max_rel_err, 1e-3)
        self.assertTrue(report.passed)

    def test_itof_wrt_polarisation_depth(self):
        report = self.check('T')
        self.assertGreater(report.checked, 0)
        self.assertLess(report.max_rel_err, 1e-3)

    def test_itof_wrt_correlation_depth(self):
        report = self.check('T', wrt='corr')
        self.assertGreater(report.checked, 0)
        self.assertLess(report.max_rel_err, 1e-3)

    def test_single_terms(self):
        for term in ('stereo', 'mask', 'corr_to_pol'):
            report = self.check('ST', term=term)
            self.assertLess(report.max_rel_err, 1e-3, term)
        self.assertLess(self.check('ST', wrt='corr', term='corr').max_rel_err, 1e-3)

    def test_structured_light_terms(self):
        self.bundle = render_frame(FRONTAL, desk_rig(16))
        for term in ('struct', 'hint'):
            report = self.check('SL', term=term)
            self.assertGreater(report.checked, 0, term)
            self.assertLess(report.max_rel_err, 5e-3, term)

    def test_temporal_term(self):
        self.bundle = render_frame(FRONTAL, desk_rig(16))
        frames = render_temporal_frames(FRONTAL, self.bundle.rig, [RigidTransform(np.eye(3), [-0.05, 0.0, 0.0])])
        report = self.check('SM', term='temporal', temporal_frames=frames)
        self.assertGreater(report.checked, 0)
        self.assertLess(report.max_rel_err, 5e-3)

    def test_composed_strategies(self):
        bundle = render_frame(FRONTAL, desk_rig(16))
        for strategy in ('S', 'ST', 'SL', 'STL'):
            inputs = prepare_inputs(bundle, strategy)
            d_pol, d_corr = check_point(bundle, inputs, seed=3)
            report = finite_diff_check(inputs, d_pol, d_corr, eps=1e-5, tol=5e-3)
            self.assertGreater(report.checked, 0, strategy)
            self.assertLess(report.max_rel_err, 5e-3, strategy)

    def test_every_source(self):
        rig = desk_rig(16)
        bundle = render_frame(FRONTAL, rig)
        frames = render_temporal_frames(FRONTAL, rig, [RigidTransform(np.eye(3), [-0.05, 0.0, 0.0])])
        inputs = prepare_inputs(bundle, 'STLM', temporal_frames=frames)
        d_pol, d_corr = check_point(bundle, inputs, seed=2)
        report = finite_diff_check(inputs, d_pol, d_corr, eps=1e-5, tol=5e-3)
        self.assertGreater(report.checked, 0)
        self.assertLess(report.max_rel_err, 5e-3)

    def test_corrupted_adjoint_is_caught(self):
        inputs = prepare_inputs(self.bundle, 'S')
        d_pol, _ = check_point(self.bundle, inputs, seed=1)
        with corrupted():
            report = finite_diff_check(inputs, d_pol, eps=1e-5, tol=1e-3)
        self.assertFalse(report.passed)
        self.assertGreater(report.max_rel_err, 0.05)

    def test_rejected_arguments(self):
        inputs = prepare_inputs(self.bundle, 'S')
        depth = self.bundle.gt_depth
        with self.assertRaises(ArgError):
            finite_diff_check(inputs, depth, eps=0.0)
        with self.assertRaises(ArgError):
            finite_diff_check(inputs, depth, eps=-1e-4)
        with self.assertRaises(ArgError):
            finite_diff_check(inputs, depth, wrt='corr')
        with self.assertRaises(ArgError):
            finite_diff_check(inputs, depth, term='corr_to_pol')
        with self.assertRaises(ArgError):
            finite_diff_check(inputs, depth, term='nonsense')

    def test_large_images_are_refused(self):
        bundle = render_frame(FRONTAL, desk_rig(40))
        with self.assertRaises(ArgError):
            finite_diff_check(prepare_inputs(bundle, 'S'), bundle.gt_depth)


class LossGradientTests(SimpleTestCase):
    def setUp(self):
        self.rig = desk_rig(8)
        self.bundle = render_frame(FRONTAL, self.rig)

    def test_constant_images_give_zero_gradient(self):
        flat = PolarisationImage(np.full((4, 8, 8), 0.3))
        bundle = FrameBundle(pol_left=flat, rig=self.rig, pol_right=flat)
        breakdown, field = loss_gradient(prepare_inputs(bundle, 'S'), np.full((8, 8), 1.7))
        self.assertAlmostEqual(breakdown.total, 0.0, places=12)
        np.testing.assert_array_equal(field.grad, 0.0)

    def test_invalid_pixels_are_exactly_zero(self):
        depth = np.full((8, 8), 2.5)
        depth[3, 4] = np.nan
        breakdown, field = loss_gradient(prepare_inputs(self.bundle, 'S'), depth)
        self.assertEqual(field.grad[3, 4], 0.0)
        self.assertFalse(field.mask[3, 4])
        # these columns project outside the right image
        outside = ~breakdown.valid['stereo'] & ~breakdown.pol_valid
        self.assertTrue(outside.any())
        np.testing.assert_array_equal(field.grad[outside], 0.0)

    def test_correlation_gradient_is_periodic(self):
        inputs = prepare_inputs(self.bundle, 'T')
        wrap = ItofConfig.from_settings().unambiguous_range
        d_corr = inputs.corr_depth * 1.01
        _, near = loss_gradient(inputs, self.bundle.gt_depth, d_corr, wrt='corr', term='corr')
        _, far = loss_gradient(inputs, self.bundle.gt_depth, d_corr + wrap, wrt='corr', term='corr')
        self.assertEqual(near.wrt, 'corr')
        self.assertTrue(np.abs(near.grad).max() > 0)
        np.testing.assert_allclose(near.grad, far.grad, atol=1e-9 * np.abs(near.grad).max())

    def test_contributions_sum_to_total(self):
        inputs = prepare_inputs(self.bundle, 'STL')
        d_pol, d_corr = check_point(self.bundle, inputs, seed=3)
        evaluation = evaluate(inputs, d_pol, d_corr)
        parts = term_gradients(inputs, evaluation)
        g_pol, g_corr = backward(inputs, evaluation)
        summed_pol = sum(p for p, _ in parts.values() if p is not None)
        summed_corr = sum(c for _, c in parts.values() if c is not None)
        np.testing.assert_allclose(g_pol, summed_pol, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(g_corr, summed_corr, rtol=1e-12, atol=1e-15)
        self.assertIn('corr', parts)

    def test_corrupt_flag_scales_the_gradient(self):
        inputs = prepare_inputs(self.bundle, 'S')
        _, clean = loss_gradient(inputs, self.bundle.gt_depth)
        with corrupted():
            _, scaled = loss_gradient(inputs, self.bundle.gt_depth)
        np.testing.assert_allclose(scaled.grad, 1.1 * clean.grad, rtol=1e-12)

    def test_non_finite_gradient_names_the_pixel(self):
        inputs = prepare_inputs(self.bundle, 'S')
        term = inputs.terms['stereo']
        original = term.backward

        def poisoned(result, g_map):
            g_pol, g_corr = original(result, g_map)
            g_pol = g_pol.copy()
            g_pol[2, 5] = np.nan
            return g_pol, g_corr

        depth = DepthField(np.full((8, 8), 2.0))
        with mock.patch.object(term, 'backward', side_effect=poisoned):
            with self.assertRaises(NumericError) as ctx:
                loss_gradient(inputs, depth, term='stereo')
        self.assertEqual(tuple(ctx.exception.pixel), (2, 5))

    def test_correlation_needs_itof(self):
        with self.assertRaises(ArgError):
            loss_gradient(prepare_inputs(self.bundle, 'S'), self.bundle.gt_depth, wrt='corr')
