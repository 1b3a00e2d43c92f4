from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ArgError, DivergedError, MissingModality, ParseError
from imaging.containers import DepthField, FrameBundle
from synth.services import desk_rig, read_scene, render_frame, render_surface

from .services import SolveConfig, evaluate, evaluate_ranges, parse_solve_text, recover_depth

FIXTURES = Path(__file__).resolve().parent.parent / 'synth' / 'fixtures'


class EvaluateTests(SimpleTestCase):
    def test_identical_depths(self):
        gt = DepthField(np.linspace(1.0, 5.0, 12).reshape(3, 4))
        report = evaluate(gt, gt)
        self.assertEqual(report.as_row()[:7], [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        self.assertEqual(report.count, 12)

    def test_hand_computed_example(self):
        report = evaluate(np.array([[1.0, 2.0, 4.0]]), np.array([[1.0, 2.0, 2.0]]))
        self.assertAlmostEqual(report.sq_rel, 2.0 / 3.0, places=4)
        self.assertAlmostEqual(report.rmse, 1.1547, places=4)
        self.assertAlmostEqual(report.a1, 2.0 / 3.0, places=12)
        self.assertAlmostEqual(report.abs_rel, 1.0 / 3.0, places=12)
        self.assertAlmostEqual(report.rmse_log, np.sqrt(np.log(2.0) ** 2 / 3.0), places=12)

    def test_delta_threshold_is_strict(self):
        gt = np.full((4, 4), 2.0)
        report = evaluate(gt * (1.25 + 1e-9), gt)
        self.assertEqual(report.a1, 0.0)
        self.assertEqual(report.a2, 1.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        gt = rng.uniform(1.0, 5.0, size=(5, 6))
        pred = gt * rng.uniform(0.7, 1.4, size=gt.shape)
        order = rng.permutation(gt.size)
        a = evaluate(pred, gt)
        b = evaluate(pred.ravel()[order].reshape(gt.shape), gt.ravel()[order].reshape(gt.shape))
        self.assertEqual((a.a1, a.a2, a.a3), (b.a1, b.a2, b.a3))
        self.assertAlmostEqual(a.rmse, b.rmse, places=12)

    def test_range_cap_crop_and_region(self):
        gt = np.array([[1.0, 2.0], [15.0, np.nan]])
        pred = np.array([[1.0, 3.0], [1.0, 2.0]])
        self.assertEqual(evaluate(pred, gt).count, 3)
        self.assertEqual(evaluate(pred, gt, max_range=10.0).count, 2)
        self.assertEqual(evaluate(pred, gt, region=[[True, False], [False, False]]).rmse, 0.0)
        ranges = evaluate_ranges(pred, gt)
        self.assertEqual(sorted(ranges), [10.0, 20.0])
        self.assertEqual(ranges[20.0].count, 3)
        big = np.full((10, 10), 2.0)
        self.assertEqual(evaluate(big, big, crop=2).count, 36)

    def test_empty_overlap(self):
        with self.assertRaises(ArgError):
            evaluate(np.full((2, 2), 1.0), np.full((2, 2), np.nan))
        with self.assertRaises(ArgError):
            evaluate(np.full((2, 2), 1.0), np.full((2, 2), 30.0), max_range=20.0)
        with self.assertRaises(ArgError):
            evaluate(np.ones((2, 2)), np.ones((2, 3)))


class SolveConfigTests(SimpleTestCase):
    def test_defaults_from_settings(self):
        cfg = SolveConfig.from_settings()
        self.assertEqual(cfg.iterations, 500)
        self.assertEqual(cfg.optimizer, 'momentum')
        self.assertEqual(cfg.depth_range, (0.1, 20.0))

    def test_option_line(self):
        cfg = parse_solve_text('iterations=20 optimizer=adaptive init=constant depth=2 sharpen=1', strategy='ST')
        self.assertEqual((cfg.iterations, cfg.optimizer, cfg.init), (20, 'adaptive', 'constant'))
        self.assertEqual(cfg.initial_depth, 2.0)
        self.assertTrue(cfg.sharpen)
        self.assertEqual(cfg.label, 'ST')
        self.assertFalse(parse_solve_text('').sharpen)

    def test_rejected_options(self):
        for text in ('iterations=0', 'step=-1', 'optimizer=newton', 'colour=red'):
            with self.assertRaises(ParseError):
                parse_solve_text(text)
        with self.assertRaises(ArgError):
            SolveConfig(strategy='X')
        with self.assertRaises(ArgError):
            SolveConfig(step=0.0)


class RecoverDepthTests(SimpleTestCase):
    def setUp(self):
        self.plane = read_scene(FIXTURES / 'plane.scene')

    def test_ground_truth_is_a_fixpoint(self):
        bundle = render_frame(self.plane, desk_rig(32))
        cfg = SolveConfig(strategy='S', iterations=30, init='noisy_gt', init_noise=0.0)
        depth, report = recover_depth(bundle, cfg=cfg)
        self.assertLess(report.history.max(), 1e-3)
        np.testing.assert_allclose(depth.depth, bundle.gt_depth.depth, atol=1e-3)

    def test_history_and_determinism(self):
        bundle = render_frame(self.plane, desk_rig(16))
        cfg = SolveConfig(strategy='ST', iterations=12, optimizer='plain')
        first, report = recover_depth(bundle, cfg=cfg)
        second, again = recover_depth(bundle, cfg=cfg)
        self.assertEqual(report.iterations, 12)
        np.testing.assert_array_equal(report.history, again.history)
        np.testing.assert_array_equal(first.depth, second.depth)
        self.assertIsNotNone(report.corr_depth)
        self.assertIsNotNone(report.metrics)

    def test_threads_do_not_change_the_result(self):
        bundle = render_frame(self.plane, desk_rig(16))
        cfg = SolveConfig(strategy='STL', iterations=8, optimizer='momentum')
        single, report = recover_depth(bundle, cfg=cfg, threads=1)
        pooled, again = recover_depth(bundle, cfg=cfg, threads=4)
        np.testing.assert_array_equal(single.depth, pooled.depth)
        np.testing.assert_array_equal(report.history, again.history)

    def test_stereo_recovers_the_textured_plane(self):
        bundle = render_frame(self.plane, desk_rig(64))
        cfg = SolveConfig(strategy='S', iterations=500, optimizer='adaptive', init='constant', initial_depth=3.0)
        depth, report = recover_depth(bundle, cfg=cfg)
        before = evaluate(np.full((64, 64), 3.0), bundle.gt_depth, crop=4).rmse
        after = evaluate(depth, bundle.gt_depth, crop=4).rmse
        self.assertLessEqual(after, 0.1 * before)
        self.assertLess(report.final_loss, report.history[0])

    def test_each_added_sensor_helps_on_the_textureless_patch(self):
        scene = read_scene(FIXTURES / 'patch.scene')
        rig = desk_rig(32)
        bundle = render_frame(scene, rig)
        _, index, _ = render_surface(scene, rig.camera('pol_left'))
        patch = index == 1
        self.assertTrue(patch.any())
        errors = {}
        for strategy in ('S', 'ST', 'STL'):
            cfg = SolveConfig(strategy=strategy, iterations=150, optimizer='adaptive', seed=5)
            depth, _ = recover_depth(bundle, cfg=cfg)
            errors[strategy] = evaluate(depth, bundle.gt_depth, region=patch).rmse
        self.assertLess(errors['ST'], errors['S'])
        self.assertLess(errors['STL'], errors['ST'])

    def test_missing_modality(self):
        bundle = render_frame(self.plane, desk_rig(16))
        partial = FrameBundle(pol_left=bundle.pol_left, rig=bundle.rig, pol_right=bundle.pol_right)
        with self.assertRaises(MissingModality):
            recover_depth(partial, cfg=SolveConfig(strategy='ST', iterations=1))

    def test_divergence_is_reported(self):
        bundle = render_frame(self.plane, desk_rig(16))
        cfg = SolveConfig(strategy='S', iterations=5, init='constant', divergence_limit=1e-12)
        with self.assertRaises(DivergedError):
            recover_depth(bundle, cfg=cfg)

    def test_sharpening_keeps_the_grid(self):
        bundle = render_frame(self.plane, desk_rig(16))
        cfg = SolveConfig(strategy='S', iterations=3, sharpen=True)
        depth, _ = recover_depth(bundle, cfg=cfg)
        self.assertEqual(depth.shape, (16, 16))
        self.assertTrue(depth.mask.all())
