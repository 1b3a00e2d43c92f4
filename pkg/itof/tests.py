import numpy as np
from django.test import SimpleTestCase, override_settings

from core.exceptions import ArgError
from imaging.containers import DepthField

from .services import (
    ItofConfig,
    amplitude_printed,
    correlation_depth_vjp,
    correlation_from_depth,
    depth_from_correlation,
    depth_from_phase,
    phase_from_depth,
    recover_from_buckets,
)

CFG = ItofConfig(25e6, 299792458.0, 1e-9)


class PhaseTests(SimpleTestCase):
    def test_zero_depth(self):
        self.assertEqual(float(phase_from_depth(0.0, CFG)), 0.0)

    def test_quarter_wavelength(self):
        self.assertAlmostEqual(float(phase_from_depth(299792458.0 / (4 * 25e6), CFG)), np.pi, places=12)
        self.assertAlmostEqual(float(depth_from_phase(np.pi, CFG)), 2.99792458, places=8)

    def test_wraps_at_unambiguous_range(self):
        self.assertAlmostEqual(CFG.unambiguous_range, 5.99584916, places=8)
        self.assertEqual(float(phase_from_depth(CFG.unambiguous_range, CFG)), 0.0)

    def test_phase_depth_roundtrip(self):
        phase = np.random.default_rng(0).uniform(0, 2 * np.pi, size=1000)
        np.testing.assert_allclose(phase_from_depth(depth_from_phase(phase, CFG), CFG), phase, atol=1e-12)

    def test_negative_depth(self):
        with self.assertRaises(ArgError):
            phase_from_depth(-0.1, CFG)

    @override_settings(DEPTHKIT={'MODULATION_FREQUENCY_HZ': 50e6, 'SPEED_OF_LIGHT': 3e8, 'AMPLITUDE_EPSILON': 1e-9})
    def test_config_from_settings(self):
        cfg = ItofConfig.from_settings()
        self.assertEqual(cfg.unambiguous_range, 3.0)
        self.assertEqual(ItofConfig.from_settings(modulation_frequency=25e6).unambiguous_range, 6.0)


class CorrelationTests(SimpleTestCase):
    def test_zero_amplitude(self):
        corr = correlation_from_depth(DepthField(np.full((2, 2), 1.3)), np.zeros((2, 2)), np.full((2, 2), 4.0), CFG)
        np.testing.assert_array_equal(corr.data, 4.0)

    def test_zero_phase_buckets(self):
        corr = correlation_from_depth(DepthField(np.full((1, 1), CFG.unambiguous_range)), np.full((1, 1), 2.0), np.full((1, 1), 5.0), CFG)
        np.testing.assert_allclose(corr.data[:, 0, 0], [7.0, 5.0, 3.0, 5.0], atol=1e-12)

    def test_matches_time_domain_correlation(self):
        rng = np.random.default_rng(1)
        periods, samples = 10000, 64
        t = np.arange(periods * samples) / samples
        for _ in range(3):
            alpha, beta, depth = rng.uniform(0.1, 2.0), rng.uniform(0, 3), rng.uniform(0, 5.9)
            phi = float(phase_from_depth(depth, CFG))
            corr = correlation_from_depth(DepthField(np.full((1, 1), depth)), np.full((1, 1), alpha), np.full((1, 1), beta), CFG)
            # received signal delayed by phi, correlated as (1/T) int f(t - x) g(t) dt
            g = 1 + np.cos(2 * np.pi * t)
            for k in range(4):
                x = k / 4.0
                f = 2 * alpha * np.cos(2 * np.pi * (t - x) - phi) + beta
                value = np.mean(f * g)
                self.assertAlmostEqual(corr.data[k, 0, 0], value, delta=1e-4 * alpha)

    def test_wrapping_invariance(self):
        rng = np.random.default_rng(2)
        depth = rng.uniform(0.1, 5.0, size=(6, 6))
        amp, off = rng.uniform(0.5, 2, size=(2, 6, 6))
        base = correlation_from_depth(DepthField(depth), amp, off, CFG)
        for k in (1, 2, 3):
            wrapped = correlation_from_depth(DepthField(depth + k * CFG.unambiguous_range), amp, off, CFG)
            np.testing.assert_allclose(wrapped.data, base.data, atol=1e-9)


class RecoveryTests(SimpleTestCase):
    def test_canonical_buckets(self):
        corr = np.array([3.5, 2.0, 0.5, 2.0]).reshape(4, 1, 1)
        rec = recover_from_buckets(corr, CFG)
        self.assertEqual(float(rec.phase[0, 0]), 0.0)
        self.assertEqual(float(rec.amplitude[0, 0]), 1.5)
        self.assertEqual(float(rec.offset[0, 0]), 2.0)

    def test_degenerate_buckets(self):
        rec = recover_from_buckets(np.full((4, 2, 2), 3.0), CFG)
        self.assertFalse(rec.valid.any())
        np.testing.assert_array_equal(rec.offset, 3.0)

    def test_roundtrip(self):
        rng = np.random.default_rng(3)
        n = 10000
        depth = rng.uniform(0.0, 5.9, size=(1, n))
        alpha = rng.uniform(1e-3, 10, size=(1, n))
        beta = rng.uniform(0, 10, size=(1, n))
        corr = correlation_from_depth(DepthField(depth), alpha, beta, CFG)
        rec = recover_from_buckets(corr, CFG)
        phase = phase_from_depth(depth, CFG)
        diff = np.angle(np.exp(1j * (rec.phase - phase)))
        np.testing.assert_allclose(diff, 0.0, atol=1e-9)
        np.testing.assert_allclose(rec.amplitude, alpha, atol=1e-9)
        np.testing.assert_allclose(rec.offset, beta, atol=1e-9)
        self.assertTrue(rec.valid.all())

    def test_offset_is_bucket_mean(self):
        corr = np.random.default_rng(4).normal(size=(4, 5, 5))
        np.testing.assert_allclose(recover_from_buckets(corr, CFG).offset, corr.mean(axis=0), atol=1e-15)

    def test_printed_amplitude_residual(self):
        rng = np.random.default_rng(5)
        depth = rng.uniform(0.1, 5.9, size=(50, 50))
        alpha = np.ones((50, 50))
        corr = correlation_from_depth(DepthField(depth), alpha, np.zeros((50, 50)), CFG)
        residual = np.abs(amplitude_printed(corr) - alpha)
        self.assertGreater(residual.max(), 0.1)
        np.testing.assert_allclose(recover_from_buckets(corr, CFG).amplitude, alpha, atol=1e-12)

    def test_depth_from_correlation(self):
        depth = np.array([[0.5, 2.0, 5.5], [1.0, 3.0, 6.5]])
        corr = correlation_from_depth(DepthField(depth), np.ones(depth.shape), np.full(depth.shape, 2.0), CFG)
        recovered, rec = depth_from_correlation(corr, CFG)
        expected = np.mod(depth, CFG.unambiguous_range)
        np.testing.assert_allclose(recovered, expected, atol=1e-9)
        np.testing.assert_allclose(rec.offset, 2.0, atol=1e-12)


class GradientTests(SimpleTestCase):
    def test_depth_vjp(self):
        rng = np.random.default_rng(6)
        depth = rng.uniform(0.5, 4.0, size=(3, 4))
        amp = rng.uniform(0.5, 2.0, size=(3, 4))
        probe = rng.normal(size=(4, 3, 4))
        grad = correlation_depth_vjp(depth, amp, probe, CFG)
        eps = 1e-6

        def objective(d):
            return float(np.sum(probe * correlation_from_depth(DepthField(d), amp, np.zeros((3, 4)), CFG).data))

        step = np.zeros_like(depth)
        step[1, 2] = eps
        fd = (objective(depth + step) - objective(depth - step)) / (2 * eps)
        self.assertAlmostEqual(grad[1, 2], fd, delta=1e-5 * max(1.0, abs(fd)))

    def test_gradient_is_periodic(self):
        depth = np.full((2, 2), 1.7)
        amp = np.ones((2, 2))
        probe = np.random.default_rng(7).normal(size=(4, 2, 2))
        a = correlation_depth_vjp(depth, amp, probe, CFG)
        b = correlation_depth_vjp(depth + CFG.unambiguous_range, amp, probe, CFG)
        np.testing.assert_allclose(a, b, atol=1e-9)
