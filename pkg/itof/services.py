"""
Indirect time-of-flight: depth to four-bucket correlation and back.

Bucket k samples alpha * cos(k pi/2 + phi) + beta, where the phase
phi = 4 pi f d / c wraps every c / (2 f) metres.
"""
from dataclasses import dataclass, replace

import numpy as np

from core.conf import get_setting
from core.exceptions import ArgError
from imaging.containers import CorrelationImage

BUCKET_OFFSETS = (0.0, np.pi / 2, np.pi, 3 * np.pi / 2)


@dataclass(frozen=True)
class ItofConfig:
    modulation_frequency: float = 25e6
    speed_of_light: float = 299792458.0
    amplitude_epsilon: float = 1e-9

    def __post_init__(self):
        if not self.modulation_frequency > 0:
            raise ArgError('modulation frequency must be positive')
        if not self.speed_of_light > 0:
            raise ArgError('speed of light must be positive')

    @classmethod
    def from_settings(cls, **overrides):
        config = cls(
            modulation_frequency=get_setting('MODULATION_FREQUENCY_HZ'),
            speed_of_light=get_setting('SPEED_OF_LIGHT'),
            amplitude_epsilon=get_setting('AMPLITUDE_EPSILON'),
        )
        return replace(config, **overrides)

    @property
    def unambiguous_range(self):
        """Depth after which the phase wraps, c / (2 f)."""
        return self.speed_of_light / (2.0 * self.modulation_frequency)

    @property
    def phase_per_metre(self):
        return 4.0 * np.pi * self.modulation_frequency / self.speed_of_light


@dataclass(frozen=True, eq=False)
class BucketRecovery:
    phase: np.ndarray
    amplitude: np.ndarray
    offset: np.ndarray
    valid: np.ndarray  # False where the amplitude is below epsilon


def _config(cfg):
    return ItofConfig.from_settings() if cfg is None else cfg


def phase_from_depth(depth, cfg=None):
    """Wrapped phase in [0, 2pi) for non-negative depth."""
    cfg = _config(cfg)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise ArgError('depth must be non-negative')
    fraction = np.mod(depth / cfg.unambiguous_range, 1.0)
    return 2.0 * np.pi * np.where(fraction >= 1.0, 0.0, fraction)


def depth_from_phase(phase, cfg=None):
    """Depth within [0, c/(2f)); the true depth may be any wrap of it."""
    cfg = _config(cfg)
    return np.asarray(phase, dtype=np.float64) / (2.0 * np.pi) * cfg.unambiguous_range


def bucket_basis(phase):
    """cos(k pi/2 + phase) for k = 0..3, shaped (4, ...)."""
    c, s = np.cos(phase), np.sin(phase)
    return np.stack([c, -s, -c, s])


def bucket_basis_derivative(phase):
    """d/dphase of bucket_basis."""
    c, s = np.cos(phase), np.sin(phase)
    return np.stack([-s, -c, s, c])


def correlation_from_depth(depth_field, amplitude, offset, cfg=None):
    """
    Four correlation buckets of a depth field.

    Args:
        depth_field: DepthField
        amplitude: ImagePlane or (H, W) array, alpha >= 0
        offset: ImagePlane or (H, W) array, beta
        cfg: ItofConfig

    Returns:
        CorrelationImage; invalid depth pixels hold beta in every bucket
    """
    amplitude = np.asarray(getattr(amplitude, 'data', amplitude), dtype=np.float64).reshape(depth_field.shape)
    offset = np.asarray(getattr(offset, 'data', offset), dtype=np.float64).reshape(depth_field.shape)
    if np.any(amplitude < 0):
        raise ArgError('correlation amplitude must be non-negative')
    phase = phase_from_depth(depth_field.filled(0.0), cfg)
    alpha = np.where(depth_field.mask, amplitude, 0.0)
    return CorrelationImage(alpha * bucket_basis(phase) + offset)


def correlation_depth_vjp(depth, amplitude, grad_buckets, cfg=None):
    """Gradient of sum(grad_buckets * buckets) w.r.t. depth."""
    cfg = _config(cfg)
    phase = phase_from_depth(depth, cfg)
    d_buckets = amplitude * bucket_basis_derivative(phase) * cfg.phase_per_metre
    return np.sum(grad_buckets * d_buckets, axis=0)


def recover_from_buckets(corr, cfg=None):
    """
    Phase, amplitude and offset from four buckets.

    The amplitude is the quadrature form 0.5 * sqrt((c3 - c1)^2 + (c0 - c2)^2);
    pixels with amplitude below epsilon are flagged invalid.
    """
    cfg = _config(cfg)
    data = getattr(corr, 'data', corr)
    c0, c1, c2, c3 = data
    sin_part = c3 - c1
    cos_part = c0 - c2
    phase = np.mod(np.arctan2(sin_part, cos_part), 2.0 * np.pi)
    phase = np.where(phase >= 2.0 * np.pi, 0.0, phase)
    amplitude = 0.5 * np.sqrt(sin_part * sin_part + cos_part * cos_part)
    offset = 0.25 * (c0 + c1 + c2 + c3)
    valid = amplitude >= cfg.amplitude_epsilon
    return BucketRecovery(phase=phase, amplitude=amplitude, offset=offset, valid=valid)


def amplitude_printed(corr):
    """
    Amplitude with the (c1 - c0) term in place of (c0 - c2).

    Not consistent with the sinusoid model; kept to measure how far it
    drifts from the quadrature amplitude.
    """
    c0, c1, _, c3 = getattr(corr, 'data', corr)
    return 0.5 * np.sqrt((c3 - c1) ** 2 + (c1 - c0) ** 2)


def depth_from_correlation(corr, cfg=None):
    """Wrapped depth of every pixel plus the recovery it came from."""
    recovery = recover_from_buckets(corr, cfg)
    return depth_from_phase(recovery.phase, cfg), recovery
