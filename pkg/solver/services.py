"""
Per-frame depth recovery by first-order descent on the total loss, and
depth evaluation metrics.

Depth is optimised through its logarithm so it stays positive; after every
step it is clamped to the configured depth range.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from core.conf import get_setting
from core.exceptions import ArgError, DivergedError
from geometry.services import bind_record_form
from gradients.services import gradient_fields
from imaging.containers import DepthField
from losses.services import (
    apply_displacement_field,
    df_ground_truth,
    parse_strategy,
    prepare_inputs,
    strategy_label,
)
from losses.services import evaluate as evaluate_loss
from warp.services import align_depth

logger = logging.getLogger(__name__)

OPTIMIZERS = ('plain', 'momentum', 'adaptive')

INITS = ('constant', 'noisy_gt', 'from_corr', 'auto')

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

DELTA_BASE = 1.25

RANGE_CAPS_M = (10.0, 20.0)


@dataclass(frozen=True)
class SolveConfig:
    strategy: frozenset = frozenset('S')
    iterations: int = 500
    step: float = 1e-2
    optimizer: str = 'momentum'
    momentum: float = 0.9
    decay: float = 0.995
    init: str = 'auto'
    initial_depth: float = 3.0
    init_noise: float = 0.05
    seed: int = 0
    depth_range: tuple = (0.1, 20.0)
    divergence_limit: float = 1e6
    sharpen: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'strategy', parse_strategy(self.strategy))
        if self.iterations < 1:
            raise ArgError(f'iterations must be at least 1, got {self.iterations}')
        if not self.step > 0:
            raise ArgError(f'step size must be positive, got {self.step}')
        if self.optimizer not in OPTIMIZERS:
            raise ArgError(f'unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}')
        if self.init not in INITS:
            raise ArgError(f'unknown initialisation {self.init!r}, expected one of {INITS}')
        if not 0 <= self.momentum < 1:
            raise ArgError('momentum must lie in [0, 1)')
        if not 0 < self.decay <= 1:
            raise ArgError('step decay must lie in (0, 1]')
        low, high = self.depth_range
        if not 0 < low < high:
            raise ArgError(f'invalid depth range {self.depth_range}')
        if not low <= self.initial_depth <= high:
            raise ArgError('initial depth lies outside the depth range')

    @classmethod
    def from_settings(cls, **overrides):
        config = cls(
            iterations=get_setting('SOLVER_ITERATIONS'),
            step=get_setting('SOLVER_STEP'),
            optimizer=get_setting('SOLVER_OPTIMIZER'),
            momentum=get_setting('SOLVER_MOMENTUM'),
            decay=get_setting('SOLVER_DECAY'),
            init=get_setting('SOLVER_INIT'),
            initial_depth=get_setting('SOLVER_INITIAL_DEPTH_M'),
            depth_range=tuple(get_setting('DEPTH_RANGE_M')),
            divergence_limit=get_setting('DIVERGENCE_LIMIT'),
        )
        return replace(config, **overrides)

    @property
    def label(self):
        return strategy_label(self.strategy)


def parse_solve_text(text, **overrides):
    """SolveConfig from settings, then a `key=value` option line, then keyword overrides."""
    from .forms import SolveOptionsForm

    options = bind_record_form(SolveOptionsForm, text, 1).to_overrides()
    options.update(overrides)
    return SolveConfig.from_settings(**options)


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    count: int

    FIELDS = ('abs_rel', 'sq_rel', 'rmse', 'rmse_log', 'a1', 'a2', 'a3', 'count')

    def as_row(self):
        return [getattr(self, name) for name in self.FIELDS]


@dataclass(eq=False)
class SolveReport:
    strategy: str
    optimizer: str
    history: np.ndarray
    breakdown: object
    wall_time: float
    metrics: Optional[MetricsReport] = None
    range_metrics: dict = field(default_factory=dict)
    corr_depth: Optional[np.ndarray] = None

    @property
    def iterations(self):
        return len(self.history)

    @property
    def final_loss(self):
        return self.breakdown.total


def _depth_and_mask(depth):
    if isinstance(depth, DepthField):
        return depth.filled(np.nan), depth.mask
    array = np.asarray(depth, dtype=np.float64)
    return array, np.isfinite(array) & (array > 0)


def evaluate(pred, gt, max_range=None, crop=0, region=None):
    """
    Standard depth metrics over pixels valid in both maps.

    Pixels whose ground truth exceeds max_range, the crop-pixel border and
    pixels outside region are excluded.

    Raises:
        ArgError: shapes differ, or no pixel is left to evaluate
    """
    pred, pred_valid = _depth_and_mask(pred)
    gt, gt_valid = _depth_and_mask(gt)
    if pred.shape != gt.shape:
        raise ArgError(f'prediction {pred.shape} and ground truth {gt.shape} differ in shape')
    valid = pred_valid & gt_valid
    if max_range is not None:
        valid &= np.where(gt_valid, gt, np.inf) <= max_range
    if crop:
        border = np.zeros_like(valid)
        border[crop:-crop, crop:-crop] = True
        valid &= border
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != valid.shape:
            raise ArgError('evaluation region does not match the depth shape')
        valid &= region
    if not valid.any():
        raise ArgError('no pixel is valid in both prediction and ground truth')

    d, g = pred[valid], gt[valid]
    thresh = np.maximum(g / d, d / g)
    a1 = (thresh < DELTA_BASE).mean()
    a2 = (thresh < DELTA_BASE ** 2).mean()
    a3 = (thresh < DELTA_BASE ** 3).mean()
    rmse = np.sqrt(np.mean((g - d) ** 2))
    rmse_log = np.sqrt(np.mean((np.log(g) - np.log(d)) ** 2))
    abs_rel = np.mean(np.abs(g - d) / g)
    sq_rel = np.mean((g - d) ** 2 / g)
    return MetricsReport(
        abs_rel=float(abs_rel), sq_rel=float(sq_rel), rmse=float(rmse), rmse_log=float(rmse_log),
        a1=float(a1), a2=float(a2), a3=float(a3), count=int(valid.sum()),
    )


def evaluate_ranges(pred, gt, caps=RANGE_CAPS_M, crop=0, region=None):
    """Metrics capped at each range; caps with no pixel left are omitted."""
    reports = {}
    for cap in caps:
        try:
            reports[cap] = evaluate(pred, gt, max_range=cap, crop=crop, region=region)
        except ArgError:
            logger.debug('No pixel within %g m to evaluate', cap)
    return reports


class _Optimizer:
    """One update rule acting on a log-depth array."""

    def __init__(self, cfg, shape):
        self.cfg = cfg
        self.velocity = np.zeros(shape)
        self.second = np.zeros(shape)
        self.count = 0

    def direction(self, grad):
        self.count += 1
        if self.cfg.optimizer == 'plain':
            return grad
        if self.cfg.optimizer == 'momentum':
            self.velocity = self.cfg.momentum * self.velocity + grad
            return self.velocity
        self.velocity = ADAM_BETA1 * self.velocity + (1 - ADAM_BETA1) * grad
        self.second = ADAM_BETA2 * self.second + (1 - ADAM_BETA2) * grad * grad
        m_hat = self.velocity / (1 - ADAM_BETA1 ** self.count)
        v_hat = self.second / (1 - ADAM_BETA2 ** self.count)
        return m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)


def initial_depth(bundle, inputs, cfg):
    """Starting D_pol for the configured initialisation."""
    shape = inputs.pol_shape
    init = cfg.init
    if init == 'auto':
        init = 'from_corr' if 'T' in cfg.strategy else 'constant'
    if init == 'constant':
        return np.full(shape, cfg.initial_depth)
    if init == 'noisy_gt':
        if bundle.gt_depth is None:
            raise ArgError('noisy_gt initialisation needs a ground-truth depth')
        rng = np.random.default_rng(cfg.seed)
        base = bundle.gt_depth.filled(cfg.initial_depth)
        return base * (1.0 + cfg.init_noise * rng.standard_normal(shape))
    if inputs.corr_depth is None:
        raise ArgError('from_corr initialisation needs the i-ToF stream')
    rig = bundle.rig
    recovered = DepthField(inputs.corr_depth, inputs.terms['corr'].valid)
    aligned = align_depth(
        recovered, rig.camera('itof'), rig.camera('pol_left'),
        rig.transform('itof', 'pol_left'), fill_radius=None,
    )
    if not aligned.mask.any():
        return np.full(shape, cfg.initial_depth)
    return aligned.filled(cfg.initial_depth)


def _log_clamped(depth, cfg):
    low, high = cfg.depth_range
    return np.log(np.clip(depth, low, high))


def _check_loss(value, iteration, cfg):
    if not np.isfinite(value) or value > cfg.divergence_limit:
        raise DivergedError(f'loss reached {value:.6g} at iteration {iteration}')


def recover_depth(bundle, rig=None, cfg=None, temporal_frames=(), loss_cfg=None, threads=None):
    """
    Recover D_pol (and D_corr when T is enabled) for one bundle.

    Returns (DepthField on the left polarisation grid, SolveReport). The
    report's history holds the total loss before each of the iterations.
    threads spreads the loss sources over workers and never changes the
    result.

    Raises:
        MissingModality: the strategy needs a stream the bundle lacks
        DivergedError: the loss became non-finite or exceeded the limit
    """
    cfg = SolveConfig.from_settings() if cfg is None else cfg
    if rig is not None and rig is not bundle.rig:
        bundle = replace(bundle, rig=rig)
    started = time.perf_counter()
    inputs = prepare_inputs(bundle, cfg.strategy, loss_cfg, temporal_frames=temporal_frames, threads=threads)
    low, high = np.log(cfg.depth_range[0]), np.log(cfg.depth_range[1])

    x_pol = _log_clamped(initial_depth(bundle, inputs, cfg), cfg)
    x_corr = None
    corr_optimizer = None
    if inputs.corr_depth is not None:
        x_corr = _log_clamped(inputs.corr_depth, cfg)
        corr_optimizer = _Optimizer(cfg, x_corr.shape)
    pol_optimizer = _Optimizer(cfg, x_pol.shape)

    history = np.zeros(cfg.iterations)
    for iteration in range(cfg.iterations):
        d_pol = np.exp(x_pol)
        d_corr = None if x_corr is None else np.exp(x_corr)
        evaluation = evaluate_loss(inputs, d_pol, d_corr)
        total = evaluation.breakdown.total
        _check_loss(total, iteration, cfg)
        history[iteration] = total
        pol_field, corr_field = gradient_fields(inputs, evaluation)
        step = cfg.step * cfg.decay ** iteration
        # per-pixel scale: the loss is a mean over valid pixels
        grad = pol_field.grad * max(int(evaluation.pol_valid.sum()), 1) * d_pol
        x_pol = np.clip(x_pol - step * pol_optimizer.direction(grad), low, high)
        if corr_field is not None:
            grad = corr_field.grad * max(int(evaluation.corr_valid.sum()), 1) * d_corr
            x_corr = np.clip(x_corr - step * corr_optimizer.direction(grad), low, high)
        logger.debug('Iteration %d: loss %.6g', iteration, total)

    d_pol = np.exp(x_pol)
    d_corr = None if x_corr is None else np.exp(x_corr)
    final = evaluate_loss(inputs, d_pol, d_corr)
    _check_loss(final.breakdown.total, cfg.iterations, cfg)
    depth = DepthField(d_pol)
    if cfg.sharpen:
        depth = apply_displacement_field(depth, df_ground_truth(depth, inputs.cfg))

    metrics, range_metrics = None, {}
    if bundle.gt_depth is not None:
        try:
            metrics = evaluate(depth, bundle.gt_depth, max_range=cfg.depth_range[1])
        except ArgError:
            logger.warning('Recovered depth shares no valid pixel with the ground truth')
        range_metrics = evaluate_ranges(depth, bundle.gt_depth)
    report = SolveReport(
        strategy=cfg.label, optimizer=cfg.optimizer, history=history, breakdown=final.breakdown,
        wall_time=time.perf_counter() - started, metrics=metrics, range_metrics=range_metrics,
        corr_depth=d_corr,
    )
    logger.info(
        'Recovered depth with %s (%s) in %d iterations: loss %.6g -> %.6g, %.2fs',
        report.strategy, cfg.optimizer, cfg.iterations, history[0], report.final_loss, report.wall_time,
    )
    return depth, report
