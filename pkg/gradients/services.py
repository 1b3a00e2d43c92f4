"""
Adjoint gradients of the loss w.r.t. the polarisation-grid depth (D_pol) or
the i-ToF-grid depth (D_corr), and a per-pixel finite-difference check.

The backward pass mirrors losses.services.evaluate: the gradient of the
pointwise min flows into the selected source only, the structured-light
hint contributes its sign where it is active, and the displacement-field
term is piecewise constant in depth.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.conf import get_setting
from core.exceptions import ArgError, NumericError
from losses.services import PHOTOMETRIC_SOURCES, evaluate

logger = logging.getLogger(__name__)

WRT = ('pol', 'corr')

TERMS = ('total',) + PHOTOMETRIC_SOURCES + ('corr', 'hint')

MAX_CHECK_PIXELS = 32 * 32

CORRUPTION_FACTOR = 1.1


@dataclass(frozen=True, eq=False)
class GradientField:
    """dL/dd per pixel of the depth it was taken against, in 1/m."""

    grad: np.ndarray
    wrt: str
    mask: np.ndarray

    @property
    def shape(self):
        return self.grad.shape


@dataclass(frozen=True)
class GradientCheckReport:
    wrt: str
    term: str
    eps: float
    tol: float
    max_rel_err: float
    worst_pixel: Optional[tuple]
    checked: int
    skipped: int

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def _check_wrt(inputs, wrt):
    if wrt not in WRT:
        raise ArgError(f'gradient must be taken w.r.t. one of {WRT}, got {wrt!r}')
    if wrt == 'corr' and 'T' not in inputs.strategy:
        raise ArgError('the i-ToF depth only enters the loss when T is enabled')


def _check_term(evaluation, term):
    if term not in TERMS:
        raise ArgError(f'unknown loss term {term!r}')
    if term in PHOTOMETRIC_SOURCES + ('corr',) and term not in evaluation.results:
        raise ArgError(f'term {term!r} is not enabled by this strategy')
    if term == 'hint' and 'struct' not in evaluation.results:
        raise ArgError('the hint term needs structured light')


def term_value(evaluation, term='total'):
    _check_term(evaluation, term)
    return evaluation.breakdown.scalars[term]


def _accumulate(total, part):
    if part is None:
        return total
    return part if total is None else total + part


def term_gradients(inputs, evaluation):
    """
    Contribution of every part of the total to (grad_pol, grad_corr).

    Keys are the photometric sources, 'hint' and 'corr'; summing the values
    gives the gradient of the scalar total.
    """
    valid = evaluation.pol_valid
    count = max(int(np.count_nonzero(valid)), 1)
    parts = {}
    for name in PHOTOMETRIC_SOURCES:
        if name not in evaluation.results:
            continue
        chosen = evaluation.selection == PHOTOMETRIC_SOURCES.index(name)
        g_map = np.where(chosen, 1.0 / count, 0.0)
        if not g_map.any():
            continue
        parts[name] = inputs.terms[name].backward(evaluation.results[name], g_map)
    if evaluation.hint_sign is not None:
        active = evaluation.selection == PHOTOMETRIC_SOURCES.index('struct')
        parts['hint'] = (np.where(active, evaluation.hint_sign / count, 0.0), None)
    if 'corr' in evaluation.results:
        result = evaluation.results['corr']
        corr_count = max(int(np.count_nonzero(result.valid)), 1)
        g_map = np.where(result.valid, 1.0 / corr_count, 0.0)
        parts['corr'] = inputs.terms['corr'].backward(result, g_map)
    return parts


def _single_term_gradient(inputs, evaluation, term):
    if term == 'hint':
        return term_gradients(inputs, evaluation).get('hint', (None, None))
    result = evaluation.results[term]
    count = max(int(np.count_nonzero(result.valid)), 1)
    g_map = np.where(result.valid, 1.0 / count, 0.0)
    return inputs.terms[term].backward(result, g_map)


def backward(inputs, evaluation, term='total'):
    """(grad_pol, grad_corr) of one term; None for a depth the term ignores."""
    _check_term(evaluation, term)
    if term != 'total':
        return _single_term_gradient(inputs, evaluation, term)
    g_pol, g_corr = None, None
    for part_pol, part_corr in term_gradients(inputs, evaluation).values():
        g_pol = _accumulate(g_pol, part_pol)
        g_corr = _accumulate(g_corr, part_corr)
    return g_pol, g_corr


def _finalise(grad, mask, wrt):
    grad = np.zeros(mask.shape) if grad is None else np.where(mask, grad, 0.0)
    bad = ~np.isfinite(grad)
    if bad.any():
        pixel = np.argwhere(bad)[0]
        raise NumericError(f'non-finite gradient w.r.t. {wrt} depth', pixel=pixel)
    if get_setting('CORRUPT_ADJOINT'):
        grad = grad * CORRUPTION_FACTOR
    return GradientField(grad=grad, wrt=wrt, mask=mask)


def gradient_fields(inputs, evaluation, term='total'):
    """GradientFields for both depths; the corr field is None without T."""
    g_pol, g_corr = backward(inputs, evaluation, term)
    pol = _finalise(g_pol, evaluation.depth_valid, 'pol')
    corr = None
    if evaluation.corr_valid is not None:
        corr = _finalise(g_corr, evaluation.corr_valid, 'corr')
    return pol, corr


def loss_gradient(inputs, d_pol, d_corr=None, wrt='pol', term='total'):
    """
    LossBreakdown and the gradient of one term w.r.t. the chosen depth.

    Raises:
        NumericError: a non-finite gradient, with the first offending pixel
    """
    _check_wrt(inputs, wrt)
    evaluation = evaluate(inputs, d_pol, d_corr)
    pol, corr = gradient_fields(inputs, evaluation, term)
    return evaluation.breakdown, pol if wrt == 'pol' else corr


def finite_diff_check(inputs, d_pol, d_corr=None, wrt='pol', eps=1e-4, tol=1e-3, term='total'):
    """
    Compare the adjoint with central differences pixel by pixel.

    A pixel is skipped when perturbing it by +/- eps changes the branch state
    of any non-smooth step (argmin, reflection choice, sampling cell, L1
    sign, clamp), since the loss has a kink between the two evaluations.
    """
    _check_wrt(inputs, wrt)
    if not eps > 0:
        raise ArgError(f'finite-difference step must be positive, got {eps}')
    if not tol > 0:
        raise ArgError(f'tolerance must be positive, got {tol}')
    base = evaluate(inputs, d_pol, d_corr)
    _check_term(base, term)
    pol, corr = gradient_fields(inputs, base, term)
    field = pol if wrt == 'pol' else corr
    depth = base.d_pol if wrt == 'pol' else base.d_corr
    if depth.size > MAX_CHECK_PIXELS:
        raise ArgError(f'finite-difference check is limited to {MAX_CHECK_PIXELS} pixels, got {depth.size}')
    signature = base.signature()

    def value_at(index, delta):
        moved = depth.copy()
        moved[index] += delta
        if wrt == 'pol':
            evaluation = evaluate(inputs, np.where(base.depth_valid, moved, np.nan), _masked(base.d_corr, base.corr_valid))
        else:
            evaluation = evaluate(inputs, np.where(base.depth_valid, base.d_pol, np.nan), np.where(base.corr_valid, moved, np.nan))
        return term_value(evaluation, term), evaluation.signature()

    worst, worst_pixel, checked, skipped = 0.0, None, 0, 0
    for index in zip(*np.nonzero(field.mask)):
        plus, sig_plus = value_at(index, eps)
        minus, sig_minus = value_at(index, -eps)
        if sig_plus != signature or sig_minus != signature:
            skipped += 1
            logger.debug('Skipping pixel %s: branch change within +/- %g', index, eps)
            continue
        numeric = (plus - minus) / (2.0 * eps)
        analytic = field.grad[index]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        checked += 1
        if rel > worst or worst_pixel is None:
            worst, worst_pixel = max(rel, worst), tuple(int(i) for i in index)
    report = GradientCheckReport(
        wrt=wrt, term=term, eps=eps, tol=tol, max_rel_err=float(worst),
        worst_pixel=worst_pixel, checked=checked, skipped=skipped,
    )
    logger.info(
        'Gradient check (%s, %s): max rel err %.3g at %s, %d checked, %d skipped',
        wrt, term, report.max_rel_err, worst_pixel, checked, skipped,
    )
    return report


def _masked(depth, valid):
    if depth is None:
        return None
    return np.where(valid, depth, np.nan)


def check_point(bundle, inputs, seed=0, scale=0.02):
    """
    A reproducible evaluation point near the truth: the ground-truth depth
    (or the constant initial depth) and the recovered i-ToF depth, each
    scaled by 1 + scale * N(0, 1).
    """
    rng = np.random.default_rng(seed)
    if bundle.gt_depth is not None:
        base = bundle.gt_depth.filled(get_setting('SOLVER_INITIAL_DEPTH_M'))
    else:
        base = np.full(inputs.pol_shape, get_setting('SOLVER_INITIAL_DEPTH_M'))
    d_pol = base * (1.0 + scale * rng.standard_normal(base.shape))
    d_corr = None
    if inputs.corr_depth is not None:
        d_corr = inputs.corr_depth * (1.0 + scale * rng.standard_normal(inputs.corr_depth.shape))
    return d_pol, d_corr
