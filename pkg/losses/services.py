"""
The training objective: every enabled photometric source is evaluated on the
left polarisation grid, combined by a pointwise min, and topped up with the
correlation term, the structured-light hint and the displacement-field term.

prepare_inputs does the per-bundle work once (normalisation, registration
of structured-light depth, constant maps). evaluate then only depends on the
two depth estimates, so the solver and the gradient check can call it many
times.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from core.conf import get_setting
from core.exceptions import ArgError, MissingModality
from core.parallel import map_items
from imaging.containers import DepthField, FrameBundle, PolarisationImage
from itof.services import ItofConfig, depth_from_correlation
from losses.photometric import photometric_forward
from losses.terms import ConstantTerm, CorrTerm, CorrToPolTerm, TemporalTerm, WarpTerm, fill_masked
from normals.services import camera_rays
from warp.services import align_depth, bilinear_forward, infinity_coords, reprojection_forward

logger = logging.getLogger(__name__)

STRATEGY_LETTERS = 'STLM'

# Pointwise-min candidates, in tie-break priority order.
PHOTOMETRIC_SOURCES = ('struct', 'mask', 'stereo', 'temporal', 'corr_to_pol')

LETTER_SOURCES = {
    'S': ('stereo', 'mask'),
    'T': ('corr', 'corr_to_pol'),
    'L': ('struct',),
    'M': ('temporal',),
}

STRUCT_FILL_RADIUS = 2.0


@dataclass(frozen=True)
class LossConfig:
    ssim_alpha: float = 0.85
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    normalisation_percentile: float = 99.0
    df_grad_threshold: float = 0.15
    df_search_radius: int = 8
    tie_tolerance: float = 1e-10
    amplitude_epsilon: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.ssim_alpha <= 1.0:
            raise ArgError(f'ssim alpha must lie in [0, 1], got {self.ssim_alpha}')
        if not self.df_grad_threshold > 0:
            raise ArgError('displacement threshold must be positive')
        if self.df_search_radius < 0:
            raise ArgError('displacement search radius must be non-negative')
        if not 0 < self.normalisation_percentile <= 100:
            raise ArgError('normalisation percentile must lie in (0, 100]')

    @classmethod
    def from_settings(cls, **overrides):
        config = cls(
            ssim_alpha=get_setting('SSIM_ALPHA'),
            ssim_c1=get_setting('SSIM_C1'),
            ssim_c2=get_setting('SSIM_C2'),
            normalisation_percentile=get_setting('NORMALISATION_PERCENTILE'),
            df_grad_threshold=get_setting('DF_GRAD_THRESHOLD'),
            df_search_radius=get_setting('DF_SEARCH_RADIUS'),
            tie_tolerance=get_setting('TIE_TOLERANCE'),
            amplitude_epsilon=get_setting('AMPLITUDE_EPSILON'),
        )
        return replace(config, **overrides)

    @property
    def ssim_params(self):
        return self.ssim_alpha, self.ssim_c1, self.ssim_c2


def _config(cfg):
    return LossConfig.from_settings() if cfg is None else cfg


def parse_strategy(text):
    """
    'S', 'TL', 'STLM', ... to a frozenset of letters.

    Each letter may appear once; an empty strategy is rejected.
    """
    if isinstance(text, (set, frozenset)):
        text = ''.join(sorted(text))
    text = str(text).strip()
    if not text:
        raise ArgError('strategy must enable at least one source')
    unknown = [letter for letter in text if letter not in STRATEGY_LETTERS]
    if unknown:
        raise ArgError(f'unknown strategy letter {unknown[0]!r}, expected some of {STRATEGY_LETTERS}')
    if len(set(text)) != len(text):
        raise ArgError(f'strategy {text!r} repeats a letter')
    return frozenset(text)


def strategy_label(strategy):
    return ''.join(letter for letter in STRATEGY_LETTERS if letter in strategy)


def strategy_sources(strategy):
    enabled = set()
    for letter in strategy:
        enabled.update(LETTER_SOURCES[letter])
    return tuple(name for name in PHOTOMETRIC_SOURCES + ('corr',) if name in enabled)


def normalisation_scale(values, percentile):
    """Percentile of the finite magnitudes; 1.0 when that is not positive."""
    values = np.abs(np.asarray(values, dtype=np.float64))
    values = values[np.isfinite(values)]
    if values.size == 0:
        return 1.0
    scale = float(np.percentile(values, percentile))
    return scale if scale > 0 else 1.0


def _intensity(image):
    data = np.asarray(getattr(image, 'data', image), dtype=np.float64)
    return data[None] if data.ndim == 2 else data


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Integer pixel offsets (dx, dy) shaped (2, H, W), plus unresolved pixels."""

    offsets: np.ndarray
    flagged: Optional[np.ndarray] = None

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.ndim != 3 or offsets.shape[0] != 2:
            raise ArgError(f'displacement field must be (2, H, W), got {offsets.shape}')
        flagged = np.zeros(offsets.shape[1:], dtype=bool) if self.flagged is None else np.asarray(self.flagged, dtype=bool)
        object.__setattr__(self, 'offsets', offsets)
        object.__setattr__(self, 'flagged', flagged)

    @property
    def shape(self):
        return self.offsets.shape[1:]

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros((2,) + tuple(shape)))


def strong_disparity(depth_field, threshold):
    """Pixels whose largest relative 4-neighbour depth difference exceeds threshold."""
    depth = depth_field.filled(np.nan)
    worst = np.zeros(depth.shape)
    with np.errstate(invalid='ignore'):
        for axis in (0, 1):
            diff = np.abs(np.diff(depth, axis=axis))
            forward = [slice(None), slice(None)]
            backward = [slice(None), slice(None)]
            forward[axis] = slice(0, -1)
            backward[axis] = slice(1, None)
            base_forward = depth[tuple(forward)]
            base_backward = depth[tuple(backward)]
            worst[tuple(forward)] = np.fmax(worst[tuple(forward)], diff / base_forward)
            worst[tuple(backward)] = np.fmax(worst[tuple(backward)], diff / base_backward)
    return np.nan_to_num(worst, nan=0.0) > threshold


def df_ground_truth(depth_field, cfg=None):
    """
    Displacement towards the nearest smooth pixel for every pixel on a depth
    discontinuity.

    Pixels whose nearest smooth neighbour is further than the search radius
    keep a zero offset and are flagged.
    """
    cfg = _config(cfg)
    strong = strong_disparity(depth_field, cfg.df_grad_threshold) & depth_field.mask
    offsets = np.zeros((2,) + depth_field.shape)
    flagged = np.zeros(depth_field.shape, dtype=bool)
    if not strong.any():
        return DisplacementField(offsets, flagged)
    # distance to the nearest pixel that is smooth and has valid depth
    blocked = strong | ~depth_field.mask
    if blocked.all():
        return DisplacementField(offsets, strong.copy())
    distance, (rows, cols) = ndimage.distance_transform_edt(blocked, return_indices=True)
    height, width = depth_field.shape
    r, c = np.mgrid[0:height, 0:width]
    reachable = strong & (distance <= cfg.df_search_radius)
    offsets[0] = np.where(reachable, cols - c, 0)
    offsets[1] = np.where(reachable, rows - r, 0)
    flagged = strong & ~reachable
    if flagged.any():
        logger.debug('%d discontinuity pixels have no smooth neighbour within %d px', flagged.sum(), cfg.df_search_radius)
    return DisplacementField(offsets, flagged)


def apply_displacement_field(depth_field, df):
    """d'(p) = d(p + df(p)), nearest pixel; offsets leaving the image are ignored."""
    if tuple(df.shape) != tuple(depth_field.shape):
        raise ArgError(f'displacement field {df.shape} does not match depth {depth_field.shape}')
    height, width = depth_field.shape
    r, c = np.mgrid[0:height, 0:width]
    tc = c + np.floor(df.offsets[0] + 0.5).astype(np.intp)
    tr = r + np.floor(df.offsets[1] + 0.5).astype(np.intp)
    inside = (tc >= 0) & (tc < width) & (tr >= 0) & (tr < height)
    tc = np.where(inside, tc, c)
    tr = np.where(inside, tr, r)
    return DepthField(depth_field.depth[tr, tc], depth_field.mask[tr, tc])


@dataclass(frozen=True, eq=False)
class TemporalFrame:
    """A neighbouring left-polarisation capture and the pose taking current-frame points into it."""

    pol: PolarisationImage
    transform: object


@dataclass(eq=False)
class LossInputs:
    strategy: frozenset
    sources: tuple
    terms: dict
    cfg: LossConfig
    itof_cfg: ItofConfig
    pol_shape: tuple
    corr_shape: Optional[tuple] = None
    struct_depth: Optional[DepthField] = None
    corr_depth: Optional[np.ndarray] = None
    candidate_df: Optional[DisplacementField] = None
    scales: dict = field(default_factory=dict)
    threads: Optional[int] = None


@dataclass(eq=False)
class LossBreakdown:
    """
    Per-source maps (NaN where a source is invalid), their scalar means, and
    the pointwise composition.

    total_map = min_map + hint_map + df_map on the polarisation grid; the
    scalar total adds the mean correlation term on the i-ToF grid.
    """

    sources: tuple
    maps: dict
    valid: dict
    scalars: dict
    min_map: np.ndarray
    hint_map: np.ndarray
    df_map: np.ndarray
    total_map: np.ndarray
    argmin: np.ndarray
    pol_valid: np.ndarray
    total: float
    specular: Optional[np.ndarray] = None

    def argmin_name(self, row, col):
        index = int(self.argmin[row, col])
        return None if index < 0 else PHOTOMETRIC_SOURCES[index]

    def scalar_rows(self):
        return [(name, self.scalars[name]) for name in self.scalars]


@dataclass(eq=False)
class LossEvaluation:
    breakdown: LossBreakdown
    results: dict
    d_pol: np.ndarray
    d_corr: Optional[np.ndarray]
    pol_valid: np.ndarray
    corr_valid: Optional[np.ndarray]
    selection: np.ndarray
    hint_sign: Optional[np.ndarray] = None
    df_target: Optional[np.ndarray] = None
    depth_valid: Optional[np.ndarray] = None

    def signature(self):
        """Branch state of every non-smooth step, for finite-difference checks."""
        parts = [self.selection.tobytes()]
        for extra in (self.hint_sign, self.df_target):
            if extra is not None:
                parts.append(extra.tobytes())
        parts.extend(result.signature for result in self.results.values())
        return b''.join(parts)


def _require(item, modality):
    if item is None:
        raise MissingModality(modality)
    return item


def prepare_inputs(bundle, strategy, cfg=None, itof_cfg=None, eta=None, temporal_frames=(), candidate_df=None,
                   threads=None):
    """
    Build the per-bundle loss terms for a strategy. evaluate spreads the
    sources over `threads` workers (settings default); the result does not
    depend on the count.

    Raises:
        MissingModality: the strategy needs a stream the bundle lacks
    """
    cfg = _config(cfg)
    itof_cfg = ItofConfig.from_settings(amplitude_epsilon=cfg.amplitude_epsilon) if itof_cfg is None else itof_cfg
    eta = get_setting('REFRACTIVE_INDEX') if eta is None else eta
    strategy = parse_strategy(strategy)
    rig = bundle.rig
    left = rig.camera('pol_left')
    pol_shape = (left.height, left.width)
    pol_rays = camera_rays(left.intrinsics, left.width, left.height)

    target_pol = bundle.pol_left.data
    scale = normalisation_scale(bundle.pol_left.unpolarised(), cfg.normalisation_percentile)
    target_pol = target_pol / scale
    target_un = bundle.pol_left.unpolarised() / scale
    terms = {}
    scales = {'pol': scale}
    inputs = LossInputs(
        strategy=strategy, sources=strategy_sources(strategy), terms=terms, cfg=cfg,
        itof_cfg=itof_cfg, pol_shape=pol_shape, candidate_df=candidate_df, scales=scales, threads=threads,
    )
    if candidate_df is not None and tuple(candidate_df.shape) != pol_shape:
        raise ArgError('candidate displacement field must live on the left polarisation grid')

    if 'S' in strategy or 'L' in strategy:
        right_image = _require(bundle.pol_right, 'pol_right')
        right = rig.camera('pol_right')
        right_un = right_image.unpolarised() / scale
        to_right = rig.transform('pol_left', 'pol_right')
        right_shape = (right.height, right.width)
        if 'S' in strategy:
            terms['stereo'] = WarpTerm(
                'stereo', target_un, right_un, pol_rays, right.intrinsics, to_right, right_shape, cfg,
            )
            flow = infinity_coords(left.intrinsics, right.intrinsics, to_right.rotation, pol_shape, right_shape)
            warped, _ = bilinear_forward(right_un, flow.coords, flow.mask)
            warped = fill_masked(warped, target_un, flow.mask)
            emap, _ = photometric_forward(target_un, warped, *cfg.ssim_params)
            terms['mask'] = ConstantTerm('mask', emap, flow.mask)
        if 'L' in strategy:
            struct_depth = _require(bundle.struct_depth, 'struct_depth')
            aligned = align_depth(
                struct_depth, rig.camera('structured_light'), left,
                rig.transform('structured_light', 'pol_left'), fill_radius=STRUCT_FILL_RADIUS,
            )
            rep = reprojection_forward(
                aligned.filled(1.0), pol_rays, right.intrinsics, to_right, right_shape, aligned.mask,
            )
            warped, _ = bilinear_forward(right_un, rep.coords, rep.mask)
            warped = fill_masked(warped, target_un, rep.mask)
            emap, _ = photometric_forward(target_un, warped, *cfg.ssim_params)
            terms['struct'] = ConstantTerm('struct', emap, rep.mask)
            inputs.struct_depth = aligned

    if 'M' in strategy:
        if not temporal_frames:
            raise MissingModality('temporal')
        frames = []
        for index, frame in enumerate(temporal_frames):
            if frame.pol.shape != bundle.pol_left.shape:
                raise ArgError(f'temporal frame {index} does not match the left polarisation image')
            frames.append(WarpTerm(
                f'temporal_{index}', target_un, frame.pol.unpolarised() / scale, pol_rays,
                left.intrinsics, frame.transform, pol_shape, cfg,
            ))
        terms['temporal'] = TemporalTerm(frames)

    if 'T' in strategy:
        corr = _require(bundle.corr, 'corr')
        itof = rig.camera('itof')
        corr_depth, recovery = depth_from_correlation(corr, itof_cfg)
        corr_scale = normalisation_scale(corr.data, cfg.normalisation_percentile)
        guide_scale = normalisation_scale(recovery.offset, cfg.normalisation_percentile)
        scales['corr'] = corr_scale
        corr_shape = (itof.height, itof.width)
        terms['corr'] = CorrTerm(
            corr.data / corr_scale, corr_scale, recovery.amplitude, recovery.offset,
            recovery.valid, itof_cfg, cfg,
        )
        terms['corr_to_pol'] = CorrToPolTerm(
            target_pol, target_un, pol_rays, recovery.offset / guide_scale,
            camera_rays(itof.intrinsics, itof.width, itof.height), itof.intrinsics,
            rig.transform('pol_left', 'itof'), corr_shape, eta, cfg,
        )
        inputs.corr_shape = corr_shape
        inputs.corr_depth = corr_depth
    return inputs


def _depth_array(depth, shape, name):
    if depth is None:
        return None, None
    if isinstance(depth, DepthField):
        array, valid = depth.filled(1.0), depth.mask
    else:
        array = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(array) & (array > 0)
        array = np.where(valid, array, 1.0)
    if array.shape != tuple(shape):
        raise ArgError(f'{name} depth is {array.shape}, expected {tuple(shape)}')
    return array, valid


def _masked_mean(values, mask):
    count = int(np.count_nonzero(mask))
    if count == 0:
        return 0.0
    return float(np.sum(values[mask]) / count)


def evaluate(inputs, d_pol, d_corr=None):
    """Evaluate every enabled term and compose them."""
    d_pol, pol_valid = _depth_array(d_pol, inputs.pol_shape, 'polarisation')
    corr_valid = None
    if 'T' in inputs.strategy:
        if d_corr is None:
            d_corr = inputs.corr_depth
        d_corr, corr_valid = _depth_array(d_corr, inputs.corr_shape, 'i-ToF')
    else:
        d_corr = None

    def forward(name):
        return inputs.terms[name].forward(d_pol, d_corr, pol_valid, corr_valid)

    results = dict(zip(inputs.sources, map_items(forward, inputs.sources, inputs.threads)))
    if 'mask' in results:
        results['mask'].valid = results['mask'].valid & results['stereo'].valid

    photometric = [name for name in PHOTOMETRIC_SOURCES if name in results]
    stack = np.stack([
        np.where(results[name].valid, results[name].map, np.inf) for name in photometric
    ])
    min_map = stack.min(axis=0)
    valid = np.isfinite(min_map) & pol_valid
    # first source in priority order within tolerance of the minimum
    within = stack <= min_map + inputs.cfg.tie_tolerance
    first = np.argmax(within, axis=0)
    selection = np.where(valid, np.array([PHOTOMETRIC_SOURCES.index(n) for n in photometric])[first], -1)
    min_map = np.where(valid, min_map, 0.0)

    hint_map = np.zeros(inputs.pol_shape)
    hint_sign = None
    if 'struct' in results:
        struct_index = PHOTOMETRIC_SOURCES.index('struct')
        residual = d_pol - inputs.struct_depth.filled(0.0)
        hint_sign = np.sign(residual).astype(np.int8)
        hint = np.abs(residual)
        hint_map = np.where(valid & (selection == struct_index), hint, 0.0)

    df_map = np.zeros(inputs.pol_shape)
    df_target = None
    if inputs.candidate_df is not None:
        target = df_ground_truth(DepthField(d_pol, pol_valid), inputs.cfg)
        df_target = target.offsets
        diff = inputs.candidate_df.offsets - target.offsets
        df_map = np.where(valid, np.sqrt(np.sum(diff * diff, axis=0)), 0.0)

    total_map = np.where(valid, min_map + hint_map + df_map, np.nan)
    scalars = {}
    maps = {}
    valids = {}
    for name, result in results.items():
        maps[name] = np.where(result.valid, result.map, np.nan)
        valids[name] = result.valid
        scalars[name] = _masked_mean(result.map, result.valid)
    scalars['hint'] = _masked_mean(hint_map, valid)
    scalars['df'] = _masked_mean(df_map, valid)
    scalars['min'] = _masked_mean(min_map, valid)
    if not valid.any():
        logger.warning('no pixel has a valid photometric source')
    total = scalars['min'] + scalars['hint'] + scalars['df']
    if 'corr' in results:
        total += scalars['corr']
    scalars['total'] = total

    specular = None
    if 'corr_to_pol' in results:
        specular = results['corr_to_pol'].state[-1] & results['corr_to_pol'].valid

    breakdown = LossBreakdown(
        sources=inputs.sources, maps=maps, valid=valids, scalars=scalars,
        min_map=np.where(valid, min_map, np.nan), hint_map=hint_map, df_map=df_map,
        total_map=total_map, argmin=selection.astype(np.int8), pol_valid=valid,
        total=float(total), specular=specular,
    )
    return LossEvaluation(
        breakdown=breakdown, results=results, d_pol=d_pol, d_corr=d_corr,
        pol_valid=valid, corr_valid=corr_valid, selection=selection,
        hint_sign=hint_sign, df_target=df_target, depth_valid=pol_valid,
    )


def total_loss(inputs, d_pol, d_corr=None):
    """LossBreakdown of the depth estimates; d_corr defaults to the recovered i-ToF depth."""
    return evaluate(inputs, d_pol, d_corr).breakdown


def photometric_error(ix, iy, cfg=None):
    """Per-pixel photometric error of two images with channels first."""
    cfg = _config(cfg)
    emap, _ = photometric_forward(_intensity(ix), _intensity(iy), *cfg.ssim_params)
    return emap


def _single_bundle(pol_left, rig, **items):
    return FrameBundle(pol_left=pol_left, rig=rig, **items)


def stereo_and_mask_loss(pol_left, pol_right, d_pol, rig, cfg=None):
    """(stereo map, mask map), NaN where the source is invalid."""
    inputs = prepare_inputs(_single_bundle(pol_left, rig, pol_right=pol_right), 'S', cfg)
    breakdown = total_loss(inputs, d_pol)
    return breakdown.maps['stereo'], breakdown.maps['mask']


def corr_loss(corr, d_corr, amplitude, offset, itof_cfg=None, cfg=None):
    """E_pe between observed buckets and those rendered from d_corr with the given amplitude and offset."""
    cfg = _config(cfg)
    itof_cfg = ItofConfig.from_settings() if itof_cfg is None else itof_cfg
    amplitude = np.asarray(getattr(amplitude, 'data', amplitude), dtype=np.float64).reshape(corr.shape[1:])
    offset = np.asarray(getattr(offset, 'data', offset), dtype=np.float64).reshape(corr.shape[1:])
    depth, depth_valid = _depth_array(d_corr, corr.shape[1:], 'i-ToF')
    scale = normalisation_scale(corr.data, cfg.normalisation_percentile)
    term = CorrTerm(
        corr.data / scale, scale, amplitude, offset,
        amplitude >= itof_cfg.amplitude_epsilon, itof_cfg, cfg,
    )
    result = term.forward(None, depth, None, depth_valid)
    return np.where(result.valid, result.map, np.nan)


def corr_to_pol_loss(pol_left, corr, d_corr, d_pol, rig, eta=None, cfg=None):
    """Per-pixel min over reflection types of the polarisation error of D_corr seen through D_pol."""
    inputs = prepare_inputs(_single_bundle(pol_left, rig, corr=corr), 'T', cfg, eta=eta)
    breakdown = total_loss(inputs, d_pol, d_corr)
    return breakdown.maps['corr_to_pol']


def struct_loss(pol_left, pol_right, d_struct, d_pred, rig, cfg=None):
    """
    (photometric map through the registered structured-light depth,
    |d_pred - d_struct| on the left grid). Both are NaN where the
    structured-light depth is missing; gating by the argmin happens in
    total_loss.
    """
    bundle = _single_bundle(pol_left, rig, pol_right=pol_right, struct_depth=d_struct)
    inputs = prepare_inputs(bundle, 'L', cfg)
    breakdown = total_loss(inputs, d_pred)
    pred, _ = _depth_array(d_pred, inputs.pol_shape, 'polarisation')
    aligned = inputs.struct_depth
    hint = np.where(aligned.mask, np.abs(pred - aligned.filled(0.0)), np.nan)
    return breakdown.maps['struct'], hint
