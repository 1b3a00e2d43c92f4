"""
Surface normals and view geometry from a z-depth map.

Normals point towards +z for surfaces facing the camera, i.e. they are the
cross product of the back-projected partial derivatives along +x and +y.
"""
from dataclasses import dataclass

import numpy as np

from core.exceptions import ArgError
from geometry.services import pixel_grid, undistort_points

# (step_a, step_b) per pair as (dx, dy). Each pair is ordered so that
# step_a x step_b points along +z on a fronto-parallel plane.
DIRECTION_PAIRS = (
    ((1, 0), (0, 1)),
    ((-1, 0), (0, -1)),
    ((1, 1), (-1, 1)),
    ((-1, -1), (1, -1)),
)


@dataclass(frozen=True, eq=False)
class NormalField:
    vectors: np.ndarray  # (3, H, W)
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class ViewField:
    view: np.ndarray  # (3, H, W) unit ray from the camera centre
    theta: np.ndarray
    alpha: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class StepIndex:
    base: np.ndarray  # flat indices, (H, W)
    target: np.ndarray


@dataclass(eq=False)
class NormalState:
    """Intermediates kept by weighted_normal_forward for the adjoint pass."""

    rays: np.ndarray
    unit: np.ndarray
    norm: np.ndarray
    terms: list
    mask: np.ndarray


def _check_support(height, width):
    if height < 2 or width < 2:
        raise ArgError(f'normals need at least 2x2 pixels, got {width}x{height}')


def _axis_base(size, step):
    index = np.arange(size)
    if step > 0:
        return np.clip(index, 0, size - 1 - step)
    if step < 0:
        return np.clip(index, -step, size - 1)
    return index


def step_index(height, width, step):
    """
    Base and target pixels of a one-step difference along (dx, dy).

    Base indices are clipped so the pair stays inside the image; boundary
    pixels reuse the last interior difference.
    """
    dx, dy = step
    rows = _axis_base(height, dy)
    cols = _axis_base(width, dx)
    base_r, base_c = np.meshgrid(rows, cols, indexing='ij')
    base = base_r * width + base_c
    target = (base_r + dy) * width + (base_c + dx)
    return StepIndex(base=base, target=target)


def camera_rays(intr, width, height):
    """Rays (x, y, 1) through every pixel centre, shaped (3, H, W)."""
    normalized = undistort_points(pixel_grid(width, height), intr)
    return np.stack([normalized[..., 0], normalized[..., 1], np.ones((height, width))])


def _difference(field, index):
    flat = field.reshape(field.shape[0], -1) if field.ndim == 3 else field.ravel()
    if field.ndim == 3:
        return flat[:, index.target] - flat[:, index.base]
    return flat[index.target] - flat[index.base]


def _stencil_mask(mask):
    """Pixels whose every stencil neighbour is valid."""
    height, width = mask.shape
    flat = mask.ravel()
    out = mask.copy()
    for pair in DIRECTION_PAIRS:
        for step in pair:
            index = step_index(height, width, step)
            out &= flat[index.base] & flat[index.target]
    return out


def pair_weights(guide, height, width):
    """exp(-0.5 * sum of absolute guide differences) for each direction pair."""
    weights = []
    for step_a, step_b in DIRECTION_PAIRS:
        ia, ib = step_index(height, width, step_a), step_index(height, width, step_b)
        total = np.abs(_difference(guide, ia)) + np.abs(_difference(guide, ib))
        weights.append(np.exp(-0.5 * total))
    return weights


def weighted_normal_forward(depth, guide, rays, valid=None):
    """
    Four-pair weighted normals of a dense depth array.

    Args:
        depth: (H, W) positive depth; invalid pixels must already be filled
        guide: (H, W) intensity used for the edge weights
        rays: (3, H, W) from camera_rays
        valid: optional (H, W) validity mask of the depth

    Returns:
        NormalState with unit normals in state.unit
    """
    height, width = depth.shape
    _check_support(height, width)
    points = depth[None] * rays
    raw = np.zeros_like(points)
    terms = []
    for (step_a, step_b), weight in zip(DIRECTION_PAIRS, pair_weights(guide, height, width)):
        ia, ib = step_index(height, width, step_a), step_index(height, width, step_b)
        da = _difference(points, ia)
        db = _difference(points, ib)
        raw += 0.25 * weight * np.cross(da, db, axis=0)
        terms.append((ia, ib, da, db, weight))
    norm = np.sqrt(np.sum(raw * raw, axis=0))
    safe = np.where(norm > 0, norm, 1.0)
    unit = raw / safe
    mask = norm > 0
    if valid is not None:
        mask &= _stencil_mask(np.asarray(valid, dtype=bool))
    return NormalState(rays=rays, unit=unit, norm=safe, terms=terms, mask=mask)


def _scatter(grad_points, index, grad_diff):
    size = grad_points.shape[1] * grad_points.shape[2]
    for c in range(3):
        plane = grad_points[c].reshape(-1)
        plane += np.bincount(index.target.ravel(), weights=grad_diff[c].ravel(), minlength=size)
        plane -= np.bincount(index.base.ravel(), weights=grad_diff[c].ravel(), minlength=size)


def weighted_normal_vjp(state, grad_unit):
    """Pull a gradient on the unit normals back onto the depth array."""
    unit = state.unit
    grad_raw = (grad_unit - unit * np.sum(unit * grad_unit, axis=0)) / state.norm
    grad_points = np.zeros_like(state.rays)
    for ia, ib, da, db, weight in state.terms:
        _scatter(grad_points, ia, 0.25 * weight * np.cross(db, grad_raw, axis=0))
        _scatter(grad_points, ib, 0.25 * weight * np.cross(grad_raw, da, axis=0))
    return np.sum(grad_points * state.rays, axis=0)


def normal_weighted(depth_field, i_un, intr):
    """
    Edge-aware normals: mean of the four directional cross products, each
    pair weighted by how little the intensity changes along it.

    Args:
        depth_field: DepthField
        i_un: ImagePlane or (H, W) array of unpolarised intensity
        intr: Intrinsics of the camera the depth lives on
    """
    guide = np.asarray(getattr(i_un, 'data', i_un), dtype=np.float64)
    if guide.ndim == 3:
        guide = guide.mean(axis=0)
    if guide.shape != depth_field.shape:
        raise ArgError(f'intensity {guide.shape} and depth {depth_field.shape} differ in size')
    height, width = depth_field.shape
    _check_support(height, width)
    rays = camera_rays(intr, width, height)
    depth = depth_field.filled(1.0)
    state = weighted_normal_forward(depth, guide, rays, valid=depth_field.mask)
    vectors = np.where(state.mask[None], state.unit, np.nan)
    return NormalField(vectors=vectors, mask=state.mask)


def normal_simple(depth_field, intr):
    """
    Normal from the cross product of the depth partial derivatives, using
    forward differences; border pixels reuse the last interior difference.
    """
    height, width = depth_field.shape
    _check_support(height, width)
    depth = depth_field.filled(1.0)
    ix = step_index(height, width, (1, 0))
    iy = step_index(height, width, (0, 1))
    ddx = _difference(depth, ix)
    ddy = _difference(depth, iy)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    raw = np.stack([
        -intr.fx * ddx,
        -intr.fy * ddy,
        (u - intr.cx) * ddx + (v - intr.cy) * ddy + depth,
    ])
    norm = np.sqrt(np.sum(raw * raw, axis=0))
    mask = _stencil_mask(depth_field.mask) & (norm > 0)
    vectors = np.where(mask[None], raw / np.where(norm > 0, norm, 1.0), np.nan)
    return NormalField(vectors=vectors, mask=mask)


def unit_rays(rays):
    return rays / np.sqrt(np.sum(rays * rays, axis=0))


def view_geometry(depth_field, normals, intr):
    """
    Viewing angle theta in [0, pi/2] and azimuth alpha in [0, 2pi).

    The dot product is clamped into [0, 1] before arccos, so grazing and
    back-facing normals report theta = pi/2.
    """
    height, width = depth_field.shape
    view = unit_rays(camera_rays(intr, width, height))
    n = np.nan_to_num(normals.vectors)
    cos_theta = np.clip(np.sum(n * view, axis=0), 0.0, 1.0)
    theta = np.arccos(cos_theta)
    alpha = np.mod(np.arctan2(n[1], n[0]), 2 * np.pi)
    alpha[alpha >= 2 * np.pi] = 0.0
    mask = normals.mask & depth_field.mask
    return ViewField(view=view, theta=theta, alpha=alpha, mask=mask)
