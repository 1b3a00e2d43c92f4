"""
Reprojection of pixels between cameras and differentiable bilinear sampling.

A flow field holds, for every output pixel, the (u, v) coordinate to read
from the source image. Pixels whose coordinate falls outside
[0, w-1] x [0, h-1] of the source, or whose point lands behind the source
camera, are masked and sample to 0.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from core.exceptions import ArgError
from geometry.services import project_unchecked, projection_jacobians
from imaging.containers import DepthField, ImagePlane
from normals.services import camera_rays

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FlowField:
    coords: np.ndarray  # (2, H, W) as (u, v)
    mask: np.ndarray


@dataclass(eq=False)
class ReprojectionState:
    coords: np.ndarray
    mask: np.ndarray
    du_dd: np.ndarray  # (2, H, W) derivative of (u, v) w.r.t. source depth

    def flow(self):
        return FlowField(coords=self.coords, mask=self.mask)


@dataclass(eq=False)
class SampleState:
    x0: np.ndarray
    y0: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    mask: np.ndarray
    corners: tuple  # (a, b, c, d) source values, each (C, H, W)
    source_shape: tuple

    def signature(self):
        return self.x0.tobytes() + self.y0.tobytes() + self.mask.tobytes()


def _in_bounds(coords, shape):
    height, width = shape
    u, v = coords
    return (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)


def reprojection_forward(depth, rays, dst_intr, transform, dst_shape, valid=None):
    """
    Where each source pixel lands in the destination camera.

    Args:
        depth: (H, W) source z-depth, filled at invalid pixels
        rays: (3, H, W) source camera rays
        dst_intr: Intrinsics of the camera being sampled
        transform: RigidTransform from source to destination coordinates
        dst_shape: (height, width) of the destination image
        valid: optional (H, W) mask of usable depth
    """
    rotated = np.einsum('ij,jhw->ihw', transform.rotation, rays)
    points = depth[None] * rotated + transform.translation[:, None, None]
    points_last = np.moveaxis(points, 0, -1)
    in_front = points[2] > 0
    safe = np.where(in_front[..., None], points_last, np.array([0.0, 0.0, 1.0]))
    coords = np.moveaxis(project_unchecked(safe, dst_intr), -1, 0)
    mask = in_front & _in_bounds(coords, dst_shape)
    if valid is not None:
        mask &= valid
    d_point, _, _ = projection_jacobians(safe, dst_intr)
    du_dd = np.einsum('hwij,jhw->ihw', d_point, rotated)
    coords = np.where(mask[None], coords, 0.0)
    du_dd = np.where(mask[None], du_dd, 0.0)
    return ReprojectionState(coords=coords, mask=mask, du_dd=du_dd)


def reproject_coords(depth_field, src_intr, dst_intr, transform, dst_shape=None):
    """
    Flow from a depth map: back-project every source pixel at its depth,
    move it with transform and project it into the destination camera.

    Points that end up behind the destination camera are masked out.
    """
    height, width = depth_field.shape
    dst_shape = depth_field.shape if dst_shape is None else tuple(dst_shape)
    rays = camera_rays(src_intr, width, height)
    state = reprojection_forward(depth_field.filled(1.0), rays, dst_intr, transform, dst_shape, depth_field.mask)
    return state.flow()


def infinity_coords(src_intr, dst_intr, rotation, src_shape, dst_shape=None):
    """Flow for points at infinite depth: only the rotation matters."""
    height, width = src_shape
    dst_shape = tuple(src_shape) if dst_shape is None else tuple(dst_shape)
    rays = camera_rays(src_intr, width, height)
    points = np.einsum('ij,jhw->ihw', np.asarray(rotation), rays)
    in_front = points[2] > 0
    safe = np.where(in_front[..., None], np.moveaxis(points, 0, -1), np.array([0.0, 0.0, 1.0]))
    coords = np.moveaxis(project_unchecked(safe, dst_intr), -1, 0)
    mask = in_front & _in_bounds(coords, dst_shape)
    return FlowField(coords=np.where(mask[None], coords, 0.0), mask=mask)


def bilinear_forward(source, coords, mask):
    """
    Sample source (C, h, w) at coords (2, H, W); masked pixels give 0.

    Cells are chosen with x0 = clip(floor(u), 0, w - 2) so that u = w - 1 is
    interpolated exactly inside the last cell.
    """
    source = np.asarray(source, dtype=np.float64)
    channels, src_h, src_w = source.shape
    if src_h < 2 or src_w < 2:
        raise ArgError('bilinear sampling needs a source of at least 2x2 pixels')
    u = np.where(mask, coords[0], 0.0)
    v = np.where(mask, coords[1], 0.0)
    x0 = np.clip(np.floor(u), 0, src_w - 2).astype(np.intp)
    y0 = np.clip(np.floor(v), 0, src_h - 2).astype(np.intp)
    fx = u - x0
    fy = v - y0
    a = source[:, y0, x0]
    b = source[:, y0, x0 + 1]
    c = source[:, y0 + 1, x0]
    d = source[:, y0 + 1, x0 + 1]
    out = (1 - fx) * (1 - fy) * a + fx * (1 - fy) * b + (1 - fx) * fy * c + fx * fy * d
    out = np.where(mask[None], out, 0.0)
    state = SampleState(x0=x0, y0=y0, fx=fx, fy=fy, mask=mask, corners=(a, b, c, d), source_shape=source.shape)
    return out, state


def bilinear_vjp_coords(state, grad_out):
    """Gradient of sum(grad_out * sample) w.r.t. the (u, v) coordinates."""
    a, b, c, d = state.corners
    fx, fy = state.fx, state.fy
    du = np.sum(grad_out * ((1 - fy) * (b - a) + fy * (d - c)), axis=0)
    dv = np.sum(grad_out * ((1 - fx) * (c - a) + fx * (d - b)), axis=0)
    return np.where(state.mask, du, 0.0), np.where(state.mask, dv, 0.0)


def bilinear_vjp_source(state, grad_out):
    """Gradient of sum(grad_out * sample) w.r.t. the source image."""
    channels, src_h, src_w = state.source_shape
    fx, fy = state.fx, state.fy
    g = np.where(state.mask[None], grad_out, 0.0)
    grad_source = np.zeros((channels, src_h * src_w))
    corners = (
        (state.y0, state.x0, (1 - fx) * (1 - fy)),
        (state.y0, state.x0 + 1, fx * (1 - fy)),
        (state.y0 + 1, state.x0, (1 - fx) * fy),
        (state.y0 + 1, state.x0 + 1, fx * fy),
    )
    for rows, cols, weight in corners:
        flat = (rows * src_w + cols).ravel()
        for k in range(channels):
            grad_source[k] += np.bincount(flat, weights=(g[k] * weight).ravel(), minlength=src_h * src_w)
    return grad_source.reshape(channels, src_h, src_w)


def backward_warp(src, flow):
    """Bilinearly resample src at the flow coordinates; masked pixels are 0."""
    data = getattr(src, 'data', src)
    if data.ndim == 2:
        data = data[None]
    out, _ = bilinear_forward(data, flow.coords, flow.mask)
    return ImagePlane(out)


def align_depth(depth_field, src_camera, dst_camera, transform, fill_radius=2.0):
    """
    Register a depth map onto another camera's grid.

    Every valid source pixel is moved into the destination camera and
    splatted to its nearest pixel, keeping the smallest z. Empty pixels take
    the value of the nearest hit within fill_radius pixels (None fills all).
    This is depth registration, not image warping: it is used to bring
    structured-light depth and i-ToF depth onto the polarisation grid.
    """
    height, width = depth_field.shape
    dst_h, dst_w = dst_camera.height, dst_camera.width
    rays = camera_rays(src_camera.intrinsics, width, height)
    valid = depth_field.mask.ravel()
    points = (depth_field.filled(1.0)[None] * rays).reshape(3, -1)[:, valid]
    moved = transform.rotation @ points + transform.translation[:, None]
    front = moved[2] > 0
    moved = moved[:, front]
    uv = project_unchecked(moved.T, dst_camera.intrinsics)
    cols = np.floor(uv[:, 0] + 0.5).astype(np.intp)
    rows = np.floor(uv[:, 1] + 0.5).astype(np.intp)
    inside = (cols >= 0) & (cols < dst_w) & (rows >= 0) & (rows < dst_h)
    flat = rows[inside] * dst_w + cols[inside]
    z = moved[2, inside]

    out = np.full(dst_h * dst_w, np.nan)
    if flat.size:
        order = np.lexsort((z, flat))
        first = np.unique(flat[order], return_index=True)[1]
        winners = order[first]
        out[flat[winners]] = z[winners]
    out = out.reshape(dst_h, dst_w)

    hit = np.isfinite(out)
    if hit.any() and not hit.all() and (fill_radius is None or fill_radius > 0):
        distance, (near_r, near_c) = ndimage.distance_transform_edt(~hit, return_indices=True)
        fill = ~hit
        if fill_radius is not None:
            fill &= distance <= fill_radius
        out[fill] = out[near_r[fill], near_c[fill]]
        logger.debug('Filled %d of %d registration holes', int(fill.sum()), int((~hit).sum()))
    return DepthField(out)
