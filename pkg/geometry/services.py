"""
Projection, back-projection and rigid-transform algebra.

Points are arrays shaped (..., 3); pixels are arrays shaped (..., 2).
"""
import logging
import re

import numpy as np

from core.conf import get_setting
from core.exceptions import ArgError, BehindCamera, IoError, NumericError, ParseError

from .cameras import (
    ORTHONORMAL_TOLERANCE,
    CameraModel,
    CameraRig,
    Intrinsics,
    RigidTransform,
    orthonormalize,
    rotation_drift,
)

logger = logging.getLogger(__name__)

DISTORTION_NAMES = ('k1', 'k2', 'p1', 'p2', 'k3')


def distort_normalized(a, b, dist):
    """Apply radial-tangential distortion to normalized image coordinates."""
    k1, k2, p1, p2, k3 = dist
    r2 = a * a + b * b
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = a * radial + 2.0 * p1 * a * b + p2 * (r2 + 2.0 * a * a)
    yd = b * radial + p1 * (r2 + 2.0 * b * b) + 2.0 * p2 * a * b
    return xd, yd


def project_unchecked(points, intr):
    """Project points without the in-front check; callers mask z <= 0 themselves."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        a = points[..., 0] / z
        b = points[..., 1] / z
    xd, yd = distort_normalized(a, b, intr.dist)
    return np.stack([intr.fx * xd + intr.cx, intr.fy * yd + intr.cy], axis=-1)


def project(points, intr):
    """
    Pinhole projection with distortion.

    Args:
        points: (..., 3) camera-frame points in metres
        intr: Intrinsics

    Returns:
        (..., 2) pixel coordinates

    Raises:
        BehindCamera: if any point has z <= 0
    """
    points = np.asarray(points, dtype=np.float64)
    if np.any(points[..., 2] <= 0):
        raise BehindCamera('cannot project a point with z <= 0')
    return project_unchecked(points, intr)


def projection_jacobians(points, intr):
    """
    Jacobians of project() at points (..., 3).

    Returns (d_point, d_intrinsics, d_distortion) shaped (..., 2, 3),
    (..., 2, 4) for (fx, fy, cx, cy) and (..., 2, 5) for (k1, k2, p1, p2, k3).
    """
    points = np.asarray(points, dtype=np.float64)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    a = x / z
    b = y / z
    k1, k2, p1, p2, k3 = intr.dist
    r2 = a * a + b * b
    r4 = r2 * r2
    r6 = r4 * r2
    radial = 1.0 + k1 * r2 + k2 * r4 + k3 * r6
    dradial_dr2 = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r4
    drad_a = dradial_dr2 * 2.0 * a
    drad_b = dradial_dr2 * 2.0 * b

    dxd_da = radial + a * drad_a + 2.0 * p1 * b + 6.0 * p2 * a
    dxd_db = a * drad_b + 2.0 * p1 * a + 2.0 * p2 * b
    dyd_da = b * drad_a + 2.0 * p1 * a + 2.0 * p2 * b
    dyd_db = radial + b * drad_b + 6.0 * p1 * b + 2.0 * p2 * a

    xd, yd = distort_normalized(a, b, intr.dist)

    inv_z = 1.0 / z
    shape = points.shape[:-1]
    d_point = np.zeros(shape + (2, 3))
    # d(a, b)/d(x, y, z)
    da = (inv_z, 0.0, -a * inv_z)
    db = (0.0, inv_z, -b * inv_z)
    for k in range(3):
        d_point[..., 0, k] = intr.fx * (dxd_da * da[k] + dxd_db * db[k])
        d_point[..., 1, k] = intr.fy * (dyd_da * da[k] + dyd_db * db[k])

    d_intr = np.zeros(shape + (2, 4))
    d_intr[..., 0, 0] = xd
    d_intr[..., 1, 1] = yd
    d_intr[..., 0, 2] = 1.0
    d_intr[..., 1, 3] = 1.0

    d_dist = np.zeros(shape + (2, 5))
    d_dist[..., 0, 0] = intr.fx * a * r2
    d_dist[..., 0, 1] = intr.fx * a * r4
    d_dist[..., 0, 2] = intr.fx * 2.0 * a * b
    d_dist[..., 0, 3] = intr.fx * (r2 + 2.0 * a * a)
    d_dist[..., 0, 4] = intr.fx * a * r6
    d_dist[..., 1, 0] = intr.fy * b * r2
    d_dist[..., 1, 1] = intr.fy * b * r4
    d_dist[..., 1, 2] = intr.fy * (r2 + 2.0 * b * b)
    d_dist[..., 1, 3] = intr.fy * 2.0 * a * b
    d_dist[..., 1, 4] = intr.fy * b * r6
    return d_point, d_intr, d_dist


def undistort_points(pixels, intr, max_iters=None, tol=None):
    """
    Invert the distortion model by fixed-point iteration.

    Returns normalized coordinates (..., 2) such that distort_normalized maps
    them back to the pixels.

    Raises:
        NumericError: if the iteration has not converged after max_iters
    """
    max_iters = get_setting('UNDISTORT_MAX_ITERS') if max_iters is None else max_iters
    tol = get_setting('UNDISTORT_TOLERANCE') if tol is None else tol
    pixels = np.asarray(pixels, dtype=np.float64)
    xd = (pixels[..., 0] - intr.cx) / intr.fx
    yd = (pixels[..., 1] - intr.cy) / intr.fy
    if not intr.has_distortion:
        return np.stack([xd, yd], axis=-1)

    k1, k2, p1, p2, k3 = intr.dist
    a, b = xd.copy(), yd.copy()
    for _ in range(max_iters):
        r2 = a * a + b * b
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2.0 * p1 * a * b + p2 * (r2 + 2.0 * a * a)
        dy = p1 * (r2 + 2.0 * b * b) + 2.0 * p2 * a * b
        new_a = (xd - dx) / radial
        new_b = (yd - dy) / radial
        step = max(float(np.max(np.abs(new_a - a), initial=0.0)),
                   float(np.max(np.abs(new_b - b), initial=0.0)))
        a, b = new_a, new_b
        if step < tol:
            return np.stack([a, b], axis=-1)
    raise NumericError(f'undistortion did not converge in {max_iters} iterations')


def backproject(pixels, depth, intr):
    """
    Lift pixels to camera-frame points at the given z-depth.

    Raises:
        ArgError: if any depth is not strictly positive
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise ArgError('back-projection needs positive depth')
    normalized = undistort_points(pixels, intr)
    return np.stack([
        normalized[..., 0] * depth,
        normalized[..., 1] * depth,
        np.broadcast_to(depth, normalized.shape[:-1]),
    ], axis=-1)


def pixel_grid(width, height):
    """Pixel centre coordinates (height, width, 2) as (u, v)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def compose(a, b):
    """Transform applying b first, then a."""
    rotation = a.rotation @ b.rotation
    if rotation_drift(rotation) > ORTHONORMAL_TOLERANCE:
        rotation = orthonormalize(rotation)
    return RigidTransform(rotation, a.rotation @ b.translation + a.translation)


def invert(a):
    rotation = a.rotation.T
    return RigidTransform(rotation, -rotation @ a.translation)


# Rig description file ------------------------------------------------------

_TOKEN = re.compile(r'(?P<key>[^\s=]+)=(?P<value>\S*)')


def tokenize_line(text, line_number):
    """
    Split one `key=value key=value` line into an ordered dict of (value, column).

    Raises:
        ParseError: on stray text or a repeated key
    """
    tokens = {}
    position = 0
    for match in _TOKEN.finditer(text):
        gap = text[position:match.start()]
        if gap.strip():
            column = position + len(gap) - len(gap.lstrip()) + 1
            raise ParseError(f'expected key=value, found {gap.strip()!r}', line_number, column)
        key = match.group('key')
        if key in tokens:
            raise ParseError(f'duplicate key {key!r}', line_number, match.start() + 1)
        tokens[key] = (match.group('value'), match.start() + 1)
        position = match.end()
    rest = text[position:]
    if rest.strip():
        column = position + len(rest) - len(rest.lstrip()) + 1
        raise ParseError(f'expected key=value, found {rest.strip()!r}', line_number, column)
    return tokens


def iter_record_lines(text):
    """Yield (line_number, stripped_line) for non-blank, non-comment lines."""
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].rstrip()
        if line.strip():
            yield number, line


def form_error_to_parse_error(form, tokens, line_number):
    """Turn the first error of a bound form into a ParseError at the offending key."""
    for key, errors in form.errors.items():
        column = tokens[key][1] if key in tokens else 1
        label = key if key != '__all__' else 'line'
        return ParseError(f'{label}: {errors[0]}', line_number, column)
    return ParseError('invalid line', line_number, 1)


def bind_record_form(form_class, text, line_number, column_offset=0):
    """
    Validate one key=value record with form_class.

    Columns in raised errors are shifted by column_offset so they point
    into the full source line.

    Raises:
        ParseError: an unknown key or the first field error
    """
    tokens = tokenize_line(text, line_number) if text.strip() else {}
    tokens = {key: (value, column + column_offset) for key, (value, column) in tokens.items()}
    unknown = [key for key in tokens if key not in form_class.base_fields]
    if unknown:
        raise ParseError(f'unknown key {unknown[0]!r}', line_number, tokens[unknown[0]][1])
    form = form_class({key: value for key, (value, _) in tokens.items()})
    if not form.is_valid():
        raise form_error_to_parse_error(form, tokens, line_number)
    return form


def parse_rig_text(text):
    """
    Parse a rig description into a CameraRig.

    One camera per line: role, width, height, fx, fy, cx, cy, k1, k2, p1, p2,
    k3, rotation (nine row-major floats, comma separated) and translation
    (three floats, metres). Rotation and translation map pol_left
    coordinates into the camera frame.

    Raises:
        ParseError: with the line and column of the first problem
    """
    from .forms import CameraLineForm

    cameras = []
    for number, line in iter_record_lines(text):
        form = bind_record_form(CameraLineForm, line, number)
        try:
            cameras.append(form.to_camera())
        except ArgError as exc:
            raise ParseError(str(exc), number, 1) from exc
    if not cameras:
        raise ParseError('rig file lists no cameras', 1, 1)
    try:
        return CameraRig(cameras)
    except ArgError as exc:
        raise ParseError(str(exc), 1, 1) from exc


def _floats(values):
    return ','.join(repr(float(v)) for v in values)


def format_rig_text(rig):
    lines = []
    for camera in rig.cameras:
        intr = camera.intrinsics
        fields = [
            f'role={camera.role}',
            f'width={camera.width}',
            f'height={camera.height}',
            f'fx={intr.fx!r}',
            f'fy={intr.fy!r}',
            f'cx={intr.cx!r}',
            f'cy={intr.cy!r}',
        ]
        fields += [f'{name}={value!r}' for name, value in zip(DISTORTION_NAMES, intr.dist)]
        fields.append(f'rotation={_floats(camera.extrinsic.rotation.ravel())}')
        fields.append(f'translation={_floats(camera.extrinsic.translation)}')
        lines.append(' '.join(fields))
    return '\n'.join(lines) + '\n'


def read_rig(path):
    try:
        with open(path, encoding='utf-8') as handle:
            text = handle.read()
    except OSError as exc:
        raise IoError(f'cannot read rig file {path}: {exc}') from exc
    return parse_rig_text(text)


def write_rig(rig, path):
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(format_rig_text(rig))
    except OSError as exc:
        raise IoError(f'cannot write rig file {path}: {exc}') from exc


def make_camera(role, width, height, fx, fy, cx, cy, dist=(0.0,) * 5,
                rotation=None, translation=(0.0, 0.0, 0.0)):
    return CameraModel(
        role=role,
        width=int(width),
        height=int(height),
        intrinsics=Intrinsics(fx, fy, cx, cy, tuple(dist)),
        extrinsic=RigidTransform(np.eye(3) if rotation is None else rotation, translation),
    )
