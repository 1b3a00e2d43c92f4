"""
Bundle IO: one raw `.f32` payload plus one text header per image.

Headers are UTF-8 `key=value` lines in a fixed order (width, height,
channels, dtype, role). Payloads are channel-planar, row-major,
little-endian float32. Depth planes store invalid pixels as NaN.
"""
import io
import logging
import os

import numpy as np
from PIL import Image

from core.exceptions import ArgError, FormatError, IoError, ParseError
from geometry.services import read_rig, write_rig

from .containers import (
    BUNDLE_ROLES,
    CorrelationImage,
    DepthField,
    FrameBundle,
    PolarisationImage,
)

logger = logging.getLogger(__name__)

DTYPE = 'f32le'
HEADER_KEYS = ('width', 'height', 'channels', 'dtype', 'role')
DEPTH_ROLES = ('struct_depth', 'gt_depth', 'depth', 'depth_corr')

RIG_FILE = 'rig.txt'
FRAME_FILE = 'frame.txt'


def _plane_data(item):
    if isinstance(item, DepthField):
        return item.depth[None]
    return item.data


def format_header(width, height, channels, role):
    values = (width, height, channels, DTYPE, role)
    return ''.join(f'{key}={value}\n' for key, value in zip(HEADER_KEYS, values))


def parse_header(text, source='header'):
    """
    Parse an image header.

    Raises:
        FormatError: on a missing, repeated or invalid key
    """
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep:
            raise ParseError(f'{source}: expected key=value', number, 1)
        if key not in HEADER_KEYS:
            raise ParseError(f'{source}: unknown key {key!r}', number, 1)
        if key in values:
            raise ParseError(f'{source}: duplicate key {key!r}', number, 1)
        values[key] = value.strip()
    missing = [key for key in HEADER_KEYS if key not in values]
    if missing:
        raise FormatError(f'{source}: missing keys {", ".join(missing)}')
    if values['dtype'] != DTYPE:
        raise FormatError(f'{source}: unsupported dtype {values["dtype"]!r}')
    header = {'dtype': values['dtype'], 'role': values['role']}
    for key in ('width', 'height', 'channels'):
        try:
            header[key] = int(values[key])
        except ValueError:
            raise FormatError(f'{source}: {key} must be an integer') from None
        if header[key] < 1:
            raise FormatError(f'{source}: {key} must be >= 1, got {header[key]}')
    return header


def write_plane(directory, role, item):
    """Write one image or depth field as `<role>.f32` + `<role>.hdr`."""
    data = _plane_data(item)
    channels, height, width = data.shape
    payload = np.ascontiguousarray(data, dtype='<f4').tobytes()
    try:
        with open(os.path.join(directory, f'{role}.f32'), 'wb') as handle:
            handle.write(payload)
        with open(os.path.join(directory, f'{role}.hdr'), 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(format_header(width, height, channels, role))
    except OSError as exc:
        raise IoError(f'cannot write {role} to {directory}: {exc}') from exc


def read_plane(directory, role):
    """
    Read `<role>.f32` back into a (channels, height, width) float64 array.

    Raises:
        IoError: if a file cannot be opened
        FormatError: on a malformed header or a payload of the wrong size
    """
    header_path = os.path.join(directory, f'{role}.hdr')
    payload_path = os.path.join(directory, f'{role}.f32')
    try:
        with open(header_path, encoding='utf-8') as handle:
            header = parse_header(handle.read(), source=header_path)
        with open(payload_path, 'rb') as handle:
            payload = handle.read()
    except OSError as exc:
        raise IoError(f'cannot read {role} from {directory}: {exc}') from exc
    if header['role'] != role:
        raise FormatError(f'{header_path}: role {header["role"]!r} does not match file name')
    expected = header['width'] * header['height'] * header['channels'] * 4
    if len(payload) != expected:
        raise FormatError(f'{payload_path}: expected {expected} bytes, found {len(payload)}')
    data = np.frombuffer(payload, dtype='<f4').astype(np.float64)
    data = data.reshape(header['channels'], header['height'], header['width'])
    if role not in DEPTH_ROLES and not np.all(np.isfinite(data)):
        raise FormatError(f'{payload_path}: non-finite values in a non-depth image')
    return data


def write_bundle(bundle, directory):
    """
    Write every present image of a bundle plus rig.txt and frame.txt.

    Output bytes depend only on the bundle contents.
    """
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise IoError(f'cannot create {directory}: {exc}') from exc
    for role in bundle.roles():
        write_plane(directory, role, getattr(bundle, role))
    write_rig(bundle.rig, os.path.join(directory, RIG_FILE))
    try:
        with open(os.path.join(directory, FRAME_FILE), 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(f'frame_id={int(bundle.frame_id)}\n')
    except OSError as exc:
        raise IoError(f'cannot write frame id to {directory}: {exc}') from exc
    logger.debug('Wrote bundle %s with roles %s', directory, ', '.join(bundle.roles()))


def _read_frame_id(directory):
    path = os.path.join(directory, FRAME_FILE)
    if not os.path.exists(path):
        return 0
    try:
        with open(path, encoding='utf-8') as handle:
            text = handle.read().strip()
    except OSError as exc:
        raise IoError(f'cannot read {path}: {exc}') from exc
    key, _, value = text.partition('=')
    if key != 'frame_id':
        raise FormatError(f'{path}: expected frame_id=<int>')
    try:
        return int(value)
    except ValueError:
        raise FormatError(f'{path}: frame_id must be an integer') from None


def read_bundle(directory):
    """Read a bundle written by write_bundle. Optional roles may be absent."""
    if not os.path.isdir(directory):
        raise IoError(f'bundle directory {directory} does not exist')
    rig = read_rig(os.path.join(directory, RIG_FILE))
    items = {}
    for role in BUNDLE_ROLES:
        if not os.path.exists(os.path.join(directory, f'{role}.hdr')):
            continue
        data = read_plane(directory, role)
        if role in DEPTH_ROLES:
            if data.shape[0] != 1:
                raise FormatError(f'{role} must have one channel')
            items[role] = DepthField(data[0])
        elif role == 'corr':
            items[role] = CorrelationImage(data)
        else:
            items[role] = PolarisationImage(data)
    if 'pol_left' not in items:
        raise FormatError(f'{directory}: bundle has no pol_left image')
    try:
        return FrameBundle(rig=rig, frame_id=_read_frame_id(directory), **items)
    except ArgError as exc:
        raise FormatError(f'{directory}: {exc}') from exc


def write_depth(depth, directory, role='depth'):
    write_plane(directory, role, depth)


def read_depth(directory, role='depth'):
    data = read_plane(directory, role)
    if data.shape[0] != 1:
        raise FormatError(f'{role} must have one channel')
    return DepthField(data[0])


def to_uint8(values, value_range):
    lo, hi = value_range
    if not lo < hi:
        raise ArgError(f'export range needs lo < hi, got ({lo}, {hi})')
    scaled = np.clip((np.nan_to_num(values, nan=lo) - lo) / (hi - lo), 0.0, 1.0)
    # round half up
    return np.floor(255.0 * scaled + 0.5).astype(np.uint8)


def export_png(img, channel=0, value_range=(0.0, 1.0)):
    """Render one channel as 8-bit grayscale PNG bytes; NaN maps to lo."""
    if isinstance(img, DepthField):
        img = img.as_plane()
    pixels = to_uint8(img.channel(channel), value_range)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format='PNG')
    return buffer.getvalue()
