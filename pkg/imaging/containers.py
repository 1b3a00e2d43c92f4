"""
Dense image containers.

Arrays are kept as float64 in memory and are read-only once a container is
built. On disk every plane is stored as little-endian float32 (see
imaging.services).
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.exceptions import ArgError

POLARISER_ANGLES = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)

BUNDLE_ROLES = ('pol_left', 'pol_right', 'corr', 'struct_depth', 'gt_depth')

# Camera each bundle role is sampled on.
ROLE_CAMERA = {
    'pol_left': 'pol_left',
    'pol_right': 'pol_right',
    'corr': 'itof',
    'struct_depth': 'structured_light',
    'gt_depth': 'pol_left',
}


def _frozen(array):
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """Channel-planar image, data shaped (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ArgError(f'image data must be 2-D or 3-D, got shape {data.shape}')
        if min(data.shape) < 1:
            raise ArgError(f'image dimensions must be >= 1, got {data.shape}')
        object.__setattr__(self, 'data', _frozen(data))

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def channel(self, index):
        if not 0 <= index < self.channels:
            raise ArgError(f'channel {index} out of range for {self.channels} channels')
        return self.data[index]


@dataclass(frozen=True, eq=False)
class PolarisationImage(ImagePlane):
    """
    Intensities behind polarisers at 0, 45, 90 and 135 degrees.

    Colour captures carry 12 channels, four angles per colour, colour-major.
    """

    def __post_init__(self):
        super().__post_init__()
        if self.channels not in (4, 12):
            raise ArgError(f'polarisation image needs 4 or 12 channels, got {self.channels}')

    @property
    def colours(self):
        return self.channels // 4

    def angles(self):
        """Return the data as (colours, 4, height, width)."""
        return self.data.reshape(self.colours, 4, self.height, self.width)

    def unpolarised(self):
        """Mean over the four polariser angles, one plane per colour."""
        return self.angles().mean(axis=1)


@dataclass(frozen=True, eq=False)
class CorrelationImage(ImagePlane):
    """Four correlation buckets sampled at phase offsets 0, pi/2, pi, 3pi/2."""

    def __post_init__(self):
        super().__post_init__()
        if self.channels != 4:
            raise ArgError(f'correlation image needs 4 channels, got {self.channels}')


@dataclass(frozen=True, eq=False)
class DepthField:
    """
    Metric z-depth with a validity mask.

    Invalid pixels always hold NaN; valid pixels are finite and positive.
    """

    depth: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64)
        if depth.ndim == 3 and depth.shape[0] == 1:
            depth = depth[0]
        if depth.ndim != 2 or min(depth.shape) < 1:
            raise ArgError(f'depth must be a non-empty 2-D array, got shape {depth.shape}')
        finite = np.isfinite(depth) & (depth > 0)
        if self.mask is None:
            mask = finite
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != depth.shape:
                raise ArgError('depth mask shape does not match depth')
            mask = mask & finite
        depth[~mask] = np.nan
        mask = mask.copy()
        depth.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, 'depth', depth)
        object.__setattr__(self, 'mask', mask)

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def shape(self):
        return self.depth.shape

    def filled(self, value=0.0):
        """Depth with invalid pixels replaced by value."""
        return np.where(self.mask, self.depth, value)

    def as_plane(self):
        return ImagePlane(self.depth[None])


@dataclass(frozen=True, eq=False)
class FrameBundle:
    """One synchronised capture of the four-camera rig."""

    pol_left: PolarisationImage
    rig: object
    pol_right: Optional[PolarisationImage] = None
    corr: Optional[CorrelationImage] = None
    struct_depth: Optional[DepthField] = None
    gt_depth: Optional[DepthField] = None
    frame_id: int = 0

    def __post_init__(self):
        for role in BUNDLE_ROLES:
            item = getattr(self, role)
            if item is None:
                continue
            camera = self.rig.camera(ROLE_CAMERA[role])
            height, width = item.shape[-2:]
            if (width, height) != (camera.width, camera.height):
                raise ArgError(
                    f'{role} is {width}x{height} but camera {camera.role} '
                    f'declares {camera.width}x{camera.height}'
                )

    def roles(self):
        """Roles present in this bundle, in canonical order."""
        return [role for role in BUNDLE_ROLES if getattr(self, role) is not None]
