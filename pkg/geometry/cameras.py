"""
Camera value types: intrinsics with OpenCV radial-tangential distortion,
rigid transforms, and the four-camera rig.

Extrinsics map coordinates of the reference camera (pol_left) into the
camera's own frame, so the reference camera always carries the identity.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from core.exceptions import ArgError

ROLES = ('pol_left', 'pol_right', 'itof', 'structured_light')

REFERENCE_ROLE = 'pol_left'

ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    dist: Tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ArgError(f'focal lengths must be positive, got fx={self.fx}, fy={self.fy}')
        dist = tuple(float(k) for k in self.dist)
        if len(dist) != 5:
            raise ArgError('distortion needs five coefficients (k1, k2, p1, p2, k3)')
        object.__setattr__(self, 'dist', dist)
        for name in ('fx', 'fy', 'cx', 'cy'):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def has_distortion(self):
        return any(k != 0.0 for k in self.dist)

    def matrix(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def with_params(self, fx=None, fy=None, cx=None, cy=None, dist=None):
        return Intrinsics(
            fx=self.fx if fx is None else fx,
            fy=self.fy if fy is None else fy,
            cx=self.cx if cx is None else cx,
            cy=self.cy if cy is None else cy,
            dist=self.dist if dist is None else dist,
        )


def orthonormalize(rotation):
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(rotation)
    fixed = u @ vt
    if np.linalg.det(fixed) < 0:
        u[:, -1] *= -1
        fixed = u @ vt
    return fixed


def rotation_drift(rotation):
    return max(
        float(np.abs(rotation.T @ rotation - np.eye(3)).max()),
        abs(float(np.linalg.det(rotation)) - 1.0),
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> R x + t, translation in metres."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if rotation_drift(rotation) > ORTHONORMAL_TOLERANCE:
            raise ArgError('rotation is not orthonormal with determinant +1')
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), translation)

    def rotvec(self):
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None

    def matrix(self):
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points):
        """Transform points shaped (..., 3)."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def __matmul__(self, other):
        from .services import compose
        return compose(self, other)


@dataclass(frozen=True)
class CameraModel:
    role: str
    width: int
    height: int
    intrinsics: Intrinsics
    extrinsic: RigidTransform

    def __post_init__(self):
        if self.role not in ROLES:
            raise ArgError(f'unknown camera role {self.role!r}')
        if self.width < 1 or self.height < 1:
            raise ArgError(f'camera {self.role} needs a positive resolution')


class CameraRig:
    """The four cameras of the capture rig, keyed by role."""

    def __init__(self, cameras):
        self._cameras = {}
        for camera in cameras:
            if camera.role in self._cameras:
                raise ArgError(f'camera role {camera.role!r} listed twice')
            self._cameras[camera.role] = camera
        if REFERENCE_ROLE not in self._cameras:
            raise ArgError('rig must contain the pol_left reference camera')
        reference = self._cameras[REFERENCE_ROLE].extrinsic
        if (np.abs(reference.rotation - np.eye(3)).max() > ORTHONORMAL_TOLERANCE
                or np.abs(reference.translation).max() > ORTHONORMAL_TOLERANCE):
            raise ArgError('pol_left extrinsic must be the identity')

    def __contains__(self, role):
        return role in self._cameras

    def __iter__(self):
        return iter(self.cameras)

    def __eq__(self, other):
        if not isinstance(other, CameraRig):
            return NotImplemented
        return self.cameras == other.cameras

    @property
    def cameras(self):
        return [self._cameras[role] for role in ROLES if role in self._cameras]

    def camera(self, role):
        try:
            return self._cameras[role]
        except KeyError:
            raise ArgError(f'rig has no {role} camera') from None

    def transform(self, src, dst):
        """Transform taking points in camera src coordinates to camera dst."""
        from .services import compose, invert
        return compose(self.camera(dst).extrinsic, invert(self.camera(src).extrinsic))

    def replace(self, camera):
        cameras = [camera if c.role == camera.role else c for c in self.cameras]
        return CameraRig(cameras)
