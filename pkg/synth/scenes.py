"""
Analytic scene primitives and their ray intersections.

All geometry is expressed in the pol_left camera frame. Rays are given as
an origin plus directions with unit z in the camera they come from, so the
intersection parameter of a camera-frame ray is its z-depth.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from core.exceptions import ArgError
from polarisation.services import REFLECTIONS

TEXTURES = ('none', 'checker', 'sine')

HIT_EPSILON = 1e-12


@dataclass(frozen=True)
class Material:
    albedo: float = 0.5
    texture: str = 'none'
    texture_scale: float = 0.1
    texture_contrast: float = 0.5
    reflection: str = 'diffuse'
    reflectance: float = 1.0
    ambient: float = 0.1

    def __post_init__(self):
        if self.albedo < 0:
            raise ArgError('albedo must be non-negative')
        if self.texture not in TEXTURES:
            raise ArgError(f'unknown texture {self.texture!r}')
        if self.texture_scale <= 0:
            raise ArgError('texture scale must be positive')
        if not 0.0 <= self.texture_contrast <= 1.0:
            raise ArgError('texture contrast must lie in [0, 1]')
        if self.reflection not in REFLECTIONS:
            raise ArgError(f'reflection must be one of {REFLECTIONS}')
        if self.reflectance < 0 or self.ambient < 0:
            raise ArgError('i-ToF reflectance and ambient must be non-negative')

    def albedo_at(self, points):
        """Albedo of surface points (..., 3); textures are solid in X and Y."""
        x, y = points[..., 0], points[..., 1]
        if self.texture == 'checker':
            parity = np.mod(np.floor(x / self.texture_scale) + np.floor(y / self.texture_scale), 2.0)
            return self.albedo * (1.0 - self.texture_contrast * parity)
        if self.texture == 'sine':
            wave = np.sin(2 * np.pi * x / self.texture_scale) * np.sin(2 * np.pi * y / self.texture_scale)
            return self.albedo * (1.0 + self.texture_contrast * wave) / (1.0 + self.texture_contrast)
        return np.full(points.shape[:-1], float(self.albedo))


def _vector(values, label, length=3):
    array = np.asarray(values, dtype=np.float64).reshape(-1)
    if array.shape != (length,) or not np.all(np.isfinite(array)):
        raise ArgError(f'{label} needs {length} finite numbers')
    return array


@dataclass(frozen=True, eq=False)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    material: Material = field(default_factory=Material)
    kind = 'plane'

    def __post_init__(self):
        normal = _vector(self.normal, 'plane normal')
        length = np.linalg.norm(normal)
        if length == 0:
            raise ArgError('plane normal must be non-zero')
        object.__setattr__(self, 'point', _vector(self.point, 'plane point'))
        object.__setattr__(self, 'normal', normal / length)

    def intersect(self, origin, directions):
        denom = directions @ self.normal
        with np.errstate(divide='ignore', invalid='ignore'):
            s = ((self.point - origin) @ self.normal) / denom
        return np.where((np.abs(denom) > HIT_EPSILON) & (s > HIT_EPSILON), s, np.inf)


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    material: Material = field(default_factory=Material)
    kind = 'sphere'

    def __post_init__(self):
        if not self.radius > 0:
            raise ArgError('sphere radius must be positive')
        object.__setattr__(self, 'center', _vector(self.center, 'sphere center'))

    def intersect(self, origin, directions):
        offset = origin - self.center
        a = np.sum(directions * directions, axis=-1)
        b = 2.0 * directions @ offset
        c = offset @ offset - self.radius ** 2
        disc = b * b - 4.0 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        near = (-b - root) / (2.0 * a)
        far = (-b + root) / (2.0 * a)
        s = np.where(near > HIT_EPSILON, near, far)
        return np.where((disc >= 0) & (s > HIT_EPSILON), s, np.inf)


@dataclass(frozen=True, eq=False)
class Box:
    """Box with half-extents size / 2, rotated about its centre by a rotation vector."""

    center: np.ndarray
    size: np.ndarray
    rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    material: Material = field(default_factory=Material)
    kind = 'box'

    def __post_init__(self):
        size = _vector(self.size, 'box size')
        if np.any(size <= 0):
            raise ArgError('box size must be positive')
        object.__setattr__(self, 'center', _vector(self.center, 'box center'))
        object.__setattr__(self, 'size', size)
        object.__setattr__(self, 'rotvec', _vector(self.rotvec, 'box rotation'))

    @property
    def rotation(self):
        return Rotation.from_rotvec(self.rotvec).as_matrix()

    def intersect(self, origin, directions):
        # slab test in the box frame
        rotation = self.rotation
        local_origin = rotation.T @ (origin - self.center)
        local_dirs = directions @ rotation
        half = self.size / 2.0
        with np.errstate(divide='ignore', invalid='ignore'):
            t1 = (-half - local_origin) / local_dirs
            t2 = (half - local_origin) / local_dirs
        parallel = np.abs(local_dirs) < HIT_EPSILON
        outside = parallel & (np.abs(local_origin) > half)
        t_min = np.where(parallel, -np.inf, np.minimum(t1, t2))
        t_max = np.where(parallel, np.inf, np.maximum(t1, t2))
        near = t_min.max(axis=-1)
        far = t_max.min(axis=-1)
        hit = (near <= far) & (far > HIT_EPSILON) & ~outside.any(axis=-1)
        s = np.where(near > HIT_EPSILON, near, far)
        return np.where(hit, s, np.inf)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    primitives: tuple
    eta: float = 1.5

    def __post_init__(self):
        primitives = tuple(self.primitives)
        if not primitives:
            raise ArgError('a scene needs at least one primitive')
        if not self.eta > 1.0:
            raise ArgError('refractive index must exceed 1')
        object.__setattr__(self, 'primitives', primitives)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise per modality, in sensor units, from a 64-bit seed."""

    pol: float = 0.0
    corr: float = 0.0
    struct: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.pol, self.corr, self.struct) < 0:
            raise ArgError('noise sigma must be non-negative')
        if not 0 <= self.seed < 2 ** 64:
            raise ArgError('seed must fit in 64 bits')

    @property
    def is_noiseless(self):
        return self.pol == self.corr == self.struct == 0.0


def cast_rays(scene, origin, directions):
    """Nearest hit parameter and primitive index for every ray; misses give (inf, -1)."""
    hits = np.stack([primitive.intersect(origin, directions) for primitive in scene.primitives])
    index = np.argmin(hits, axis=0)
    distance = np.take_along_axis(hits, index[None], axis=0)[0]
    return distance, np.where(np.isfinite(distance), index, -1)
