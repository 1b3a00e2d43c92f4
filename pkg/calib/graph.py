"""
The calibration graph: camera and board-pose vertices joined by corner
observations, with the reprojection residual of every edge and its
Jacobians with respect to the local parameter blocks.

Board poses map board coordinates into the pol_left frame and camera
extrinsics map pol_left coordinates into each camera, so the pol_left
extrinsic is the fixed gauge.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from core.conf import get_setting
from core.exceptions import ArgError
from core.parallel import map_row_bands
from geometry.cameras import REFERENCE_ROLE, RigidTransform
from geometry.services import project_unchecked, projection_jacobians

INTRINSIC_NAMES = ('fx', 'fy', 'cx', 'cy', 'k1', 'k2', 'p1', 'p2', 'k3')
EXTRINSIC_NAMES = ('wx', 'wy', 'wz', 'tx', 'ty', 'tz')
CAMERA_BLOCK = len(INTRINSIC_NAMES) + len(EXTRINSIC_NAMES)
POSE_BLOCK = 6


@dataclass(frozen=True)
class RobustKernel:
    """Huber m-estimator on the residual norm in pixels."""

    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ArgError(f'Huber delta must be positive, got {self.delta}')

    @classmethod
    def from_settings(cls, **overrides):
        return cls(**{'delta': get_setting('HUBER_DELTA_PX'), **overrides})

    def cost(self, norms):
        norms = np.asarray(norms, dtype=np.float64)
        return np.where(
            norms <= self.delta,
            0.5 * norms * norms,
            self.delta * (norms - 0.5 * self.delta),
        )

    def weight(self, norms):
        """IRLS weight so that weight * norm equals the cost slope."""
        norms = np.asarray(norms, dtype=np.float64)
        with np.errstate(divide='ignore'):
            return np.where(norms <= self.delta, 1.0, self.delta / norms)


@dataclass(frozen=True, eq=False)
class Observations:
    """Detected board corners, one row per (camera, image, corner)."""

    cameras: np.ndarray
    images: np.ndarray
    point_ids: np.ndarray
    points: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        cameras = np.asarray(self.cameras, dtype=object).reshape(-1)
        count = cameras.shape[0]
        images = np.asarray(self.images, dtype=np.int64).reshape(-1)
        point_ids = np.asarray(self.point_ids, dtype=np.int64).reshape(-1)
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if not (len(images) == len(point_ids) == len(points) == len(pixels) == count):
            raise ArgError('observation columns differ in length')
        if not (np.isfinite(points).all() and np.isfinite(pixels).all()):
            raise ArgError('observations must be finite')
        for name, value in (('cameras', cameras), ('images', images), ('point_ids', point_ids),
                            ('points', points), ('pixels', pixels)):
            object.__setattr__(self, name, value)

    def __len__(self):
        return len(self.cameras)

    def select(self, keep):
        keep = np.asarray(keep)
        return Observations(
            self.cameras[keep], self.images[keep], self.point_ids[keep],
            self.points[keep], self.pixels[keep],
        )

    def roles(self):
        return sorted(set(self.cameras.tolist()))

    def image_ids(self):
        return sorted(set(self.images.tolist()))


def skew(vectors):
    """Cross-product matrices (..., 3, 3)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    x, y, z = vectors[..., 0], vectors[..., 1], vectors[..., 2]
    zero = np.zeros_like(x)
    return np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)


def perturb(transform, delta):
    """Left-multiplicative local update: (exp(w) R, exp(w) t + v)."""
    step = Rotation.from_rotvec(np.asarray(delta[:3], dtype=np.float64)).as_matrix()
    return RigidTransform(step @ transform.rotation, step @ transform.translation + np.asarray(delta[3:]))


@dataclass(eq=False)
class CalibGraph:
    """
    Vertices are the rig cameras and one rig pose per image; every
    observation is an edge between them.

    Edges whose detected corner lies outside the image carry a zero
    visibility indicator and never enter the objective.
    """

    rig: object
    poses: dict
    observations: Observations
    inside: np.ndarray = field(init=False)

    def __post_init__(self):
        obs = self.observations
        if len(obs) == 0:
            raise ArgError('calibration needs at least one observation')
        missing = [role for role in obs.roles() if role not in self.rig]
        if missing:
            raise ArgError(f'observations reference camera {missing[0]!r} missing from the rig')
        absent = [image for image in obs.image_ids() if image not in self.poses]
        if absent:
            raise ArgError(f'observations reference image {absent[0]} with no pose')
        inside = np.zeros(len(obs), dtype=bool)
        for role in obs.roles():
            camera = self.rig.camera(role)
            rows = obs.cameras == role
            u, v = obs.pixels[rows, 0], obs.pixels[rows, 1]
            inside[rows] = (u >= -0.5) & (u <= camera.width - 0.5) & (v >= -0.5) & (v <= camera.height - 0.5)
        self.inside = inside

    @property
    def roles(self):
        """Cameras with at least one edge, in rig order."""
        present = set(self.observations.roles())
        return [camera.role for camera in self.rig.cameras if camera.role in present]

    @property
    def image_ids(self):
        return self.observations.image_ids()

    def with_params(self, rig, poses):
        return CalibGraph(rig, poses, self.observations)


def camera_points(rig, poses, observations):
    """Board corners expressed in each observing camera's frame, (N, 3)."""
    out = np.zeros((len(observations), 3))
    for image in observations.image_ids():
        rows = observations.images == image
        out[rows] = poses[image].apply(observations.points[rows])
    for role in observations.roles():
        rows = observations.cameras == role
        out[rows] = rig.camera(role).extrinsic.apply(out[rows])
    return out


def residuals(graph, rig=None, poses=None):
    """
    Reprojection residuals x_hat - x of every edge, (N, 2), with the edges
    usable this evaluation: inside the image and in front of the camera.
    """
    rig = graph.rig if rig is None else rig
    poses = graph.poses if poses is None else poses
    obs = graph.observations
    points = camera_points(rig, poses, obs)
    front = points[:, 2] > 0
    out = np.zeros((len(obs), 2))
    for role in obs.roles():
        rows = (obs.cameras == role) & front
        out[rows] = project_unchecked(points[rows], rig.camera(role).intrinsics) - obs.pixels[rows]
    return out, graph.inside & front


def reprojection_residual(graph, edge, rig=None, poses=None):
    """Residual of one edge in pixels; None when the edge is not usable."""
    values, usable = residuals(graph, rig, poses)
    return values[edge] if usable[edge] else None


def jacobians(graph, rig=None, poses=None, threads=None):
    """
    Residuals and their Jacobians w.r.t. the camera block (intrinsics,
    distortion, local extrinsic update) and the pose block (local update).

    Returns (residuals (N, 2), usable (N,), J_camera (N, 2, 15), J_pose (N, 2, 6)).
    """
    rig = graph.rig if rig is None else rig
    poses = graph.poses if poses is None else poses
    obs = graph.observations
    board = np.zeros((len(obs), 3))
    for image in obs.image_ids():
        rows = obs.images == image
        board[rows] = poses[image].apply(obs.points[rows])
    roles = obs.cameras

    def band(start, stop):
        packed = np.zeros((stop - start, 2, CAMERA_BLOCK + POSE_BLOCK + 1))
        for role in set(roles[start:stop].tolist()):
            camera = rig.camera(role)
            rows = np.nonzero(roles[start:stop] == role)[0]
            q = board[start + rows]
            c = camera.extrinsic.apply(q)
            front = c[:, 2] > 0
            rows, q, c = rows[front], q[front], c[front]
            d_point, d_intr, d_dist = projection_jacobians(c, camera.intrinsics)
            residual = project_unchecked(c, camera.intrinsics) - obs.pixels[start + rows]
            d_ext = np.concatenate([-skew(c), np.broadcast_to(np.eye(3), c.shape + (3,))], axis=-1)
            d_pose = camera.extrinsic.rotation @ np.concatenate(
                [-skew(q), np.broadcast_to(np.eye(3), q.shape + (3,))], axis=-1,
            )
            packed[rows, :, 0:4] = d_intr
            packed[rows, :, 4:9] = d_dist
            packed[rows, :, 9:15] = d_point @ d_ext
            packed[rows, :, 15:21] = d_point @ d_pose
            packed[rows, :, 21] = residual
        return packed

    packed = map_row_bands(band, len(obs), threads)
    front = camera_points(rig, poses, obs)[:, 2] > 0
    return packed[:, :, 21], graph.inside & front, packed[:, :, :CAMERA_BLOCK], packed[:, :, CAMERA_BLOCK:21]


def frozen_camera_params(role):
    """Indices of the camera block held fixed for role."""
    if role == REFERENCE_ROLE:
        return list(range(len(INTRINSIC_NAMES), CAMERA_BLOCK))
    return []


def apply_camera_update(camera, delta):
    """Camera with its block moved by delta (15,)."""
    intr = camera.intrinsics
    values = np.array([intr.fx, intr.fy, intr.cx, intr.cy, *intr.dist]) + delta[:9]
    intrinsics = intr.with_params(fx=values[0], fy=values[1], cx=values[2], cy=values[3], dist=tuple(values[4:9]))
    extrinsic = camera.extrinsic
    if camera.role != REFERENCE_ROLE:
        extrinsic = perturb(extrinsic, delta[9:15])
    return type(camera)(camera.role, camera.width, camera.height, intrinsics, extrinsic)
