"""
Joint bundle adjustment of the four-camera rig from planar board corners.

Levenberg-Marquardt on the Huber-robustified reprojection error, solved
through the Schur complement on the board-pose blocks.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.transform import Rotation

from core.conf import get_setting
from core.exceptions import ArgError, IoError, ParseError, SingularError
from geometry.cameras import REFERENCE_ROLE, ROLES, RigidTransform, orthonormalize
from geometry.services import compose, invert, project_unchecked, undistort_points

from .graph import (
    CAMERA_BLOCK,
    EXTRINSIC_NAMES,
    INTRINSIC_NAMES,
    POSE_BLOCK,
    CalibGraph,
    Observations,
    RobustKernel,
    apply_camera_update,
    frozen_camera_params,
    jacobians,
    perturb,
    residuals,
)

logger = logging.getLogger(__name__)

OBSERVATION_COLUMNS = ('cam', 'image', 'point_id', 'X', 'Y', 'Z', 'u', 'v')

MIN_IMAGES_PER_CAMERA = 3
MIN_CORNERS_PER_IMAGE = 6

COST_FLOOR_PER_EDGE = 1e-20
LAMBDA_CEILING = 1e16


# Observations file ----------------------------------------------------------

def parse_observations_text(text):
    """
    Parse `cam,image,point_id,X,Y,Z,u,v` rows under that exact header.

    Raises:
        ParseError: with the line and column (1-based field position) of the first problem
    """
    rows = list(csv.reader(text.splitlines()))
    if not rows or [cell.strip() for cell in rows[0]] != list(OBSERVATION_COLUMNS):
        raise ParseError(f'expected header {",".join(OBSERVATION_COLUMNS)}', 1, 1)
    cameras, images, point_ids, values = [], [], [], []
    for number, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(OBSERVATION_COLUMNS):
            raise ParseError(f'expected {len(OBSERVATION_COLUMNS)} fields, got {len(row)}', number, 1)
        role = row[0].strip()
        if role not in ROLES:
            raise ParseError(f'unknown camera {role!r}', number, 1)
        ints = []
        for column in (2, 3):
            try:
                ints.append(int(row[column - 1]))
            except ValueError:
                raise ParseError(f'{OBSERVATION_COLUMNS[column - 1]} must be an integer', number, column) from None
        image, point_id = ints
        numbers = []
        for column, cell in enumerate(row[3:], start=4):
            try:
                number_value = float(cell)
            except ValueError:
                raise ParseError(f'{OBSERVATION_COLUMNS[column - 1]} must be a number', number, column) from None
            if not np.isfinite(number_value):
                raise ParseError(f'{OBSERVATION_COLUMNS[column - 1]} must be finite', number, column)
            numbers.append(number_value)
        cameras.append(role)
        images.append(image)
        point_ids.append(point_id)
        values.append(numbers)
    values = np.array(values, dtype=np.float64).reshape(-1, 5)
    return Observations(cameras, images, point_ids, values[:, :3], values[:, 3:])


def read_observations(path):
    try:
        with open(path, encoding='utf-8', newline='') as handle:
            text = handle.read()
    except OSError as exc:
        raise IoError(f'cannot read observations {path}: {exc}') from exc
    return parse_observations_text(text)


def write_observations(observations, path):
    try:
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(OBSERVATION_COLUMNS)
            for k in range(len(observations)):
                writer.writerow([
                    observations.cameras[k], int(observations.images[k]), int(observations.point_ids[k]),
                    *(repr(float(x)) for x in observations.points[k]),
                    *(repr(float(x)) for x in observations.pixels[k]),
                ])
    except OSError as exc:
        raise IoError(f'cannot write observations {path}: {exc}') from exc


# Synthetic boards -------------------------------------------------------------

def board_points(rows=5, cols=7, square=0.05):
    """Inner corners of a planar board centred on its origin, Z = 0."""
    if rows < 2 or cols < 2 or not square > 0:
        raise ArgError('board needs at least 2x2 corners and a positive square size')
    r, c = np.mgrid[0:rows, 0:cols].astype(np.float64)
    x = (c - (cols - 1) / 2.0) * square
    y = (r - (rows - 1) / 2.0) * square
    points = np.stack([x.ravel(), y.ravel(), np.zeros(rows * cols)], axis=-1)
    return np.arange(rows * cols), points


def board_poses(count=20, seed=0, distance=1.2, tilt=0.35, spread=0.1):
    """Random board poses in front of the rig, board -> pol_left frame."""
    rng = np.random.default_rng(seed)
    poses = {}
    for image in range(count):
        rotvec = rng.uniform(-tilt, tilt, size=3)
        translation = [
            rng.uniform(-spread, spread),
            rng.uniform(-spread, spread),
            distance + rng.uniform(-2 * spread, 2 * spread),
        ]
        poses[image] = RigidTransform.from_rotvec(rotvec, translation)
    return poses


def synthetic_observations(rig, poses, board=None, noise_px=0.0, seed=0):
    """
    Project the board at every pose into every camera.

    Corners behind a camera or outside its image are not observed.
    """
    point_ids, points = board_points() if board is None else board
    rng = np.random.default_rng(seed)
    cameras, images, ids, obj, pix = [], [], [], [], []
    for camera in rig.cameras:
        for image in sorted(poses):
            moved = camera.extrinsic.apply(poses[image].apply(points))
            front = moved[:, 2] > 0
            uv = project_unchecked(moved, camera.intrinsics)
            inside = (front & (uv[:, 0] >= 0) & (uv[:, 0] <= camera.width - 1)
                      & (uv[:, 1] >= 0) & (uv[:, 1] <= camera.height - 1))
            if not inside.any():
                continue
            if noise_px:
                uv = uv + rng.normal(0.0, noise_px, size=uv.shape)
            count = int(inside.sum())
            cameras.extend([camera.role] * count)
            images.extend([image] * count)
            ids.append(point_ids[inside])
            obj.append(points[inside])
            pix.append(uv[inside])
    if not cameras:
        raise ArgError('no board corner is visible in any camera')
    return Observations(cameras, images, np.concatenate(ids), np.concatenate(obj), np.concatenate(pix))


# Initialisation ----------------------------------------------------------------

def homography_dlt(source, target):
    """
    Normalised DLT homography taking source (N, 2) to target (N, 2).

    Raises:
        ArgError: fewer than four correspondences
        SingularError: degenerate configuration
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(source) < 4:
        raise ArgError('a homography needs at least four correspondences')

    def normaliser(points):
        centre = points.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(points - centre, axis=1)), 1e-12)
        return np.array([[scale, 0.0, -scale * centre[0]], [0.0, scale, -scale * centre[1]], [0.0, 0.0, 1.0]])

    ts, tt = normaliser(source), normaliser(target)
    s = (np.column_stack([source, np.ones(len(source))]) @ ts.T)[:, :2]
    t = (np.column_stack([target, np.ones(len(target))]) @ tt.T)[:, :2]
    rows = []
    for (x, y), (u, v) in zip(s, t):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, singular, vt = np.linalg.svd(np.array(rows))
    if singular[-2] < 1e-12 * singular[0]:
        raise SingularError('degenerate homography correspondences', diagnostics={'singular_values': singular})
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tt) @ h @ ts
    return h / h[2, 2]


def board_pose_from_homography(intrinsics, board_xy, pixels):
    """Board -> camera transform from one planar view (Z = 0 board)."""
    normalised = undistort_points(pixels, intrinsics)
    h = homography_dlt(board_xy, normalised)
    scale = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    if h[2, 2] * scale < 0:
        scale = -scale
    r1, r2, t = h[:, 0] * scale, h[:, 1] * scale, h[:, 2] * scale
    rotation = orthonormalize(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return RigidTransform(rotation, t)


def initial_poses(rig, observations):
    """
    Per-camera initialisation of every board pose.

    Each image takes the pose seen by the camera with the most corners
    (pol_left on ties), moved into the pol_left frame through that
    camera's current extrinsic.
    """
    poses = {}
    order = {role: k for k, role in enumerate(ROLES)}
    for image in observations.image_ids():
        rows = observations.images == image
        counts = {}
        for role in set(observations.cameras[rows].tolist()):
            counts[role] = int(np.count_nonzero(rows & (observations.cameras == role)))
        role = min(counts, key=lambda r: (-counts[r], order[r]))
        chosen = rows & (observations.cameras == role)
        if counts[role] < 4:
            raise ArgError(f'image {image} has fewer than four corners in any camera')
        camera = rig.camera(role)
        seen = board_pose_from_homography(
            camera.intrinsics, observations.points[chosen, :2], observations.pixels[chosen],
        )
        poses[image] = compose(invert(camera.extrinsic), seen)
    return poses


def check_solvable(graph):
    """
    Raises:
        ArgError: a camera has fewer than three images with six usable corners
    """
    obs = graph.observations
    for role in graph.roles:
        rows = (obs.cameras == role) & graph.inside
        images, counts = np.unique(obs.images[rows], return_counts=True)
        good = int(np.count_nonzero(counts >= MIN_CORNERS_PER_IMAGE))
        if good < MIN_IMAGES_PER_CAMERA:
            raise ArgError(
                f'camera {role} sees only {good} images with at least {MIN_CORNERS_PER_IMAGE} corners; '
                f'{MIN_IMAGES_PER_CAMERA} are needed'
            )


# Optimisation ------------------------------------------------------------------

@dataclass
class CalibReport:
    initial_rmse: float
    final_rmse: float
    initial_cost: float
    final_cost: float
    iterations: int
    accepted: int
    converged: bool
    edges: int
    disabled_edges: int
    cost_history: list = field(default_factory=list)

    def rows(self):
        return [
            ('initial_rmse_px', self.initial_rmse),
            ('final_rmse_px', self.final_rmse),
            ('initial_cost', self.initial_cost),
            ('final_cost', self.final_cost),
            ('iterations', self.iterations),
            ('accepted_steps', self.accepted),
            ('converged', int(self.converged)),
            ('edges', self.edges),
            ('disabled_edges', self.disabled_edges),
        ]


def rmse(values, usable):
    if not usable.any():
        return float('nan')
    return float(np.sqrt(np.mean(np.sum(values[usable] ** 2, axis=1))))


def robust_cost(graph, kernel, rig=None, poses=None):
    values, usable = residuals(graph, rig, poses)
    norms = np.linalg.norm(values, axis=1)
    return float(np.sum(kernel.cost(norms[usable]))), values, usable


@dataclass
class _NormalEquations:
    cost: float
    camera: np.ndarray
    camera_grad: np.ndarray
    pose: np.ndarray
    pose_grad: np.ndarray
    coupling: np.ndarray
    usable: np.ndarray


def _normal_equations(graph, kernel, rig, poses, threads):
    r, usable, j_cam, j_pose = jacobians(graph, rig, poses, threads)
    norms = np.linalg.norm(r, axis=1)
    weights = np.where(usable, kernel.weight(norms), 0.0)
    obs = graph.observations
    roles = graph.roles
    images = np.array(graph.image_ids)
    image_index = np.searchsorted(images, obs.images)
    size = len(roles) * CAMERA_BLOCK
    camera = np.zeros((size, size))
    camera_grad = np.zeros(size)
    pose = np.zeros((len(images), POSE_BLOCK, POSE_BLOCK))
    pose_grad = np.zeros((len(images), POSE_BLOCK))
    coupling = np.zeros((len(images), size, POSE_BLOCK))
    for k, role in enumerate(roles):
        rows = np.nonzero((obs.cameras == role) & usable)[0]
        block = slice(k * CAMERA_BLOCK, (k + 1) * CAMERA_BLOCK)
        w, jc, jp, rr = weights[rows], j_cam[rows], j_pose[rows], r[rows]
        camera[block, block] += np.einsum('n,nai,naj->ij', w, jc, jc)
        camera_grad[block] += np.einsum('n,nai,na->i', w, jc, rr)
        np.add.at(coupling[:, block, :], image_index[rows], np.einsum('n,nai,naj->nij', w, jc, jp))
    rows = np.nonzero(usable)[0]
    np.add.at(pose, image_index[rows], np.einsum('n,nai,naj->nij', weights[rows], j_pose[rows], j_pose[rows]))
    np.add.at(pose_grad, image_index[rows], np.einsum('n,nai,na->ni', weights[rows], j_pose[rows], r[rows]))
    cost = float(np.sum(kernel.cost(norms[usable])))
    return _NormalEquations(cost, camera, camera_grad, pose, pose_grad, coupling, usable)


def _free_camera_indices(roles):
    free = []
    for k, role in enumerate(roles):
        frozen = set(frozen_camera_params(role))
        free.extend(k * CAMERA_BLOCK + i for i in range(CAMERA_BLOCK) if i not in frozen)
    return np.array(free, dtype=np.intp)


def _parameter_name(roles, index):
    role = roles[index // CAMERA_BLOCK]
    names = INTRINSIC_NAMES + EXTRINSIC_NAMES
    return f'{role}.{names[index % CAMERA_BLOCK]}'


def _solve_step(eq, free, lam, roles, image_ids):
    """
    Damped step (camera deltas, pose deltas) via the Schur complement.

    Raises:
        SingularError: a parameter is unconstrained or a block is not positive definite
    """
    camera_diag = np.diag(eq.camera)
    dead = [int(i) for i in free if camera_diag[i] <= 0]
    pose_diag = np.diagonal(eq.pose, axis1=1, axis2=2)
    dead_poses = [image_ids[i] for i in range(len(image_ids)) if np.any(pose_diag[i] <= 0)]
    if dead or dead_poses:
        raise SingularError(
            'normal equations are rank deficient',
            diagnostics={
                'unconstrained_parameters': [_parameter_name(roles, i) for i in dead],
                'unconstrained_poses': dead_poses,
            },
        )
    damped_camera = eq.camera + lam * np.diag(camera_diag)
    pose_inv_coupling = np.zeros((len(image_ids), POSE_BLOCK, eq.camera.shape[0]))
    pose_inv_grad = np.zeros((len(image_ids), POSE_BLOCK))
    for i, image in enumerate(image_ids):
        damped = eq.pose[i] + lam * np.diag(pose_diag[i])
        try:
            factor = cho_factor(damped)
        except LinAlgError as exc:
            raise SingularError(f'pose block of image {image} is not positive definite',
                                diagnostics={'image': image}) from exc
        pose_inv_coupling[i] = cho_solve(factor, eq.coupling[i].T)
        pose_inv_grad[i] = cho_solve(factor, eq.pose_grad[i])

    schur = damped_camera - np.einsum('inj,ijm->nm', eq.coupling, pose_inv_coupling)
    rhs = -eq.camera_grad + np.einsum('inj,ij->n', eq.coupling, pose_inv_grad)
    delta_camera = np.zeros(eq.camera.shape[0])
    if free.size:
        try:
            factor = cho_factor(schur[np.ix_(free, free)])
        except LinAlgError as exc:
            raise SingularError(
                'reduced camera system is not positive definite',
                diagnostics={'parameters': [_parameter_name(roles, i) for i in free]},
            ) from exc
        delta_camera[free] = cho_solve(factor, rhs[free])
    delta_pose = -pose_inv_grad - np.einsum('ijn,n->ij', pose_inv_coupling, delta_camera)
    return delta_camera, delta_pose


def _apply_step(rig, poses, roles, image_ids, delta_camera, delta_pose):
    for k, role in enumerate(roles):
        block = delta_camera[k * CAMERA_BLOCK:(k + 1) * CAMERA_BLOCK]
        rig = rig.replace(apply_camera_update(rig.camera(role), block))
    poses = {image: perturb(poses[image], delta_pose[i]) for i, image in enumerate(image_ids)}
    return rig, poses


def optimize(graph, kernel=None, max_iters=None, tol=None, lambda0=None, threads=None):
    """
    Levenberg-Marquardt on the summed Huber reprojection cost.

    Stops when an accepted step lowers the cost by a relative amount below
    tol, when max_iters steps have been tried, or when damping saturates.
    Accepted steps never raise the cost.

    Returns (refined rig, refined poses, CalibReport).

    Raises:
        ArgError: too few images or corners per camera
        SingularError: rank-deficient normal equations, with diagnostics
    """
    kernel = RobustKernel.from_settings() if kernel is None else kernel
    max_iters = get_setting('LM_MAX_ITERS') if max_iters is None else max_iters
    tol = get_setting('LM_TOLERANCE') if tol is None else tol
    lam = get_setting('LM_INITIAL_LAMBDA') if lambda0 is None else lambda0
    check_solvable(graph)
    roles = graph.roles
    image_ids = graph.image_ids
    free = _free_camera_indices(roles)
    rig, poses = graph.rig, dict(graph.poses)

    eq = _normal_equations(graph, kernel, rig, poses, threads)
    values, usable = residuals(graph, rig, poses)
    initial_rmse = rmse(values, usable)
    disabled = int(np.count_nonzero(~usable))
    if disabled:
        logger.debug('%d of %d edges are outside the image or behind the camera', disabled, len(usable))
    history = [eq.cost]
    iterations, accepted, converged = 0, 0, False
    while iterations < max_iters:
        if eq.cost <= COST_FLOOR_PER_EDGE * max(int(eq.usable.sum()), 1):
            converged = True
            break
        iterations += 1
        delta_camera, delta_pose = _solve_step(eq, free, lam, roles, image_ids)
        try:
            candidate_rig, candidate_poses = _apply_step(rig, poses, roles, image_ids, delta_camera, delta_pose)
            candidate_cost, _, _ = robust_cost(graph, kernel, candidate_rig, candidate_poses)
        except ArgError:
            candidate_cost = np.inf
        if candidate_cost < eq.cost:
            relative = (eq.cost - candidate_cost) / eq.cost
            rig, poses = candidate_rig, candidate_poses
            lam /= 10.0
            accepted += 1
            eq = _normal_equations(graph, kernel, rig, poses, threads)
            history.append(eq.cost)
            logger.debug('LM iteration %d: cost %.6g, lambda %.1e', iterations, eq.cost, lam)
            if relative < tol:
                converged = True
                break
        else:
            lam *= 10.0
            logger.debug('LM iteration %d rejected, lambda %.1e', iterations, lam)
            if lam > LAMBDA_CEILING:
                converged = True
                break

    values, usable = residuals(graph, rig, poses)
    report = CalibReport(
        initial_rmse=initial_rmse, final_rmse=rmse(values, usable),
        initial_cost=history[0], final_cost=eq.cost, iterations=iterations, accepted=accepted,
        converged=converged, edges=len(usable), disabled_edges=int(np.count_nonzero(~usable)),
        cost_history=history,
    )
    logger.info(
        'Bundle adjustment: RMSE %.4g px -> %.4g px in %d iterations (%d accepted)',
        report.initial_rmse, report.final_rmse, iterations, accepted,
    )
    return rig, poses, report


def calibrate(observations, rig, kernel=None, max_iters=None, tol=None, threads=None):
    """Initialise board poses from the rig and jointly refine everything."""
    graph = CalibGraph(rig, initial_poses(rig, observations), observations)
    return optimize(graph, kernel, max_iters, tol, threads=threads)


def perturb_rig(rig, seed=0, rotation_deg=1.0, translation_m=0.01, focal_scale=1.02):
    """Rig with every non-reference extrinsic nudged and every focal length scaled."""
    rng = np.random.default_rng(seed)
    for camera in rig.cameras:
        intr = camera.intrinsics
        delta = np.zeros(CAMERA_BLOCK)
        delta[0] = intr.fx * (focal_scale - 1.0)
        delta[1] = intr.fy * (focal_scale - 1.0)
        if camera.role != REFERENCE_ROLE:
            axis = rng.normal(size=3)
            delta[9:12] = np.deg2rad(rotation_deg) * axis / np.linalg.norm(axis)
            direction = rng.normal(size=3)
            delta[12:15] = translation_m * direction / np.linalg.norm(direction)
        rig = rig.replace(apply_camera_update(camera, delta))
    return rig


def perturb_poses(poses, seed=0, rotation_deg=1.0, translation_m=0.01):
    rng = np.random.default_rng(seed)
    out = {}
    for image in sorted(poses):
        axis = rng.normal(size=3)
        direction = rng.normal(size=3)
        step = np.concatenate([
            np.deg2rad(rotation_deg) * axis / np.linalg.norm(axis),
            translation_m * direction / np.linalg.norm(direction),
        ])
        out[image] = perturb(poses[image], step)
    return out


def rotation_error_deg(a, b):
    """Angle of a^T b in degrees."""
    return float(np.rad2deg(np.linalg.norm(Rotation.from_matrix(a.T @ b).as_rotvec())))
