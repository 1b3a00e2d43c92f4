"""
Ground-truth factory: ray-cast analytic scenes into every camera of the rig
and push the depths through the polarisation and i-ToF forward models.
"""
import logging

import numpy as np

from core.conf import get_setting
from core.exceptions import IoError, ParseError
from core.parallel import map_row_bands
from geometry.cameras import CameraModel, CameraRig
from geometry.services import bind_record_form, iter_record_lines, make_camera
from imaging.containers import CorrelationImage, DepthField, FrameBundle, ImagePlane, PolarisationImage
from imaging.services import read_plane, write_plane
from itof.services import ItofConfig, correlation_from_depth
from losses.services import TemporalFrame
from normals.services import camera_rays
from polarisation.services import SPECULAR, render_polarisation

from .forms import PRIMITIVE_FORMS, NoiseForm, SceneLineForm
from .scenes import NoiseSpec, SceneSpec, cast_rays

logger = logging.getLogger(__name__)

NOISE_STREAMS = ('pol_left', 'pol_right', 'corr', 'struct')

INDEX_ROLE = 'primitive_index'


def _split_kind(line):
    stripped = line.lstrip()
    offset = len(line) - len(stripped)
    kind, _, rest = stripped.partition(' ')
    return kind, rest, offset + len(kind) + 1


def parse_scene_text(text):
    """
    Parse a scene file.

    Each line starts with its kind (`scene`, `plane`, `sphere` or `box`)
    followed by key=value fields. A `scene` line may set eta; primitive
    lines carry their geometry and material.

    Raises:
        ParseError: with the line and column of the first problem
    """
    primitives = []
    eta = None
    for number, line in iter_record_lines(text):
        kind, rest, column_offset = _split_kind(line)
        if kind == 'scene':
            form = bind_record_form(SceneLineForm, rest, number, column_offset)
            if form.cleaned_data.get('eta') is not None:
                eta = form.cleaned_data['eta']
            continue
        form_class = PRIMITIVE_FORMS.get(kind)
        if form_class is None:
            raise ParseError(f'unknown primitive {kind!r}', number, len(line) - len(line.lstrip()) + 1)
        primitives.append(bind_record_form(form_class, rest, number, column_offset).to_primitive())
    if not primitives:
        raise ParseError('scene lists no primitives', 1, 1)
    return SceneSpec(tuple(primitives), get_setting('REFRACTIVE_INDEX') if eta is None else eta)


def read_scene(path):
    try:
        with open(path, encoding='utf-8') as handle:
            text = handle.read()
    except OSError as exc:
        raise IoError(f'cannot read scene file {path}: {exc}') from exc
    return parse_scene_text(text)


def parse_noise_text(text):
    """Parse `pol=.. corr=.. struct=.. seed=..` into a NoiseSpec."""
    return bind_record_form(NoiseForm, text, 1, 0).to_noise()


def desk_rig(pol_size=64):
    """
    The desk-scale four-camera rig, scaled with the polarisation resolution.

    At pol_size 64: polarisation cameras 64x64 (fx 50) with a 10 cm
    baseline, i-ToF 64x48 (fx 40) 3 cm to the side, structured light 96x96
    (fx 75) 5 cm to the side.
    """
    s = pol_size / 64.0
    itof_w, itof_h = pol_size, max(2, int(round(48 * s)))
    struct_size = int(round(96 * s))

    def centred(role, width, height, focal, translation):
        return make_camera(
            role, width, height, focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
            translation=translation,
        )

    return CameraRig([
        centred('pol_left', pol_size, pol_size, 50.0 * s, (0.0, 0.0, 0.0)),
        centred('pol_right', pol_size, pol_size, 50.0 * s, (-0.1, 0.0, 0.0)),
        centred('itof', itof_w, itof_h, 40.0 * s, (-0.03, 0.0, 0.0)),
        centred('structured_light', struct_size, struct_size, 75.0 * s, (0.05, 0.0, 0.0)),
    ])


def render_surface(scene, camera, threads=None):
    """
    Ray-cast the scene into one camera.

    Returns (DepthField of z-depth, primitive index per pixel with -1 on a
    miss, hit points (H, W, 3) in the pol_left frame).
    """
    rays = camera_rays(camera.intrinsics, camera.width, camera.height)
    rotation = camera.extrinsic.rotation
    origin = -rotation.T @ camera.extrinsic.translation
    directions = np.moveaxis(rays, 0, -1) @ rotation

    def band(start, stop):
        dirs = directions[start:stop].reshape(-1, 3)
        distance, index = cast_rays(scene, origin, dirs)
        points = origin + np.where(np.isfinite(distance), distance, 0.0)[:, None] * dirs
        packed = np.column_stack([distance, index, points])
        return packed.reshape(stop - start, camera.width, 5)

    packed = map_row_bands(band, camera.height, threads)
    distance = packed[..., 0]
    depth = DepthField(np.where(np.isfinite(distance), distance, np.nan))
    return depth, packed[..., 1].astype(np.intp), packed[..., 2:]


def render_depth(scene, camera, threads=None):
    """Nearest-surface z-depth per pixel; rays that miss everything are invalid."""
    return render_surface(scene, camera, threads)[0]


def _material_maps(scene, index, points):
    albedo = np.zeros(index.shape)
    specular = np.zeros(index.shape, dtype=bool)
    reflectance = np.zeros(index.shape)
    ambient = np.zeros(index.shape)
    for k, primitive in enumerate(scene.primitives):
        hit = index == k
        if not hit.any():
            continue
        material = primitive.material
        albedo[hit] = material.albedo_at(points[hit])
        specular[hit] = material.reflection == SPECULAR
        reflectance[hit] = material.reflectance
        ambient[hit] = material.ambient
    return albedo, specular, reflectance, ambient


def render_polarisation_view(scene, camera, threads=None):
    """Noiseless four-angle image of the scene seen from camera."""
    depth, index, points = render_surface(scene, camera, threads)
    albedo, specular, _, _ = _material_maps(scene, index, points)
    return render_polarisation(depth, albedo[None], camera.intrinsics, scene.eta, specular)


def noise_generators(seed):
    """One Philox stream per modality, spawned from the seed."""
    children = np.random.SeedSequence(seed).spawn(len(NOISE_STREAMS))
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(NOISE_STREAMS, children)}


def _noisy_pol(image, sigma, rng):
    if sigma == 0:
        return image
    data = image.data + rng.normal(0.0, sigma, size=image.shape)
    return PolarisationImage(np.maximum(data, 0.0))


def render_frame(scene, rig, noise=None, frame_id=0, itof_cfg=None, struct_max_range=None, threads=None):
    """
    Render every modality of one capture.

    Structured-light depth beyond struct_max_range is invalid. Missing
    cameras in the rig simply leave their roles out of the bundle.
    """
    noise = NoiseSpec() if noise is None else noise
    itof_cfg = ItofConfig.from_settings() if itof_cfg is None else itof_cfg
    struct_max_range = get_setting('STRUCT_MAX_RANGE_M') if struct_max_range is None else struct_max_range
    streams = noise_generators(noise.seed)
    left = rig.camera('pol_left')
    items = {}

    gt_depth, index, points = render_surface(scene, left, threads)
    albedo, specular, _, _ = _material_maps(scene, index, points)
    pol_left = render_polarisation(gt_depth, albedo[None], left.intrinsics, scene.eta, specular)
    pol_left = _noisy_pol(pol_left, noise.pol, streams['pol_left'])

    if 'pol_right' in rig:
        view = render_polarisation_view(scene, rig.camera('pol_right'), threads)
        items['pol_right'] = _noisy_pol(view, noise.pol, streams['pol_right'])

    if 'itof' in rig:
        itof = rig.camera('itof')
        depth, index, points = render_surface(scene, itof, threads)
        _, _, reflectance, ambient = _material_maps(scene, index, points)
        corr = correlation_from_depth(depth, reflectance, ambient, itof_cfg)
        if noise.corr:
            corr = CorrelationImage(corr.data + streams['corr'].normal(0.0, noise.corr, size=corr.shape))
        items['corr'] = corr

    if 'structured_light' in rig:
        depth = render_depth(scene, rig.camera('structured_light'), threads)
        mask = depth.mask & (depth.filled(np.inf) <= struct_max_range)
        values = depth.filled(np.nan)
        if noise.struct:
            values = values + streams['struct'].normal(0.0, noise.struct, size=values.shape)
        items['struct_depth'] = DepthField(values, mask)

    logger.debug('Rendered frame %d with roles %s', frame_id, ['pol_left', 'gt_depth'] + sorted(items))
    return FrameBundle(pol_left=pol_left, rig=rig, gt_depth=gt_depth, frame_id=frame_id, **items)


def render_temporal_frames(scene, rig, poses, noise=None, threads=None):
    """
    Left-polarisation views from neighbouring poses.

    Each pose maps points of the current pol_left frame into the pol_left
    camera of the neighbouring frame.
    """
    noise = NoiseSpec() if noise is None else noise
    left = rig.camera('pol_left')
    frames = []
    for offset, pose in enumerate(poses, start=1):
        camera = CameraModel(left.role, left.width, left.height, left.intrinsics, pose)
        image = render_polarisation_view(scene, camera, threads)
        rng = noise_generators(noise.seed + offset)['pol_left']
        frames.append(TemporalFrame(pol=_noisy_pol(image, noise.pol, rng), transform=pose))
    return frames


def write_primitive_index(scene, camera, directory, threads=None):
    """Store the primitive hit by every pixel of camera (-1 on a miss) next to a bundle."""
    _, index, _ = render_surface(scene, camera, threads)
    write_plane(directory, INDEX_ROLE, ImagePlane(index.astype(np.float64)))


def read_primitive_index(directory):
    return read_plane(directory, INDEX_ROLE)[0].astype(np.intp)
