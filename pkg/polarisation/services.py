"""
Depth to polarisation: Fresnel degree of polarisation, phase angle and the
four-angle intensity model, for diffuse and specular reflection.

The intensity behind a polariser at angle phi_pol is
i_un * (1 + rho * cos(2 phi_pol - 2 phi)). With phi_pol on the four
standard angles this expands to i_un * (1 +/- rho * (a cos 2alpha + b sin 2alpha))
with (a, b) from POLARISER_TRIG, + for diffuse and - for specular.
"""
from dataclasses import dataclass

import numpy as np

from core.conf import get_setting
from core.exceptions import ArgError
from imaging.containers import PolarisationImage
from normals.services import camera_rays, unit_rays, weighted_normal_forward, weighted_normal_vjp

DIFFUSE = 'diffuse'
SPECULAR = 'specular'
REFLECTIONS = (DIFFUSE, SPECULAR)

# (cos 2phi_pol, sin 2phi_pol) for 0, 45, 90 and 135 degrees.
POLARISER_TRIG = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))

# Specular reflection is evaluated at theta <= pi/2 - GRAZING_MARGIN.
GRAZING_MARGIN = 1e-6
MIN_SPECULAR_COS = np.sin(GRAZING_MARGIN)

DEGENERATE_AZIMUTH = 1e-30


def _check_reflection(reflection):
    if reflection not in REFLECTIONS:
        raise ArgError(f'reflection must be diffuse or specular, got {reflection!r}')


def _check_eta(eta):
    if not eta > 1:
        raise ArgError(f'refractive index must exceed 1, got {eta}')


def diffuse_dop(cos_theta, eta):
    """Diffuse degree of polarisation and its derivative w.r.t. cos(theta)."""
    c = np.asarray(cos_theta, dtype=np.float64)
    s2 = 1.0 - c * c
    q = np.sqrt(eta * eta - s2)
    a = (eta - 1.0 / eta) ** 2
    b = (eta + 1.0 / eta) ** 2
    num = a * s2
    den = 2.0 + 2.0 * eta * eta - b * s2 + 4.0 * c * q
    d_num = -2.0 * a * c
    d_den = 2.0 * b * c + 4.0 * q + 4.0 * c * c / q
    rho = num / den
    return rho, (d_num * den - num * d_den) / (den * den)


def specular_dop(cos_theta, eta):
    """
    Specular degree of polarisation and its derivative w.r.t. cos(theta).

    cos(theta) is floored at sin(GRAZING_MARGIN); the derivative is zero
    where the floor is active.
    """
    raw = np.asarray(cos_theta, dtype=np.float64)
    clamped = raw < MIN_SPECULAR_COS
    c = np.where(clamped, MIN_SPECULAR_COS, raw)
    s2 = 1.0 - c * c
    q = np.sqrt(eta * eta - s2)
    num = 2.0 * s2 * c * q
    den = eta * eta - (1.0 + eta * eta) * s2 + 2.0 * s2 * s2
    d_num = 2.0 * (-2.0 * c * c * q + s2 * q + s2 * c * c / q)
    d_den = (-(1.0 + eta * eta) + 4.0 * s2) * (-2.0 * c)
    rho = num / den
    d_rho = (d_num * den - num * d_den) / (den * den)
    return rho, np.where(clamped, 0.0, d_rho)


def degree_of_polarisation(theta, eta=None, reflection=DIFFUSE):
    """
    Degree of linear polarisation for viewing angle theta.

    Args:
        theta: viewing angle(s) in [0, pi/2]
        eta: refractive index, > 1 (defaults to settings)
        reflection: 'diffuse' or 'specular'
    """
    eta = get_setting('REFRACTIVE_INDEX') if eta is None else eta
    _check_reflection(reflection)
    _check_eta(eta)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any((theta < 0) | (theta > np.pi / 2)):
        raise ArgError('viewing angle must lie in [0, pi/2]')
    if reflection == SPECULAR:
        theta = np.minimum(theta, np.pi / 2 - GRAZING_MARGIN)
        rho, _ = specular_dop(np.cos(theta), eta)
    else:
        rho, _ = diffuse_dop(np.cos(theta), eta)
    return rho


def polarisation_phase(alpha, reflection=DIFFUSE):
    """Phase angle in [0, pi): alpha for diffuse, alpha + pi/2 for specular."""
    _check_reflection(reflection)
    alpha = np.asarray(alpha, dtype=np.float64)
    shift = 0.0 if reflection == DIFFUSE else np.pi / 2
    phi = np.mod(alpha + shift, np.pi)
    return np.where(phi >= np.pi, 0.0, phi)


def polarisation_intensity(i_un, rho, phi, phi_pol):
    return np.asarray(i_un) * (1.0 + np.asarray(rho) * np.cos(2.0 * np.asarray(phi_pol) - 2.0 * np.asarray(phi)))


def double_azimuth(nx, ny):
    """
    cos 2alpha and sin 2alpha of alpha = atan2(ny, nx), with derivatives.

    Returns (C, S, dC_dnx, dC_dny, dS_dnx, dS_dny). Where nx = ny = 0 the
    azimuth is undefined; C = 1, S = 0 and all derivatives are zero there.
    """
    m = nx * nx + ny * ny
    degenerate = m < DEGENERATE_AZIMUTH
    m_safe = np.where(degenerate, 1.0, m)
    cos2 = np.where(degenerate, 1.0, (nx * nx - ny * ny) / m_safe)
    sin2 = np.where(degenerate, 0.0, 2.0 * nx * ny / m_safe)
    m2 = m_safe * m_safe
    zero = np.zeros_like(m)
    dc_dnx = np.where(degenerate, zero, 4.0 * nx * ny * ny / m2)
    dc_dny = np.where(degenerate, zero, -4.0 * nx * nx * ny / m2)
    ds_dnx = np.where(degenerate, zero, 2.0 * ny * (ny * ny - nx * nx) / m2)
    ds_dny = np.where(degenerate, zero, 2.0 * nx * (nx * nx - ny * ny) / m2)
    return cos2, sin2, dc_dnx, dc_dny, ds_dnx, ds_dny


@dataclass(eq=False)
class ShadingState:
    """Per-pixel polarisation parameters of a depth map plus adjoint intermediates."""

    rho_diffuse: np.ndarray
    rho_specular: np.ndarray
    cos2: np.ndarray
    sin2: np.ndarray
    normal_state: object
    view: np.ndarray
    cos_clamped: np.ndarray
    drho_diffuse: np.ndarray
    drho_specular: np.ndarray
    azimuth: tuple
    specular_floor: np.ndarray

    @property
    def mask(self):
        return self.normal_state.mask

    def signature(self):
        """Branch state of the non-smooth operations, for finite-difference checks."""
        return (
            self.cos_clamped.tobytes()
            + self.specular_floor.tobytes()
            + (self.azimuth[0] == 1.0).tobytes()
        )


def shading_forward(depth, guide, rays, eta, valid=None):
    """
    rho_d, rho_s, cos 2alpha and sin 2alpha of a depth array.

    Normals come from weighted_normal_forward with the given guide image.
    """
    normal_state = weighted_normal_forward(depth, guide, rays, valid=valid)
    n = normal_state.unit
    view = unit_rays(rays)
    raw_cos = np.sum(n * view, axis=0)
    cos_clamped = (raw_cos < 0.0) | (raw_cos > 1.0)
    cos_theta = np.clip(raw_cos, 0.0, 1.0)
    rho_d, drho_d = diffuse_dop(cos_theta, eta)
    rho_s, drho_s = specular_dop(cos_theta, eta)
    azimuth = double_azimuth(n[0], n[1])
    return ShadingState(
        rho_diffuse=rho_d,
        rho_specular=rho_s,
        cos2=azimuth[0],
        sin2=azimuth[1],
        normal_state=normal_state,
        view=view,
        cos_clamped=cos_clamped,
        drho_diffuse=drho_d,
        drho_specular=drho_s,
        azimuth=azimuth,
        specular_floor=cos_theta < MIN_SPECULAR_COS,
    )


def shading_vjp(state, g_rho_diffuse, g_rho_specular, g_cos2, g_sin2):
    """Pull gradients on (rho_d, rho_s, C, S) back onto the depth array."""
    g_cos = g_rho_diffuse * state.drho_diffuse + g_rho_specular * state.drho_specular
    g_cos = np.where(state.cos_clamped, 0.0, g_cos)
    g_unit = g_cos[None] * state.view
    _, _, dc_dnx, dc_dny, ds_dnx, ds_dny = state.azimuth
    g_unit[0] += g_cos2 * dc_dnx + g_sin2 * ds_dnx
    g_unit[1] += g_cos2 * dc_dny + g_sin2 * ds_dny
    return weighted_normal_vjp(state.normal_state, g_unit)


def shade(i_un, rho, cos2, sin2, reflection):
    """
    Four-angle intensities for each colour plane of i_un.

    Args:
        i_un: (K, H, W) unpolarised intensity
        rho, cos2, sin2: (H, W)
        reflection: 'diffuse', 'specular', or an (H, W) bool map, True = specular

    Returns:
        (4K, H, W), colour-major
    """
    i_un = np.asarray(i_un, dtype=np.float64)
    if i_un.ndim == 2:
        i_un = i_un[None]
    if isinstance(reflection, str):
        _check_reflection(reflection)
        sign = -1.0 if reflection == SPECULAR else 1.0
    else:
        sign = np.where(np.asarray(reflection, dtype=bool), -1.0, 1.0)
    channels = []
    for plane in i_un:
        for a, b in POLARISER_TRIG:
            channels.append(plane * (1.0 + sign * rho * (a * cos2 + b * sin2)))
    return np.stack(channels)


def render_polarisation(depth_field, i_un, intr, eta=None, reflection=DIFFUSE):
    """
    Render the four polariser-angle images seen from a depth map.

    Args:
        depth_field: DepthField on the camera's grid
        i_un: ImagePlane or (K, H, W) array; K = 1 or 3 colours
        intr: Intrinsics
        eta: refractive index (defaults to settings)
        reflection: 'diffuse', 'specular' or an (H, W) bool map (True = specular)

    Returns:
        PolarisationImage with 4 or 12 channels; invalid depth pixels are 0
    """
    eta = get_setting('REFRACTIVE_INDEX') if eta is None else eta
    _check_eta(eta)
    i_un = np.asarray(getattr(i_un, 'data', i_un), dtype=np.float64)
    if i_un.ndim == 2:
        i_un = i_un[None]
    if i_un.shape[0] not in (1, 3) or i_un.shape[1:] != depth_field.shape:
        raise ArgError(f'intensity shape {i_un.shape} does not fit depth {depth_field.shape}')
    if np.any(i_un < 0):
        raise ArgError('unpolarised intensity must be non-negative')
    height, width = depth_field.shape
    rays = camera_rays(intr, width, height)
    state = shading_forward(depth_field.filled(1.0), i_un.mean(axis=0), rays, eta, valid=depth_field.mask)
    if isinstance(reflection, str):
        _check_reflection(reflection)
        specular = np.full(depth_field.shape, reflection == SPECULAR)
    else:
        specular = np.asarray(reflection, dtype=bool)
    rho = np.where(specular, state.rho_specular, state.rho_diffuse)
    data = shade(i_un, rho, state.cos2, state.sin2, specular)
    data = np.where(depth_field.mask[None], data, 0.0)
    return PolarisationImage(data)


def decompose_polarisation(pol):
    """
    Recover (i_un, rho, phi) from a four-angle image by the linear Stokes
    relations; phi is in [0, pi). Returns arrays shaped (K, H, W).
    """
    angles = pol.angles()
    i0, i45, i90, i135 = angles[:, 0], angles[:, 1], angles[:, 2], angles[:, 3]
    i_un = angles.mean(axis=1)
    s1 = 0.5 * (i0 - i90)
    s2 = 0.5 * (i45 - i135)
    with np.errstate(divide='ignore', invalid='ignore'):
        rho = np.where(i_un > 0, np.sqrt(s1 * s1 + s2 * s2) / i_un, 0.0)
    phi = np.mod(0.5 * np.arctan2(s2, s1), np.pi)
    phi = np.where(phi >= np.pi, 0.0, phi)
    return i_un, rho, phi


def recovered_polarisation(depth_field, pol_observed, intr, eta=None, reflection=None):
    """
    Recovered polarisation images from a depth estimate, with i_un taken
    from the observed image.

    Returns (diffuse, specular, combined, specular_mask). When reflection is
    None the combined image picks, per pixel, the variant closer to the
    observation in L1 (ties to diffuse).
    """
    i_un = pol_observed.unpolarised()
    diffuse = render_polarisation(depth_field, i_un, intr, eta, DIFFUSE)
    specular = render_polarisation(depth_field, i_un, intr, eta, SPECULAR)
    if reflection is None:
        err_d = np.abs(diffuse.data - pol_observed.data).sum(axis=0)
        err_s = np.abs(specular.data - pol_observed.data).sum(axis=0)
        reflection = err_s < err_d
    reflection = np.asarray(reflection, dtype=bool)
    combined = np.where(reflection[None], specular.data, diffuse.data)
    return diffuse, specular, PolarisationImage(combined), reflection
