"""
Loss sources. Each term maps the current depth estimates to a per-pixel
photometric map plus a validity mask, and can pull a gradient on that map
back onto the depths (backward returns (grad_pol, grad_corr), None for a
depth the term does not read).
"""
from dataclasses import dataclass

import numpy as np

from itof.services import bucket_basis, correlation_depth_vjp, phase_from_depth
from losses.photometric import photometric_forward, photometric_vjp
from polarisation.services import DIFFUSE, POLARISER_TRIG, SPECULAR, shade, shading_forward, shading_vjp
from warp.services import bilinear_forward, bilinear_vjp_coords, bilinear_vjp_source, reprojection_forward


@dataclass(eq=False)
class TermResult:
    name: str
    map: np.ndarray
    valid: np.ndarray
    state: object = None
    signature: bytes = b''


def fill_masked(warped, target, mask):
    """Masked pixels copy the target so they do not disturb neighbouring SSIM windows."""
    return np.where(mask[None], warped, target)


class ConstantTerm:
    """A map that does not depend on the depth being optimised."""

    def __init__(self, name, emap, valid):
        self.name = name
        self.emap = emap
        self.valid = valid

    def forward(self, d_pol, d_corr, pol_valid, corr_valid):
        return TermResult(self.name, self.emap, self.valid & pol_valid)

    def backward(self, result, g_map):
        return np.zeros_like(g_map), None


class WarpTerm:
    """
    E_pe between the target image and a second view warped onto it through
    the predicted depth.
    """

    def __init__(self, name, target, source, rays, source_intr, transform, source_shape, cfg):
        self.name = name
        self.target = target
        self.source = source
        self.rays = rays
        self.source_intr = source_intr
        self.transform = transform
        self.source_shape = source_shape
        self.cfg = cfg

    def forward(self, d_pol, d_corr, pol_valid, corr_valid):
        rep = reprojection_forward(d_pol, self.rays, self.source_intr, self.transform, self.source_shape, pol_valid)
        warped, sample = bilinear_forward(self.source, rep.coords, rep.mask)
        warped = fill_masked(warped, self.target, rep.mask)
        emap, photo = photometric_forward(self.target, warped, *self.cfg.ssim_params)
        return TermResult(
            self.name, emap, rep.mask, (rep, sample, photo),
            sample.signature() + photo.signature(),
        )

    def backward(self, result, g_map):
        rep, sample, photo = result.state
        du, dv = bilinear_vjp_coords(sample, photometric_vjp(photo, g_map))
        return du * rep.du_dd[0] + dv * rep.du_dd[1], None


class TemporalTerm:
    """Pointwise min over WarpTerms for neighbouring frames with known poses."""

    name = 'temporal'

    def __init__(self, frames):
        self.frames = frames

    def forward(self, d_pol, d_corr, pol_valid, corr_valid):
        results = [frame.forward(d_pol, d_corr, pol_valid, corr_valid) for frame in self.frames]
        stack = np.stack([np.where(r.valid, r.map, np.inf) for r in results])
        choice = np.argmin(stack, axis=0)
        emap = np.take_along_axis(stack, choice[None], axis=0)[0]
        valid = np.isfinite(emap)
        signature = b''.join(r.signature for r in results) + choice.astype(np.int16).tobytes()
        return TermResult(self.name, np.where(valid, emap, 0.0), valid, (results, choice), signature)

    def backward(self, result, g_map):
        results, choice = result.state
        grad = np.zeros_like(g_map)
        for index, (frame, frame_result) in enumerate(zip(self.frames, results)):
            g_frame = np.where(choice == index, g_map, 0.0)
            if np.any(g_frame):
                grad += frame.backward(frame_result, g_frame)[0]
        return grad, None


class CorrTerm:
    """E_pe between observed buckets and buckets re-rendered from D_corr."""

    name = 'corr'

    def __init__(self, observed, scale, amplitude, offset, valid, itof_cfg, cfg):
        self.observed = observed
        self.scale = scale
        self.amplitude = amplitude
        self.offset = offset
        self.valid = valid
        self.itof_cfg = itof_cfg
        self.cfg = cfg

    def forward(self, d_pol, d_corr, pol_valid, corr_valid):
        phase = phase_from_depth(d_corr, self.itof_cfg)
        rendered = (self.amplitude * bucket_basis(phase) + self.offset) / self.scale
        emap, photo = photometric_forward(self.observed, rendered, *self.cfg.ssim_params)
        return TermResult(self.name, emap, self.valid & corr_valid, (photo, d_corr), photo.signature())

    def backward(self, result, g_map):
        photo, d_corr = result.state
        g_rendered = photometric_vjp(photo, g_map) / self.scale
        return None, correlation_depth_vjp(d_corr, self.amplitude, g_rendered, self.itof_cfg)


class CorrToPolTerm:
    """
    Polarisation rendered from D_corr on the i-ToF grid, carried onto the
    left polarisation grid through D_pol, and compared with the observed
    polarisation for both reflection types; the smaller error wins.
    """

    name = 'corr_to_pol'

    def __init__(self, target, i_un, pol_rays, guide, itof_rays, itof_intr, transform, itof_shape, eta, cfg):
        self.target = target
        self.i_un = i_un
        self.pol_rays = pol_rays
        self.guide = guide
        self.itof_rays = itof_rays
        self.itof_intr = itof_intr
        self.transform = transform
        self.itof_shape = itof_shape
        self.eta = eta
        self.cfg = cfg

    def forward(self, d_pol, d_corr, pol_valid, corr_valid):
        shading = shading_forward(d_corr, self.guide, self.itof_rays, self.eta, valid=corr_valid)
        params = np.stack([shading.rho_diffuse, shading.rho_specular, shading.cos2, shading.sin2])
        rep = reprojection_forward(d_pol, self.pol_rays, self.itof_intr, self.transform, self.itof_shape, pol_valid)
        sampled, sample = bilinear_forward(params, rep.coords, rep.mask)
        ok = shading.mask
        x0, y0 = sample.x0, sample.y0
        valid = rep.mask & ok[y0, x0] & ok[y0, x0 + 1] & ok[y0 + 1, x0] & ok[y0 + 1, x0 + 1]
        diffuse = shade(self.i_un, sampled[0], sampled[2], sampled[3], DIFFUSE)
        specular = shade(self.i_un, sampled[1], sampled[2], sampled[3], SPECULAR)
        diffuse = fill_masked(diffuse, self.target, rep.mask)
        specular = fill_masked(specular, self.target, rep.mask)
        e_diffuse, photo_diffuse = photometric_forward(self.target, diffuse, *self.cfg.ssim_params)
        e_specular, photo_specular = photometric_forward(self.target, specular, *self.cfg.ssim_params)
        # ties go to diffuse
        specular_wins = e_specular < e_diffuse - self.cfg.tie_tolerance
        emap = np.where(specular_wins, e_specular, e_diffuse)
        state = (shading, rep, sample, sampled, photo_diffuse, photo_specular, specular_wins)
        signature = (
            shading.signature() + sample.signature() + valid.tobytes()
            + photo_diffuse.signature() + photo_specular.signature() + specular_wins.tobytes()
        )
        return TermResult(self.name, emap, valid, state, signature)

    def backward(self, result, g_map):
        shading, rep, sample, sampled, photo_diffuse, photo_specular, specular_wins = result.state
        g_diffuse = photometric_vjp(photo_diffuse, np.where(specular_wins, 0.0, g_map))
        g_specular = photometric_vjp(photo_specular, np.where(specular_wins, g_map, 0.0))
        rho_d, rho_s, cos2, sin2 = sampled
        g_sampled = np.zeros_like(sampled)
        channel = 0
        for plane in self.i_un:
            for a, b in POLARISER_TRIG:
                gd = plane * g_diffuse[channel]
                gs = plane * g_specular[channel]
                trig = a * cos2 + b * sin2
                g_sampled[0] += gd * trig
                g_sampled[1] -= gs * trig
                g_sampled[2] += a * (rho_d * gd - rho_s * gs)
                g_sampled[3] += b * (rho_d * gd - rho_s * gs)
                channel += 1
        du, dv = bilinear_vjp_coords(sample, g_sampled)
        g_params = bilinear_vjp_source(sample, g_sampled)
        g_pol = du * rep.du_dd[0] + dv * rep.du_dd[1]
        g_corr = shading_vjp(shading, g_params[0], g_params[1], g_params[2], g_params[3])
        return g_pol, g_corr
