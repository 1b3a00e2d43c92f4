"""
Photometric error: alpha * (1 - SSIM) / 2 + (1 - alpha) * |x - y|, averaged
over channels, with a 3x3 box window and reflect padding.

Only the gradient w.r.t. the second image is needed: the first one is
always an observation.
"""
from dataclasses import dataclass

import numpy as np

from core.exceptions import ArgError

# |x - y| below this counts as an exact match (zero L1 subgradient).
L1_DEADZONE = 1e-12

_OFFSETS = tuple((dr, dc) for dr in range(3) for dc in range(3))


def box_filter(x):
    """3x3 mean over the last two axes with reflect padding."""
    height, width = x.shape[-2:]
    if height < 2 or width < 2:
        raise ArgError('the SSIM window needs images of at least 2x2 pixels')
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(x, pad, mode='reflect')
    out = np.zeros_like(x)
    for dr, dc in _OFFSETS:
        out += padded[..., dr:dr + height, dc:dc + width]
    return out / 9.0


def _reflect_pad_adjoint(grad_padded):
    """Fold a gradient on the padded array back onto the original pixels."""
    g = grad_padded.copy()
    # columns: padded col 0 mirrors col 1 of the original, the last mirrors col -2
    g[..., :, 2] += g[..., :, 0]
    g[..., :, -3] += g[..., :, -1]
    g = g[..., :, 1:-1]
    g[..., 2, :] += g[..., 0, :]
    g[..., -3, :] += g[..., -1, :]
    return g[..., 1:-1, :]


def box_filter_adjoint(grad):
    height, width = grad.shape[-2:]
    shape = grad.shape[:-2] + (height + 2, width + 2)
    padded = np.zeros(shape)
    for dr, dc in _OFFSETS:
        padded[..., dr:dr + height, dc:dc + width] += grad
    return _reflect_pad_adjoint(padded / 9.0)


@dataclass(eq=False)
class PhotometricState:
    x: np.ndarray
    y: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    ssim: np.ndarray
    l1_sign: np.ndarray
    alpha: float

    def signature(self):
        return self.l1_sign.tobytes()


def _as_channels(image):
    data = np.asarray(getattr(image, 'data', image), dtype=np.float64)
    return data[None] if data.ndim == 2 else data


def photometric_forward(x, y, alpha, c1, c2):
    """Per-pixel photometric error (H, W) of images shaped (C, H, W)."""
    x = _as_channels(x)
    y = _as_channels(y)
    if x.shape != y.shape:
        raise ArgError(f'photometric error needs equal shapes, got {x.shape} and {y.shape}')
    mu_x = box_filter(x)
    mu_y = box_filter(y)
    var_x = box_filter(x * x) - mu_x * mu_x
    var_y = box_filter(y * y) - mu_y * mu_y
    cov = box_filter(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * cov + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = var_x + var_y + c2
    ssim = a1 * a2 / (b1 * b2)
    residual = y - x
    l1_sign = np.where(np.abs(residual) > L1_DEADZONE, np.sign(residual), 0.0).astype(np.int8)
    per_channel = alpha * (1.0 - ssim) / 2.0 + (1.0 - alpha) * np.abs(residual)
    state = PhotometricState(
        x=x, y=y, mu_x=mu_x, mu_y=mu_y, a1=a1, a2=a2, b1=b1, b2=b2,
        ssim=ssim, l1_sign=l1_sign, alpha=alpha,
    )
    return per_channel.mean(axis=0), state


def photometric_vjp(state, grad_map):
    """Gradient w.r.t. y of sum(grad_map * photometric_forward(x, y))."""
    channels = state.y.shape[0]
    g = np.broadcast_to(grad_map, state.y.shape) / channels
    g_ssim = -0.5 * state.alpha * g
    denom = state.b1 * state.b2
    ds_da1 = state.a2 / denom
    ds_da2 = state.a1 / denom
    ds_db1 = -state.ssim / state.b1
    ds_db2 = -state.ssim / state.b2
    g_mu_y = g_ssim * (
        ds_da1 * 2.0 * state.mu_x
        - ds_da2 * 2.0 * state.mu_x
        + ds_db1 * 2.0 * state.mu_y
        - ds_db2 * 2.0 * state.mu_y
    )
    g_yy = g_ssim * ds_db2
    g_xy = g_ssim * 2.0 * ds_da2
    grad_y = (
        box_filter_adjoint(g_mu_y)
        + 2.0 * state.y * box_filter_adjoint(g_yy)
        + state.x * box_filter_adjoint(g_xy)
    )
    grad_y += (1.0 - state.alpha) * g * state.l1_sign
    return grad_y
