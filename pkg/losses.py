"""Windowed SSIM and the attention-weighted photometric loss, with analytic gradients."""
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from errors import ValidationError
from imaging import Raster

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

_HALF = SSIM_WINDOW // 2
_TAPS = np.exp(-0.5 * (np.arange(-_HALF, _HALF + 1) / SSIM_SIGMA) ** 2)
_TAPS /= _TAPS.sum()


def _check_pair(rendered: Raster, target: Raster, attn: Optional[Raster] = None) -> None:
    if rendered.data.shape != target.data.shape:
        raise ValidationError(f"images differ in shape: {rendered.data.shape} vs {target.data.shape}")
    if attn is not None and (attn.channels != 1 or not attn.same_size(rendered)):
        raise ValidationError(
            f"attention must be a {rendered.width}x{rendered.height} single-channel map, "
            f"got {attn.width}x{attn.height}x{attn.channels}"
        )


# ========== GAUSSIAN WINDOW ==========

def gaussian_blur(x: np.ndarray) -> np.ndarray:
    """Separable 11-tap Gaussian over the two spatial axes, edges replicated"""
    out = ndimage.correlate1d(x, _TAPS, axis=0, mode="nearest")
    return ndimage.correlate1d(out, _TAPS, axis=1, mode="nearest")


def _adjoint_1d(x: np.ndarray, axis: int) -> np.ndarray:
    # zero-padded correlation with the reversed taps, then fold the overhang
    # back onto the edge samples it was replicated from
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    pad = [(_HALF, _HALF)] + [(0, 0)] * (x.ndim - 1)
    full = ndimage.correlate1d(np.pad(x, pad), _TAPS[::-1], axis=0, mode="constant", cval=0.0)
    out = full[_HALF:_HALF + n].copy()
    out[0] += full[:_HALF].sum(axis=0)
    out[-1] += full[_HALF + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def gaussian_blur_adjoint(x: np.ndarray) -> np.ndarray:
    """Transpose of `gaussian_blur`: <blur(u), v> == <u, blur_adjoint(v)>"""
    return _adjoint_1d(_adjoint_1d(x, 1), 0)


# ========== SSIM ==========

def ssim_with_grad(a: np.ndarray, b: np.ndarray, want_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
    """Mean windowed SSIM of (H, W, C) arrays and its gradient with respect to `a`.

    No minimum-size check; the window is replicate-padded at every border.
    """
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = gaussian_blur(a), gaussian_blur(b)
    s_aa = gaussian_blur(a * a) - mu_a * mu_a
    s_bb = gaussian_blur(b * b) - mu_b * mu_b
    s_ab = gaussian_blur(a * b) - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + c1
    n2 = 2.0 * s_ab + c2
    d1 = mu_a * mu_a + mu_b * mu_b + c1
    d2 = s_aa + s_bb + c2
    smap = (n1 * n2) / (d1 * d2)
    value = float(np.mean(smap))
    if not want_grad:
        return value, None

    scale = 1.0 / smap.size
    d_mu_a = 2.0 * mu_b * n2 / (d1 * d2) - smap * 2.0 * mu_a / d1
    d_s_aa = -smap / d2
    d_s_ab = 2.0 * n1 / (d1 * d2)
    # through raw moments: mu_a, E[a^2], E[ab]
    g_m_a = scale * (d_mu_a - 2.0 * mu_a * d_s_aa - mu_b * d_s_ab)
    g_m_aa = scale * d_s_aa
    g_m_ab = scale * d_s_ab
    grad = (
        gaussian_blur_adjoint(g_m_a)
        + 2.0 * a * gaussian_blur_adjoint(g_m_aa)
        + b * gaussian_blur_adjoint(g_m_ab)
    )
    return value, grad


def ssim(a: Raster, b: Raster) -> float:
    """11x11 Gaussian-window SSIM (sigma 1.5, K1 0.01, K2 0.03, L 1), averaged over pixels and channels"""
    _check_pair(a, b)
    if min(a.width, a.height) < SSIM_WINDOW:
        raise ValidationError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.width}x{a.height}")
    return ssim_with_grad(a.data, b.data, want_grad=False)[0]


# ========== PHOTOMETRIC LOSS ==========

def _weights(rendered: Raster, attn: Optional[Raster]) -> np.ndarray:
    if attn is None:
        return np.ones(rendered.data.shape[:2] + (1,))
    return attn.data


def weighted_l1(rendered: Raster, target: Raster, attn: Optional[Raster]) -> float:
    """mean over pixels and channels of A * |target - rendered|"""
    _check_pair(rendered, target, attn)
    return float(np.mean(_weights(rendered, attn) * np.abs(target.data - rendered.data)))


def loss_terms(rendered: Raster, target: Raster, attn: Optional[Raster], ssim_weight: float):
    """(combined value, gradient array, weighted L1, SSIM)"""
    _check_pair(rendered, target, attn)
    if not 0.0 <= ssim_weight <= 1.0:
        raise ValidationError(f"ssim_weight must lie in [0, 1], got {ssim_weight}")
    diff = rendered.data - target.data
    weights = _weights(rendered, attn)
    n = diff.size
    wl1 = float(np.sum(weights * np.abs(diff)) / n)
    grad = (1.0 - ssim_weight) * np.sign(diff) * weights / n
    if ssim_weight > 0.0:
        s, s_grad = ssim_with_grad(rendered.data, target.data)
        grad = grad - ssim_weight * s_grad
    else:
        s = ssim_with_grad(rendered.data, target.data, want_grad=False)[0]
    value = (1.0 - ssim_weight) * wl1 + ssim_weight * (1.0 - s)
    return value, grad, wl1, s


def combined_loss(rendered: Raster, target: Raster, attn: Optional[Raster],
                  ssim_weight: float = 0.2) -> Tuple[float, Raster]:
    """(1 - w) * weighted L1 + w * (1 - SSIM) and its gradient with respect to `rendered`"""
    value, grad, _, _ = loss_terms(rendered, target, attn, ssim_weight)
    return value, Raster(grad)
