"""Image quality metrics: PSNR and SSIM.

SSIM uses the standard Gaussian-window formulation (11x11 window built
from sigma=1.5 truncated at 3.5 sigma, k1=0.01, k2=0.03, population
covariance) on float images in [0, 1]; the local map is cropped to pixels
with full window support before averaging, and RGB images average the
per-channel scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .scene import InvalidInputError

PSNR_CAP_DB = 99.0
_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10*log10(1/MSE) for float images in [0,1], capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: int, sigma: float,
                  k1: float, k2: float) -> tuple[float, np.ndarray]:
    """Mean SSIM of one channel plus the local map (uncropped)."""
    radius = (window - 1) // 2
    truncate = radius / sigma
    blur = lambda im: gaussian_filter(im, sigma=sigma, truncate=truncate)
    c1, c2 = k1 * k1, k2 * k2  # data range is 1
    ux, uy = blur(x), blur(y)
    sxx = blur(x * x) - ux * ux
    syy = blur(y * y) - uy * uy
    sxy = blur(x * y) - ux * uy
    n1 = 2 * ux * uy + c1
    n2 = 2 * sxy + c2
    d1 = ux * ux + uy * uy + c1
    d2 = sxx + syy + c2
    smap = (n1 * n2) / (d1 * d2)
    interior = smap[radius:smap.shape[0] - radius, radius:smap.shape[1] - radius]
    return float(np.mean(interior)), smap


def ssim(a, b, window: int = 11, sigma: float = _SSIM_SIGMA,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity between two float images in [0, 1]."""
    a, b = _check_pair(a, b)
    if window % 2 == 0 or window < 3:
        raise InvalidInputError("window must be odd and >= 3")
    if min(a.shape[0], a.shape[1]) < window:
        raise InvalidInputError(
            f"image {a.shape[:2]} smaller than the {window}x{window} window")
    if a.ndim == 2:
        return _ssim_channel(a, b, window, sigma, k1, k2)[0]
    scores = [_ssim_channel(a[..., c], b[..., c], window, sigma, k1, k2)[0]
              for c in range(a.shape[2])]
    return float(np.mean(scores))


def _ssim_with_grad_channel(x: np.ndarray, y: np.ndarray, window: int,
                            sigma: float, k1: float, k2: float
                            ) -> tuple[float, np.ndarray]:
    """Mean interior SSIM of one channel and its gradient w.r.t. x.

    The interior crop keeps only map cells whose window lies fully inside
    the image, so boundary handling never enters the value; the adjoint of
    the Gaussian window is then an ordinary zero-padded correlation.
    """
    radius = (window - 1) // 2
    truncate = radius / sigma
    blur = lambda im: gaussian_filter(im, sigma=sigma, truncate=truncate)
    blur_t = lambda im: gaussian_filter(im, sigma=sigma, truncate=truncate,
                                        mode="constant", cval=0.0)
    c1, c2 = k1 * k1, k2 * k2
    ux, uy = blur(x), blur(y)
    sxx = blur(x * x) - ux * ux
    syy = blur(y * y) - uy * uy
    sxy = blur(x * y) - ux * uy
    n1 = 2 * ux * uy + c1
    n2 = 2 * sxy + c2
    d1 = ux * ux + uy * uy + c1
    d2 = sxx + syy + c2
    smap = (n1 * n2) / (d1 * d2)

    h, w = x.shape
    ih, iw = h - 2 * radius, w - 2 * radius
    count = ih * iw
    value = float(np.mean(smap[radius:h - radius, radius:w - radius]))

    # upstream weight: d(mean interior)/d(smap cell)
    wmap = np.zeros_like(smap)
    wmap[radius:h - radius, radius:w - radius] = 1.0 / count
    g_n1 = wmap * n2 / (d1 * d2)
    g_n2 = wmap * n1 / (d1 * d2)
    g_d1 = -wmap * smap / d1
    g_d2 = -wmap * smap / d2
    g_ux = 2 * uy * g_n1 + 2 * ux * g_d1
    g_sxx = g_d2
    g_sxy = 2 * g_n2
    # sxx = blur(x^2) - ux^2, sxy = blur(xy) - ux*uy
    g_ux = g_ux - 2 * ux * g_sxx - uy * g_sxy
    grad = blur_t(g_ux) + blur_t(g_sxx) * 2 * x + blur_t(g_sxy) * y
    return value, grad


def ssim_with_grad(a, b, window: int = 11, sigma: float = _SSIM_SIGMA,
                   k1: float = 0.01, k2: float = 0.03
                   ) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its analytic gradient with respect to a."""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < window:
        raise InvalidInputError(
            f"image {a.shape[:2]} smaller than the {window}x{window} window")
    if a.ndim == 2:
        return _ssim_with_grad_channel(a, b, window, sigma, k1, k2)
    values = []
    grad = np.zeros_like(a)
    for c in range(a.shape[2]):
        v, g = _ssim_with_grad_channel(a[..., c], b[..., c], window, sigma, k1, k2)
        values.append(v)
        grad[..., c] = g / a.shape[2]
    return float(np.mean(values)), grad


@dataclass(frozen=True)
class MetricReport:
    """Per-image PSNR/SSIM values plus their means."""

    psnr_values: tuple[float, ...]
    ssim_values: tuple[float, ...]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))


def evaluate_pairs(pairs) -> MetricReport:
    """PSNR/SSIM over (rendered, reference) float image pairs."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidInputError("no image pairs to evaluate")
    return MetricReport(
        psnr_values=tuple(psnr(a, b) for a, b in pairs),
        ssim_values=tuple(ssim(a, b) for a, b in pairs),
    )
