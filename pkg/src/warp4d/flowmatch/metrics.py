"""PSNR and SSIM for unit-range images.

SSIM uses the usual 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
K2 = 0.03, population statistics, and only positions where the window fits
entirely inside the image. Colour images are averaged over channels.
"""

import numpy as np
from scipy.signal import correlate

from ..errors import DimensionError

PSNR_CAP = 99.0
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def gaussian_window(size=WINDOW, sigma=SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, mask=None):
    a, b = _pair(a, b)
    se = (a - b) ** 2
    if mask is None:
        return float(se.mean())
    m = np.asarray(mask, dtype=bool)
    if se.ndim == m.ndim + 1:
        se = se.mean(axis=-1)
    if not m.any():
        return float("nan")
    return float(se[m].mean())


def psnr_from_mse(err, data_range=1.0):
    if np.isnan(err):
        return float("nan")
    if err == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(data_range ** 2 / err), PSNR_CAP))


def psnr(a, b, data_range=1.0, mask=None):
    return psnr_from_mse(mse(a, b, mask), data_range)


def ssim_map(a, b, data_range=1.0):
    """Per-position SSIM over the valid region, shape (H-10, W-10)."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        return np.mean([ssim_map(a[..., k], b[..., k], data_range) for k in range(a.shape[-1])], axis=0)
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise DimensionError(f"SSIM needs images of at least {WINDOW}x{WINDOW}, got {a.shape}")
    w = gaussian_window()

    def filt(x):
        return correlate(x, w, mode="valid", method="direct")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))


def ssim(a, b, data_range=1.0, mask=None):
    m = ssim_map(a, b, data_range)
    if mask is None:
        return float(m.mean())
    r = WINDOW // 2
    crop = np.asarray(mask, dtype=bool)[r:-r, r:-r]
    if not crop.any():
        return float("nan")
    return float(m[crop].mean())


def image_metrics(pred, target, m_geo=None):
    """PSNR/SSIM overall and, if ``m_geo`` is given, inside and outside it."""
    out = {"psnr": psnr(pred, target), "ssim": ssim(pred, target)}
    if m_geo is not None:
        m = np.asarray(m_geo, dtype=bool)
        out.update(
            psnr_in=psnr(pred, target, mask=m), ssim_in=ssim(pred, target, mask=m),
            psnr_out=psnr(pred, target, mask=~m), ssim_out=ssim(pred, target, mask=~m),
        )
    return out
