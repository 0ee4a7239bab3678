"""Image and volume quality metrics.

SSIM follows the standard 11x11 Gaussian window (sigma 1.5, C1 = 0.01^2,
C2 = 0.03^2 for unit data range) with zero-padded same-size filtering.
ssim_with_grad also returns the closed-form derivative of the mean SSIM
with respect to the first image, for use inside loss gradients.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def mse(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """10 log10(1 / MSE) for images with unit data range."""
    m = mse(a, b)
    if m == 0:
        return math.inf
    return -10.0 * math.log10(m)


def gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA):
    k = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filt(img, win):
    out = correlate1d(img, win, axis=0, mode="constant")
    return correlate1d(out, win, axis=1, mode="constant")


def _ssim_terms(x, y, win):
    m1 = _filt(x, win)
    n1 = _filt(y, win)
    m2 = _filt(x * x, win)
    n2 = _filt(y * y, win)
    m12 = _filt(x * y, win)
    a1 = 2.0 * m1 * n1 + C1
    a2 = 2.0 * (m12 - m1 * n1) + C2
    b1 = m1 * m1 + n1 * n1 + C1
    b2 = (m2 - m1 * m1) + (n2 - n1 * n1) + C2
    return m1, n1, a1, a2, b1, b2


def ssim(x, y):
    """Mean SSIM over pixels (and channels, if any). Both inputs are assumed
    to share a unit data range."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    win = gaussian_window()
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y, win)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(x, y):
    """Mean SSIM and its gradient with respect to x.

    The SSIM map is a rational function of the filtered moments
    m1 = F(x), m2 = F(x^2), m12 = F(xy); the chain rule pushes the per-pixel
    sensitivities back through the (self-adjoint) filter F.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    win = gaussian_window()
    m1, n1, a1, a2, b1, b2 = _ssim_terms(x, y, win)
    denom = b1 * b2
    s = a1 * a2 / denom
    g = 1.0 / s.size

    ds_da1 = a2 / denom
    ds_da2 = a1 / denom
    ds_db1 = -s / b1
    ds_db2 = -s / b2
    ds_dsxy = 2.0 * ds_da2
    ds_dsx2 = ds_db2
    ds_dm1 = 2.0 * n1 * ds_da1 + 2.0 * m1 * ds_db1 \
        - 2.0 * m1 * ds_dsx2 - n1 * ds_dsxy
    dx = _filt(g * ds_dm1, win) + 2.0 * x * _filt(g * ds_dsx2, win) \
        + y * _filt(g * ds_dsxy, win)
    return float(np.mean(s)), dx


def psnr_volume(recon, reference):
    """PSNR of a density volume against a reference, peak = reference max."""
    recon = np.asarray(recon, dtype=float)
    reference = np.asarray(reference, dtype=float)
    m = np.mean((recon - reference) ** 2)
    peak = float(reference.max())
    if m == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def ssim_volume(a, b):
    """Slice-wise SSIM of two volumes: mean over the slices of each of the
    three axes, then mean over axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    peak = max(float(b.max()), 1e-12)
    a = a / peak
    b = b / peak
    axis_means = []
    for axis in range(3):
        sa = np.moveaxis(a, axis, 0)
        sb = np.moveaxis(b, axis, 0)
        axis_means.append(np.mean([ssim(sa[i], sb[i]) for i in range(sa.shape[0])]))
    return float(np.mean(axis_means))
