"""Image quality metrics and the training loss with its analytic gradient."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gauss1d(window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (window - 1) / 2.0
    x = np.arange(window, dtype=np.float64) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


_W1D = _gauss1d()


@njit(cache=True, nogil=True)
def _corr_rows_valid(x, w, out):
    h, wid = x.shape
    k = w.shape[0]
    for r in range(h):
        for c in range(wid - k + 1):
            acc = 0.0
            for i in range(k):
                acc += w[i] * x[r, c + i]
            out[r, c] = acc


@njit(cache=True, nogil=True)
def _corr_cols_valid(x, w, out):
    h, wid = x.shape
    k = w.shape[0]
    for r in range(h - k + 1):
        for c in range(wid):
            acc = 0.0
            for i in range(k):
                acc += w[i] * x[r + i, c]
            out[r, c] = acc


def _corr_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation, rows then columns, fixed order."""
    h, wid = x.shape
    k = w.shape[0]
    tmp = np.empty((h, wid - k + 1), dtype=np.float64)
    _corr_rows_valid(x, w, tmp)
    out = np.empty((h - k + 1, wid - k + 1), dtype=np.float64)
    _corr_cols_valid(tmp, w, out)
    return out


def _corr_adjoint(field: np.ndarray, w: np.ndarray, h: int, wid: int) -> np.ndarray:
    """Adjoint of ``_corr_valid`` mapping a center field back to pixel space.

    With a symmetric kernel this equals embedding the field at the valid
    offset in a zero canvas and correlating again.
    """
    k = w.shape[0]
    pad = k - 1
    canvas = np.zeros((h + pad, wid + pad), dtype=np.float64)
    canvas[pad:h, pad:wid] = field
    return _corr_valid(canvas, w)


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def _ssim_fields(x: np.ndarray, y: np.ndarray):
    mu_x = _corr_valid(x, _W1D)
    mu_y = _corr_valid(y, _W1D)
    m_xx = _corr_valid(x * x, _W1D)
    m_yy = _corr_valid(y * y, _W1D)
    m_xy = _corr_valid(x * y, _W1D)
    var_x = m_xx - mu_x * mu_x
    var_y = m_yy - mu_y * mu_y
    cov = m_xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b2 = var_x + var_y + SSIM_C2
    p = a1 / b1
    q = a2 / b2
    return mu_x, mu_y, a1, b1, b2, p, q


def _ssim_maps(img: np.ndarray, ref: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C), got {a.shape}")
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    maps = []
    for c in range(a.shape[2]):
        _, _, _, _, _, p, q = _ssim_fields(a[:, :, c], b[:, :, c])
        maps.append(p * q)
    return np.stack(maps, axis=0)


def ssim(img: np.ndarray, ref: np.ndarray) -> float:
    """Mean SSIM over valid window centers (11x11 Gaussian window, sigma 1.5).

    Multi-channel images average the per-channel maps.
    """
    return float(np.mean(_ssim_maps(img, ref)))


def loss_l1_dssim(
    img: np.ndarray,
    ref: np.ndarray,
    lambda_dssim: float = 0.2,
) -> tuple[float, np.ndarray]:
    """Training loss (1 - lam) * L1 + lam * (1 - SSIM) and its image gradient.

    The gradient is exact for the loss as computed (means over pixels and
    valid SSIM centers). Returned gradient matches the dtype of ``img``.
    """
    if not 0.0 <= lambda_dssim <= 1.0:
        raise ValueError("lambda_dssim must lie in [0, 1]")
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected matching (H, W, 3) images, got {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    lam = float(lambda_dssim)
    diff = a - b
    l1 = float(np.mean(np.abs(diff)))
    n_pix = diff.size
    grad = np.sign(diff) * ((1.0 - lam) / n_pix)

    hc = h - SSIM_WINDOW + 1
    wc = w - SSIM_WINDOW + 1
    n_centers = 3 * hc * wc
    ssim_sum = 0.0
    gscale = -lam / n_centers
    for c in range(3):
        x = a[:, :, c]
        y = b[:, :, c]
        mu_x, mu_y, a1, b1, b2, p, q = _ssim_fields(x, y)
        ssim_sum += float(np.sum(p * q))
        # dS/d mu_x with p, q factored so identical inputs cancel exactly.
        dp_dmux = (2.0 * mu_y * b1 - 2.0 * mu_x * a1) / (b1 * b1)
        d_mu = q * dp_dmux
        d_sigma = -((p * q) / b2)      # coefficient of d var_x
        d_xy = (2.0 * p) / b2          # coefficient of d cov
        f1 = 2.0 * d_sigma
        f2 = d_xy
        f0 = d_mu - f1 * mu_x - f2 * mu_y
        g = (_corr_adjoint(f0, _W1D, h, w)
             + x * _corr_adjoint(f1, _W1D, h, w)
             + y * _corr_adjoint(f2, _W1D, h, w))
        grad[:, :, c] += gscale * g
    ssim_mean = ssim_sum / n_centers
    loss = (1.0 - lam) * l1 + lam * (1.0 - ssim_mean)
    out_dtype = np.asarray(img).dtype
    if grad.dtype != out_dtype:
        grad = grad.astype(out_dtype)
    return loss, grad
