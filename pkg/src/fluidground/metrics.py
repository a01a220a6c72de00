"""Image quality metrics for unit-range float images."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError

PSNR_IDENTICAL_DB = 99.0   # tabled stand-in for an infinite PSNR


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """-10 log10(MSE) over all channels; returns inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("psnr needs equal shapes", expected=a.shape, got=b.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def psnr_tabled(value: float) -> float:
    return PSNR_IDENTICAL_DB if math.isinf(value) else value


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, 'valid' region only."""
    k = window.shape[0]
    h, w = img.shape
    rows = np.empty((h, w - k + 1))
    for i in range(h):
        rows[i] = np.correlate(img[i], window, mode="valid")
    out = np.empty((h - k + 1, w - k + 1))
    for j in range(rows.shape[1]):
        out[:, j] = np.correlate(rows[:, j], window, mode="valid")
    return out


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11,
         sigma: float = 1.5, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Single-scale structural similarity, Gaussian-windowed, channel-averaged.

    Operates on unit-range images shaped [H, W] or [H, W, C]; the map is
    evaluated on the valid filter region.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("ssim needs equal shapes", expected=a.shape, got=b.shape)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise ConfigError(f"image smaller than the {window_size}x{window_size} ssim window")
    win = gaussian_window(window_size, sigma)
    values = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        xx = _filter_valid(x * x, win) - mu_x * mu_x
        yy = _filter_valid(y * y, win) - mu_y * mu_y
        xy = _filter_valid(x * y, win) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))
