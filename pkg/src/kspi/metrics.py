"""Reconstruction quality metrics.

PSNR follows the CS-literature convention of a 255 peak on 8-bit-scaled
values; SSIM is the standard single-scale form with an 11x11 Gaussian window
(sigma 1.5) and K1=0.01, K2=0.03, averaged over the valid convolution region.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); +inf for identical inputs."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    g = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 255.0) -> float:
    """Mean local structural similarity over the valid window positions."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError("ssim needs images of at least 11x11")
    win = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    var_x = convolve2d(x * x, win, mode="valid") - mu_x**2
    var_y = convolve2d(y * y, win, mode="valid") - mu_y**2
    cov = convolve2d(x * y, win, mode="valid") - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
