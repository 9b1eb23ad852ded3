"""Image quality metrics computable without pretrained networks."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeMismatch
from .losses import SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW

PSNR_CAP = 100.0


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _ssim_kernel() -> np.ndarray:
    half = (SSIM_WINDOW - 1) // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-(xs ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()


def _window_mean(img: np.ndarray) -> np.ndarray:
    kernel = _ssim_kernel()
    out = correlate1d(img, kernel, axis=0, mode="nearest")
    return correlate1d(out, kernel, axis=1, mode="nearest")


def ssim(a, b) -> float:
    """Mean SSIM over channels and pixels, 11x11 Gaussian window, sigma 1.5."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    values = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mu_x = _window_mean(x)
        mu_y = _window_mean(y)
        sigma_x = _window_mean(x * x) - mu_x * mu_x
        sigma_y = _window_mean(y * y) - mu_y * mu_y
        sigma_xy = _window_mean(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
        values.append(num / den)
    return float(np.mean(values))


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out pixels where the binary mask is 0 (object-masked evaluation)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != image.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} vs image {image.shape[:2]}")
    return image * (mask > 0.5)[..., None]
