"""Image-quality metrics and the scale-space MSE measures used by the ablations."""
from __future__ import annotations

import math

import numpy as np
from scipy import signal

from .imagecore import as_gray
from .scalespace import GAUSSIAN_SCALES, build_dog, build_scale_stack

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for peak 1.0; identical images report ``PSNR_CAP``."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_window() -> np.ndarray:
    g = np.exp(-((np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2) ** 2) / (2 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows of the luminance images."""
    a, b = _same_shape(a, b)
    a, b = as_gray(a), as_gray(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = ssim_window()

    def filt(x):
        return signal.correlate2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def gaussian_stack_mse(a: np.ndarray, b: np.ndarray, scales=GAUSSIAN_SCALES) -> float:
    """Mean over the Gaussian levels of the luminance MSE, on a 0..255 intensity scale."""
    a, b = _same_shape(a, b)
    sa = build_scale_stack(as_gray(a) * 255.0, scales).levels
    sb = build_scale_stack(as_gray(b) * 255.0, scales).levels
    return float(np.mean((sa - sb) ** 2))


def dog_stack_mse(a: np.ndarray, b: np.ndarray, scales=GAUSSIAN_SCALES) -> float:
    """Mean over the DoG levels of the luminance MSE, on a 0..255 intensity scale."""
    a, b = _same_shape(a, b)
    da = build_dog(build_scale_stack(as_gray(a) * 255.0, scales)).diffs
    db = build_dog(build_scale_stack(as_gray(b) * 255.0, scales)).diffs
    return float(np.mean((da - db) ** 2))

