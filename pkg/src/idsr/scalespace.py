"""Gaussian scale space on a single resolution.

All filters use replicate (edge-clamp) padding so borders do not introduce
artificial gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

GAUSSIAN_SCALES = (1.6, 2.2627, 3.2, 4.5255, 6.4)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def kernel_radius(sigma: float) -> int:
    return int(math.ceil(3.0 * sigma))


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = kernel_radius(sigma)
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Square (2r+1)^2 kernel with r = ceil(3 sigma), summing to one."""
    k1 = gaussian_kernel_1d(sigma)
    k = np.outer(k1, k1)
    return k / k.sum()


def _gray2d(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale (H, W) image, got shape {img.shape}")
    return img


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    img = _gray2d(img)
    k = gaussian_kernel_1d(sigma)
    tmp = ndimage.correlate1d(img, k, axis=0, mode="nearest")
    return ndimage.correlate1d(tmp, k, axis=1, mode="nearest")


@dataclass(frozen=True)
class ScaleStack:
    scales: tuple[float, ...]
    levels: np.ndarray  # (5, H, W)

    def nearest_level(self, sigma: float) -> int:
        return int(np.argmin([abs(math.log(s / sigma)) for s in self.scales]))


@dataclass(frozen=True)
class DoGStack:
    diffs: np.ndarray  # (4, H, W)
    scale_pairs: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray
    orientation: np.ndarray

    @classmethod
    def from_components(cls, gx: np.ndarray, gy: np.ndarray) -> "GradientField":
        mag = np.hypot(gx, gy)
        ori = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        ori[ori >= 2 * np.pi] = 0.0  # mod can round up to 2*pi
        return cls(gx, gy, mag, ori)


def build_scale_stack(img: np.ndarray, scales=GAUSSIAN_SCALES) -> ScaleStack:
    """Blur the base image independently at each scale."""
    img = _gray2d(img)
    scales = tuple(float(s) for s in scales)
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be strictly increasing")
    return ScaleStack(scales, np.stack([gaussian_blur(img, s) for s in scales]))


def build_dog(stack: ScaleStack) -> DoGStack:
    diffs = stack.levels[1:] - stack.levels[:-1]
    pairs = tuple(zip(stack.scales[:-1], stack.scales[1:]))
    return DoGStack(diffs, pairs)


def forward_diff_gradients(img: np.ndarray) -> GradientField:
    img = _gray2d(img)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return GradientField.from_components(gx, gy)


def sobel_gradients(img: np.ndarray) -> GradientField:
    img = _gray2d(img)
    gx = ndimage.correlate(img, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(img, SOBEL_Y, mode="nearest")
    return GradientField.from_components(gx, gy)
