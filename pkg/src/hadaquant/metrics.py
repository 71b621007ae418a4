"""PSNR and SSIM image-fidelity metrics on [0, 1] float images.

SSIM follows the original Wang et al. recipe: 11x11 Gaussian window with
sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range L = 1, local maps averaged
over valid window positions and channels.  An optional luma flag converts
3-channel images to the BT.601 Y channel first (the super-resolution
community convention); it defaults off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


@dataclass(frozen=True)
class Image:
    """Float image, shape [H, W] or [H, W, C] with C in {1, 3}, pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be [H, W] or [H, W, C] with C in {{1, 3}}, got {arr.shape}")
        if arr.size == 0:
            raise ValueError("image must be non-empty")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def as_image(t: Tensor) -> Image:
    """Reinterpret a [H, W] or [H, W, C] tensor as an image."""
    return Image(t.array)


def _luma(img: Image) -> np.ndarray:
    """BT.601 Y channel on [0, 1] images."""
    px = img.pixels
    if img.channels == 1:
        return px
    y = (65.481 * px[:, :, 0] + 128.553 * px[:, :, 1] + 24.966 * px[:, :, 2] + 16.0) / 255.0
    return y[:, :, None]


def _check_pair(a: Image, b: Image):
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")


def psnr(a: Image, b: Image, luma_only: bool = False) -> float:
    """10 * log10(1 / MSE) with MAX = 1; identical images give +inf."""
    _check_pair(a, b)
    pa = _luma(a) if luma_only else a.pixels
    pb = _luma(b) if luma_only else b.pixels
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(coords**2) / (2.0 * _SSIM_SIGMA**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _windowed_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode local weighted means via sliding windows."""
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(a: Image, b: Image, luma_only: bool = False) -> float:
    """Mean local SSIM; 1.0 iff the images are identical."""
    _check_pair(a, b)
    pa = _luma(a) if luma_only else a.pixels
    pb = _luma(b) if luma_only else b.pixels
    if min(pa.shape[0], pa.shape[1]) < _SSIM_WINDOW:
        raise ValueError(
            f"image {pa.shape[:2]} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    kernel = _gaussian_window()
    c1 = _K1**2
    c2 = _K2**2
    scores = []
    for ch in range(pa.shape[2]):
        x = pa[:, :, ch]
        y = pb[:, :, ch]
        mu_x = _windowed_mean(x, kernel)
        mu_y = _windowed_mean(y, kernel)
        var_x = _windowed_mean(x * x, kernel) - mu_x * mu_x
        var_y = _windowed_mean(y * y, kernel) - mu_y * mu_y
        cov = _windowed_mean(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
