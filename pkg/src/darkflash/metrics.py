"""Evaluation protocol: match average brightness, then PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import as_gray
from .errors import DegenerateError, DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    brightness_scale: float

    def to_dict(self) -> dict:
        return {"psnr_db": self.psnr_db, "ssim": self.ssim, "brightness_scale": self.brightness_scale}


def normalize_brightness(test: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale ``test`` so its mean over all channels equals that of ``ref``."""
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    mt = test.mean()
    if mt == 0:
        raise DegenerateError("test image has zero mean brightness")
    scale = float(ref.mean() / mt)
    return scale * test, scale


def psnr(test: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if test.shape != ref.shape:
        raise DimensionError(f"shape mismatch {test.shape} vs {ref.shape}")
    mse = np.mean((test - ref) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # only windows fully inside the image
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(test: np.ndarray, ref: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03."""
    x = as_gray(test)
    y = as_gray(ref)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise DimensionError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def evaluate(test: np.ndarray, ref: np.ndarray) -> MetricReport:
    """Brightness-normalize ``test`` against ``ref``, then score it."""
    test = np.asarray(test, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if test.shape != ref.shape:
        raise DimensionError(f"shape mismatch {test.shape} vs {ref.shape}")
    normed, scale = normalize_brightness(test, ref)
    return MetricReport(psnr(normed, ref), ssim(normed, ref), scale)
