"""Full-reference spherical quality metrics: WS-PSNR, S-PSNR, CPP-PSNR, WS-SSIM.

All metrics take [0, 1] rasters (peak value 1.0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import (
    CPP_HALF_HEIGHT,
    CPP_HALF_WIDTH,
    ErpImage,
    bilinear_sample,
    cpp_unproject,
    latitude_weights,
    latlon_to_pixel,
    sphere_uniform_points,
)

PSNR_CAP = 100.0
METRICS = ("ws-psnr", "s-psnr", "cpp-psnr", "ws-ssim")


@dataclass
class MetricResult:
    value: float
    sample_count: int
    capped: bool = False

    def __float__(self):
        return self.value


def _check_pair(ref: ErpImage, dist: ErpImage):
    if ref.pixels.shape != dist.pixels.shape:
        raise ValueError(f"shape mismatch: {ref.pixels.shape} vs {dist.pixels.shape}")


def _psnr(mse: float, n: int) -> MetricResult:
    if mse <= 0.0:
        return MetricResult(PSNR_CAP, n, True)
    return MetricResult(min(PSNR_CAP, 10.0 * math.log10(1.0 / mse)), n, False)


def ws_psnr(ref: ErpImage, dist: ErpImage) -> MetricResult:
    _check_pair(ref, dist)
    w = latitude_weights(ref.height)[:, None, None]
    err = (ref.pixels - dist.pixels) ** 2
    mse = float(np.sum(w * err) / (np.sum(w) * ref.width * ref.channels))
    return _psnr(mse, err.size)


def s_psnr(ref: ErpImage, dist: ErpImage, n_points: int = 10000) -> MetricResult:
    _check_pair(ref, dist)
    rows, cols = latlon_to_pixel(sphere_uniform_points(n_points), ref.height, ref.width)
    a = bilinear_sample(ref, rows, cols)
    b = bilinear_sample(dist, rows, cols)
    return _psnr(float(np.mean((a - b) ** 2)), n_points)


def cpp_grid(grid_w: int, height: int, width: int):
    """Sampling coordinates of a CPP raster ``grid_w`` wide (and half as tall).

    Returns ERP (rows, cols) for the valid CPP pixels and the full validity mask.
    """
    grid_h = max(1, grid_w // 2)
    x = ((np.arange(grid_w) + 0.5) / grid_w * 2.0 - 1.0) * CPP_HALF_WIDTH
    y = (1.0 - (np.arange(grid_h) + 0.5) / grid_h * 2.0) * CPP_HALF_HEIGHT
    xx, yy = np.meshgrid(x, y)
    pts, valid = cpp_unproject(xx, yy)
    rows, cols = latlon_to_pixel(pts, height, width)
    return rows[valid], cols[valid], valid


def cpp_psnr(ref: ErpImage, dist: ErpImage, grid_w: int = 1024) -> MetricResult:
    _check_pair(ref, dist)
    rows, cols, valid = cpp_grid(grid_w, ref.height, ref.width)
    a = bilinear_sample(ref, rows, cols)
    b = bilinear_sample(dist, rows, cols)
    return _psnr(float(np.mean((a - b) ** 2)), int(valid.sum()))


def ssim_map(x: np.ndarray, y: np.ndarray, sigma: float = 1.5, win: int = 11,
             k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> np.ndarray:
    """SSIM map with a truncated Gaussian window ('valid' region only)."""
    if x.shape[0] < win or x.shape[1] < win:
        raise ValueError(f"image smaller than the {win}x{win} SSIM window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    truncate = (win // 2) / sigma
    pad = win // 2

    def filt(a):
        return ndimage.gaussian_filter(a, sigma, truncate=truncate, mode="constant")[pad:-pad, pad:-pad]

    x = x.astype(np.float64)
    y = y.astype(np.float64)
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ws_ssim(ref: ErpImage, dist: ErpImage) -> MetricResult:
    """SSIM on luminance, averaged with cos-latitude row weights."""
    _check_pair(ref, dist)
    smap = ssim_map(ref.luminance(), dist.luminance())
    pad = (ref.height - smap.shape[0]) // 2
    w = latitude_weights(ref.height)[pad:pad + smap.shape[0]]
    # row means first: identical inputs then give exactly 1.0
    value = float(np.sum(w * smap.mean(axis=1)) / np.sum(w))
    return MetricResult(value, smap.size, False)


def score_all(ref: ErpImage, dist: ErpImage) -> dict:
    return {
        "ws-psnr": ws_psnr(ref, dist),
        "s-psnr": s_psnr(ref, dist),
        "cpp-psnr": cpp_psnr(ref, dist),
        "ws-ssim": ws_ssim(ref, dist),
    }
