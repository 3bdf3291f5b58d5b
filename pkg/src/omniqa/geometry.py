"""Equirectangular (ERP) geometry: grid/angle conversions, interpolation,
latitude weights, uniform sphere points and Craster parabolic projection.

Conventions used throughout the package:

* pixel centers sit at half-integer offsets, so row ``r`` of an image with
  height ``H`` has latitude ``90 - (r + 0.5) * 180 / H`` degrees;
* longitude runs from -180 at the left edge to +180 at the right edge and
  wraps modulo the image width;
* rasters are float arrays in [0, 1] with shape (H, W, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
from PIL import Image

ArrayLike = Union[float, np.ndarray]

GOLDEN_ANGLE_DEG = 180.0 * (3.0 - math.sqrt(5.0))


class SphericalPoint(NamedTuple):
    """Latitude in [-90, 90] and longitude in [-180, 180), both in degrees.

    Fields may hold scalars or equally-shaped numpy arrays.
    """

    lat: ArrayLike
    lon: ArrayLike


@dataclass
class ErpImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) raster, got shape {px.shape}")
        if px.shape[0] < 2 or px.shape[1] < 2:
            raise ValueError(f"ERP raster must be at least 2x2, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must be finite and lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def luminance(self) -> np.ndarray:
        """(H, W) luma plane (BT.601 weights for RGB)."""
        if self.channels == 1:
            return self.pixels[:, :, 0]
        return self.pixels @ np.array([0.299, 0.587, 0.114])


def load_image(path: Union[str, Path]) -> ErpImage:
    """Decode an image file to an ErpImage scaled to [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ErpImage(np.clip(arr, 0.0, 1.0))


def save_image(path: Union[str, Path], img: Union[ErpImage, np.ndarray]) -> None:
    """Write an 8-bit PNG (lossless at 8 bits)."""
    px = img.pixels if isinstance(img, ErpImage) else np.asarray(img)
    px = np.clip(np.rint(np.asarray(px) * 255.0), 0, 255).astype(np.uint8)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    Image.fromarray(px).save(path, format="PNG")


def pixel_to_latlon(row, col, height: int, width: int) -> SphericalPoint:
    row = np.asarray(row)
    col = np.asarray(col)
    if np.any((row < 0) | (row >= height)) or np.any((col < 0) | (col >= width)):
        raise IndexError(f"pixel index outside a {height}x{width} grid")
    lat = 90.0 - (row + 0.5) * 180.0 / height
    lon = (col + 0.5) * 360.0 / width - 180.0
    if lat.ndim == 0:
        return SphericalPoint(float(lat), float(lon))
    return SphericalPoint(lat, lon)


def wrap_longitude(lon):
    """Map longitude into [-180, 180)."""
    return (np.asarray(lon, dtype=np.float64) + 180.0) % 360.0 - 180.0


def latlon_to_pixel(point: SphericalPoint, height: int, width: int):
    """Fractional (row, col) of a sphere point; the inverse of pixel_to_latlon.

    Longitude wraps, so the returned column lies in [0, width); the strip
    left of the first pixel center maps past the last one.
    """
    lat = np.asarray(point.lat, dtype=np.float64)
    lon = wrap_longitude(point.lon)
    row = (90.0 - lat) * height / 180.0 - 0.5
    col = (lon + 180.0) * width / 360.0 - 0.5
    # tolerance keeps round-off at pixel 0 from jumping a full turn
    col = np.where(col < -1e-9, col + width, col)
    if row.ndim == 0:
        return float(row), float(col)
    return row, col


def bilinear_sample(img: ErpImage, row, col) -> np.ndarray:
    """Bilinearly interpolate ``img`` at fractional pixel coordinates.

    Columns wrap modulo the width; rows clamp to [0, height - 1]. Returns an
    array of shape ``row.shape + (C,)``.
    """
    px = img.pixels
    h, w = px.shape[:2]
    row = np.clip(np.asarray(row, dtype=np.float64), 0.0, h - 1)
    col = np.asarray(col, dtype=np.float64)
    if not (np.all(np.isfinite(row)) and np.all(np.isfinite(col))):
        raise ValueError("sample coordinates must be finite")

    r0 = np.floor(row).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    fr = (row - r0)[..., None]
    c0f = np.floor(col)
    fc = (col - c0f)[..., None]
    c0 = c0f.astype(np.int64) % w
    c1 = (c0 + 1) % w

    top = px[r0, c0] * (1.0 - fc) + px[r0, c1] * fc
    bottom = px[r1, c0] * (1.0 - fc) + px[r1, c1] * fc
    return top * (1.0 - fr) + bottom * fr


def latitude_weight(row, height: int):
    """Cosine-of-latitude area weight of an ERP row."""
    row = np.asarray(row)
    if np.any((row < 0) | (row >= height)):
        raise IndexError(f"row outside [0, {height})")
    wgt = np.cos((row + 0.5 - height / 2.0) * math.pi / height)
    return float(wgt) if wgt.ndim == 0 else wgt


def latitude_weights(height: int) -> np.ndarray:
    return latitude_weight(np.arange(height), height)


def sphere_uniform_points(n: int) -> SphericalPoint:
    """Spherical Fibonacci lattice with ``n`` points (deterministic).

    Point ``i`` sits at z = 1 - (2i + 1)/n, so every point covers an equal
    band of z and therefore an equal area.
    """
    if n < 1:
        raise ValueError("need at least one point")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    lat = np.degrees(np.arcsin(z))
    lon = wrap_longitude(i * GOLDEN_ANGLE_DEG)
    return SphericalPoint(lat, lon)


_CPP_XS = math.sqrt(3.0 / math.pi)
_CPP_YS = math.sqrt(3.0 * math.pi)


def cpp_project(point: SphericalPoint):
    """Craster parabolic projection of a sphere point to planar (x, y)."""
    phi = np.radians(np.asarray(point.lat, dtype=np.float64))
    lam = np.radians(np.asarray(point.lon, dtype=np.float64))
    x = _CPP_XS * lam * (2.0 * np.cos(2.0 * phi / 3.0) - 1.0)
    y = _CPP_YS * np.sin(phi / 3.0)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def cpp_unproject(x, y):
    """Inverse Craster projection.

    Returns ``(point, valid)`` where ``valid`` marks inputs that fall inside
    the parabolic map outline.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = np.clip(y / _CPP_YS, -1.0, 1.0)
    phi = 3.0 * np.arcsin(s)
    denom = _CPP_XS * (2.0 * np.cos(2.0 * phi / 3.0) - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(denom > 0, x / denom, np.inf)
    valid = (np.abs(y) <= _CPP_YS * 0.5) & (np.abs(lam) <= math.pi)
    lat = np.degrees(np.clip(phi, -math.pi / 2, math.pi / 2))
    lon = np.degrees(np.where(valid, lam, 0.0))
    return SphericalPoint(lat, lon), valid


CPP_HALF_WIDTH = _CPP_YS  # x extent at the equator: sqrt(3/pi) * pi
CPP_HALF_HEIGHT = _CPP_YS * 0.5
