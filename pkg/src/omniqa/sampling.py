"""Adaptive prior-equator patch sampling on ERP images.

The sphere is split into an equatorial band and two polar caps. The share
of patches drawn from the band is the prior-equator probability mass of
that band; each band is tiled into equal-longitude blocks and one patch
center is drawn uniformly inside every block.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import ErpImage, SphericalPoint, latlon_to_pixel, sphere_uniform_points

SAMPLING_MODES = ("aps", "uniform", "sphere")
PE_FAMILIES = ("gaussian", "laplace")


@dataclass
class PriorEquatorParams:
    """Prior-equator distribution over colatitude (degrees)."""

    mu: float = 91.3
    lambda_scale: float = 18.58
    theta_t: float = 23.0
    family: str = "gaussian"

    def __post_init__(self):
        if not 0.0 < self.mu < 180.0:
            raise ValueError(f"mu must lie in (0, 180), got {self.mu}")
        if self.lambda_scale <= 0.0:
            raise ValueError("lambda_scale must be positive")
        if not 0.0 < self.theta_t < 90.0:
            raise ValueError(f"theta_t must lie in (0, 90), got {self.theta_t}")
        if self.family not in PE_FAMILIES:
            raise ValueError(f"unknown prior family {self.family!r}")


@dataclass
class SamplerConfig:
    k: int = 10
    kappa_w: float = 0.1
    kappa_h: float = 0.2
    network_side: int = 224
    seed: int = 0
    mode: str = "aps"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for name in ("kappa_w", "kappa_h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.network_side < 16:
            raise ValueError("network_side must be >= 16")
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")


@dataclass(frozen=True)
class Block:
    colat: Tuple[float, float]
    lon: Tuple[float, float]
    band: str

    def contains(self, colat, lon) -> np.ndarray:
        colat = np.asarray(colat)
        lon = np.asarray(lon)
        return (
            (colat >= self.colat[0]) & (colat <= self.colat[1])
            & (lon >= self.lon[0]) & (lon < self.lon[1])
        )


@dataclass
class PatchGrid:
    k_low: int
    k_high: int
    blocks: List[Block] = field(default_factory=list)


@dataclass
class PatchSet:
    patches: np.ndarray          # (K, S, S, C)
    centers: SphericalPoint      # arrays of length K
    source_dims: Tuple[int, int]  # (P_w, P_h)
    block_index: Optional[np.ndarray] = None

    def __len__(self):
        return self.patches.shape[0]

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """(K, C, S, S) tensor for the network."""
        return torch.from_numpy(np.ascontiguousarray(self.patches.transpose(0, 3, 1, 2))).to(dtype)


# ---------------------------------------------------------------------------
# prior-equator distribution


def _std_normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _laplace_cdf(x: float, mu: float, b: float) -> float:
    if x < mu:
        return 0.5 * math.exp((x - mu) / b)
    return 1.0 - 0.5 * math.exp(-(x - mu) / b)


def _pe_cdf(theta: float, params: PriorEquatorParams) -> float:
    """Untruncated CDF of the prior family at colatitude ``theta``."""
    if params.family == "gaussian":
        return _std_normal_cdf((theta - params.mu) / params.lambda_scale)
    return _laplace_cdf(theta, params.mu, params.lambda_scale)


def _truncation_mass(params: PriorEquatorParams) -> float:
    return _pe_cdf(180.0, params) - _pe_cdf(0.0, params)


def pe_density(theta, params: PriorEquatorParams = PriorEquatorParams()):
    """Prior-equator density over colatitude, truncated to [0, 180]."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any((theta < 0.0) | (theta > 180.0)):
        raise ValueError("colatitude must lie in [0, 180]")
    z = _truncation_mass(params)
    s = params.lambda_scale
    if params.family == "gaussian":
        d = np.exp(-0.5 * ((theta - params.mu) / s) ** 2) / (s * math.sqrt(2.0 * math.pi))
    else:
        d = np.exp(-np.abs(theta - params.mu) / s) / (2.0 * s)
    d = d / z
    return float(d) if d.ndim == 0 else d


def equator_mass(params: PriorEquatorParams = PriorEquatorParams()) -> float:
    """Probability mass of the band [90 - theta_t, 90 + theta_t]."""
    lo = 90.0 - params.theta_t
    hi = 90.0 + params.theta_t
    return (_pe_cdf(hi, params) - _pe_cdf(lo, params)) / _truncation_mass(params)


def split_counts(k: int, m: float) -> Tuple[int, int]:
    """Number of equatorial and polar blocks for ``k`` patches."""
    if k < 0 or not 0.0 <= m <= 1.0:
        raise ValueError("need k >= 0 and m in [0, 1]")
    k_low = min(k, int(math.floor(k * m + 1e-12)))
    return k_low, k - k_low


def patch_dims(e_w: int, e_h: int, kappa_w: float, kappa_h: float) -> Tuple[int, int]:
    """Resolution-adaptive patch size (P_w, P_h) in pixels."""
    if kappa_w <= 0 or kappa_h <= 0 or kappa_w > 1 or kappa_h > 1:
        raise ValueError("sampling factors must lie in (0, 1]")
    if e_w < 2 or e_h < 2:
        raise ValueError("image must be at least 2x2")
    # tiny slack so that e.g. 8192 * 0.1 floors to 819 rather than 818
    return max(2, int(math.floor(e_w * kappa_w + 1e-9))), max(2, int(math.floor(e_h * kappa_h + 1e-9)))


# ---------------------------------------------------------------------------
# block grid and coordinate sampling


def _tile_band(colat: Tuple[float, float], n: int, band: str) -> List[Block]:
    span = 360.0 / n
    return [Block(colat, (-180.0 + i * span, -180.0 + (i + 1) * span), band) for i in range(n)]


def build_grid(k_low: int, k_high: int, theta_t: float = 23.0) -> PatchGrid:
    if k_low < 0 or k_high < 0 or k_low + k_high < 1:
        raise ValueError("need at least one block")
    n_north = (k_high + 1) // 2
    n_south = k_high // 2
    blocks: List[Block] = []
    if k_low:
        blocks += _tile_band((90.0 - theta_t, 90.0 + theta_t), k_low, "equator")
    if n_north:
        blocks += _tile_band((0.0, 90.0 - theta_t), n_north, "north")
    if n_south:
        blocks += _tile_band((90.0 + theta_t, 180.0), n_south, "south")
    return PatchGrid(k_low, k_high, blocks)


def sample_patch_coords(grid: PatchGrid, rng: np.random.Generator) -> SphericalPoint:
    """One uniformly drawn center per block, in block order."""
    n = len(grid.blocks)
    u = rng.random((n, 2))
    colat = np.array([b.colat[0] + u[i, 0] * (b.colat[1] - b.colat[0]) for i, b in enumerate(grid.blocks)])
    lon = np.array([b.lon[0] + u[i, 1] * (b.lon[1] - b.lon[0]) for i, b in enumerate(grid.blocks)])
    return SphericalPoint(90.0 - colat, lon)


def uniform_grid_coords(e_w: int, e_h: int, k: int) -> SphericalPoint:
    """Centers on a near-square grid covering a planar image.

    ``floor(sqrt(k))`` rows; the ``k`` centers are distributed over the rows
    as evenly as possible and spaced evenly within each row.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n_rows = int(math.isqrt(k))
    rows, cols = [], []
    for r in range(n_rows):
        n_r = k // n_rows + (1 if r < k % n_rows else 0)
        y = (r + 0.5) * e_h / n_rows - 0.5
        for j in range(n_r):
            rows.append(y)
            cols.append((j + 0.5) * e_w / n_r - 0.5)
    rows = np.array(rows)
    cols = np.array(cols)
    return SphericalPoint(90.0 - (rows + 0.5) * 180.0 / e_h, (cols + 0.5) * 360.0 / e_w - 180.0)


# ---------------------------------------------------------------------------
# cropping


def _crop_origin(center: float, size: int) -> int:
    return int(math.floor(center - (size - 1) / 2.0 + 0.5))


def crop_patch(pixels: np.ndarray, row: float, col: float, p_w: int, p_h: int, wrap: bool = True) -> np.ndarray:
    """Axis-aligned crop centred at fractional pixel (row, col)."""
    h, w = pixels.shape[:2]
    top = min(max(_crop_origin(row, p_h), 0), h - p_h)
    left = _crop_origin(col, p_w)
    if wrap:
        cols = (left + np.arange(p_w)) % w
        return pixels[top:top + p_h][:, cols]
    left = min(max(left, 0), w - p_w)
    return pixels[top:top + p_h, left:left + p_w]


def resize_patch(patch: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of an (h, w, C) patch to (side, side, C)."""
    h, w = patch.shape[:2]
    if h == side and w == side:
        return patch.copy()
    t = torch.from_numpy(np.ascontiguousarray(patch.transpose(2, 0, 1)))[None]
    down = h > side or w > side
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False, antialias=down)
    # antialias weights are positive but fp rounding can overshoot by ~1 ulp
    return out[0].numpy().transpose(1, 2, 0).clip(patch.min(), patch.max())


def extract_patches(
    img: ErpImage,
    centers: SphericalPoint,
    p_w: int,
    p_h: int,
    network_side: int = 224,
    wrap: bool = True,
    block_index: Optional[np.ndarray] = None,
) -> PatchSet:
    if p_h > img.height or p_w > img.width:
        raise ValueError(f"patch {p_h}x{p_w} larger than image {img.height}x{img.width}")
    rows, cols = latlon_to_pixel(centers, img.height, img.width)
    rows = np.atleast_1d(rows)
    cols = np.atleast_1d(cols)
    out = np.empty((len(rows), network_side, network_side, img.channels), dtype=np.float64)
    for i, (r, c) in enumerate(zip(rows, cols)):
        out[i] = resize_patch(crop_patch(img.pixels, r, c, p_w, p_h, wrap=wrap), network_side)
    lat = np.atleast_1d(np.asarray(centers.lat, dtype=np.float64))
    lon = np.atleast_1d(np.asarray(centers.lon, dtype=np.float64))
    return PatchSet(out, SphericalPoint(lat, lon), (p_w, p_h), block_index)


# ---------------------------------------------------------------------------


def image_rng(seed: int, image_id: str = "", epoch: int = 0) -> np.random.Generator:
    """Independent RNG stream per (seed, epoch, image id)."""
    key = zlib.crc32(str(image_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), key]))


class PatchSampler:
    """Draws a PatchSet from an image according to a SamplerConfig."""

    def __init__(self, config: SamplerConfig = SamplerConfig(), prior: PriorEquatorParams = PriorEquatorParams()):
        self.config = config
        self.prior = prior
        self.grid = build_grid(*split_counts(config.k, equator_mass(prior)), prior.theta_t)

    def centers(self, img: ErpImage, rng: np.random.Generator):
        k = self.config.k
        if self.config.mode == "aps":
            return sample_patch_coords(self.grid, rng), np.arange(k)
        if self.config.mode == "uniform":
            return uniform_grid_coords(img.width, img.height, k), np.arange(k)
        # "sphere": Fibonacci directions under a random rotation about the polar axis
        pts = sphere_uniform_points(k)
        shift = rng.uniform(-180.0, 180.0)
        return SphericalPoint(pts.lat, (pts.lon + shift + 180.0) % 360.0 - 180.0), np.arange(k)

    def sample(self, img: ErpImage, rng: np.random.Generator) -> PatchSet:
        cfg = self.config
        centers, idx = self.centers(img, rng)
        p_w, p_h = patch_dims(img.width, img.height, cfg.kappa_w, cfg.kappa_h)
        return extract_patches(img, centers, p_w, p_h, cfg.network_side, wrap=cfg.mode != "uniform", block_index=idx)
