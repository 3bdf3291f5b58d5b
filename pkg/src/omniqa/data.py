"""Dataset manifests and the procedural synthetic ERP dataset."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError
from .geometry import ErpImage, load_image, save_image

SPLITS = ("train", "test", "auto")
MANIFEST_FIELDS = ("image_id", "image_path", "mos", "split")

BLUR_SIGMAS = (1.0, 2.0, 4.0, 8.0)
NOISE_SIGMAS = (0.02, 0.05, 0.1, 0.2)
QUANT_LEVELS = (32, 16, 8, 4)
DISTORTIONS = {"blur": BLUR_SIGMAS, "noise": NOISE_SIGMAS, "quant": QUANT_LEVELS}


@dataclass
class ManifestRow:
    image_id: str
    image_path: Path
    mos: float
    split: str


@dataclass
class DatasetManifest:
    rows: List[ManifestRow]

    def __len__(self):
        return len(self.rows)

    def subset(self, split: str) -> List[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    @property
    def train(self) -> List[ManifestRow]:
        return self.subset("train")

    @property
    def test(self) -> List[ManifestRow]:
        return self.subset("test")

    def write(self, path, relative_to: Optional[Path] = None) -> None:
        path = Path(path)
        base = Path(relative_to) if relative_to is not None else path.parent
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_FIELDS)
            for r in self.rows:
                try:
                    p = Path(r.image_path).resolve().relative_to(base.resolve())
                except ValueError:
                    p = Path(r.image_path)
                w.writerow([r.image_id, p.as_posix(), repr(float(r.mos)), r.split])


def split_auto(ids: Sequence[str], seed: int, train_fraction: float = 0.8) -> Dict[str, str]:
    """Seeded image-level shuffle; the first round(n * train_fraction) go to train."""
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(math.floor(len(ids) * train_fraction + 0.5))
    return {ids[i]: ("train" if rank < n_train else "test") for rank, i in enumerate(order)}


def load_manifest(path, seed: int = 0, train_fraction: float = 0.8, check_files: bool = True) -> DatasetManifest:
    """Read and validate a manifest CSV; resolve ``auto`` rows with a seeded 80/20 split.

    Paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    problems: List[str] = []
    rows: List[ManifestRow] = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [f for f in MANIFEST_FIELDS[:3] if f not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        seen = set()
        for lineno, rec in enumerate(reader, start=2):
            iid = (rec.get("image_id") or "").strip()
            if not iid:
                problems.append(f"line {lineno}: empty image_id")
                continue
            if iid in seen:
                problems.append(f"line {lineno}: duplicate image_id {iid!r}")
                continue
            seen.add(iid)
            try:
                mos = float(rec["mos"])
                if not math.isfinite(mos):
                    raise ValueError
            except (TypeError, ValueError):
                problems.append(f"line {lineno}: unparseable mos {rec.get('mos')!r} for {iid!r}")
                continue
            split = (rec.get("split") or "auto").strip() or "auto"
            if split not in SPLITS:
                problems.append(f"line {lineno}: bad split {split!r} for {iid!r}")
                continue
            img_path = Path(rec["image_path"])
            if not img_path.is_absolute():
                img_path = path.parent / img_path
            if check_files and not img_path.is_file():
                problems.append(f"line {lineno}: missing file {img_path} for {iid!r}")
                continue
            rows.append(ManifestRow(iid, img_path, mos, split))
    if problems:
        raise DataError(f"{path}: " + "; ".join(problems))
    auto = [r.image_id for r in rows if r.split == "auto"]
    if auto:
        assignment = split_auto(auto, seed, train_fraction)
        for r in rows:
            if r.split == "auto":
                r.split = assignment[r.image_id]
    return DatasetManifest(rows)


class ImageCache:
    """Decode each image once."""

    def __init__(self):
        self._images: Dict[str, ErpImage] = {}

    def get(self, row: ManifestRow) -> ErpImage:
        img = self._images.get(row.image_id)
        if img is None:
            img = load_image(row.image_path)
            if img.channels == 1:
                img = ErpImage(np.repeat(img.pixels, 3, axis=2))
            self._images[row.image_id] = img
        return img


# ---------------------------------------------------------------------------
# synthetic dataset


def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    n = rng.standard_normal((h, w))
    # wrap horizontally (periodic longitude), reflect at the poles
    n = ndimage.gaussian_filter1d(n, sigma, axis=1, mode="wrap")
    n = ndimage.gaussian_filter1d(n, sigma, axis=0, mode="reflect")
    return n / (n.std() + 1e-12)


def synth_content(rng: np.random.Generator, height: int = 512, width: int = 1024) -> np.ndarray:
    """Procedural ERP scene: gradients, band-limited noise, shapes and fine texture."""
    yy, xx = np.mgrid[0:height, 0:width]
    lat = (0.5 - (yy + 0.5) / height) * np.pi
    lon = ((xx + 0.5) / width - 0.5) * 2 * np.pi
    img = np.empty((height, width, 3))
    for c in range(3):
        a, b, ph = rng.uniform(0.1, 0.25), rng.uniform(0.05, 0.2), rng.uniform(0, 2 * np.pi)
        f = rng.integers(1, 4)
        img[:, :, c] = 0.5 + a * np.sin(f * lon + ph) * np.cos(lat) + b * np.sin(2 * lat + ph)
    coarse = _smooth_noise(rng, height, width, rng.uniform(6, 12))
    medium = _smooth_noise(rng, height, width, rng.uniform(1.5, 3))
    tint = rng.uniform(0.6, 1.0, size=3)
    img += 0.08 * coarse[:, :, None] * tint + 0.05 * medium[:, :, None]

    for _ in range(int(rng.integers(25, 40))):
        color = rng.uniform(0.1, 0.9, size=3)
        cy, cx = rng.uniform(0.1, 0.9) * height, rng.uniform(0, width)
        size = rng.uniform(8, 60)
        dx = (xx - cx + width / 2) % width - width / 2
        if rng.random() < 0.5:
            mask = dx ** 2 + (yy - cy) ** 2 < size ** 2
        else:
            mask = (np.abs(dx) < size * rng.uniform(0.5, 1.5)) & (np.abs(yy - cy) < size * rng.uniform(0.3, 1.0))
        alpha = rng.uniform(0.6, 1.0)
        img[mask] = (1 - alpha) * img[mask] + alpha * color

    # fine stripes and checkers give blur something to remove
    period = rng.uniform(4, 9)
    theta = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
    checker = ((xx // int(rng.integers(3, 7)) + yy // int(rng.integers(3, 7))) % 2) * 2.0 - 1.0
    region = _smooth_noise(rng, height, width, 20) > 0.3
    img += (0.06 * stripes * region + 0.05 * checker * (~region))[:, :, None]
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


def apply_distortion(pixels: np.ndarray, kind: str, level: int, rng: np.random.Generator) -> np.ndarray:
    """Distort a [0, 1] raster; ``level`` indexes 1..4 from mildest to strongest."""
    if kind == "blur":
        s = BLUR_SIGMAS[level - 1]
        out = ndimage.gaussian_filter1d(pixels, s, axis=1, mode="wrap")
        out = ndimage.gaussian_filter1d(out, s, axis=0, mode="nearest")
    elif kind == "noise":
        out = pixels + NOISE_SIGMAS[level - 1] * rng.standard_normal(pixels.shape)
    elif kind == "quant":
        q = QUANT_LEVELS[level - 1]
        out = np.round(pixels * (q - 1)) / (q - 1)
    else:
        raise DataError(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


@dataclass
class SynthItem:
    image_id: str
    path: Path
    mos: float
    content: int
    distortion: str
    level: int
    reference: str


def synth_dataset(out_dir, n_contents: int = 4, distortions: Iterable[str] = ("blur", "noise", "quant"),
                  levels: int = 4, seed: int = 0, height: int = 512, width: int = 1024,
                  include_references: bool = True):
    """Write pristine contents and their distorted versions plus ``manifest.csv``.

    Pseudo-MOS is ``5 - level`` (references get 5). Returns the manifest and
    the list of :class:`SynthItem` (also written to ``synth_meta.csv``).
    """
    if n_contents < 1:
        raise DataError("n_contents must be >= 1")
    if not 1 <= levels <= 4:
        raise DataError("levels must be in 1..4")
    distortions = list(distortions)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    items: List[SynthItem] = []
    for c in range(n_contents):
        ref = synth_content(np.random.default_rng([seed, c]), height, width)
        ref_id = f"c{c:02d}_ref"
        ref_path = out / "images" / f"{ref_id}.png"
        save_image(ref_path, ref)
        # distort the 8-bit version that is actually on disk
        ref = load_image(ref_path).pixels
        if include_references:
            items.append(SynthItem(ref_id, ref_path, 5.0, c, "none", 0, ref_id))
        for d_idx, kind in enumerate(distortions):
            for level in range(1, levels + 1):
                rng = np.random.default_rng([seed, c, d_idx, level])
                iid = f"c{c:02d}_{kind}{level}"
                p = out / "images" / f"{iid}.png"
                save_image(p, apply_distortion(ref, kind, level, rng))
                items.append(SynthItem(iid, p, float(5 - level), c, kind, level, ref_id))

    manifest = DatasetManifest([ManifestRow(it.image_id, it.path, it.mos, "auto") for it in items])
    manifest.write(out / "manifest.csv")
    with open(out / "synth_meta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "content", "distortion", "level", "reference_id"])
        for it in items:
            w.writerow([it.image_id, it.content, it.distortion, it.level, it.reference])
    return manifest, items
