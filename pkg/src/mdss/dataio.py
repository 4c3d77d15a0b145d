"""Dataset loading and geometric preprocessing for organized RGB + XYZ data.

The on-disk layout follows MVTec 3D-AD::

    <root>/<category>/<split>/<defect>/rgb/NNN.png
    <root>/<category>/<split>/<defect>/xyz/NNN.tiff
    <root>/<category>/<split>/<defect>/gt/NNN.png      (test split only)

Missing points are encoded as ``(0, 0, 0)`` together with a validity grid.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import tifffile
from PIL import Image
from scipy import ndimage

from .gridops import bilinear_resize, nearest_resize

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
NORMAL_DEFECT = "good"


class DataError(Exception):
    """Raised for malformed or unreadable dataset content."""


class DegenerateCloud(DataError):
    pass


@dataclass(frozen=True)
class OrganizedCloud:
    """Point cloud stored on the pixel grid: ``xyz`` is (H, W, 3), ``valid`` is (H, W)."""

    xyz: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_xyz(cls, xyz):
        xyz = np.asarray(xyz, dtype=np.float32)
        if xyz.ndim != 3 or xyz.shape[2] != 3:
            raise DataError(f"expected an (H, W, 3) coordinate raster, got shape {xyz.shape}")
        valid = np.any(xyz != 0, axis=2)
        return cls(xyz, valid)

    @property
    def shape(self):
        return self.valid.shape

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def points(self) -> np.ndarray:
        return self.xyz[self.valid]

    def pixel_indices(self) -> np.ndarray:
        return np.argwhere(self.valid)

    def invalidate(self, drop) -> "OrganizedCloud":
        drop = np.asarray(drop, dtype=bool)
        xyz = self.xyz.copy()
        xyz[drop] = 0
        return OrganizedCloud(xyz, self.valid & ~drop)


@dataclass(frozen=True)
class Sample:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    cloud: OrganizedCloud
    fg: np.ndarray  # (H, W) bool
    gt: Optional[np.ndarray] = None  # (H, W) bool
    label: str = "normal"
    category: str = ""
    split: str = "train"
    defect: str = NORMAL_DEFECT
    stem: str = ""

    def __post_init__(self):
        shape = self.rgb.shape[:2]
        grids = [self.cloud.valid, self.fg] + ([self.gt] if self.gt is not None else [])
        if any(g.shape[:2] != shape for g in grids):
            raise DataError(f"sample {self.sample_id}: rgb/cloud/mask shapes disagree")
        if self.gt is not None and self.split != "test":
            raise DataError(f"sample {self.sample_id}: ground truth outside the test split")
        if self.label not in ("normal", "anomalous"):
            raise DataError(f"unknown label {self.label!r}")

    @property
    def sample_id(self) -> str:
        return f"{self.category}/{self.split}/{self.defect}/{self.stem}"

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read RGB raster {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def read_xyz(path) -> np.ndarray:
    try:
        arr = tifffile.imread(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read XYZ raster {path}: {exc}") from exc
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"{path}: expected 3-channel coordinates, got shape {arr.shape}")
    return np.nan_to_num(arr, nan=0.0)


def read_gt(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read ground-truth raster {path}: {exc}") from exc
    return arr != 0


def write_rgb(path, rgb):
    arr = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_xyz(path, xyz):
    tifffile.imwrite(path, np.asarray(xyz, dtype=np.float32), photometric="rgb")


def write_gt(path, gt):
    Image.fromarray(np.asarray(gt, dtype=np.uint8) * 255, mode="L").save(path)


def write_sample(root, sample: Sample) -> Path:
    """Write ``sample`` into the dataset layout under ``root``; returns its defect dir."""
    base = Path(root) / sample.category / sample.split / sample.defect
    for sub in ("rgb", "xyz") + (("gt",) if sample.gt is not None else ()):
        (base / sub).mkdir(parents=True, exist_ok=True)
    write_rgb(base / "rgb" / f"{sample.stem}.png", sample.rgb)
    write_xyz(base / "xyz" / f"{sample.stem}.tiff", sample.cloud.xyz)
    if sample.gt is not None:
        write_gt(base / "gt" / f"{sample.stem}.png", sample.gt)
    return base


def list_categories(root):
    return sorted(p.name for p in Path(root).iterdir() if p.is_dir())


def _stems(folder: Path, suffixes):
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in folder.iterdir() if p.suffix.lower() in suffixes}


def load_dataset(root, category, split, *, preprocess=True, size=256,
                 plane_kwargs=None, dilation=8):
    """Load every sample of one category/split.

    With ``preprocess=True`` each sample goes through plane removal,
    foreground-mask generation and resizing (in that order, at native
    resolution first). With ``preprocess=False`` samples come back exactly as
    stored and the foreground mask is the raw validity grid.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    split_dir = Path(root) / category / split
    if not split_dir.is_dir():
        raise DataError(f"missing split directory {split_dir}")
    samples = []
    for defect_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        rgbs = _stems(defect_dir / "rgb", {".png", ".jpg", ".jpeg"})
        xyzs = _stems(defect_dir / "xyz", {".tif", ".tiff"})
        gts = _stems(defect_dir / "gt", {".png"})
        for stem in sorted(set(rgbs) ^ set(xyzs)):
            side = "xyz" if stem in rgbs else "rgb"
            raise DataError(f"{defect_dir}: sample {stem!r} has no {side} counterpart")
        defect = defect_dir.name
        label = "normal" if defect == NORMAL_DEFECT else "anomalous"
        for stem in sorted(rgbs):
            rgb = read_rgb(rgbs[stem])
            cloud = OrganizedCloud.from_xyz(read_xyz(xyzs[stem]))
            gt = None
            if split == "test":
                gt = read_gt(gts[stem]) if stem in gts else np.zeros(cloud.shape, bool)
            s = Sample(rgb=rgb, cloud=cloud, fg=cloud.valid.copy(), gt=gt, label=label,
                       category=category, split=split, defect=defect, stem=stem)
            if preprocess:
                s = preprocess_sample(s, size=size, plane_kwargs=plane_kwargs, dilation=dilation)
            samples.append(s)
    n_anom = sum(s.is_anomalous for s in samples)
    logger.info("loaded %s/%s: %d samples (%d anomalous)", category, split, len(samples), n_anom)
    return samples


def fit_plane_ransac(points, threshold, iterations=1000, seed=0, chunk=64):
    """Best plane ``(normal, offset)`` with ``normal . p + offset = 0`` and its inlier mask."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise DegenerateCloud(f"plane fitting needs at least 3 valid points, got {n}")
    rng = np.random.default_rng(seed)
    triples = np.stack([rng.choice(n, 3, replace=False) for _ in range(iterations)])
    best_count, best = -1, None
    for start in range(0, iterations, chunk):
        tri = pts[triples[start:start + chunk]]
        normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(normal, axis=1)
        ok = norm > 1e-12
        if not ok.any():
            continue
        normal = normal[ok] / norm[ok, None]
        offset = -np.einsum("ij,ij->i", normal, tri[ok, 0])
        dist = np.abs(pts @ normal.T + offset)
        counts = (dist < threshold).sum(axis=0)
        i = int(np.argmax(counts))
        if counts[i] > best_count:
            best_count, best = int(counts[i]), (normal[i], offset[i])
    if best is None:
        raise DegenerateCloud("all sampled point triples are collinear")
    normal, offset = best
    return normal, offset, np.abs(pts @ normal + offset) < threshold


def remove_background_plane(cloud: OrganizedCloud, threshold=None, threshold_factor=0.005,
                            iterations=1000, seed=0, min_inlier_fraction=0.1) -> OrganizedCloud:
    """Invalidate the points of the dominant plane found by RANSAC.

    ``threshold`` defaults to ``threshold_factor`` times the bounding-box
    diagonal of the valid points. The plane is only removed when it holds at
    least ``min_inlier_fraction`` of the valid points.
    """
    pts = cloud.points()
    if len(pts) < 3:
        raise DegenerateCloud(f"plane removal needs at least 3 valid points, got {len(pts)}")
    if threshold is None:
        threshold = threshold_factor * float(np.linalg.norm(pts.max(0) - pts.min(0)))
    _, _, inliers = fit_plane_ransac(pts, threshold, iterations=iterations, seed=seed)
    if inliers.sum() < min_inlier_fraction * len(pts):
        return cloud
    drop = np.zeros(cloud.shape, dtype=bool)
    drop[cloud.valid] = inliers
    return cloud.invalidate(drop)


def dilation_footprint(size=8):
    return np.ones((size, size), dtype=bool)


def make_foreground_mask(cloud: OrganizedCloud, size=8) -> np.ndarray:
    """Dilate the validity grid with a ``size`` x ``size`` square.

    The footprint of pixel p spans offsets ``-(size // 2 - 1) .. size // 2``
    (anchor at (3, 3) for the default 8), so p is foreground iff a valid
    point lies in rows/cols ``p-3 .. p+4``. Equivalently a single valid pixel
    at (r, c) marks rows ``r-4 .. r+3`` and the same columns.
    """
    return ndimage.binary_dilation(cloud.valid, structure=dilation_footprint(size))


def resize_sample(s: Sample, size=256) -> Sample:
    h, w = s.rgb.shape[:2]
    if (h, w) == (size, size):
        return s
    rgb = np.clip(bilinear_resize(s.rgb, size, size), 0.0, 1.0).astype(np.float32)
    cloud = OrganizedCloud(nearest_resize(s.cloud.xyz, size, size),
                           nearest_resize(s.cloud.valid, size, size))
    gt = None if s.gt is None else nearest_resize(s.gt, size, size)
    return replace(s, rgb=rgb, cloud=cloud, fg=nearest_resize(s.fg, size, size), gt=gt)


def preprocess_sample(s: Sample, size=256, plane_kwargs=None, dilation=8) -> Sample:
    cloud = remove_background_plane(s.cloud, **(plane_kwargs or {}))
    s = replace(s, cloud=cloud, fg=make_foreground_mask(cloud, dilation))
    if size is not None:
        s = resize_sample(s, size)
    return s
