"""Topographic rasterization of electrode-space maps into 40x40 images,
dataset splitting, normalization, and sign-flip augmentation."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CloughTocher2DInterpolator
from scipy.ndimage import distance_transform_edt
from scipy.spatial import QhullError

from .eeg import EegRecording

GRID = 40
LAYOUT_SCALE = 0.95   # electrode layout radius inside the unit head disc


@dataclass
class TopomapDataset:
    """N normalized (or raw) topographic images plus bookkeeping."""

    images: np.ndarray          # (N, 1, GRID, GRID) float32
    head_mask: np.ndarray       # (GRID, GRID) bool
    source_indices: np.ndarray  # (N,) original peak sample index
    is_augmented: np.ndarray    # (N,) bool

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
        self.is_augmented = np.asarray(self.is_augmented, dtype=bool)
        n = self.images.shape[0]
        if self.source_indices.shape != (n,) or self.is_augmented.shape != (n,):
            raise ValueError("per-image metadata length mismatch")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "TopomapDataset":
        return replace(self, images=self.images[idx],
                       source_indices=self.source_indices[idx],
                       is_augmented=self.is_augmented[idx])

    def unaugmented(self) -> "TopomapDataset":
        return self.subset(~self.is_augmented)


@dataclass
class NormStats:
    """Scalar z-score statistics fitted on the training split only."""

    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("std must be positive")


def project_electrodes(montage: np.ndarray) -> np.ndarray:
    """Azimuthal equidistant projection of unit-sphere positions onto the
    plane, rescaled so the outermost electrode sits at radius LAYOUT_SCALE."""
    montage = np.asarray(montage, dtype=float)
    z = np.clip(montage[:, 2], -1.0, 1.0)
    theta = np.arccos(z)
    phi = np.arctan2(montage[:, 1], montage[:, 0])
    pos = np.stack([theta * np.cos(phi), theta * np.sin(phi)], axis=1)
    rmax = np.linalg.norm(pos, axis=1).max()
    if rmax > 0:
        pos *= LAYOUT_SCALE / rmax
    return pos


def pixel_centers(grid: int = GRID) -> np.ndarray:
    """1-D pixel-centre coordinates covering [-1, 1]."""
    return -1.0 + (np.arange(grid) + 0.5) * (2.0 / grid)


def head_mask(grid: int = GRID) -> np.ndarray:
    c = pixel_centers(grid)
    xx, yy = np.meshgrid(c, c, indexing="xy")
    return xx ** 2 + yy ** 2 <= 1.0


def _masked_diff(f: np.ndarray, valid: np.ndarray, axis: int) -> np.ndarray:
    """First-order differences of f along axis using valid neighbours only:
    central where both exist, one-sided where one exists, zero otherwise."""
    fp = np.zeros_like(f)
    fm = np.zeros_like(f)
    vp = np.zeros_like(valid)
    vm = np.zeros_like(valid)
    src = [slice(None)] * f.ndim
    dst = [slice(None)] * f.ndim
    src[axis], dst[axis] = slice(1, None), slice(None, -1)
    fp[tuple(dst)], vp[tuple(dst)] = f[tuple(src)], valid[tuple(src)]
    src[axis], dst[axis] = slice(None, -1), slice(1, None)
    fm[tuple(dst)], vm[tuple(dst)] = f[tuple(src)], valid[tuple(src)]
    g = np.zeros_like(f)
    both = vp & vm
    g[both] = (fp[both] - fm[both]) / 2.0
    fw = vp & ~vm
    g[fw] = fp[fw] - f[fw]
    bw = vm & ~vp
    g[bw] = f[bw] - fm[bw]
    return g


def rasterize_map(values: np.ndarray, pos2d: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Clough-Tocher cubic interpolation of scattered electrode values onto
    the pixel-centre grid; head-circle pixels outside the electrode hull are
    filled by first-order extension (nearest interpolated pixel's value plus
    its local gradient), and everything outside the unit circle is zero.

    Returns a (1, grid, grid) array. Row index = y, column index = x.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 4:
        raise ValueError("need at least 4 electrodes")
    try:
        # tight gradient tolerance keeps the interpolant linear in `values`
        # to well below 1e-9
        interp = CloughTocher2DInterpolator(pos2d, values, tol=1e-12, maxiter=1000)
    except QhullError as exc:
        raise ValueError("degenerate (collinear) electrode layout") from exc

    c = pixel_centers(grid)
    xx, yy = np.meshgrid(c, c, indexing="xy")
    img = interp(np.stack([xx.ravel(), yy.ravel()], axis=1)).reshape(grid, grid)
    mask = xx ** 2 + yy ** 2 <= 1.0

    hole = np.isnan(img) & mask
    if hole.any():
        valid = ~np.isnan(img)
        filled = np.where(valid, img, 0.0)
        gy = _masked_diff(filled, valid, axis=0)
        gx = _masked_diff(filled, valid, axis=1)
        _, (iy, ix) = distance_transform_edt(~valid, return_indices=True)
        hy, hx = np.nonzero(hole)
        sy, sx = iy[hy, hx], ix[hy, hx]
        img[hy, hx] = (filled[sy, sx]
                       + gy[sy, sx] * (hy - sy)
                       + gx[sy, sx] * (hx - sx))
    img[~mask] = 0.0
    return img[None, :, :]


def build_dataset(rec: EegRecording, peaks: np.ndarray) -> TopomapDataset:
    """One rasterized image per GFP peak, in peak order."""
    peaks = np.asarray(peaks, dtype=int)
    if peaks.size == 0:
        raise ValueError("empty peak set")
    pos2d = project_electrodes(rec.montage)
    images = np.stack([rasterize_map(rec.data[:, t], pos2d) for t in peaks])
    return TopomapDataset(images=images.astype(np.float32),
                          head_mask=head_mask(),
                          source_indices=peaks,
                          is_augmented=np.zeros(peaks.size, dtype=bool))


def split(ds: TopomapDataset, ratio: float = 0.9,
          seed: int = 0) -> tuple[TopomapDataset, TopomapDataset]:
    """Random disjoint exhaustive train/eval split."""
    n = len(ds)
    if n < 10:
        raise ValueError(f"dataset too small to split (N={n})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(ratio * n))
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def fit_normalize(train: TopomapDataset) -> NormStats:
    """Scalar mean/std over all in-mask training pixels."""
    pix = train.images[:, 0][:, train.head_mask]
    std = float(np.std(pix))
    if std == 0:
        raise ValueError("zero variance in training pixels")
    return NormStats(mean=float(np.mean(pix)), std=std)


def normalize_values(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-score with +-5 sigma clipping (dtype-preserving)."""
    return np.clip((np.asarray(x) - stats.mean) / stats.std, -5.0, 5.0)


def apply_normalize(ds: TopomapDataset, stats: NormStats) -> TopomapDataset:
    """Normalize every image; mask zeros re-applied afterwards."""
    img = normalize_values(ds.images, stats)
    img[:, 0][:, ~ds.head_mask] = 0.0
    return replace(ds, images=img.astype(np.float32))


def denormalize(images: np.ndarray, stats: NormStats) -> np.ndarray:
    return images * stats.std + stats.mean


def augment_signflip(train: TopomapDataset) -> TopomapDataset:
    """Append the negated twin of every image, flagged is_augmented."""
    if train.is_augmented.any():
        raise ValueError("input already augmented")
    images = np.concatenate([train.images, -train.images])
    return TopomapDataset(images=images,
                          head_mask=train.head_mask,
                          source_indices=np.concatenate([train.source_indices] * 2),
                          is_augmented=np.concatenate([
                              np.zeros(len(train), dtype=bool),
                              np.ones(len(train), dtype=bool)]))


MAGIC = b"TMAP"


def save_dataset(ds: TopomapDataset, path) -> None:
    """Binary TMAP file: magic, u32 {N,H,W}, float32 images, u64 source
    indices, u8 augmentation flags (all little-endian)."""
    n, _, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", n, h, w))
        fh.write(ds.images.astype("<f4").tobytes())
        fh.write(ds.source_indices.astype("<u8").tobytes())
        fh.write(ds.is_augmented.astype(np.uint8).tobytes())


def load_dataset(path) -> TopomapDataset:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"not a TMAP file: {path}")
        n, h, w = struct.unpack("<III", fh.read(12))
        images = np.frombuffer(fh.read(n * h * w * 4), dtype="<f4").reshape(n, 1, h, w)
        source = np.frombuffer(fh.read(n * 8), dtype="<u8").astype(np.int64)
        flags = np.frombuffer(fh.read(n), dtype=np.uint8).astype(bool)
    return TopomapDataset(images=images.copy(), head_mask=head_mask(h),
                          source_indices=source, is_augmented=flags)


def save_norm_stats(stats: NormStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"mean": stats.mean, "std": stats.std}, fh)


def load_norm_stats(path) -> NormStats:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return NormStats(mean=d["mean"], std=d["std"])
