"""Clustering validity indices, reconstruction metrics, GEV backfitting,
and the projections used for reporting.

All index implementations use plain Euclidean geometry; the test suite
holds independent brute-force counterparts they must match to 1e-9.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)


def _check_clustering(points: np.ndarray, labels: np.ndarray) -> list[np.ndarray]:
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    if points.ndim != 2 or labels.shape != (points.shape[0],):
        raise ValueError("points must be (N, d) with one label per point")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("need at least 2 clusters")
    if points.shape[0] <= uniq.size:
        raise ValueError("need more points than clusters")
    return [np.flatnonzero(labels == u) for u in uniq]


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean over points of (b - a) / max(a, b); singleton clusters score 0."""
    groups = _check_clustering(points, labels)
    if all(g.size == 1 for g in groups):
        raise ValueError("silhouette undefined for all-singleton clustering")
    points = np.asarray(points, dtype=float)
    dist = cdist(points, points)
    scores = np.zeros(points.shape[0])
    for gi, g in enumerate(groups):
        if g.size == 1:
            continue
        a = dist[np.ix_(g, g)].sum(axis=1) / (g.size - 1)
        b = np.full(g.size, np.inf)
        for gj, h in enumerate(groups):
            if gj == gi:
                continue
            b = np.minimum(b, dist[np.ix_(g, h)].mean(axis=1))
        scores[g] = (b - a) / np.maximum(a, b)
    return float(scores.mean())


def davies_bouldin(points: np.ndarray, labels: np.ndarray) -> float:
    groups = _check_clustering(points, labels)
    points = np.asarray(points, dtype=float)
    centroids = np.stack([points[g].mean(axis=0) for g in groups])
    scatter = np.array([np.linalg.norm(points[g] - centroids[i], axis=1).mean()
                        for i, g in enumerate(groups)])
    sep = cdist(centroids, centroids)
    k = len(groups)
    ratios = (scatter[:, None] + scatter[None, :]) / np.where(sep > 0, sep, np.inf)
    np.fill_diagonal(ratios, -np.inf)
    return float(ratios.max(axis=1).mean())


def calinski_harabasz(points: np.ndarray, labels: np.ndarray) -> float:
    groups = _check_clustering(points, labels)
    points = np.asarray(points, dtype=float)
    overall = points.mean(axis=0)
    between = sum(g.size * np.sum((points[g].mean(axis=0) - overall) ** 2)
                  for g in groups)
    within = sum(np.sum((points[g] - points[g].mean(axis=0)) ** 2) for g in groups)
    n, k = points.shape[0], len(groups)
    if within == 0:
        return float("inf")
    return float((between / (k - 1)) / (within / (n - k)))


def dunn(points: np.ndarray, labels: np.ndarray) -> float:
    """Min inter-cluster distance over max intra-cluster diameter."""
    groups = _check_clustering(points, labels)
    points = np.asarray(points, dtype=float)
    diameter = 0.0
    for g in groups:
        if g.size > 1:
            diameter = max(diameter, cdist(points[g], points[g]).max())
    if diameter == 0.0:
        warnings.warn("all clusters have zero diameter; Dunn index is infinite")
        return float("inf")
    inter = np.inf
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            inter = min(inter, cdist(points[groups[i]], points[groups[j]]).min())
    return float(inter / diameter)


# ---------------------------------------------------------------------------
# reconstruction metrics


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((a - b) ** 2))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 10.0,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity with a Gaussian window, averaged over windows
    fully inside the image."""
    a = np.asarray(a, dtype=float).squeeze()
    b = np.asarray(b, dtype=float).squeeze()
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ssim expects two equal-shape 2-D images")
    if min(a.shape) < window_size:
        raise ValueError("image smaller than the SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_window(window_size, sigma)

    def wmean(img):
        return convolve2d(img, win, mode="valid")

    mu_a, mu_b = wmean(a), wmean(b)
    var_a = wmean(a * a) - mu_a ** 2
    var_b = wmean(b * b) - mu_b ** 2
    cov = wmean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def spatial_correlation(a: np.ndarray, b: np.ndarray,
                        mask: np.ndarray | None = None) -> float:
    """Pearson r over in-mask pixels (or all elements when mask is None)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if mask is not None:
        a, b = a.squeeze()[mask], b.squeeze()[mask]
    else:
        a, b = a.ravel(), b.ravel()
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.linalg.norm(ac) * np.linalg.norm(bc)
    if denom == 0:
        raise ValueError("zero-variance input for correlation")
    return float(ac @ bc / denom)


# ---------------------------------------------------------------------------
# backfitting


@dataclass
class BackfitResult:
    labels: np.ndarray   # per-map template index
    rho: np.ndarray      # signed correlation with the chosen template
    gev: float


def normalize_templates(templates: np.ndarray) -> np.ndarray:
    """Zero-mean (across channels), unit-norm rows."""
    t = np.asarray(templates, dtype=float)
    t = t - t.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    out = np.divide(t, norms, out=np.zeros_like(t), where=norms > 0)
    return out


def backfit(maps: np.ndarray, templates: np.ndarray) -> BackfitResult:
    """Polarity-blind assignment of each map to its best |correlation|
    template, and the GFP^2-weighted explained variance.

    Templates must be zero-mean unit-norm rows; an exactly-zero row is
    tolerated as a degenerate (never-matching) template. Zero-GFP maps get
    weight 0.
    """
    maps = np.asarray(maps, dtype=float)
    templates = np.asarray(templates, dtype=float)
    if maps.ndim != 2 or templates.ndim != 2 or maps.shape[1] != templates.shape[1]:
        raise ValueError("maps and templates must share the channel dimension")
    norms = np.linalg.norm(templates, axis=1)
    means = np.abs(templates.mean(axis=1))
    zero_rows = norms < 1e-12
    good = ~zero_rows
    if np.any(np.abs(norms[good] - 1.0) > 1e-6) or np.any(means[good] > 1e-6):
        raise ValueError("templates must be zero-mean and unit-norm")
    if zero_rows.any():
        log.warning("backfit: %d degenerate zero template(s)", int(zero_rows.sum()))

    n_ch = maps.shape[1]
    centered = maps - maps.mean(axis=1, keepdims=True)
    gfp_vals = np.linalg.norm(centered, axis=1) / np.sqrt(n_ch)
    mnorm = np.linalg.norm(centered, axis=1)
    safe = mnorm > 0
    corr = np.zeros((maps.shape[0], templates.shape[0]))
    corr[safe] = (centered[safe] / mnorm[safe, None]) @ templates.T
    labels = np.argmax(np.abs(corr), axis=1)
    rho = corr[np.arange(maps.shape[0]), labels]
    w = gfp_vals ** 2
    total = w.sum()
    gev = float((w * rho ** 2).sum() / total) if total > 0 else 0.0
    return BackfitResult(labels=labels, rho=rho, gev=gev)


def bilinear_sample(image: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample a 2-D image at fractional pixel coordinates (x = column,
    y = row), clamping to the border."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    x = np.clip(px, 0.0, w - 1.0)
    y = np.clip(py, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = x - x0
    fy = y - y0
    v00 = image[y0, x0]
    v01 = image[y0, x0 + 1]
    v10 = image[y0 + 1, x0]
    v11 = image[y0 + 1, x0 + 1]
    return (v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx
            + v10 * fy * (1 - fx) + v11 * fy * fx)


def centroids_to_electrodes(decoded: np.ndarray, pos2d: np.ndarray,
                            grid: int | None = None) -> np.ndarray:
    """Sample each decoded (grid x grid) image at the electrode pixel
    coordinates, then zero-mean and unit-normalize each row. A constant
    image yields an all-zero row (flagged)."""
    decoded = np.asarray(decoded, dtype=float)
    if decoded.ndim == 4:
        decoded = decoded[:, 0]
    k, h, w = decoded.shape
    grid = grid or h
    r = np.linalg.norm(pos2d, axis=1)
    if np.any(r > 1.0):
        raise ValueError("electrode outside the head mask")
    px = (pos2d[:, 0] + 1.0) / 2.0 * grid - 0.5
    py = (pos2d[:, 1] + 1.0) / 2.0 * grid - 0.5
    rows = np.stack([bilinear_sample(decoded[i], px, py) for i in range(k)])
    out = normalize_templates(rows)
    degenerate = np.linalg.norm(out, axis=1) < 0.5
    if degenerate.any():
        log.warning("constant decoded centroid(s) %s flagged degenerate",
                    np.flatnonzero(degenerate).tolist())
    return out


# ---------------------------------------------------------------------------
# projections and summaries


def pca_project(latents: np.ndarray, dims: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Principal-axis projection with a deterministic sign convention: the
    largest-magnitude loading of each axis is positive."""
    latents = np.asarray(latents, dtype=float)
    n = latents.shape[0]
    if n <= dims:
        raise ValueError("need more points than output dimensions")
    centered = latents - latents.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:dims]
    for i in range(axes.shape[0]):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    var = svals ** 2
    ratios = var[:dims] / var.sum() if var.sum() > 0 else np.zeros(dims)
    return centered @ axes.T, ratios


def centroid_correlation_matrix(decoded: np.ndarray,
                                mask: np.ndarray | None = None) -> np.ndarray:
    """Signed K x K Pearson matrix between decoded centroids."""
    decoded = np.asarray(decoded, dtype=float)
    if decoded.ndim == 4:
        decoded = decoded[:, 0]
    k = decoded.shape[0]
    if k < 2:
        raise ValueError("need at least 2 centroids")
    flat = decoded.reshape(k, -1) if mask is None else decoded[:, mask]
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-variance centroid")
    unit = centered / norms[:, None]
    corr = unit @ unit.T
    np.fill_diagonal(corr, 1.0)
    return corr


def cluster_distribution(labels: np.ndarray, n_clusters: int | None = None
                         ) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("empty label set")
    k = n_clusters if n_clusters is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=k)
    return counts, counts / labels.size


@dataclass
class MetricsReport:
    """Flat metric bundle for one trained model on one subject."""

    silhouette: float
    davies_bouldin: float
    calinski_harabasz: float
    dunn: float
    mse: float
    ssim: float
    spatial_correlation: float
    gev: float
    counts: list[int] = field(default_factory=list)
    coverage: list[float] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "silhouette": self.silhouette,
            "davies_bouldin": self.davies_bouldin,
            "calinski_harabasz": self.calinski_harabasz,
            "dunn": self.dunn,
            "mse": self.mse,
            "ssim": self.ssim,
            "spatial_correlation": self.spatial_correlation,
            "gev": self.gev,
            "counts": list(map(int, self.counts)),
            "coverage": list(map(float, self.coverage)),
        }
        doc.update(self.extras)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        known = {"silhouette", "davies_bouldin", "calinski_harabasz", "dunn",
                 "mse", "ssim", "spatial_correlation", "gev", "counts", "coverage"}
        extras = {k: v for k, v in doc.items() if k not in known}
        return cls(silhouette=doc["silhouette"],
                   davies_bouldin=doc["davies_bouldin"],
                   calinski_harabasz=doc["calinski_harabasz"],
                   dunn=doc["dunn"], mse=doc["mse"], ssim=doc["ssim"],
                   spatial_correlation=doc["spatial_correlation"],
                   gev=doc["gev"], counts=doc.get("counts", []),
                   coverage=doc.get("coverage", []), extras=extras)
