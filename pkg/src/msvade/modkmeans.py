"""Polarity-invariant Modified K-Means in electrode space.

Templates are dominant eigenvectors of the assigned maps' channel
covariance; assignment is by maximal absolute spatial correlation, so a
map and its sign-flipped twin always land in the same cluster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .metrics import BackfitResult, backfit

log = logging.getLogger(__name__)


@dataclass
class TemplateSet:
    templates: np.ndarray   # (K, n_channels), zero-mean unit-norm rows
    gev: float
    n_iter: int

    def save_csv(self, path, channel_names: list[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(channel_names) + "\n")
            np.savetxt(fh, self.templates, delimiter=",", fmt="%.10g")


def load_templates_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, encoding="utf-8") as fh:
        names = [h.strip() for h in fh.readline().strip().split(",")]
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    return rows, names


def _dominant_eigenvector(maps: np.ndarray) -> np.ndarray:
    """First right singular vector of the (n_maps, n_channels) block."""
    _, _, vt = np.linalg.svd(maps, full_matrices=False)
    v = vt[0]
    v = v - v.mean()
    nrm = np.linalg.norm(v)
    if nrm < 1e-12:
        raise np.linalg.LinAlgError("degenerate covariance")
    return v / nrm


def _gev_of(centered: np.ndarray, mnorm: np.ndarray, templates: np.ndarray,
            labels: np.ndarray) -> float:
    # GFP^2-weighted rho^2 reduces to sum (t_k . m)^2 / sum |m|^2
    proj = np.einsum("nc,nc->n", centered, templates[labels])
    denom = (mnorm ** 2).sum()
    return float((proj ** 2).sum() / denom) if denom > 0 else 0.0


def fit(maps: np.ndarray, K: int, n_init: int = 20, max_iter: int = 100,
        tol: float = 1e-6, seed: int = 0) -> TemplateSet:
    """Best-of-n_init Modified K-Means.

    Each run alternates polarity-blind assignment (max |correlation|) with
    eigenvector template updates until the GEV improvement drops below tol.
    A run that empties a cluster is abandoned and a fresh initialization is
    drawn from the same seeded stream.
    """
    maps = np.asarray(maps, dtype=float)
    n, n_ch = maps.shape
    if n < 10 * K:
        raise ValueError(f"need at least {10 * K} maps for K={K}")
    centered = maps - maps.mean(axis=1, keepdims=True)
    mnorm = np.linalg.norm(centered, axis=1)
    usable = np.flatnonzero(mnorm > 0)
    if usable.size < K:
        raise ValueError("not enough nonzero maps")

    rng = np.random.default_rng(seed)
    best: TemplateSet | None = None
    attempts = 0
    runs_done = 0
    while runs_done < n_init and attempts < 5 * n_init:
        attempts += 1
        pick = rng.choice(usable, size=K, replace=False)
        templates = centered[pick] / mnorm[pick, None]
        templates = templates - templates.mean(axis=1, keepdims=True)
        templates /= np.linalg.norm(templates, axis=1, keepdims=True)

        prev_gev = -np.inf
        labels = None
        n_iter = 0
        failed = False
        for n_iter in range(1, max_iter + 1):
            corr = centered @ templates.T
            labels = np.argmax(np.abs(corr), axis=1)
            if np.unique(labels).size < K:
                failed = True
                break
            try:
                templates = np.stack([
                    _dominant_eigenvector(centered[labels == k]) for k in range(K)])
            except np.linalg.LinAlgError:
                failed = True
                break
            gev = _gev_of(centered, mnorm, templates, labels)
            if gev - prev_gev < tol:
                prev_gev = gev
                break
            prev_gev = gev
        if failed:
            log.debug("modkmeans: empty/degenerate cluster, restarting init")
            continue
        runs_done += 1
        if best is None or prev_gev > best.gev:
            best = TemplateSet(templates=templates, gev=prev_gev, n_iter=n_iter)
    if best is None:
        raise ValueError("modified k-means failed: every initialization "
                         "produced an empty or degenerate cluster")
    return best


def assign(maps: np.ndarray, templates: np.ndarray) -> BackfitResult:
    """Polarity-blind labelling of maps by the fitted templates."""
    return backfit(maps, templates)
