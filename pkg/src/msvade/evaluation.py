"""Model evaluation: latent clustering scores, reconstruction quality, GEV
via backfitting, and the assembled per-subject metric report."""

from __future__ import annotations

import logging

import numpy as np
import torch

from . import metrics
from .metrics import MetricsReport, backfit, centroids_to_electrodes
from .model import ConvVade, responsibilities

log = logging.getLogger(__name__)


def encode_dataset(model: ConvVade, images: np.ndarray,
                   batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode latent means and logvars for an (N, 1, H, W) array."""
    model.eval()
    mus, logvars = [], []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[start:start + batch_size]).float()
            mu, logvar = model.encode(x)
            mus.append(mu.numpy())
            logvars.append(logvar.numpy())
    return np.concatenate(mus), np.concatenate(logvars)


def decode_centroids(model: ConvVade) -> np.ndarray:
    """Eval-mode decoder output for every prior component mean: (K, 1, H, W)."""
    model.eval()
    with torch.no_grad():
        return model.decode(model.prior.mu_c).numpy()


def assign_latents(model: ConvVade, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Responsibilities and hard labels for latent means."""
    with torch.no_grad():
        gamma = responsibilities(torch.from_numpy(mu).float(), model.prior).numpy()
    return gamma, gamma.argmax(axis=1)


def latent_scores(model: ConvVade, data) -> tuple[float, float, np.ndarray]:
    """(silhouette, gev, labels) on the eval split; the per-epoch signal.

    A collapsed assignment (single occupied cluster) scores silhouette -1.
    """
    mu, _ = encode_dataset(model, data.eval.images)
    _, labels = assign_latents(model, mu)
    if np.unique(labels).size >= 2:
        sil = metrics.silhouette(mu, labels)
    else:
        log.warning("eval assignments collapsed to one cluster")
        sil = -1.0
    templates = centroids_to_electrodes(decode_centroids(model), data.pos2d)
    gev = backfit(data.eval_maps, templates).gev
    return sil, gev, labels


def reconstruct(model: ConvVade, images: np.ndarray,
                batch_size: int = 256) -> np.ndarray:
    """Eval-mode reconstructions from the latent means."""
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[start:start + batch_size]).float()
            mu, _ = model.encode(x)
            outs.append(model.decode(mu).numpy())
    return np.concatenate(outs)


def evaluate_model(model: ConvVade, data, include_q4: bool = True) -> MetricsReport:
    """Full metric report on the eval split.

    Latent-space (q1) validity indices, polarity-aware reconstruction
    metrics, backfitting GEV, cluster occupancy, and optionally the same
    indices in decoded topographic (q4) space.
    """
    k = model.cfg.K
    mu, _ = encode_dataset(model, data.eval.images)
    _, labels = assign_latents(model, mu)
    mask = data.head_mask

    distinct = np.unique(labels).size
    if distinct >= 2:
        q1 = {"silhouette": metrics.silhouette(mu, labels),
              "davies_bouldin": metrics.davies_bouldin(mu, labels),
              "calinski_harabasz": metrics.calinski_harabasz(mu, labels),
              "dunn": metrics.dunn(mu, labels)}
    else:
        log.warning("degenerate clustering: validity indices undefined")
        q1 = {"silhouette": -1.0, "davies_bouldin": float("inf"),
              "calinski_harabasz": 0.0, "dunn": 0.0}

    recon = reconstruct(model, data.eval.images)
    x = data.eval.images.astype(float)
    # the objective is polarity-invariant, so score each image against its
    # better-matching orientation
    per = ((recon - x) ** 2).reshape(len(x), -1).mean(axis=1)
    per_neg = ((recon + x) ** 2).reshape(len(x), -1).mean(axis=1)
    signs = np.where(per <= per_neg, 1.0, -1.0)
    oriented = x * signs[:, None, None, None]
    mse_val = float(np.minimum(per, per_neg).mean())
    ssim_vals, corr_vals = [], []
    for i in range(len(x)):
        ssim_vals.append(metrics.ssim(recon[i, 0], oriented[i, 0]))
        try:
            corr_vals.append(metrics.spatial_correlation(
                recon[i, 0], oriented[i, 0], mask))
        except ValueError:
            pass
    ssim_val = float(np.mean(ssim_vals))
    corr_val = float(np.mean(corr_vals)) if corr_vals else 0.0

    decoded = decode_centroids(model)
    templates = centroids_to_electrodes(decoded, data.pos2d)
    gev = backfit(data.eval_maps, templates).gev
    counts, coverage = metrics.cluster_distribution(labels, k)

    extras = {}
    if include_q4 and distinct >= 2:
        dec_points = recon[:, 0][:, mask]
        try:
            extras = {"q4_silhouette": metrics.silhouette(dec_points, labels),
                      "q4_davies_bouldin": metrics.davies_bouldin(dec_points, labels),
                      "q4_calinski_harabasz": metrics.calinski_harabasz(dec_points, labels),
                      "q4_dunn": metrics.dunn(dec_points, labels)}
        except ValueError:
            log.warning("q4 indices undefined for this assignment")

    return MetricsReport(silhouette=q1["silhouette"],
                         davies_bouldin=q1["davies_bouldin"],
                         calinski_harabasz=q1["calinski_harabasz"],
                         dunn=q1["dunn"],
                         mse=mse_val, ssim=ssim_val,
                         spatial_correlation=corr_val, gev=gev,
                         counts=counts.tolist(), coverage=coverage.tolist(),
                         extras=extras)
