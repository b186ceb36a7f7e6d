"""Two-phase Conv-VaDE training: reconstruction pretraining, bisecting
K-Means prior initialization, then the main loop with prior freezing,
dead-cluster reinitialization, dual Adam optimizers, gradient clipping,
plateau LR reduction, and composite early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import BisectingKMeans, KMeans

from .evaluation import encode_dataset, latent_scores
from .model import (ArchConfig, ConvVade, GmmPrior, LossWeights,
                    NonFiniteLossError, loss_batch, loss_entropy, loss_kl,
                    loss_recon, loss_separation, loss_tight, polarity_mse,
                    responsibilities, total_loss)

log = logging.getLogger(__name__)


@dataclass
class TrainOptions:
    max_epochs: int = 100
    batch_size: int = 128
    lr_encdec: float = 1e-3
    weight_decay: float = 1e-5
    lr_gmm: float = 5e-4
    clip_encdec: float = 5.0
    clip_gmm: float = 1.0
    freeze_epochs: int = 5
    early_stop_patience: int = 20
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-5
    dead_threshold: float = 0.01
    pretrain_steps: int = 200
    pretrain_beta: float = 1e-3


class PlateauScheduler:
    """Halve the learning rates after `patience` consecutive epochs without
    improvement of a maximized score; never below min_lr."""

    def __init__(self, optimizers, factor: float = 0.5, patience: int = 10,
                 min_lr: float = 1e-5):
        self.optimizers = list(optimizers)
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, score: float) -> bool:
        if score > self.best:
            self.best = score
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return False
        self.bad_epochs = 0
        for opt in self.optimizers:
            for group in opt.param_groups:
                group["lr"] = max(self.min_lr, group["lr"] * self.factor)
        return True


@dataclass
class TrainState:
    epoch: int = 0
    best_composite: float = -1.0
    best_epoch: int = -1
    best_checkpoint: dict[str, torch.Tensor] = field(default_factory=dict)
    epochs_since_best: int = 0
    stopped_early: bool = False


def composite_score(sil: float, gev: float) -> float:
    """sqrt of (rescaled silhouette) * GEV; the early-stopping signal."""
    if not -1.0 <= sil <= 1.0:
        raise ValueError(f"silhouette out of range: {sil}")
    if not 0.0 <= gev <= 1.0:
        raise ValueError(f"gev out of range: {gev}")
    return math.sqrt(((sil + 1.0) / 2.0) * gev)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size >= 2:        # batch norm needs >= 2 samples
            yield idx


def pretrain(model: ConvVade, train_images: np.ndarray,
             opts: TrainOptions | None = None, seed: int = 0) -> list[float]:
    """Exactly `pretrain_steps` optimizer steps of recon + tiny-beta KL.

    Only encoder/decoder parameters receive gradients or updates; the GMM
    prior is untouched.
    """
    opts = opts or TrainOptions()
    optimizer = torch.optim.Adam(model.encdec_parameters(), lr=opts.lr_encdec,
                                 weight_decay=opts.weight_decay)
    model.prior.requires_grad_(False)
    model.train()
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    step = 0
    try:
        while step < opts.pretrain_steps:
            for idx in _batches(train_images.shape[0], opts.batch_size, rng):
                if step >= opts.pretrain_steps:
                    break
                x = torch.from_numpy(train_images[idx]).float()
                mu, logvar = model.encode(x)
                z = model.sample_latent(mu, logvar)
                xhat = model.decode(z)
                gamma = responsibilities(z, model.prior)
                loss = (loss_recon(xhat, x)
                        + opts.pretrain_beta * loss_kl(mu, logvar, model.prior, gamma))
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(
                        f"non-finite pretrain loss at step {step}")
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.encdec_parameters(),
                                               opts.clip_encdec)
                optimizer.step()
                losses.append(float(loss))
                step += 1
    finally:
        model.prior.requires_grad_(True)
    log.info("pretrain: %d steps, loss %.4f -> %.4f",
             step, losses[0], losses[-1])
    return losses


def init_gmm_bisecting(latent_means: np.ndarray, K: int, seed: int = 0,
                       pi_floor: float = 1e-3, var_floor: float = 1e-4) -> GmmPrior:
    """GMM initialization from latent means: one flat K-Means (20 restarts,
    best inertia) for K <= 4, iterative largest-inertia bisection for K > 4."""
    latent_means = np.asarray(latent_means, dtype=float)
    n, d_z = latent_means.shape
    if n < 10 * K:
        raise ValueError(f"need at least {10 * K} latent means for K={K}")
    if np.unique(latent_means, axis=0).shape[0] < K:
        raise ValueError("degenerate input: fewer distinct points than clusters")
    if K <= 4:
        km = KMeans(n_clusters=K, n_init=20, random_state=seed)
    else:
        km = BisectingKMeans(n_clusters=K, n_init=5, random_state=seed,
                             bisecting_strategy="biggest_inertia")
    labels = km.fit_predict(latent_means)

    pi = np.empty(K)
    mu = np.asarray(km.cluster_centers_, dtype=float).copy()
    var = np.empty((K, d_z))
    for k in range(K):
        members = latent_means[labels == k]
        if members.shape[0] == 0:
            raise ValueError(f"k-means produced an empty cluster (k={k})")
        pi[k] = members.shape[0] / n
        var[k] = np.maximum(members.var(axis=0), var_floor)
    pi = np.maximum(pi, pi_floor)
    pi /= pi.sum()

    prior = GmmPrior(K, d_z)
    prior.set_components(pi, mu, var)
    return prior


def detect_dead_clusters(gamma: np.ndarray, threshold: float = 0.01) -> np.ndarray:
    """Clusters whose hard-assignment share falls below the threshold."""
    gamma = np.asarray(gamma)
    k = gamma.shape[1]
    counts = np.bincount(gamma.argmax(axis=1), minlength=k)
    return np.flatnonzero(counts / gamma.shape[0] < threshold)


def reinit_dead_cluster(prior: GmmPrior, dead_k: int, largest_k: int,
                        rng: np.random.Generator) -> None:
    """Move a dead component next to the largest survivor: jittered mean,
    copied variance, half of the survivor's weight."""
    if dead_k == largest_k:
        raise ValueError("cannot reinitialize a cluster from itself")
    with torch.no_grad():
        pi = prior.pi().numpy().astype(float)
        if pi[largest_k] <= 0:
            raise ValueError("no surviving cluster to reinitialize from")
        sigma = np.exp(0.5 * prior.logvar_c.numpy().astype(float))
        jitter_scale = 0.1 * float(sigma.mean())
        mu = prior.mu_c.numpy().astype(float).copy()
        mu[dead_k] = mu[largest_k] + rng.normal(0.0, jitter_scale, mu.shape[1])
        logvar = prior.logvar_c.numpy().astype(float).copy()
        logvar[dead_k] = logvar[largest_k]
        pi[dead_k] = pi[largest_k] / 2.0
        pi[largest_k] = pi[largest_k] / 2.0
        # floor slightly above 1e-3 so the renormalized weights stay >= 1e-3
        pi = np.maximum(pi, 1.1e-3)
        pi /= pi.sum()
        prior.set_components(pi, mu, np.exp(logvar))


def _handle_dead_clusters(model: ConvVade, train_images: np.ndarray,
                          rng: np.random.Generator,
                          threshold: float) -> list[int]:
    mu, _ = encode_dataset(model, train_images)
    gamma, _ = _responsibilities_np(model, mu)
    dead = detect_dead_clusters(gamma, threshold)
    if dead.size == 0:
        return []
    counts = np.bincount(gamma.argmax(axis=1), minlength=model.cfg.K)
    for dk in dead:
        alive = [k for k in range(model.cfg.K) if k not in dead]
        if not alive:
            raise RuntimeError("every cluster is dead; cannot reinitialize")
        largest = max(alive, key=lambda k: counts[k])
        log.info("reinitializing dead cluster %d from %d", dk, largest)
        reinit_dead_cluster(model.prior, int(dk), int(largest), rng)
    return [int(d) for d in dead]


def _responsibilities_np(model: ConvVade, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        gamma = responsibilities(torch.from_numpy(mu).float(), model.prior).numpy()
    return gamma, gamma.argmax(axis=1)


def train(model: ConvVade, data, weights: LossWeights | None = None,
          opts: TrainOptions | None = None, seed: int = 0,
          history_path=None) -> tuple[list[dict], TrainState]:
    """Main training loop over the augmented train split.

    Per epoch: seeded shuffle, minibatch steps of the seven-term objective
    with per-group gradient clipping; GMM parameters frozen (no gradients)
    for the first `freeze_epochs` epochs; dead-cluster reinitialization
    afterwards; composite-score evaluation, plateau LR rule, best-checkpoint
    tracking and early stopping.
    """
    weights = weights or LossWeights()
    opts = opts or TrainOptions()
    k = model.cfg.K
    opt_encdec = torch.optim.Adam(model.encdec_parameters(), lr=opts.lr_encdec,
                                  weight_decay=opts.weight_decay)
    opt_gmm = torch.optim.Adam(model.prior.parameters(), lr=opts.lr_gmm)
    plateau = PlateauScheduler([opt_encdec, opt_gmm], opts.plateau_factor,
                               opts.plateau_patience, opts.min_lr)
    rng = np.random.default_rng(seed)
    state = TrainState()
    history: list[dict] = []
    mask = torch.from_numpy(np.asarray(data.head_mask))
    train_images = data.train.images

    writer = open(history_path, "a", encoding="utf-8") if history_path else None
    try:
        for epoch in range(opts.max_epochs):
            state.epoch = epoch
            frozen = epoch < opts.freeze_epochs
            model.prior.requires_grad_(not frozen)
            model.train()
            sums: dict[str, float] = {}
            n_steps = 0
            for idx in _batches(train_images.shape[0], opts.batch_size, rng):
                x = torch.from_numpy(train_images[idx]).float()
                both = torch.cat([x, -x])
                mu_both, logvar_both = model.encode(both)
                b = x.shape[0]
                mu, logvar = mu_both[:b], logvar_both[:b]
                z = model.sample_latent(mu, logvar)
                xhat = model.decode(z)
                gamma = responsibilities(z, model.prior)
                terms = {
                    "recon": loss_recon(xhat, x),
                    "kl": loss_kl(mu, logvar, model.prior, gamma),
                    "entropy": loss_entropy(model.prior),
                    "separation": loss_separation(model.prior, model.decoder, mask),
                    "batch": loss_batch(gamma),
                    "tight": loss_tight(mu, gamma, model.prior),
                    "polarity": polarity_mse(mu, mu_both[b:]),
                }
                total, breakdown = total_loss(terms, epoch, opts.max_epochs,
                                              weights, k)
                opt_encdec.zero_grad()
                opt_gmm.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.encdec_parameters(),
                                               opts.clip_encdec)
                opt_encdec.step()
                if not frozen:
                    torch.nn.utils.clip_grad_norm_(model.prior.parameters(),
                                                   opts.clip_gmm)
                    opt_gmm.step()
                for key, value in breakdown.items():
                    sums[key] = sums.get(key, 0.0) + value
                n_steps += 1

            dead: list[int] = []
            if not frozen:
                dead = _handle_dead_clusters(model, train_images, rng,
                                             opts.dead_threshold)

            sil, gev, _ = latent_scores(model, data)
            comp = composite_score(sil, gev)
            plateau.step(comp)
            lr = opt_encdec.param_groups[0]["lr"]

            row = {key: value / max(n_steps, 1) for key, value in sums.items()}
            row.update(epoch=epoch, silhouette=sil, gev=gev, composite=comp,
                       lr=lr, dead_clusters=dead)
            history.append(row)
            if writer:
                writer.write(json.dumps(row) + "\n")
                writer.flush()
            log.info("epoch %3d  total %.4f  sil %.3f  gev %.3f  comp %.4f",
                     epoch, row.get("total", float("nan")), sil, gev, comp)

            if comp > state.best_composite:
                state.best_composite = comp
                state.best_epoch = epoch
                state.best_checkpoint = {
                    name: tensor.clone()
                    for name, tensor in model.named_checkpoint_tensors().items()}
                state.epochs_since_best = 0
            else:
                state.epochs_since_best += 1
                if state.epochs_since_best >= opts.early_stop_patience:
                    state.stopped_early = True
                    log.info("early stop at epoch %d (best %.4f at epoch %d)",
                             epoch, state.best_composite, state.best_epoch)
                    break
    finally:
        if writer:
            writer.close()
        model.prior.requires_grad_(True)

    if state.best_checkpoint:
        model.load_state_dict(state.best_checkpoint, strict=False)
    model.eval()
    return history, state


def run_training(cfg: ArchConfig, data, weights: LossWeights | None = None,
                 opts: TrainOptions | None = None, seed: int = 0,
                 history_path=None) -> tuple[ConvVade, list[dict], TrainState]:
    """Full per-subject procedure: fresh model, pretraining, bisecting
    K-Means prior initialization, then the main loop."""
    model = ConvVade(cfg, seed=seed)
    pretrain(model, data.train.images, opts, seed=seed + 1)
    unaug = data.train.unaugmented()
    mu, _ = encode_dataset(model, unaug.images)
    prior = init_gmm_bisecting(mu, cfg.K, seed=seed + 2)
    with torch.no_grad():
        model.prior.pi_logits.copy_(prior.pi_logits)
        model.prior.mu_c.copy_(prior.mu_c)
        model.prior.logvar_c.copy_(prior.logvar_c)
    history, state = train(model, data, weights, opts, seed=seed + 3,
                           history_path=history_path)
    return model, history, state
