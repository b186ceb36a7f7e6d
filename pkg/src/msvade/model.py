"""Conv-VaDE: convolutional encoder/decoder with a Gaussian-mixture latent
prior, polarity-invariant objective, and the annealing schedules.

The seven loss components and their weights:

    total = recon + beta * kl
          + ramp * (lambda_e * entropy + lambda_s * separation
                    + lambda_b * batch + lambda_t * tight
                    + lambda_pol * polarity)

where beta follows a cyclical annealing schedule and ramp gates the
auxiliary terms at the start of training.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .nn import (adaptive_avg_pool2d, batch_norm2d, dropout, kaiming_uniform_,
                 leaky_relu, load_checkpoint, save_checkpoint, uniform_bias_)

log = logging.getLogger(__name__)

EPS = 1e-12
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0

K_RANGE = (3, 20)
DZ_CHOICES = (16, 32, 64)
DEPTH_CHOICES = (2, 3, 4)
NDF_CHOICES = (32, 64, 128)


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN or Inf; the message names the term."""


@dataclass(frozen=True)
class ArchConfig:
    """One point of the architecture sweep grid."""

    K: int
    d_z: int = 16
    depth: int = 4
    ndf: int = 32
    alpha: float = 0.2
    p_drop: float = 0.2
    grid: int = 40

    def __post_init__(self):
        if not K_RANGE[0] <= self.K <= K_RANGE[1]:
            raise ValueError(f"K must be in [{K_RANGE[0]}, {K_RANGE[1]}]")
        if self.d_z not in DZ_CHOICES:
            raise ValueError(f"d_z must be one of {DZ_CHOICES}")
        if self.depth not in DEPTH_CHOICES:
            raise ValueError(f"depth must be one of {DEPTH_CHOICES}")
        if self.ndf not in NDF_CHOICES:
            raise ValueError(f"ndf must be one of {NDF_CHOICES}")

    @property
    def d_x(self) -> int:
        return self.grid * self.grid

    def spatial_trace(self) -> list[int]:
        """Per-stage spatial sizes of the encoder (4x4 kernel, stride 2,
        padding 1), starting at the input size."""
        trace = [self.grid]
        for _ in range(self.depth):
            trace.append((trace[-1] - 2) // 2 + 1)
        return trace

    def channel_plan(self) -> list[int]:
        return [self.ndf * 2 ** i for i in range(self.depth)]


@dataclass
class LossWeights:
    """Fixed weights of the auxiliary terms and the annealing constants."""

    lambda_s: float = 50.0
    lambda_b: float = 5.0
    lambda_t: float = 0.2
    lambda_pol: float = 0.1
    beta_max: float = 0.1
    cycles: int = 4

    def __post_init__(self):
        for name in ("lambda_s", "lambda_b", "lambda_t", "lambda_pol", "beta_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")

    def lambda_e(self, K: int) -> float:
        return 0.3 / math.log(K)


def save_config(path, cfg: ArchConfig, weights: LossWeights | None = None) -> None:
    weights = weights or LossWeights()
    doc = {"K": cfg.K, "dz": cfg.d_z, "depth": cfg.depth, "ndf": cfg.ndf,
           "beta_max": weights.beta_max, "cycles": weights.cycles,
           "lambda_s": weights.lambda_s, "lambda_b": weights.lambda_b,
           "lambda_t": weights.lambda_t, "lambda_pol": weights.lambda_pol}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_config(path) -> tuple[ArchConfig, LossWeights]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = ArchConfig(K=int(doc["K"]), d_z=int(doc.get("dz", 16)),
                     depth=int(doc.get("depth", 4)), ndf=int(doc.get("ndf", 32)))
    weights = LossWeights(
        lambda_s=float(doc.get("lambda_s", 50.0)),
        lambda_b=float(doc.get("lambda_b", 5.0)),
        lambda_t=float(doc.get("lambda_t", 0.2)),
        lambda_pol=float(doc.get("lambda_pol", 0.1)),
        beta_max=float(doc.get("beta_max", 0.1)),
        cycles=int(doc.get("cycles", 4)))
    return cfg, weights


class _ConvStage(nn.Module):
    """Stride-2 4x4 convolution + batch norm + leaky rectifier + dropout."""

    def __init__(self, cin: int, cout: int, cfg: ArchConfig,
                 generator: torch.Generator):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, stride=2, padding=1)
        fan_in = cin * 16
        kaiming_uniform_(self.conv.weight, fan_in, cfg.alpha, generator)
        uniform_bias_(self.conv.bias, fan_in, generator)
        self.bn = nn.BatchNorm2d(cout)
        self.alpha = cfg.alpha
        self.p_drop = cfg.p_drop

    def forward(self, x, generator=None):
        x = self.bn(self.conv(x))
        x = leaky_relu(x, self.alpha)
        return dropout(x, self.p_drop, self.training, generator)


class _DeconvStage(nn.Module):
    """Stride-2 4x4 transposed convolution, optionally bare (final layer)."""

    def __init__(self, cin: int, cout: int, output_padding: int, final: bool,
                 cfg: ArchConfig, generator: torch.Generator):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1,
                                         output_padding=output_padding)
        fan_in = cin * 16
        kaiming_uniform_(self.deconv.weight, fan_in, cfg.alpha, generator)
        uniform_bias_(self.deconv.bias, fan_in, generator)
        self.final = final
        if not final:
            self.bn = nn.BatchNorm2d(cout)
        self.alpha = cfg.alpha
        self.p_drop = cfg.p_drop

    def forward(self, x, generator=None):
        x = self.deconv(x)
        if self.final:
            return x
        x = leaky_relu(self.bn(x), self.alpha)
        return dropout(x, self.p_drop, self.training, generator)


class Encoder(nn.Module):
    """Conv stack -> adaptive average pool -> (mu, logvar) heads."""

    def __init__(self, cfg: ArchConfig, generator: torch.Generator):
        super().__init__()
        plan = cfg.channel_plan()
        chans = [1] + plan
        self.stages = nn.ModuleList(
            [_ConvStage(chans[i], chans[i + 1], cfg, generator)
             for i in range(cfg.depth)])
        c_last = plan[-1]
        self.head_mu = nn.Linear(c_last, cfg.d_z)
        self.head_logvar = nn.Linear(c_last, cfg.d_z)
        for head in (self.head_mu, self.head_logvar):
            kaiming_uniform_(head.weight, c_last, cfg.alpha, generator)
            uniform_bias_(head.bias, c_last, generator)

    def forward(self, x, generator=None):
        for stage in self.stages:
            x = stage(x, generator)
        pooled = adaptive_avg_pool2d(x).flatten(1)
        mu = self.head_mu(pooled)
        logvar = self.head_logvar(pooled).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


class Decoder(nn.Module):
    """Affine seed expansion, then transposed-conv stages mirroring the
    encoder; the final layer is linear (no squashing)."""

    def __init__(self, cfg: ArchConfig, generator: torch.Generator):
        super().__init__()
        trace = cfg.spatial_trace()
        plan = cfg.channel_plan()
        self.seed_channels = plan[-1]
        self.seed_size = trace[-1]
        self.fc = nn.Linear(cfg.d_z, self.seed_channels * self.seed_size ** 2)
        kaiming_uniform_(self.fc.weight, cfg.d_z, cfg.alpha, generator)
        uniform_bias_(self.fc.bias, cfg.d_z, generator)

        chans = [1] + plan          # encoder channel sequence
        stages = []
        for i in range(cfg.depth):
            cin = chans[cfg.depth - i]
            cout = chans[cfg.depth - i - 1]
            target = trace[cfg.depth - i - 1]
            source = trace[cfg.depth - i]
            out_pad = target - 2 * source
            stages.append(_DeconvStage(cin, cout, out_pad,
                                       final=(i == cfg.depth - 1),
                                       cfg=cfg, generator=generator))
        self.stages = nn.ModuleList(stages)

    def forward(self, z, generator=None):
        x = self.fc(z).view(-1, self.seed_channels, self.seed_size, self.seed_size)
        for stage in self.stages:
            x = stage(x, generator)
        return x


class GmmPrior(nn.Module):
    """Mixture weights (as unconstrained logits) and diagonal Gaussians."""

    def __init__(self, K: int, d_z: int, generator: torch.Generator | None = None):
        super().__init__()
        self.K = K
        self.d_z = d_z
        self.pi_logits = nn.Parameter(torch.zeros(K))
        mu = torch.empty(K, d_z)
        if generator is not None:
            with torch.no_grad():
                mu.normal_(0.0, 0.1, generator=generator)
        else:
            mu.zero_()
        self.mu_c = nn.Parameter(mu)
        self.logvar_c = nn.Parameter(torch.zeros(K, d_z))

    def log_pi(self) -> torch.Tensor:
        return torch.log_softmax(self.pi_logits, dim=0)

    def pi(self) -> torch.Tensor:
        return torch.softmax(self.pi_logits, dim=0)

    def clamped_logvar(self) -> torch.Tensor:
        return self.logvar_c.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def set_components(self, pi, mu, var) -> None:
        """Overwrite the mixture from plain arrays (initialization path)."""
        with torch.no_grad():
            pi_t = torch.as_tensor(pi, dtype=self.pi_logits.dtype)
            self.pi_logits.copy_(torch.log(pi_t / pi_t.sum()))
            self.mu_c.copy_(torch.as_tensor(mu, dtype=self.mu_c.dtype))
            self.logvar_c.copy_(torch.log(
                torch.as_tensor(var, dtype=self.logvar_c.dtype)))

    def log_component_densities(self, z: torch.Tensor) -> torch.Tensor:
        """(B, K) log N(z; mu_k, diag sigma2_k)."""
        logvar = self.clamped_logvar()
        diff2 = (z[:, None, :] - self.mu_c[None]) ** 2
        return -0.5 * (math.log(2 * math.pi) + logvar[None]
                       + diff2 / torch.exp(logvar)[None]).sum(dim=2)


def responsibilities(z: torch.Tensor, prior: GmmPrior) -> torch.Tensor:
    """Posterior cluster probabilities gamma (B, K); log-space softmax of
    log pi_k + log density, so rows sum to one."""
    logits = prior.log_pi()[None] + prior.log_component_densities(z)
    return torch.softmax(logits, dim=1)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    noise = torch.randn(mu.shape, generator=generator,
                        dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * noise


# ---------------------------------------------------------------------------
# loss components


def loss_recon(xhat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Polarity-invariant reconstruction: per-sample min of MSE against x
    and against -x, scaled by the input dimensionality."""
    d_x = x[0].numel()
    mse_pos = ((xhat - x) ** 2).flatten(1).mean(dim=1)
    mse_neg = ((xhat + x) ** 2).flatten(1).mean(dim=1)
    return (torch.minimum(mse_pos, mse_neg) * d_x).mean()


def loss_kl(mu: torch.Tensor, logvar: torch.Tensor, prior: GmmPrior,
            gamma: torch.Tensor) -> torch.Tensor:
    """Mixture ELBO KL: sum_k gamma_k KL(q(z|x) || p(z|k)) + KL(gamma || pi)."""
    plogvar = prior.clamped_logvar()[None]          # (1, K, d)
    pvar = torch.exp(plogvar)
    var_phi = torch.exp(logvar)[:, None, :]         # (B, 1, d)
    diff2 = (mu[:, None, :] - prior.mu_c[None]) ** 2
    cross = 0.5 * (plogvar + (var_phi + diff2) / pvar).sum(dim=2)   # (B, K)
    gauss = (gamma * cross).sum(dim=1) - 0.5 * (1.0 + logvar).sum(dim=1)
    cat = (gamma * (torch.log(gamma + EPS) - prior.log_pi()[None])).sum(dim=1)
    return (gauss + cat).mean()


def loss_entropy(prior: GmmPrior) -> torch.Tensor:
    """Negative entropy of the mixture weights; minimal when uniform."""
    pi = prior.pi()
    return (pi * torch.log(pi + EPS)).sum()


def loss_separation(prior: GmmPrior, decoder: Decoder,
                    mask: torch.Tensor) -> torch.Tensor:
    """Mean pairwise |Pearson r| between decoded cluster centres over
    in-mask pixels. Decoding runs in eval mode (deterministic)."""
    if prior.K < 2:
        raise ValueError("separation needs K >= 2")
    was_training = decoder.training
    decoder.eval()
    try:
        maps = decoder(prior.mu_c)
    finally:
        decoder.train(was_training)
    flat = maps[:, 0][:, mask]                       # (K, M)
    centered = flat - flat.mean(dim=1, keepdim=True)
    std = centered.pow(2).mean(dim=1).sqrt()
    if bool((std < 1e-8).any()):
        log.warning("zero-variance decoded centre in separation loss")
    iu, ju = torch.triu_indices(prior.K, prior.K, offset=1)
    cov = (centered[iu] * centered[ju]).mean(dim=1)
    denom = (std[iu] * std[ju]).clamp_min(1e-8)
    corr = torch.where(std[iu] * std[ju] > 1e-8, cov / denom,
                       torch.zeros_like(cov))
    return corr.abs().mean()


def loss_batch(gamma: torch.Tensor) -> torch.Tensor:
    """KL divergence of the batch-mean assignment from uniform usage."""
    if gamma.shape[0] < 2:
        raise ValueError("batch-usage loss needs a batch of >= 2")
    pbar = gamma.mean(dim=0)
    k = pbar.numel()
    return (pbar * torch.log(pbar * k + EPS)).sum()


def loss_tight(mu: torch.Tensor, gamma: torch.Tensor,
               prior: GmmPrior) -> torch.Tensor:
    """Responsibility-weighted squared distance to cluster means, per latent
    dimension."""
    dist2 = ((mu[:, None, :] - prior.mu_c[None]) ** 2).sum(dim=2)
    return (gamma * dist2).sum(dim=1).mean() / prior.d_z


def polarity_mse(mu_x: torch.Tensor, mu_negx: torch.Tensor) -> torch.Tensor:
    return ((mu_x - mu_negx) ** 2).mean()


def loss_polarity(x: torch.Tensor, encoder: Encoder,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """MSE between the latent means of x and -x."""
    mu_pos, _ = encoder(x, generator)
    mu_neg, _ = encoder(-x, generator)
    return polarity_mse(mu_pos, mu_neg)


# ---------------------------------------------------------------------------
# schedules


def beta_schedule(epoch: int, total_epochs: int, weights: LossWeights) -> float:
    """Cyclical annealing: linear rise over the first half of each cycle,
    hold at beta_max for the second half."""
    if total_epochs < weights.cycles:
        raise ValueError("total_epochs must be >= cycles")
    cycle_len = total_epochs / weights.cycles
    phase = (epoch % cycle_len) / cycle_len
    return weights.beta_max * min(1.0, 2.0 * phase)


def aux_ramp(epoch: int) -> float:
    """Auxiliary-loss multiplier: zero for 3 epochs, linear ramp over 10."""
    if epoch < 3:
        return 0.0
    if epoch < 13:
        return (epoch - 3) / 10.0
    return 1.0


def total_loss(terms: dict[str, torch.Tensor], epoch: int, total_epochs: int,
               weights: LossWeights, K: int) -> tuple[torch.Tensor, dict[str, float]]:
    """Combine the seven components with the scheduled beta and ramp.

    `terms` must carry recon, kl, entropy, separation, batch, tight,
    polarity. Returns the total and a breakdown of weighted contributions.
    """
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(f"loss term '{name}' is non-finite")
    beta = beta_schedule(epoch, total_epochs, weights)
    ramp = aux_ramp(epoch)
    lam_e = weights.lambda_e(K)
    contrib = {
        "recon": terms["recon"],
        "kl": beta * terms["kl"],
        "entropy": ramp * lam_e * terms["entropy"],
        "separation": ramp * weights.lambda_s * terms["separation"],
        "batch": ramp * weights.lambda_b * terms["batch"],
        "tight": ramp * weights.lambda_t * terms["tight"],
        "polarity": ramp * weights.lambda_pol * terms["polarity"],
    }
    total = sum(contrib.values())
    if not torch.isfinite(total):
        raise NonFiniteLossError("total loss is non-finite")
    breakdown = {name: float(value) for name, value in contrib.items()}
    breakdown["beta"] = beta
    breakdown["ramp"] = ramp
    breakdown["total"] = float(total)
    return total, breakdown


# ---------------------------------------------------------------------------
# full model


class ConvVade(nn.Module):
    """Encoder, decoder, and GMM prior under one roof, with a seeded
    generator driving dropout and reparameterization."""

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        self.encoder = Encoder(cfg, generator)
        self.decoder = Decoder(cfg, generator)
        self.prior = GmmPrior(cfg.K, cfg.d_z, generator)
        self.generator = generator

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encoder(x, self.generator if self.training else None)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z, self.generator if self.training else None)

    def sample_latent(self, mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
        return reparameterize(mu, logvar, self.generator)

    def encdec_parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()

    def named_checkpoint_tensors(self) -> dict[str, torch.Tensor]:
        return {name: tensor for name, tensor in self.state_dict().items()
                if not name.endswith("num_batches_tracked")}

    def save(self, path) -> None:
        save_checkpoint(path, self.named_checkpoint_tensors())

    def load(self, path) -> None:
        tensors = load_checkpoint(path)
        own = self.named_checkpoint_tensors()
        if set(tensors) != set(own):
            raise ValueError("checkpoint does not match this architecture "
                             "(parameter names differ)")
        for name, tensor in tensors.items():
            if tuple(tensor.shape) != tuple(own[name].shape):
                raise ValueError(
                    f"checkpoint/config mismatch for '{name}': "
                    f"{tuple(tensor.shape)} vs {tuple(own[name].shape)}")
        self.load_state_dict(tensors, strict=False)
