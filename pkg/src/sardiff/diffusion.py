"""Gaussian diffusion with a linear schedule and learned variance.

Timesteps are 1-based: ``t = 1..T``; index ``t - 1`` into the schedule arrays.
``alpha_bar(0) = 1`` by convention so ``t = 0`` means "clean".
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .backbone import BackboneOutput


class DiffusionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if (b <= 0).any() or (b > 1).any():
            raise ValueError("betas must lie in (0, 1]")
        object.__setattr__(self, "betas", b)
        alpha_bar = np.cumprod(1.0 - b)
        prev = np.append(1.0, alpha_bar[:-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            tilde = b * (1.0 - prev) / (1.0 - alpha_bar)
        # undefined at t=1 (0/0); use beta_1 as the conventional value
        tilde[0] = b[0]
        object.__setattr__(self, "alphas", 1.0 - b)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "alpha_bar_prev", prev)
        object.__setattr__(self, "beta_tilde", tilde)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _index(self, t, lo: int = 1) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < lo).any() or (t > self.T).any():
            raise DiffusionError(f"timestep {t.tolist()} outside [{lo}, {self.T}]")
        return t

    def gather(self, arr: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
        """``arr[t - 1]`` broadcast to ``like``'s shape (per-batch ``t`` allowed)."""
        t = self._index(t)
        vals = torch.as_tensor(arr, dtype=torch.float64)[t - 1].to(like.dtype)
        return vals.reshape(vals.shape + (1,) * (like.dim() - vals.dim()))

    def abar(self, t, like: torch.Tensor) -> torch.Tensor:
        """Cumulative retention with ``abar(0) = 1``."""
        t = self._index(t, lo=0)
        table = torch.as_tensor(np.append(1.0, self.alpha_bar), dtype=torch.float64)
        vals = table[t].to(like.dtype)
        return vals.reshape(vals.shape + (1,) * (like.dim() - vals.dim()))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start < beta_end < 1:
        if not (T == 1 and 0 < beta_start < 1 and beta_start == beta_end):
            raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


# --------------------------------------------------------------------------- #
# Forward process and posterior
# --------------------------------------------------------------------------- #


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if x0.shape != eps.shape:
        raise DiffusionError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    ab = sched.gather(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def predict_x0_from_eps(x_t, t, eps_hat, sched: NoiseSchedule, clip: float | None = 1.0):
    ab = sched.gather(sched.alpha_bar, t, x_t)
    x0 = (x_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()
    return x0.clamp(-clip, clip) if clip is not None else x0


def q_posterior(x0, x_t, t, sched: NoiseSchedule):
    """Mean, variance and log-variance of q(x_{t-1} | x_t, x0)."""
    ab = sched.gather(sched.alpha_bar, t, x_t)
    ab_prev = sched.gather(sched.alpha_bar_prev, t, x_t)
    beta = sched.gather(sched.betas, t, x_t)
    alpha = sched.gather(sched.alphas, t, x_t)
    coef_x0 = beta * ab_prev.sqrt() / (1 - ab)
    coef_xt = (1 - ab_prev) * alpha.sqrt() / (1 - ab)
    var = sched.gather(sched.beta_tilde, t, x_t)
    return coef_x0 * x0 + coef_xt * x_t, var, var.log()


def model_log_variance(v: torch.Tensor | None, t, sched: NoiseSchedule, like: torch.Tensor) -> torch.Tensor:
    """Interpolate log-variance between log(beta_tilde_t) (v -> -inf) and log(beta_t) (v -> +inf).

    ``v=None`` means the fixed posterior variance beta_tilde_t.
    """
    min_log = sched.gather(sched.beta_tilde, t, like).log()
    if v is None:
        return min_log.expand_as(like)
    max_log = sched.gather(sched.betas, t, like).log()
    frac = torch.sigmoid(v)
    return frac * max_log + (1 - frac) * min_log


def p_mean_variance(out: BackboneOutput, x_t, t, sched: NoiseSchedule, clip: float | None = 1.0):
    """Reverse-step mean, log-variance and clean estimate from a standard-variant output."""
    x0_hat = predict_x0_from_eps(x_t, t, out.eps, sched, clip)
    mean, _, _ = q_posterior(x0_hat, x_t, t, sched)
    return mean, model_log_variance(out.v, t, sched, x_t), x0_hat


# --------------------------------------------------------------------------- #
# Loss terms
# --------------------------------------------------------------------------- #


def normal_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) in nats."""
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def _std_normal_cdf(x):
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def discretized_gaussian_log_likelihood(x, means, log_scales, bins: int = 256):
    """Log-probability of ``x`` in [-1, 1] under a Gaussian discretized to ``bins`` levels."""
    half = 1.0 / (bins - 1)
    centered = x - means
    inv_std = torch.exp(-log_scales)
    cdf_plus = _std_normal_cdf(inv_std * (centered + half))
    cdf_min = _std_normal_cdf(inv_std * (centered - half))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    log_delta = torch.log((cdf_plus - cdf_min).clamp(min=1e-12))
    return torch.where(
        x < -0.999, log_cdf_plus, torch.where(x > 0.999, log_one_minus_cdf_min, log_delta)
    )


def mean_flat(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).mean(dim=1)


def vlb_terms(x0, x_t, t, out: BackboneOutput, sched: NoiseSchedule) -> torch.Tensor:
    """Per-item VLB term: posterior KL for t > 1, decoder NLL at t = 1 (nats per element)."""
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(x0.shape[0])
    true_mean, _, true_logvar = q_posterior(x0, x_t, t, sched)
    mean, logvar, _ = p_mean_variance(out, x_t, t, sched, clip=None)
    kl = mean_flat(normal_kl(true_mean, true_logvar, mean, logvar))
    nll = -mean_flat(discretized_gaussian_log_likelihood(x0, mean, 0.5 * logvar))
    return torch.where(t == 1, nll, kl)


class Batch(NamedTuple):
    x: torch.Tensor  # RGB latent
    z: torch.Tensor  # SAR latent
    c: torch.Tensor | None = None


class LossTerms(NamedTuple):
    final: torch.Tensor
    mse: torch.Tensor
    vlb: torch.Tensor


def sample_timesteps(n: int, T: int, generator: torch.Generator | None) -> torch.Tensor:
    return torch.randint(1, T + 1, (n,), generator=generator)


def training_loss(
    model,
    batch: Batch,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    vlb_weight: float = 1.0,
    t=None,
    noise=None,
    batch_id: int | None = None,
) -> LossTerms:
    """Hybrid objective ``mse + vlb_weight * vlb``.

    The VLB term sees the predicted noise through ``detach`` so it only trains
    the variance head.
    """
    x0, z = batch.x, batch.z
    n = x0.shape[0]
    if t is None:
        t = sample_timesteps(n, sched.T, generator)
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(n)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, noise, sched)
    out = model(x_t, z, t, batch.c)
    mse = ((out.eps - noise) ** 2).mean()
    frozen = BackboneOutput(eps=out.eps.detach(), v=out.v)
    vlb = vlb_terms(x0, x_t, t, frozen, sched).mean()
    final = mse + vlb_weight * vlb
    if not torch.isfinite(final):
        raise DiffusionError(f"non-finite loss (batch {batch_id}, t={t.tolist()})")
    return LossTerms(final, mse, vlb)


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #


def _eval_mode(model):
    if hasattr(model, "eval"):
        model.eval()


class _NoiseSource:
    """One generator for the batch, or one per item when given a seed sequence."""

    def __init__(self, seed, shape, dtype):
        self.shape, self.dtype = tuple(shape), dtype
        if isinstance(seed, (int, np.integer)):
            self.gens = [torch.Generator().manual_seed(int(seed))]
        else:
            seeds = [int(s) for s in seed]
            if len(seeds) != self.shape[0]:
                raise DiffusionError(f"{len(seeds)} seeds for a batch of {self.shape[0]}")
            self.gens = [torch.Generator().manual_seed(s) for s in seeds]

    def draw(self) -> torch.Tensor:
        if len(self.gens) == 1:
            return torch.randn(self.shape, generator=self.gens[0], dtype=self.dtype)
        return torch.stack([torch.randn(self.shape[1:], generator=g, dtype=self.dtype) for g in self.gens])


@torch.no_grad()
def ddpm_sample(
    model,
    z_sar: torch.Tensor,
    c=None,
    sched: NoiseSchedule | None = None,
    seed: int = 0,
    clip: float | None = 1.0,
    trajectory_every: int | None = None,
):
    """Ancestral sampling from x_T ~ N(0, I) down to x_0, conditioned on ``z_sar``.

    ``seed`` is an int for the whole batch or a sequence with one seed per item.

    Returns the final latent, or ``(final, [(t, x_t), ...])`` when
    ``trajectory_every`` is set.
    """
    sched = sched or make_linear_schedule()
    _eval_mode(model)
    noise = _NoiseSource(seed, z_sar.shape, z_sar.dtype)
    x = noise.draw()
    traj = [(sched.T, x.clone())] if trajectory_every else None
    n = z_sar.shape[0]
    for t in range(sched.T, 0, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        mean, logvar, _ = p_mean_variance(model(x, z_sar, tt, c), x, tt, sched, clip)
        if t > 1:
            x = mean + torch.exp(0.5 * logvar) * noise.draw()
        else:
            x = mean
        if not torch.isfinite(x).all():
            raise DiffusionError(f"non-finite sampler state at t={t}")
        if traj is not None and ((t - 1) % trajectory_every == 0):
            traj.append((t - 1, x.clone()))
    return (x, traj) if traj is not None else x
