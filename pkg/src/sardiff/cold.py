"""Cold diffusion: deterministic blending of the RGB latent toward the SAR latent.

The degradation is ``D(x, t) = sqrt(abar_t) * x + sqrt(1 - abar_t) * z`` with
the cumulative ``abar`` of the shared linear schedule, so ``t = 0`` is the
clean image and ``t = T`` is (almost) the SAR latent.
"""
from __future__ import annotations

import torch

from .diffusion import Batch, DiffusionError, NoiseSchedule, sample_timesteps


def degrade(x: torch.Tensor, z: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    if x.shape != z.shape:
        raise DiffusionError(f"x {tuple(x.shape)} and z {tuple(z.shape)} differ in shape")
    ab = sched.abar(t, x)
    return ab.sqrt() * x + (1 - ab).sqrt() * z


def _restore(model, x_t, z, t: int, c, clip):
    tt = torch.full((x_t.shape[0],), t, dtype=torch.long)
    out = model(x_t, z, tt, c)
    x0 = getattr(out, "x0", out)
    return x0.clamp(-clip, clip) if clip is not None else x0


def cold_loss(
    model,
    batch: Batch,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    t=None,
    batch_id: int | None = None,
) -> torch.Tensor:
    """MSE between the restored and the clean latent at a uniformly drawn step."""
    x, z = batch.x, batch.z
    if t is None:
        t = sample_timesteps(x.shape[0], sched.T, generator)
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(x.shape[0])
    out = model(degrade(x, z, t, sched), z, t, batch.c)
    loss = ((getattr(out, "x0", out) - x) ** 2).mean()
    if not torch.isfinite(loss):
        raise DiffusionError(f"non-finite cold loss (batch {batch_id}, t={t.tolist()})")
    return loss


def improved_step(x_t, x0_hat, z, t: int, sched: NoiseSchedule):
    """x_{t-1} = x_t - D(x0_hat, t) + D(x0_hat, t-1)."""
    return x_t - degrade(x0_hat, z, t, sched) + degrade(x0_hat, z, t - 1, sched)


@torch.no_grad()
def naive_cold_sample(model, z: torch.Tensor, sched: NoiseSchedule, c=None, clip: float | None = 1.0):
    """Restore, then re-degrade the estimate to the next level."""
    if hasattr(model, "eval"):
        model.eval()
    x = z.clone()
    for t in range(sched.T, 0, -1):
        x = degrade(_restore(model, x, z, t, c, clip), z, t - 1, sched)
        if not torch.isfinite(x).all():
            raise DiffusionError(f"non-finite cold sampler state at t={t}")
    return x


@torch.no_grad()
def improved_cold_sample(
    model,
    z: torch.Tensor,
    sched: NoiseSchedule,
    c=None,
    clip: float | None = 1.0,
    trajectory_every: int | None = None,
):
    """Start at the SAR latent and undo the blend one step at a time.

    No randomness is consumed. Returns ``x_0`` or ``(x_0, trajectory)``.
    """
    if hasattr(model, "eval"):
        model.eval()
    x = z.clone()
    traj = [(sched.T, x.clone())] if trajectory_every else None
    for t in range(sched.T, 0, -1):
        x = improved_step(x, _restore(model, x, z, t, c, clip), z, t, sched)
        if not torch.isfinite(x).all():
            raise DiffusionError(f"non-finite cold sampler state at t={t}")
        if traj is not None and (t - 1) % trajectory_every == 0:
            traj.append((t - 1, x.clone()))
    return (x, traj) if traj is not None else x
