"""Latent codecs: an identity (pixel-space) codec and a small trainable VAE.

Both expose ``encode``/``decode`` on ``(B, C, H, W)`` tensors so the diffusion
code never needs to know which one it is talking to.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fileio import read_meta, torch_load, torch_save, write_meta

log = logging.getLogger(__name__)


class CodecError(ValueError):
    pass


@dataclass
class CodecConfig:
    mode: str = "learned"
    image_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 8
    hidden: list[int] = field(default_factory=lambda: [32, 64, 64])
    kl_weight: float = 1e-6
    scale: float = 1.0

    def __post_init__(self):
        if self.mode == "identity":
            self.downsample_factor = 1
            self.latent_channels = self.image_channels
        elif self.mode == "learned":
            if self.downsample_factor != 2 ** len(self.hidden):
                raise CodecError(
                    f"{len(self.hidden)} stride-2 stages give factor {2 ** len(self.hidden)}, "
                    f"not {self.downsample_factor}"
                )
        else:
            raise CodecError(f"unknown codec mode {self.mode!r}")
        if self.latent_channels < 1:
            raise CodecError("latent_channels must be >= 1")
        if self.kl_weight < 0:
            raise CodecError("kl_weight must be >= 0")


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x[None], True
    if x.dim() != 4:
        raise CodecError(f"expected (C, H, W) or (B, C, H, W), got {tuple(x.shape)}")
    return x, False


class IdentityCodec:
    """Pixel-space diffusion: latents are the standardized images themselves."""

    def __init__(self, image_channels: int = 3):
        self.config = CodecConfig(mode="identity", image_channels=image_channels)

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    @property
    def downsample_factor(self) -> int:
        return 1

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        x, _ = _batched(img)
        if x.shape[1] != self.config.image_channels:
            raise CodecError(f"expected {self.config.image_channels} channels, got {x.shape[1]}")
        return img

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        x, _ = _batched(z)
        if x.shape[1] != self.latent_channels:
            raise CodecError(f"latent has {x.shape[1]} channels, codec expects {self.latent_channels}")
        return z


class ConvVAE(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        c = config.image_channels
        widths = list(config.hidden)
        enc: list[nn.Module] = [nn.Conv2d(c, widths[0], 3, padding=1), nn.SiLU()]
        prev = widths[0]
        for w in widths:
            enc += [nn.Conv2d(prev, w, 4, stride=2, padding=1), nn.SiLU(), nn.Conv2d(w, w, 3, padding=1), nn.SiLU()]
            prev = w
        enc.append(nn.Conv2d(prev, 2 * config.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(config.latent_channels, prev, 3, padding=1), nn.SiLU()]
        for w in reversed(widths):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(prev, w, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(w, w, 3, padding=1),
                nn.SiLU(),
            ]
            prev = w
        dec.append(nn.Conv2d(prev, c, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def posterior(self, x):
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)


def kl_to_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(N(mean, exp(logvar)) || N(0, I)), averaged over latent elements."""
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)
    return kl.flatten(1).mean(dim=1)


class LearnedCodec:
    def __init__(self, config: CodecConfig, net: ConvVAE | None = None):
        if config.mode != "learned":
            raise CodecError("LearnedCodec needs mode='learned'")
        self.config = config
        self.net = net if net is not None else ConvVAE(config)
        self.net.eval()
        self.seed: int | None = None
        self.steps = 0

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    @property
    def downsample_factor(self) -> int:
        return self.config.downsample_factor

    def _check_dims(self, x: torch.Tensor) -> None:
        f = self.downsample_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise CodecError(f"image size {tuple(x.shape[-2:])} is not divisible by {f}")
        if x.shape[1] != self.config.image_channels:
            raise CodecError(f"expected {self.config.image_channels} channels, got {x.shape[1]}")

    @torch.no_grad()
    def encode(self, img: torch.Tensor) -> torch.Tensor:
        x, squeeze = _batched(img)
        self._check_dims(x)
        mean, _ = self.net.posterior(x)
        z = mean * self.config.scale
        return z[0] if squeeze else z

    @torch.no_grad()
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        x, squeeze = _batched(z)
        if x.shape[1] != self.latent_channels:
            raise CodecError(f"latent has {x.shape[1]} channels, codec expects {self.latent_channels}")
        out = self.net.decoder(x / self.config.scale).clamp(-1.0, 1.0)
        return out[0] if squeeze else out


def make_codec(config: CodecConfig):
    return IdentityCodec(config.image_channels) if config.mode == "identity" else LearnedCodec(config)


def reconstruction_loss(net: ConvVAE, x: torch.Tensor, kl_weight: float, generator=None):
    """Pixel L2 plus weighted KL; returns (total, l2, kl) batch means."""
    mean, logvar = net.posterior(x)
    noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z = mean + torch.exp(0.5 * logvar) * noise
    recon = net.decoder(z)
    l2 = (recon - x).pow(2).flatten(1).mean(dim=1).mean()
    kl = kl_to_standard_normal(mean, logvar).mean()
    return l2 + kl_weight * kl, l2, kl


def train_codec(
    images: torch.Tensor,
    config: CodecConfig,
    seed: int,
    steps: int = 1000,
    batch_size: int = 16,
    lr: float = 1e-3,
) -> tuple[LearnedCodec, list[float]]:
    """Fit a :class:`LearnedCodec` to standardized images ``(N, C, H, W)``.

    Returns the codec (in eval mode) and the per-step total loss.
    """
    if images.shape[0] == 0:
        raise CodecError("cannot train a codec on an empty dataset")
    torch.manual_seed(seed)
    codec = LearnedCodec(config)
    codec._check_dims(images)
    net = codec.net
    net.train()
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    n = images.shape[0]
    losses: list[float] = []
    for step in range(steps):
        idx = torch.randint(n, (min(batch_size, n),), generator=gen) if n > batch_size else torch.arange(n)
        loss, l2, kl = reconstruction_loss(net, images[idx], config.kl_weight, gen)
        if not math.isfinite(loss.item()):
            raise CodecError(f"non-finite codec loss at step {step} (l2={l2.item()}, kl={kl.item()})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 200 == 0:
            log.info("codec step %d loss %.5f (l2 %.5f kl %.3f)", step, loss.item(), l2.item(), kl.item())
    net.eval()
    codec.seed = seed
    codec.steps = steps
    return codec, losses


def save_codec(codec, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = asdict(codec.config)
    meta.update(seed=getattr(codec, "seed", None), steps=getattr(codec, "steps", 0))
    if isinstance(codec, LearnedCodec):
        torch_save(codec.net.state_dict(), directory / "weights.bin")
    write_meta(directory / "meta.txt", meta)


def load_codec(directory):
    directory = Path(directory)
    meta = read_meta(directory / "meta.txt")
    seed, steps = meta.pop("seed", None), meta.pop("steps", 0)
    config = CodecConfig(**meta)
    codec = make_codec(config)
    if isinstance(codec, LearnedCodec):
        codec.net.load_state_dict(torch_load(directory / "weights.bin"))
        codec.net.eval()
        codec.seed, codec.steps = seed, steps
    return codec
