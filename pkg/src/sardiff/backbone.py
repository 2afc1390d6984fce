"""Diffusion transformer with adaLN-Zero conditioning and SAR-latent concatenation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class BackboneError(ValueError):
    pass


@dataclass
class BackboneConfig:
    latent_channels: int = 4
    input_size: int = 32
    depth: int = 12
    heads: int = 6
    hidden: int = 384
    patch: int = 4
    mlp_ratio: float = 4.0
    class_count: int | None = None
    variant: str = "standard"
    num_timesteps: int = 1000
    frequency_dim: int = 256

    def __post_init__(self):
        if self.hidden % self.heads:
            raise BackboneError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if self.input_size % self.patch:
            raise BackboneError(f"latent size {self.input_size} is not divisible by patch {self.patch}")
        if self.variant not in ("standard", "cold"):
            raise BackboneError(f"unknown variant {self.variant!r}")

    @property
    def in_channels(self) -> int:
        # noisy/blended latent concatenated with the SAR latent
        return 2 * self.latent_channels

    @property
    def out_channels(self) -> int:
        return 2 * self.latent_channels if self.variant == "standard" else self.latent_channels

    @property
    def num_tokens(self) -> int:
        return (self.input_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def dit_s4(**overrides) -> BackboneConfig:
    """DiT-S/4 at 256px through a factor-8 codec: 12 layers, 6 heads, width 384."""
    return BackboneConfig(**{"depth": 12, "heads": 6, "hidden": 384, "patch": 4, **overrides})


def desk_config(**overrides) -> BackboneConfig:
    return BackboneConfig(**{"latent_channels": 3, "depth": 4, "heads": 4, "hidden": 128, "patch": 4, **overrides})


class BackboneOutput(NamedTuple):
    """``eps`` and ``v`` for the standard variant, ``x0`` for the cold variant."""

    eps: torch.Tensor | None = None
    v: torch.Tensor | None = None
    x0: torch.Tensor | None = None


# --------------------------------------------------------------------------- #
# Patch layout helpers
# --------------------------------------------------------------------------- #


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """(B, C, S, S) -> (B, (S/p)^2, p*p*C).

    Tokens are row-major over the patch grid; inside a patch the vector is
    row-major over pixels with the channel index varying fastest.
    """
    b, c, h, w = x.shape
    if h % p or w % p:
        raise BackboneError(f"grid {h}x{w} is not divisible by patch {p}")
    x = x.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 3, 5, 1)  # b, gh, gw, py, px, c
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: torch.Tensor, p: int, c: int) -> torch.Tensor:
    b, n, d = tokens.shape
    g = int(round(math.sqrt(n)))
    if g * g != n or d != p * p * c:
        raise BackboneError(f"cannot unpatchify {n} tokens of width {d} with patch {p}, channels {c}")
    x = tokens.reshape(b, g, g, p, p, c).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, g * p, g * p)


def sincos_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """[sin(t*f_0..f_{h-1}), cos(t*f_0..f_{h-1})] with a geometric frequency ladder."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def sincos_2d_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sin-cos table of shape (grid*grid, dim); half the width per axis."""
    if dim % 4:
        raise BackboneError(f"positional width {dim} must be divisible by 4")
    coords = np.arange(grid, dtype=np.float64)
    gy, gx = np.meshgrid(coords, coords, indexing="ij")

    def axis(pos, d):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([axis(gy, dim // 2), axis(gx, dim // 2)], axis=1)


# --------------------------------------------------------------------------- #
# Modules
# --------------------------------------------------------------------------- #


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, frequency_dim: int = 256):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(nn.Linear(frequency_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        feats = sincos_features(t, self.frequency_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(feats)


class LabelEmbedder(nn.Module):
    """Class table with one extra row (index ``class_count``) for 'no label'."""

    def __init__(self, class_count: int | None, hidden: int):
        super().__init__()
        self.class_count = class_count
        self.null_index = class_count or 0
        self.table = nn.Embedding(self.null_index + 1, hidden)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        return self.table(labels)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class DiTBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        width = int(hidden * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(hidden, width), nn.GELU(approximate="tanh"), nn.Linear(width, hidden))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))

    def forward(self, x, c):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, patch: int, out_channels: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden, patch * patch * out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


class DiT(nn.Module):
    """Denoiser over ``concat(z_noisy, z_sar)`` conditioned on timestep and class.

    ``forward`` returns a :class:`BackboneOutput`; the standard variant splits
    its head into noise and variance-interpolation grids, the cold variant
    predicts the clean latent directly.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        p, h = config.patch, config.hidden
        self.x_embedder = nn.Linear(p * p * config.in_channels, h)
        self.t_embedder = TimestepEmbedder(h, config.frequency_dim)
        self.y_embedder = LabelEmbedder(config.class_count, h)
        grid = config.input_size // p
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_2d_pos_embed(h, grid)).float()[None], persistent=False
        )
        self.blocks = nn.ModuleList(DiTBlock(h, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.final_layer = FinalLayer(h, p, config.out_channels)
        self.initialize_weights()

    def initialize_weights(self):
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

        self.apply(_basic_init)
        nn.init.normal_(self.y_embedder.table.weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        # adaLN-Zero: every residual branch and the output head start at zero
        for block in self.blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.linear.weight)
        nn.init.zeros_(self.final_layer.linear.bias)

    def _labels(self, c, batch: int) -> torch.Tensor:
        emb = self.y_embedder
        if emb.class_count is None or c is None:
            return torch.full((batch,), emb.null_index, dtype=torch.long)
        c = torch.as_tensor(c, dtype=torch.long)
        c = c.reshape(1).expand(batch) if c.dim() == 0 else c
        if c.shape != (batch,):
            raise BackboneError(f"expected {batch} class labels, got shape {tuple(c.shape)}")
        if (c < 0).any() or (c >= emb.class_count).any():
            raise BackboneError(f"class label out of range [0, {emb.class_count}): {c.tolist()}")
        return c

    def _timesteps(self, t, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t)
        t = t.reshape(1).expand(batch) if t.dim() == 0 else t
        if t.shape != (batch,):
            raise BackboneError(f"expected {batch} timesteps, got shape {tuple(t.shape)}")
        if (t < 0).any() or (t > self.config.num_timesteps).any():
            raise BackboneError(f"timestep out of range [0, {self.config.num_timesteps}]: {t.tolist()}")
        return t

    def embed_condition(self, t, c, batch: int) -> torch.Tensor:
        return self.t_embedder(self._timesteps(t, batch)) + self.y_embedder(self._labels(c, batch))

    def trunk(self, tokens: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens, cond)
        return tokens

    def forward(self, z_noisy: torch.Tensor, z_sar: torch.Tensor, t, c=None) -> BackboneOutput:
        cfg = self.config
        if z_noisy.shape != z_sar.shape:
            raise BackboneError(f"noisy latent {tuple(z_noisy.shape)} and SAR latent {tuple(z_sar.shape)} differ")
        x = torch.cat([z_noisy, z_sar], dim=1)
        if x.shape[1] != cfg.in_channels or x.shape[-1] != cfg.input_size or x.shape[-2] != cfg.input_size:
            raise BackboneError(
                f"input {tuple(x.shape)} does not match {cfg.in_channels} channels at {cfg.input_size}px"
            )
        b = x.shape[0]
        tokens = self.x_embedder(patchify(x, cfg.patch)) + self.pos_embed.to(x.dtype)
        cond = self.embed_condition(t, c, b)
        out = self.final_layer(self.trunk(tokens, cond), cond)
        out = unpatchify(out, cfg.patch, cfg.out_channels)
        if cfg.variant == "cold":
            return BackboneOutput(x0=out)
        eps, v = out.chunk(2, dim=1)
        return BackboneOutput(eps=eps, v=v)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
