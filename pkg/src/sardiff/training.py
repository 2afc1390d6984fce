"""Training loop, checkpoint layout and a sampling front-end shared by both variants.

Run directory layout::

    <out>/codec/                  codec checkpoint (meta.txt [+ weights.bin])
    <out>/step_<n>/weights.bin    model state
    <out>/step_<n>/optimizer.bin  optimizer + RNG state (+ EMA weights)
    <out>/step_<n>/meta.txt       config echo, seed, step, loss
    <out>/final/...               same layout, written once at the end
    <out>/loss.tsv                step, l_final, l_mse, l_vlb
"""
from __future__ import annotations

import copy
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import BackboneConfig, DiT
from .codec import load_codec, save_codec
from .cold import cold_loss, improved_cold_sample
from .diffusion import Batch, DiffusionError, NoiseSchedule, ddpm_sample, make_linear_schedule, training_loss
from .fileio import atomic_write_text, config_hash, read_meta, torch_load, torch_save, write_meta
from .imagery import RawPair, preprocess_rgb, preprocess_sar

log = logging.getLogger(__name__)

VARIANTS = ("standard", "standard+class", "cold")
# checkpoint fields that may change between a run and its resumption
_RESUMABLE_KEYS = {"iterations", "checkpoint_interval"}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "standard"
    iterations: int = 250_000
    batch_size: int = 192
    lr: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_interval: int = 10_000
    vlb_weight: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ema_decay: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise TrainingError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for name in ("iterations", "batch_size", "checkpoint_interval", "T"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.vlb_weight < 0:
            raise TrainingError("lr must be positive; weight_decay and vlb_weight non-negative")

    @property
    def conditioned(self) -> bool:
        return self.variant == "standard+class"

    @property
    def backbone_variant(self) -> str:
        return "cold" if self.variant == "cold" else "standard"

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class PairTensors:
    """Standardized images for a list of pairs: rgb and sar are (N, 3, H, W)."""

    ids: list[str]
    rgb: torch.Tensor
    sar: torch.Tensor
    labels: torch.Tensor | None = None

    @classmethod
    def from_pairs(cls, pairs: Sequence[RawPair]) -> "PairTensors":
        if not pairs:
            raise TrainingError("empty dataset")
        rgb = torch.from_numpy(np.stack([preprocess_rgb(p.rgb) for p in pairs]))
        sar = torch.from_numpy(np.stack([preprocess_sar(p.sar) for p in pairs]))
        labels = None
        if all(p.class_label is not None for p in pairs):
            labels = torch.tensor([p.class_label for p in pairs], dtype=torch.long)
        return cls([p.id for p in pairs], rgb, sar, labels)

    def __len__(self) -> int:
        return len(self.ids)


def encode_batched(codec, images: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    return torch.cat([codec.encode(images[i : i + chunk]) for i in range(0, images.shape[0], chunk)])


def decode_batched(codec, latents: torch.Tensor, chunk: int = 64) -> torch.Tensor:
    return torch.cat([codec.decode(latents[i : i + chunk]) for i in range(0, latents.shape[0], chunk)])


@dataclass
class TrainResult:
    model: DiT
    losses: list[tuple[int, float, float, float]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _meta(config: TrainConfig, bconf: BackboneConfig, step: int, loss: float | None) -> dict:
    echo = {"train": asdict(config), "backbone": bconf.to_dict()}
    return {
        "variant": config.variant,
        "step": step,
        "seed": config.seed,
        "loss": loss,
        "config": echo,
        "config_hash": config_hash(echo),
    }


def _write_checkpoint(directory: Path, model, opt, gen, ema, meta: dict) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    torch_save(model.state_dict(), directory / "weights.bin")
    state = {"optimizer": opt.state_dict(), "generator": gen.get_state()}
    if ema is not None:
        state["ema"] = ema.state_dict()
    torch_save(state, directory / "optimizer.bin")
    write_meta(directory / "meta.txt", meta)
    return directory


def checkpoint_steps(run_dir: Path) -> list[int]:
    steps = []
    for p in Path(run_dir).glob("step_*"):
        m = re.fullmatch(r"step_(\d+)", p.name)
        if m and (p / "meta.txt").is_file():
            steps.append(int(m.group(1)))
    return sorted(steps)


def _check_resumable(saved: dict, config: TrainConfig, bconf: BackboneConfig) -> None:
    old_train = {k: v for k, v in saved["train"].items() if k not in _RESUMABLE_KEYS}
    new_train = {k: v for k, v in asdict(config).items() if k not in _RESUMABLE_KEYS}
    diffs = sorted(k for k in set(old_train) | set(new_train) if old_train.get(k) != new_train.get(k))
    if saved["backbone"] != bconf.to_dict():
        diffs.append("backbone")
    if diffs:
        raise TrainingError(f"cannot resume: config differs from checkpoint in {diffs}")


def _read_loss_log(path: Path, upto: int) -> list[tuple[int, float, float, float]]:
    rows = []
    if path.is_file():
        for line in path.read_text(encoding="utf-8").splitlines()[1:]:
            step, lf, lm, lv = line.split("\t")
            if int(step) <= upto:
                rows.append((int(step), float(lf), float(lm), float(lv)))
    return rows


def _format_loss_log(rows) -> str:
    lines = ["step\tl_final\tl_mse\tl_vlb"] + [f"{s}\t{a!r}\t{b!r}\t{c!r}" for s, a, b, c in rows]
    return "\n".join(lines) + "\n"


def train(
    data: PairTensors,
    codec,
    model: DiT,
    config: TrainConfig,
    out_dir,
    resume: bool = False,
) -> TrainResult:
    """Train ``model`` on codec latents of ``data``; checkpoints go to ``out_dir``.

    With ``resume=True`` the latest ``step_<n>`` checkpoint is restored
    (weights, optimizer moments, data/noise RNG) and training continues to
    ``config.iterations``.
    """
    out_dir = Path(out_dir)
    bconf = model.config
    if bconf.variant != config.backbone_variant:
        raise TrainingError(f"backbone variant {bconf.variant!r} does not match training variant {config.variant!r}")
    if config.conditioned:
        if data.labels is None:
            raise TrainingError("variant standard+class needs class labels for every pair")
        if bconf.class_count is None or int(data.labels.max()) >= bconf.class_count:
            raise TrainingError(f"labels exceed backbone class_count {bconf.class_count}")

    sched = config.schedule()
    x_lat = encode_batched(codec, data.rgb)
    z_lat = encode_batched(codec, data.sar)
    if x_lat.shape[-1] != bconf.input_size or x_lat.shape[1] != bconf.latent_channels:
        raise TrainingError(
            f"codec latents {tuple(x_lat.shape[1:])} do not fit backbone "
            f"({bconf.latent_channels}, {bconf.input_size}, {bconf.input_size})"
        )
    labels = data.labels if config.conditioned else None

    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    ema = copy.deepcopy(model).requires_grad_(False) if config.ema_decay else None
    start = 0
    loss_log = out_dir / "loss.tsv"
    rows: list[tuple[int, float, float, float]] = []
    if resume:
        steps = checkpoint_steps(out_dir)
        if not steps:
            raise TrainingError(f"nothing to resume in {out_dir}")
        ckpt = out_dir / f"step_{steps[-1]}"
        meta = read_meta(ckpt / "meta.txt")
        _check_resumable(meta["config"], config, bconf)
        model.load_state_dict(torch_load(ckpt / "weights.bin"))
        state = torch_load(ckpt / "optimizer.bin")
        opt.load_state_dict(state["optimizer"])
        gen.set_state(state["generator"])
        if ema is not None and "ema" in state:
            ema.load_state_dict(state["ema"])
        start = meta["step"]
        rows = _read_loss_log(loss_log, start)
        log.info("resumed from %s", ckpt)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out_dir / "codec")

    result = TrainResult(model, rows)
    n = len(data)
    model.train()
    for step in range(start + 1, config.iterations + 1):
        if config.batch_size <= n:
            idx = torch.randperm(n, generator=gen)[: config.batch_size]
        else:
            idx = torch.randint(n, (config.batch_size,), generator=gen)
        batch = Batch(x_lat[idx], z_lat[idx], labels[idx] if labels is not None else None)
        if config.variant == "cold":
            mse = cold_loss(model, batch, sched, gen, batch_id=step)
            terms = (mse, mse, torch.zeros(()))
        else:
            terms = training_loss(model, batch, sched, gen, config.vlb_weight, batch_id=step)
        opt.zero_grad(set_to_none=True)
        terms[0].backward()
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for pe, pm in zip(ema.parameters(), model.parameters()):
                    pe.lerp_(pm, 1 - config.ema_decay)
        rows.append((step, *(v.item() for v in terms)))
        if step % 100 == 0 or step == 1:
            log.info("step %d loss %.5f", step, rows[-1][1])
        if step % config.checkpoint_interval == 0:
            atomic_write_text(loss_log, _format_loss_log(rows))
            result.checkpoints.append(
                _write_checkpoint(out_dir / f"step_{step}", model, opt, gen, ema, _meta(config, bconf, step, rows[-1][1]))
            )
    model.eval()
    atomic_write_text(loss_log, _format_loss_log(rows))
    last = rows[-1][1] if rows else None
    _write_checkpoint(out_dir / "final", model, opt, gen, ema, _meta(config, bconf, config.iterations, last))
    result.losses = rows
    return result


def windowed_mean(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise ValueError(f"need at least {window} values, got {v.size}")
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


# --------------------------------------------------------------------------- #
# Loading and sampling
# --------------------------------------------------------------------------- #


@dataclass
class LoadedModel:
    model: DiT
    codec: object
    train_config: TrainConfig
    step: int
    checkpoint: Path
    ema: bool = False

    @property
    def id(self) -> str:
        return f"{self.checkpoint.parent.name}/{self.checkpoint.name}@{self.step}" + ("+ema" if self.ema else "")


def load_run(path, use_ema: bool = False) -> LoadedModel:
    """Load a run directory (its ``final`` checkpoint, else the latest step) or one checkpoint dir."""
    path = Path(path)
    if (path / "meta.txt").is_file() and (path / "weights.bin").is_file():
        ckpt, run_dir = path, path.parent
    elif (path / "final" / "meta.txt").is_file():
        ckpt, run_dir = path / "final", path
    else:
        steps = checkpoint_steps(path)
        if not steps:
            raise TrainingError(f"no checkpoint found under {path}")
        ckpt, run_dir = path / f"step_{steps[-1]}", path
    meta = read_meta(ckpt / "meta.txt")
    config = TrainConfig(**meta["config"]["train"])
    model = DiT(BackboneConfig(**meta["config"]["backbone"]))
    state = torch_load(ckpt / "weights.bin")
    if use_ema:
        extra = torch_load(ckpt / "optimizer.bin") if (ckpt / "optimizer.bin").is_file() else {}
        if extra.get("ema") is None:
            raise TrainingError(f"{ckpt} has no EMA weights (train with ema_decay > 0)")
        state = extra["ema"]
    model.load_state_dict(state)
    model.eval()
    return LoadedModel(model, load_codec(run_dir / "codec"), config, meta["step"], ckpt, use_ema)


class DiffusionGenerator:
    """Translate SAR to standardized RGB with a trained model.

    ``generator(pairs, seed)`` returns ``(N, 3, H, W)`` float32 in [-1, 1];
    item ``i`` uses seed ``seed + i`` (standard) so results do not depend on
    batching.
    """

    def __init__(self, loaded: LoadedModel, batch_size: int = 32, clip: float = 1.0):
        self.loaded = loaded
        self.batch_size = batch_size
        self.clip = clip
        self.sched = loaded.train_config.schedule()

    @property
    def id(self) -> str:
        return self.loaded.id

    def latents(self, sar: torch.Tensor, labels, seeds: Sequence[int]) -> torch.Tensor:
        lm = self.loaded
        z = encode_batched(lm.codec, sar)
        if lm.train_config.variant == "cold":
            return improved_cold_sample(lm.model, z, self.sched, labels, self.clip)
        return ddpm_sample(lm.model, z, labels, self.sched, seed=list(seeds), clip=self.clip)

    def __call__(self, pairs: Sequence[RawPair], seed: int = 0) -> np.ndarray:
        lm = self.loaded
        data = PairTensors.from_pairs(pairs)
        if lm.train_config.conditioned and data.labels is None:
            raise DiffusionError("class-conditioned generator needs labeled pairs")
        outs = []
        for i in range(0, len(data), self.batch_size):
            sl = slice(i, i + self.batch_size)
            labels = data.labels[sl] if lm.train_config.conditioned else None
            seeds = range(seed + i, seed + i + data.sar[sl].shape[0])
            outs.append(decode_batched(lm.codec, self.latents(data.sar[sl], labels, seeds)))
        return torch.cat(outs).clamp(-1, 1).numpy().astype(np.float32)
