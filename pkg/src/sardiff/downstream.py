"""Downstream harnesses: land-cover classification over five input configurations
and direct-metric cloud removal.

Generators are plain callables ``generator(pairs, seed) -> (N, 3, H, W)``
returning standardized RGB in [-1, 1]; :class:`sardiff.training.DiffusionGenerator`
is one, test oracles are others.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .imagery import RawPair, preprocess_rgb, preprocess_sar, to_unit

log = logging.getLogger(__name__)

Generator = Callable[[Sequence[RawPair], int], np.ndarray]


class DownstreamError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# Input configurations
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class InputConfiguration:
    id: int
    column: str
    sources: tuple[str, ...]  # ordered subset of {"sar", "rgb", "generated"}

    @property
    def channels(self) -> int:
        return 3 * len(self.sources)

    @property
    def uses_generated(self) -> bool:
        return "generated" in self.sources


CONFIGURATIONS = {
    1: InputConfiguration(1, "S1", ("sar",)),
    2: InputConfiguration(2, "S2", ("rgb",)),
    3: InputConfiguration(3, "GenS2", ("generated",)),
    4: InputConfiguration(4, "S1&S2", ("sar", "rgb")),
    5: InputConfiguration(5, "S1&GenS2", ("sar", "generated")),
}
# report column order
COLUMNS = ("S1", "S2", "S1&S2", "GenS2", "S1&GenS2")


def configuration(cid) -> InputConfiguration:
    if isinstance(cid, InputConfiguration):
        return cid
    try:
        return CONFIGURATIONS[int(cid)]
    except (KeyError, ValueError):
        raise DownstreamError(f"unknown input configuration {cid!r}; expected 1-5") from None


def assemble_input(config, pair: RawPair, generated_rgb: np.ndarray | None = None) -> np.ndarray:
    """Standardized ``(C, H, W)`` input; 6-channel layouts are ``[SAR x3 | RGB]``.

    ``generated_rgb`` is already standardized and must be given exactly when
    the configuration uses it.
    """
    config = configuration(config)
    if config.uses_generated and generated_rgb is None:
        raise DownstreamError(f"configuration {config.id} ({config.column}) needs generated RGB for {pair.id}")
    if not config.uses_generated and generated_rgb is not None:
        raise DownstreamError(f"configuration {config.id} ({config.column}) does not take generated RGB")
    parts = []
    for src in config.sources:
        if src == "sar":
            parts.append(preprocess_sar(pair.sar))
        elif src == "rgb":
            parts.append(preprocess_rgb(pair.rgb))
        else:
            gen = np.asarray(generated_rgb, dtype=np.float32)
            if gen.shape != pair.rgb.shape:
                raise DownstreamError(f"generated RGB {gen.shape} does not match pair {pair.id} {pair.rgb.shape}")
            parts.append(gen)
    return np.concatenate(parts, axis=0).astype(np.float32)


# --------------------------------------------------------------------------- #
# Classifier
# --------------------------------------------------------------------------- #


@dataclass
class ClassifierSpec:
    class_count: int
    input_channels: int = 3
    epochs: int = 20
    lr: float = 5e-5
    weight_decay: float = 1e-4
    batch_size: int = 10
    seed: int = 0
    arch: str = "resnet50"

    def __post_init__(self):
        if self.class_count < 2:
            raise DownstreamError("a classifier needs at least 2 classes")
        if self.input_channels not in (3, 6):
            raise DownstreamError(f"input_channels must be 3 or 6, got {self.input_channels}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise DownstreamError("epochs, batch_size and lr must be positive; weight_decay non-negative")


def widen_first_conv(model: torch.nn.Module, in_channels: int) -> torch.nn.Module:
    """Give ``model.conv1`` ``in_channels`` inputs by tiling the 3-channel kernel.

    Each copy is scaled so that an input whose halves are equal produces the
    original activations.
    """
    old = model.conv1
    if in_channels == old.in_channels:
        return model
    if in_channels % old.in_channels:
        raise DownstreamError(f"cannot widen {old.in_channels} input channels to {in_channels}")
    reps = in_channels // old.in_channels
    new = torch.nn.Conv2d(
        in_channels, old.out_channels, old.kernel_size, old.stride, old.padding, bias=old.bias is not None
    )
    with torch.no_grad():
        new.weight.copy_(old.weight.repeat(1, reps, 1, 1) / reps)
        if old.bias is not None:
            new.bias.copy_(old.bias)
    model.conv1 = new
    return model


class _BasicBlock(torch.nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = torch.nn.BatchNorm2d(cout)
        self.conv2 = torch.nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = torch.nn.BatchNorm2d(cout)
        self.shortcut = torch.nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = torch.nn.Sequential(
                torch.nn.Conv2d(cin, cout, 1, stride, bias=False), torch.nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(h)) + self.shortcut(x))


class SmallResNet(torch.nn.Module):
    """Three-stage residual classifier for small tiles (16/32/64 channels)."""

    def __init__(self, num_classes: int, widths=(16, 32, 64)):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(3, widths[0], 3, 1, 1, bias=False)
        self.bn1 = torch.nn.BatchNorm2d(widths[0])
        blocks, cin = [], widths[0]
        for i, w in enumerate(widths):
            blocks.append(_BasicBlock(cin, w, 1 if i == 0 else 2))
            cin = w
        self.layers = torch.nn.Sequential(*blocks)
        self.fc = torch.nn.Linear(cin, num_classes)

    def forward(self, x):
        h = self.layers(F.relu(self.bn1(self.conv1(x))))
        return self.fc(h.mean(dim=(2, 3)))


def build_classifier(spec: ClassifierSpec) -> torch.nn.Module:
    """``small-resnet`` or any torchvision ResNet name, randomly initialized from ``spec.seed``."""
    torch.manual_seed(spec.seed)
    if spec.arch == "small-resnet":
        model = SmallResNet(spec.class_count)
    else:
        import torchvision

        if not spec.arch.startswith("resnet") or not hasattr(torchvision.models, spec.arch):
            raise DownstreamError(f"unknown classifier architecture {spec.arch!r}")
        model = getattr(torchvision.models, spec.arch)(weights=None, num_classes=spec.class_count)
    return widen_first_conv(model, spec.input_channels)


@dataclass
class TrainedClassifier:
    model: torch.nn.Module
    spec: ClassifierSpec
    history: list[dict] = field(default_factory=list)

    @torch.no_grad()
    def predict(self, inputs: np.ndarray, chunk: int = 100) -> np.ndarray:
        self.model.eval()
        x = torch.as_tensor(np.asarray(inputs, dtype=np.float32))
        out = [self.model(x[i : i + chunk]).argmax(1) for i in range(0, x.shape[0], chunk)]
        return torch.cat(out).numpy()


def train_classifier(
    inputs: np.ndarray,
    labels,
    spec: ClassifierSpec,
    eval_inputs: np.ndarray | None = None,
    eval_labels=None,
) -> TrainedClassifier:
    """AdamW on cross-entropy; logs train (and eval) accuracy after every epoch."""
    x = torch.as_tensor(np.asarray(inputs, dtype=np.float32))
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if x.ndim != 4 or x.shape[0] != y.shape[0]:
        raise DownstreamError(f"inputs {tuple(x.shape)} do not match {y.shape[0]} labels")
    if x.shape[1] != spec.input_channels:
        raise DownstreamError(f"inputs have {x.shape[1]} channels, classifier expects {spec.input_channels}")
    if torch.unique(y).numel() < 2:
        raise DownstreamError("training set contains a single class")
    if int(y.min()) < 0 or int(y.max()) >= spec.class_count:
        raise DownstreamError(f"labels outside [0, {spec.class_count})")

    model = build_classifier(spec)
    opt = torch.optim.AdamW(model.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    gen = torch.Generator().manual_seed(spec.seed)
    clf = TrainedClassifier(model, spec)
    n = x.shape[0]
    for epoch in range(1, spec.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, spec.batch_size):
            idx = perm[i : i + spec.batch_size]
            if idx.numel() < 2:
                # batch norm cannot train on a single item
                continue
            loss = F.cross_entropy(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise DownstreamError(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        entry = {"epoch": epoch, "train_accuracy": metrics.accuracy(clf.predict(x.numpy()), y.numpy())}
        if eval_inputs is not None:
            entry["eval_accuracy"] = metrics.accuracy(clf.predict(eval_inputs), np.asarray(eval_labels))
        clf.history.append(entry)
        log.info("classifier epoch %d %s", epoch, entry)
    return clf


# --------------------------------------------------------------------------- #
# Classification experiment
# --------------------------------------------------------------------------- #


def _labels(pairs: Sequence[RawPair]) -> np.ndarray:
    if any(p.class_label is None for p in pairs):
        raise DownstreamError("classification needs a class label on every pair")
    return np.array([p.class_label for p in pairs], dtype=np.int64)


def _stack(config, pairs, generated=None) -> np.ndarray:
    if generated is None:
        return np.stack([assemble_input(config, p) for p in pairs])
    return np.stack([assemble_input(config, p, g) for p, g in zip(pairs, generated)])


@dataclass
class Cell:
    runs: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.runs))

    @property
    def std(self) -> float:
        # population std so a single repeat reads 0.00
        return float(np.std(self.runs))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "runs": list(self.runs)}


@dataclass
class ClassificationReport:
    rows: dict[str, dict[str, Cell]]  # setup -> column -> cell
    repeats: int
    class_count: int
    classifier: dict
    seeds: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "columns": list(COLUMNS),
            "rows": [
                {"setup": setup, "cells": {c: (cells[c].to_dict() if c in cells else None) for c in COLUMNS}}
                for setup, cells in self.rows.items()
            ],
            "repeats": self.repeats,
            "class_count": self.class_count,
            "classifier": self.classifier,
            "seeds": self.seeds,
            "provenance": self.provenance,
        }

    def render(self) -> str:
        width = max([len("Setup")] + [len(s) for s in self.rows])
        head = "Setup".ljust(width) + "".join(f"  {c:>12}" for c in COLUMNS)
        lines = [head, "-" * len(head)]
        for setup, cells in self.rows.items():
            vals = [f"{cells[c].mean:.2f} ± {cells[c].std:.2f}" if c in cells else "-" for c in COLUMNS]
            lines.append(setup.ljust(width) + "".join(f"  {v:>12}" for v in vals))
        return "\n".join(lines) + "\n"


BASELINE = "baseline"


def run_classification_experiment(
    train_pairs: Sequence[RawPair],
    eval_pairs: Sequence[RawPair],
    generators: dict[str, Generator] | None = None,
    configs: Sequence[int] = (1, 2, 3, 4, 5),
    repeats: int = 3,
    spec: ClassifierSpec | None = None,
    seed: int = 0,
    vary_classifier_seed: bool = False,
    shuffle_labels: bool = False,
) -> ClassificationReport:
    """Mean and std of eval accuracy per (setup, configuration) over ``repeats`` runs.

    Repeat ``r`` generates with per-item seeds ``seed + r * N + i`` over the
    concatenated train+eval pairs (``N`` items), so generation differs
    between repeats. The classifier seed stays at ``spec.seed`` unless
    ``vary_classifier_seed`` is set, which keeps real-data configurations
    bit-identical across repeats.

    ``shuffle_labels`` is the chance-level control: repeat ``r`` permutes the
    labels of all pairs (train and eval together) with seed ``seed + r``, so
    no image keeps its own label.
    """
    if repeats < 1:
        raise DownstreamError("repeats must be >= 1")
    if not train_pairs or not eval_pairs:
        raise DownstreamError("empty train or eval split")
    configs = [configuration(c) for c in configs]
    generators = dict(generators or {})
    if any(c.uses_generated for c in configs) and not generators:
        raise DownstreamError("configurations 3 and 5 need at least one generator")
    y_train, y_eval = _labels(train_pairs), _labels(eval_pairs)
    class_count = spec.class_count if spec else int(max(y_train.max(), y_eval.max())) + 1
    base_spec = spec or ClassifierSpec(class_count=class_count)

    def labels_for(r):
        if not shuffle_labels:
            return y_train, y_eval
        y = np.random.default_rng(seed + r).permutation(np.concatenate([y_train, y_eval]))
        return y[: len(y_train)], y[len(y_train) :]

    def fit_and_score(cfg, x_tr, x_ev, r):
        s = ClassifierSpec(**{**asdict(base_spec), "input_channels": cfg.channels})
        if vary_classifier_seed:
            s.seed = base_spec.seed + r
        y_tr, y_ev = labels_for(r)
        clf = train_classifier(x_tr, y_tr, s)
        return metrics.accuracy(clf.predict(x_ev), y_ev)

    rows: dict[str, dict[str, Cell]] = {}
    real = [c for c in configs if not c.uses_generated]
    if real:
        rows[BASELINE] = {}
        for cfg in real:
            x_tr, x_ev = _stack(cfg, train_pairs), _stack(cfg, eval_pairs)
            rows[BASELINE][cfg.column] = Cell([fit_and_score(cfg, x_tr, x_ev, r) for r in range(repeats)])
    synthetic = [c for c in configs if c.uses_generated]
    all_pairs = list(train_pairs) + list(eval_pairs)
    n, n_train = len(all_pairs), len(train_pairs)
    gen_ids = {}
    for name, gen in generators.items():
        if not synthetic:
            break
        gen_ids[name] = getattr(gen, "id", name)
        cells = {c.column: Cell([]) for c in synthetic}
        for r in range(repeats):
            generated = np.asarray(gen(all_pairs, seed + r * n), dtype=np.float32)
            if generated.shape[0] != n:
                raise DownstreamError(f"generator {name} returned {generated.shape[0]} images for {n} pairs")
            g_tr, g_ev = generated[:n_train], generated[n_train:]
            for cfg in synthetic:
                x_tr, x_ev = _stack(cfg, train_pairs, g_tr), _stack(cfg, eval_pairs, g_ev)
                cells[cfg.column].runs.append(fit_and_score(cfg, x_tr, x_ev, r))
        rows[name] = cells
    return ClassificationReport(
        rows=rows,
        repeats=repeats,
        class_count=class_count,
        classifier=asdict(base_spec),
        seeds={
            "base": seed,
            "generation": [seed + r * n for r in range(repeats)],
            "classifier": [base_spec.seed + (r if vary_classifier_seed else 0) for r in range(repeats)],
            "shuffle_labels": shuffle_labels,
            "label_permutation": [seed + r for r in range(repeats)] if shuffle_labels else None,
        },
        provenance={"generators": gen_ids, "train_ids": [p.id for p in train_pairs], "eval_ids": [p.id for p in eval_pairs]},
    )


# --------------------------------------------------------------------------- #
# Cloud removal
# --------------------------------------------------------------------------- #


def _image_metrics(pred_unit: np.ndarray, ref_unit: np.ndarray, config: metrics.MetricConfig) -> dict:
    return {
        "MAE": metrics.mae(pred_unit, ref_unit),
        "PSNR": metrics.psnr(pred_unit, ref_unit, config.data_range),
        "SSIM": metrics.ssim(pred_unit, ref_unit, config),
    }


def _means(items: list[dict]) -> dict:
    # a single infinite PSNR makes the mean infinite; it stays the sentinel
    return {k: float(np.mean([it[k] for it in items])) for k in ("MAE", "PSNR", "SSIM")}


@dataclass
class CloudRemovalReport:
    n: int
    generator: str
    seed: int
    means: dict
    cloudy_baseline: dict
    per_item: list[dict]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "generator": self.generator,
            "seed": self.seed,
            "MAE": self.means["MAE"],
            "PSNR": self.means["PSNR"],
            "SSIM": self.means["SSIM"],
            "cloudy_baseline": self.cloudy_baseline,
            "per_item": self.per_item,
        }

    def render(self) -> str:
        def fmt(v, digits):
            return "inf" if math.isinf(v) else f"{v:.{digits}f}"

        head = f"{'Method':<24}  {'MAE':>8}  {'PSNR':>8}  {'SSIM':>8}"
        lines = [head, "-" * len(head)]
        for name, m in (("cloudy input", self.cloudy_baseline), (self.generator, self.means)):
            lines.append(f"{name:<24}  {fmt(m['MAE'], 3):>8}  {fmt(m['PSNR'], 2):>8}  {fmt(m['SSIM'], 3):>8}")
        return "\n".join(lines) + f"\n(n={self.n}, seed={self.seed})\n"


def run_cloud_removal_eval(
    pairs: Sequence[RawPair],
    generator: Generator,
    seed: int = 0,
    config: metrics.MetricConfig = metrics.MetricConfig(),
    generator_id: str | None = None,
) -> CloudRemovalReport:
    """Translate each pair's SAR and score it against the clean RGB in [0, 1].

    The cloudy image never reaches the generator; it is only scored directly
    against the clean image as a reference row.
    """
    if not pairs:
        raise DownstreamError("cloud-removal evaluation needs at least one triplet")
    missing = [p.id for p in pairs if p.cloudy_rgb is None]
    if missing:
        raise DownstreamError(f"pairs without a cloudy image: {missing[:5]}")
    generated = np.asarray(generator(pairs, seed), dtype=np.float64)
    if generated.shape[0] != len(pairs):
        raise DownstreamError(f"generator returned {generated.shape[0]} images for {len(pairs)} pairs")
    per_item, cloudy_items = [], []
    for p, g in zip(pairs, generated):
        clean = to_unit(preprocess_rgb(p.rgb, np.float64))
        cloudy = to_unit(preprocess_rgb(p.cloudy_rgb, np.float64))
        per_item.append({"id": p.id, **_image_metrics(to_unit(g), clean, config)})
        cloudy_items.append(_image_metrics(cloudy, clean, config))
    return CloudRemovalReport(
        n=len(pairs),
        generator=generator_id or getattr(generator, "id", getattr(generator, "__name__", "generator")),
        seed=seed,
        means=_means(per_item),
        cloudy_baseline=_means(cloudy_items),
        per_item=per_item,
    )
