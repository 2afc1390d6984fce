"""Command-line entry points.

Every subcommand resolves its settings as defaults < ``--preset`` < ``--config``
file < explicit flags, echoes the result to stdout and ``<out>/config.json``,
and writes a JSON report plus an aligned text rendering. Re-running with
``--config <out>/config.json`` reproduces the report byte for byte.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("sardiff")

SCHEMA_VERSION = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

COMMANDS: dict[str, dict] = {
    "make-synthetic": {
        "count": 16,
        "size": 32,
        "region_count": 4,
        "noise_sigma": 0.0,
        "palette": "default",
        "cloud_coverage": 0.0,
    },
    "train-codec": {
        "manifest": "",
        "mode": "learned",
        "latent_channels": 4,
        "downsample_factor": 8,
        "hidden": "32,64,64",
        "kl_weight": 1e-6,
        "scale": 1.0,
        "steps": 1000,
        "batch_size": 16,
        "lr": 1e-3,
        "train_fraction": 0.8,
        "split_seed": 0,
    },
    "train": {
        "manifest": "",
        "variant": "standard",
        "codec": "identity",
        "depth": 12,
        "heads": 6,
        "hidden": 384,
        "patch": 4,
        "class_count": 0,
        "iterations": 250_000,
        "batch_size": 192,
        "lr": 1e-4,
        "weight_decay": 0.0,
        "checkpoint_interval": 10_000,
        "vlb_weight": 1.0,
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "ema_decay": 0.0,
        "train_fraction": 0.8,
        "split_seed": 0,
        "resume": False,
    },
    "sample": {
        "run": "",
        "manifest": "",
        "split": "eval",
        "count": 200,
        "batch_size": 32,
        "clip": 1.0,
        "use_ema": False,
        "grid": True,
        "trajectory_every": 0,
        "train_fraction": 0.8,
        "split_seed": 0,
    },
    "eval-gen": {
        "manifest": "",
        "generated": "",
        "extractor": "random-projection",
        "feature_dim": 64,
        "extractor_seed": 0,
        "features_generated": "",
        "features_reference": "",
    },
    "eval-downstream": {
        "task": "classification",
        "manifest": "",
        "generators": "",
        "configs": "1,2,3,4,5",
        "repeats": 3,
        "epochs": 20,
        "lr": 5e-5,
        "weight_decay": 1e-4,
        "batch_size": 10,
        "classifier_seed": 0,
        "arch": "resnet50",
        "vary_classifier_seed": False,
        "shuffle_labels": False,
        "split": "eval",
        "count": 0,
        "sample_batch_size": 32,
        "use_ema": False,
        "train_fraction": 0.8,
        "split_seed": 0,
    },
}

# keys that live beside the command settings in an echoed config
_META_KEYS = {"command", "seed", "preset", "version"}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# Config resolution
# --------------------------------------------------------------------------- #


def load_preset(name: str) -> dict:
    try:
        text = resources.files("sardiff.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return json.loads(text)


def _check_keys(command: str, settings: dict, source: str) -> None:
    unknown = sorted(set(settings) - set(COMMANDS[command]))
    if unknown:
        raise ConfigError(f"{source}: unknown keys for {command}: {unknown}")


def _coerce(command: str, key: str, value):
    default = COMMANDS[command][key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def resolve_config(command: str, preset: str | None, config_path: str | None, flags: dict, seed: int | None) -> dict:
    settings = dict(COMMANDS[command])
    file_seed = None
    if preset:
        section = load_preset(preset).get(command, {})
        _check_keys(command, section, f"preset {preset}")
        settings.update(section)
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path}: expected a JSON object")
        if command in data and isinstance(data[command], dict):
            data = {**{k: v for k, v in data.items() if k in _META_KEYS}, **data[command]}
        if data.get("command", command) != command:
            raise ConfigError(f"{config_path} was written for {data['command']!r}, not {command!r}")
        file_seed = data.get("seed")
        body = {k: v for k, v in data.items() if k not in _META_KEYS}
        _check_keys(command, body, config_path)
        settings.update(body)
    _check_keys(command, flags, "flags")
    settings.update(flags)
    resolved = {k: _coerce(command, k, v) for k, v in settings.items()}
    final_seed = seed if seed is not None else (file_seed if file_seed is not None else 0)
    if isinstance(final_seed, bool) or not isinstance(final_seed, int):
        raise ConfigError(f"seed must be an integer, got {final_seed!r}")
    return {"command": command, "seed": final_seed, **dict(sorted(resolved.items()))}


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #


def _jsonable(obj):
    """Replace non-finite floats by strings so reports stay strict JSON."""
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(out: Path, config: dict, results: dict, provenance: dict, text: str) -> dict:
    from .fileio import atomic_write_text, config_hash

    report = {
        "schema_version": SCHEMA_VERSION,
        "command": config["command"],
        "config": config,
        "config_hash": config_hash(_jsonable(config)),
        "provenance": provenance,
        "results": results,
    }
    atomic_write_text(out / "report.json", dumps(report))
    atomic_write_text(out / "report.txt", text)
    return report


def _file_hash(path) -> str:
    from .fileio import sha256_hex

    return sha256_hex(Path(path).read_bytes())[:16]


def _need(cfg: dict, key: str) -> str:
    if not cfg[key]:
        raise ConfigError(f"{cfg['command']}: --{key.replace('_', '-')} is required")
    return cfg[key]


def _manifest(cfg: dict):
    from .imagery import load_manifest

    path = _need(cfg, "manifest")
    if not Path(path).is_file():
        raise ConfigError(f"manifest {path} does not exist")
    return load_manifest(path, cfg.get("train_fraction", 0.8), cfg.get("split_seed", 0))


def _split(manifest, name: str):
    if name == "train":
        return manifest.train
    if name == "eval":
        return manifest.eval
    if name == "all":
        return manifest.entries
    raise ConfigError(f"split must be train, eval or all, got {name!r}")


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_make_synthetic(cfg: dict, out: Path) -> dict:
    from .imagery import (
        DEFAULT_PALETTE,
        SAR_AMBIGUOUS_PALETTE,
        SyntheticSceneSpec,
        add_synthetic_clouds,
        generate_synthetic_pair,
        write_manifest,
        write_raster,
    )

    palettes = {"default": DEFAULT_PALETTE, "sar-ambiguous": SAR_AMBIGUOUS_PALETTE}
    if cfg["palette"] not in palettes:
        raise ConfigError(f"palette must be one of {sorted(palettes)}")
    if cfg["count"] < 1:
        raise ConfigError("count must be positive")
    if not 0.0 <= cfg["cloud_coverage"] <= 1.0:
        raise ConfigError("cloud_coverage must lie in [0, 1]")
    out.mkdir(parents=True, exist_ok=True)
    rows, labels = [], []
    for i in range(cfg["count"]):
        spec = SyntheticSceneSpec(
            size=cfg["size"],
            region_count=cfg["region_count"],
            palette=palettes[cfg["palette"]],
            noise_sigma=cfg["noise_sigma"],
            seed=cfg["seed"] + i,
        )
        pair = generate_synthetic_pair(spec, id=f"syn{i:05d}")
        write_raster(out / f"{pair.id}_sar.s16", pair.sar)
        write_raster(out / f"{pair.id}_rgb.u16", pair.rgb)
        cloudy = ""
        if cfg["cloud_coverage"] > 0:
            cloudy = f"{pair.id}_cloudy.u16"
            write_raster(out / cloudy, add_synthetic_clouds(pair.rgb, cfg["seed"] + 1_000_003 + i, cfg["cloud_coverage"]))
        rows.append((pair.id, f"{pair.id}_sar.s16", f"{pair.id}_rgb.u16", pair.class_label, cloudy))
        labels.append(pair.class_label)
    write_manifest(out / "manifest.tsv", rows)
    hist = np.bincount(labels, minlength=len(palettes[cfg["palette"]])).tolist()
    results = {"count": cfg["count"], "label_histogram": hist, "manifest": "manifest.tsv"}
    text = f"wrote {cfg['count']} pairs; label histogram {hist}\n"
    return write_report(out, cfg, results, {"manifest_hash": _file_hash(out / "manifest.tsv")}, text)


def _load_pairs(entries):
    return [e.load() for e in entries]


def cmd_train_codec(cfg: dict, out: Path) -> dict:
    import torch

    from .codec import CodecConfig, save_codec, train_codec
    from .metrics import ssim
    from .training import PairTensors, decode_batched, encode_batched

    manifest = _manifest(cfg)
    try:
        hidden = [int(h) for h in cfg["hidden"].split(",") if h.strip()]
    except ValueError:
        raise ConfigError(f"hidden must be comma-separated integers, got {cfg['hidden']!r}") from None
    config = CodecConfig(
        mode=cfg["mode"],
        latent_channels=cfg["latent_channels"],
        downsample_factor=cfg["downsample_factor"],
        hidden=hidden,
        kl_weight=cfg["kl_weight"],
        scale=cfg["scale"],
    )
    data = PairTensors.from_pairs(_load_pairs(manifest.train))
    images = torch.cat([data.rgb, data.sar])
    torch.manual_seed(cfg["seed"])
    codec, losses = train_codec(images, config, seed=cfg["seed"], steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"])
    out.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out / "codec")
    rec = decode_batched(codec, encode_batched(codec, data.rgb))
    scores = [ssim(r * 0.5 + 0.5, x * 0.5 + 0.5) for r, x in zip(rec.numpy(), data.rgb.numpy())]
    results = {
        "reconstruction_ssim": float(np.mean(scores)),
        "loss_first": losses[0] if losses else None,
        "loss_last": losses[-1] if losses else None,
        "steps": len(losses),
    }
    provenance = {"manifest_hash": _file_hash(cfg["manifest"]), "train_ids": data.ids}
    text = f"codec {config.mode}: reconstruction SSIM {results['reconstruction_ssim']:.4f} on {len(data)} images\n"
    return write_report(out, cfg, results, provenance, text)


def _resolve_codec(spec: str):
    from .codec import IdentityCodec, load_codec

    if spec == "identity":
        return IdentityCodec()
    path = Path(spec)
    if (path / "codec" / "meta.txt").is_file():
        path = path / "codec"
    if not (path / "meta.txt").is_file():
        raise ConfigError(f"codec must be 'identity' or a codec directory, got {spec!r}")
    return load_codec(path)


def cmd_train(cfg: dict, out: Path) -> dict:
    import torch

    from .backbone import BackboneConfig, DiT
    from .training import VARIANTS, PairTensors, TrainConfig, train, windowed_mean

    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg['variant']!r}")
    manifest = _manifest(cfg)
    conditioned = cfg["variant"] == "standard+class"
    if conditioned and not manifest.labeled:
        raise ConfigError("variant standard+class needs a class label on every manifest row")
    data = PairTensors.from_pairs(_load_pairs(manifest.train))
    codec = _resolve_codec(cfg["codec"])
    probe = codec.encode(data.rgb[:1])
    class_count = None
    if conditioned:
        class_count = cfg["class_count"] or int(data.labels.max()) + 1
    bconf = BackboneConfig(
        latent_channels=probe.shape[1],
        input_size=probe.shape[-1],
        depth=cfg["depth"],
        heads=cfg["heads"],
        hidden=cfg["hidden"],
        patch=cfg["patch"],
        class_count=class_count,
        variant="cold" if cfg["variant"] == "cold" else "standard",
        num_timesteps=cfg["T"],
    )
    tconf = TrainConfig(
        variant=cfg["variant"],
        iterations=cfg["iterations"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        checkpoint_interval=cfg["checkpoint_interval"],
        vlb_weight=cfg["vlb_weight"],
        T=cfg["T"],
        beta_start=cfg["beta_start"],
        beta_end=cfg["beta_end"],
        ema_decay=cfg["ema_decay"] or None,
    )
    torch.manual_seed(cfg["seed"])
    model = DiT(bconf)
    res = train(data, codec, model, tconf, out, resume=cfg["resume"])
    losses = [r[1] for r in res.losses]
    window = min(100, len(losses))
    smooth = windowed_mean(losses, window)
    results = {
        "steps": len(losses),
        "loss_first": losses[0],
        "loss_last": losses[-1],
        "smoothed_window": window,
        "smoothed_start": float(smooth[0]),
        "smoothed_end": float(smooth[-1]),
        "checkpoints": [p.name for p in res.checkpoints] + ["final"],
    }
    provenance = {
        "manifest_hash": _file_hash(cfg["manifest"]),
        "train_ids": data.ids,
        "weights_hash": _file_hash(out / "final" / "weights.bin"),
    }
    text = (
        f"{cfg['variant']}: {len(losses)} steps, smoothed loss "
        f"{results['smoothed_start']:.5f} -> {results['smoothed_end']:.5f}\n"
    )
    return write_report(out, cfg, results, provenance, text)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) * 0.5 + 0.5) * 255), 0, 255).astype(np.uint8)


def _tile_rows(rows: list[list[np.ndarray]]) -> np.ndarray:
    """Tile a list of rows of (3, H, W) standardized images into one (3, H*, W*) uint8 grid."""
    return np.concatenate([np.concatenate([_to_u8(t) for t in row], axis=2) for row in rows], axis=1)


def _trajectory_grid(generator, pair, every: int, seed: int) -> np.ndarray:
    import torch

    from .cold import improved_cold_sample
    from .diffusion import ddpm_sample
    from .training import PairTensors, encode_batched

    lm = generator.loaded
    data = PairTensors.from_pairs([pair])
    z = encode_batched(lm.codec, data.sar)
    labels = data.labels if lm.train_config.conditioned else None
    if lm.train_config.variant == "cold":
        _, traj = improved_cold_sample(lm.model, z, generator.sched, labels, generator.clip, trajectory_every=every)
    else:
        _, traj = ddpm_sample(lm.model, z, labels, generator.sched, seed=[seed], clip=generator.clip, trajectory_every=every)
    frames = [lm.codec.decode(x).clamp(-1, 1)[0].numpy() for _, x in traj]
    return _tile_rows([frames])


def cmd_sample(cfg: dict, out: Path) -> dict:
    from .imagery import inverse_preprocess_rgb, preprocess_rgb, preprocess_sar, write_manifest, write_raster
    from .training import DiffusionGenerator, load_run

    run = _need(cfg, "run")
    if not Path(run).exists():
        raise ConfigError(f"run {run} does not exist")
    loaded = load_run(run, use_ema=cfg["use_ema"])
    manifest = _manifest(cfg)
    entries = _split(manifest, cfg["split"])[: cfg["count"]]
    if not entries:
        raise ConfigError("nothing to sample: the selected split is empty")
    pairs = _load_pairs(entries)
    if loaded.train_config.conditioned and any(p.class_label is None for p in pairs):
        raise ConfigError("class-conditioned checkpoint needs labeled pairs")
    size = pairs[0].rgb.shape[-1]
    factor = getattr(getattr(loaded.codec, "config", None), "downsample_factor", 1)
    if size // factor != loaded.model.config.input_size:
        raise ConfigError(f"checkpoint expects {loaded.model.config.input_size * factor}px inputs, manifest has {size}px")
    gen = DiffusionGenerator(loaded, batch_size=cfg["batch_size"], clip=cfg["clip"])
    images = gen(pairs, cfg["seed"])
    (out / "samples").mkdir(parents=True, exist_ok=True)
    rows, hashes = [], {}
    for i, (p, e, img) in enumerate(zip(pairs, entries, images)):
        name = f"samples/{p.id}.u16"
        write_raster(out / name, inverse_preprocess_rgb(img))
        hashes[p.id] = _file_hash(out / name)
        sar_rel = Path(_relpath(e.sar_path, out))
        rows.append((p.id, sar_rel.as_posix(), name, p.class_label))
    write_manifest(out / "samples.tsv", rows)
    if cfg["grid"]:
        grid = _tile_rows([[preprocess_sar(p.sar), img, preprocess_rgb(p.rgb)] for p, img in zip(pairs, images)])
        write_raster(out / "grid.png", grid)
    if cfg["trajectory_every"] > 0:
        write_raster(out / "trajectory.png", _trajectory_grid(gen, pairs[0], cfg["trajectory_every"], cfg["seed"]))
    results = {"count": len(pairs), "ids": [p.id for p in pairs], "seeds": [cfg["seed"] + i for i in range(len(pairs))]}
    provenance = {
        "checkpoint": loaded.id,
        "weights_hash": _file_hash(loaded.checkpoint / "weights.bin"),
        "manifest_hash": _file_hash(cfg["manifest"]),
        "sample_hashes": hashes,
    }
    text = f"sampled {len(pairs)} images from {loaded.id}\n"
    return write_report(out, cfg, results, provenance, text)


def _relpath(path: Path, start: Path) -> str:
    import os

    return os.path.relpath(Path(path).resolve(), Path(start).resolve())


def cmd_eval_gen(cfg: dict, out: Path) -> dict:
    from .imagery import load_manifest, preprocess_rgb, to_unit
    from .metrics import extract_features, fid, make_extractor, ssim

    reference = load_manifest(_need(cfg, "manifest"))
    generated = load_manifest(_need(cfg, "generated"))
    ref_by_id = {e.id: e for e in reference.entries}
    missing = [e.id for e in generated.entries if e.id not in ref_by_id]
    if missing:
        raise ConfigError(f"generated ids not in the reference manifest: {missing[:5]}")
    ids = [e.id for e in generated.entries]
    gen_imgs = np.stack([preprocess_rgb(e.load().rgb) for e in generated.entries]).astype(np.float64)
    ref_imgs = np.stack([preprocess_rgb(ref_by_id[i].load().rgb) for i in ids]).astype(np.float64)
    per_item = {i: ssim(to_unit(g), to_unit(r)) for i, g, r in zip(ids, gen_imgs, ref_imgs)}

    if cfg["extractor"] == "feature-file":
        fg = make_extractor("feature-file", path=_need(cfg, "features_generated"))
        fr = make_extractor("feature-file", path=_need(cfg, "features_reference"))
        extractor_id = f"{fg.id}|{fr.id}"
    else:
        try:
            fg = fr = make_extractor(cfg["extractor"], dim=cfg["feature_dim"], seed=cfg["extractor_seed"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        extractor_id = fg.id
    fid_value = fid(extract_features(gen_imgs, fg), extract_features(ref_imgs, fr)) if len(ids) >= 2 else None
    results = {
        "n": len(ids),
        "SSIM": float(np.mean(list(per_item.values()))),
        "FID": fid_value,
        "extractor": extractor_id,
        "per_item_ssim": per_item,
    }
    provenance = {"manifest_hash": _file_hash(cfg["manifest"]), "generated_hash": _file_hash(cfg["generated"])}
    fid_text = "n/a" if fid_value is None else f"{fid_value:.3f}"
    text = f"{'n':>5}  {'SSIM':>8}  {'FID':>10}\n{len(ids):>5}  {results['SSIM']:>8.3f}  {fid_text:>10}\nextractor: {extractor_id}\n"
    return write_report(out, cfg, results, provenance, text)


def _generators(cfg: dict, builtin: bool = False) -> dict:
    from .imagery import preprocess_rgb
    from .training import DiffusionGenerator, load_run

    gens = {}
    for spec in [s.strip() for s in cfg["generators"].split(",") if s.strip()]:
        if builtin and spec == "oracle":
            gens[spec] = lambda pairs, seed: np.stack([preprocess_rgb(p.rgb, np.float64) for p in pairs])
        elif builtin and spec == "passthrough":
            gens[spec] = lambda pairs, seed: np.stack([preprocess_rgb(p.cloudy_rgb, np.float64) for p in pairs])
        else:
            if not Path(spec).exists():
                raise ConfigError(f"generator run {spec} does not exist")
            gens[Path(spec).name] = DiffusionGenerator(load_run(spec, cfg["use_ema"]), batch_size=cfg["sample_batch_size"])
    return gens


def cmd_eval_downstream(cfg: dict, out: Path) -> dict:
    from .downstream import ClassifierSpec, run_classification_experiment, run_cloud_removal_eval

    manifest = _manifest(cfg)
    provenance = {"manifest_hash": _file_hash(cfg["manifest"])}
    if cfg["task"] == "classification":
        if not manifest.labeled:
            raise ConfigError("classification needs a class label on every manifest row")
        try:
            configs = [int(c) for c in cfg["configs"].split(",") if c.strip()]
        except ValueError:
            raise ConfigError(f"configs must be comma-separated integers, got {cfg['configs']!r}") from None
        train_pairs, eval_pairs = _load_pairs(manifest.train), _load_pairs(manifest.eval)
        class_count = max(p.class_label for p in train_pairs + eval_pairs) + 1
        spec = ClassifierSpec(
            class_count=class_count,
            epochs=cfg["epochs"],
            lr=cfg["lr"],
            weight_decay=cfg["weight_decay"],
            batch_size=cfg["batch_size"],
            seed=cfg["classifier_seed"],
            arch=cfg["arch"],
        )
        gens = _generators(cfg)
        report = run_classification_experiment(
            train_pairs,
            eval_pairs,
            gens,
            configs=configs,
            repeats=cfg["repeats"],
            spec=spec,
            seed=cfg["seed"],
            vary_classifier_seed=cfg["vary_classifier_seed"],
            shuffle_labels=cfg["shuffle_labels"],
        )
        provenance["generators"] = {k: getattr(g, "id", k) for k, g in gens.items()}
        return write_report(out, cfg, report.to_dict(), provenance, report.render())
    if cfg["task"] == "cloud-removal":
        entries = _split(manifest, cfg["split"])
        if cfg["count"]:
            entries = entries[: cfg["count"]]
        pairs = _load_pairs(entries)
        gens = _generators(cfg, builtin=True)
        if not gens:
            raise ConfigError("cloud-removal needs --generators (run directories, oracle or passthrough)")
        reports = {name: run_cloud_removal_eval(pairs, g, seed=cfg["seed"], generator_id=name) for name, g in gens.items()}
        results = {"methods": {name: r.to_dict() for name, r in reports.items()}}
        provenance["generators"] = {k: getattr(g, "id", k) for k, g in gens.items()}
        text = "".join(r.render() for r in reports.values())
        return write_report(out, cfg, results, provenance, text)
    raise ConfigError(f"task must be classification or cloud-removal, got {cfg['task']!r}")


HANDLERS = {
    "make-synthetic": cmd_make_synthetic,
    "train-codec": cmd_train_codec,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval-gen": cmd_eval_gen,
    "eval-downstream": cmd_eval_downstream,
}


# --------------------------------------------------------------------------- #
# Argument parsing
# --------------------------------------------------------------------------- #


def _add_flag(parser: argparse.ArgumentParser, key: str, default) -> None:
    flag = "--" + key.replace("_", "-")
    kw = dict(dest=key, default=argparse.SUPPRESS)
    if isinstance(default, bool):
        parser.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
    elif isinstance(default, int):
        parser.add_argument(flag, type=int, **kw)
    elif isinstance(default, float):
        parser.add_argument(flag, type=float, **kw)
    else:
        parser.add_argument(flag, type=str, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="_config", default=None, help="JSON config file (flags override it)")
    common.add_argument("--preset", dest="_preset", default=None, help="named preset shipped with the package")
    common.add_argument("--seed", dest="_seed", type=int, default=None)
    common.add_argument("--out", dest="_out", default=None, help="output directory")
    common.add_argument("--threads", dest="_threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", dest="_verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sardiff", description="SAR-to-RGB diffusion experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="_command", required=True)
    for name, defaults in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=f"{name} (defaults: {len(defaults)} keys)")
        for key, default in defaults.items():
            _add_flag(p, key, default)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    ns = vars(args)
    logging.basicConfig(
        level=logging.INFO if ns["_verbose"] else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    command = ns["_command"]
    flags = {k: v for k, v in ns.items() if not k.startswith("_")}
    try:
        import torch

        torch.set_num_threads(max(1, ns["_threads"]))
        cfg = resolve_config(command, ns["_preset"], ns["_config"], flags, ns["_seed"])
        out = Path(ns["_out"] or Path("runs") / command)
        sys.stdout.write(dumps(cfg))
        out.mkdir(parents=True, exist_ok=True)
        from .fileio import atomic_write_text

        atomic_write_text(out / "config.json", dumps(cfg))
        HANDLERS[command](cfg, out)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(e)
        if code is None:
            raise
        print(f"sardiff {command}: error: {e}", file=sys.stderr)
        return code
    return 0


def _exit_code(e: Exception) -> int | None:
    from .backbone import BackboneError
    from .codec import CodecError
    from .diffusion import DiffusionError
    from .downstream import DownstreamError
    from .imagery import ImageryError, ManifestError
    from .metrics import MetricError
    from .training import TrainingError

    # numeric failures are reported with "non-finite" wherever they are raised
    if isinstance(e, DiffusionError) or "non-finite" in str(e):
        return EXIT_NUMERIC
    known = (ConfigError, BackboneError, CodecError, DownstreamError, ImageryError, ManifestError, MetricError, TrainingError, OSError)
    if isinstance(e, known):
        return EXIT_CONFIG
    return None


if __name__ == "__main__":
    sys.exit(main())
