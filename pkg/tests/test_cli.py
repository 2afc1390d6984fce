import json

import numpy as np
import pytest

from sardiff.cli import COMMANDS, ConfigError, load_preset, main, resolve_config
from sardiff.imagery import load_manifest, read_raster

TINY_TRAIN = [
    "--depth", "1", "--heads", "2", "--hidden", "16", "--patch", "8", "--T", "20",
    "--iterations", "4", "--batch-size", "4", "--checkpoint-interval", "2",
    "--beta-start", "1e-3", "--beta-end", "0.2", "--train-fraction", "1.0",
]


def _synth(tmp_path, name="syn", *extra):
    out = tmp_path / name
    assert main(["make-synthetic", "--out", str(out), "--count", "16", *extra]) == 0
    return out


def test_make_synthetic_writes_pairs_and_report(tmp_path, capsys):
    out = _synth(tmp_path, "a", "--cloud-coverage", "0.3")
    m = load_manifest(out / "manifest.tsv")
    assert len(m.entries) == 16 and m.labeled
    assert len(list(out.glob("*.s16"))) == 16 and len(list(out.glob("*.u16"))) == 32
    report = json.loads((out / "report.json").read_text())
    recount = np.bincount([e.label for e in m.entries], minlength=len(report["results"]["label_histogram"]))
    assert report["results"]["label_histogram"] == recount.tolist()
    assert report["schema_version"] == 1 and report["config"]["count"] == 16
    # the echoed config on stdout is the one saved beside the report
    assert json.loads(capsys.readouterr().out) == json.loads((out / "config.json").read_text())


def test_make_synthetic_same_seed_same_bytes(tmp_path):
    a = _synth(tmp_path, "a", "--seed", "3")
    b = _synth(tmp_path, "b", "--seed", "3")
    c = _synth(tmp_path, "c", "--seed", "4")
    for name in ("manifest.tsv", "report.json", "report.txt", "syn00007_rgb.u16"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "syn00000_rgb.u16").read_bytes() != (c / "syn00000_rgb.u16").read_bytes()


def test_defaults_mirror_full_scale_recipe():
    assert COMMANDS["train"]["iterations"] == 250_000
    assert COMMANDS["train"]["batch_size"] == 192
    assert COMMANDS["train"]["lr"] == 1e-4 and COMMANDS["train"]["weight_decay"] == 0.0
    assert COMMANDS["sample"]["count"] == 200
    assert COMMANDS["eval-downstream"]["repeats"] == 3
    assert COMMANDS["eval-downstream"]["epochs"] == 20 and COMMANDS["eval-downstream"]["batch_size"] == 10


def test_desk_preset_values():
    cfg = resolve_config("train", "desk", None, {}, None)
    assert (cfg["depth"], cfg["hidden"], cfg["heads"], cfg["patch"]) == (4, 128, 4, 4)
    assert (cfg["T"], cfg["batch_size"], cfg["iterations"], cfg["codec"]) == (1000, 16, 2000, "identity")
    syn = resolve_config("make-synthetic", "desk", None, {}, None)
    assert syn["size"] == 32 and syn["count"] == 16
    assert set(load_preset("desk")) <= set(COMMANDS)


def test_precedence_defaults_preset_file_flags(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"iterations": 10, "lr": 0.5}, "seed": 9}))
    cfg = resolve_config("train", "desk", str(path), {"lr": 0.25}, None)
    assert cfg["iterations"] == 10 and cfg["lr"] == 0.25 and cfg["seed"] == 9 and cfg["depth"] == 4
    assert resolve_config("train", None, str(path), {}, 2)["seed"] == 2


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown keys"):
        resolve_config("train", None, None, {"learning_rate": 1.0}, None)
    with pytest.raises(ConfigError, match="integer"):
        resolve_config("train", None, None, {"iterations": "many"}, None)
    with pytest.raises(ConfigError, match="preset"):
        load_preset("nope")


def test_unknown_config_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"iterationz": 5}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 2
    assert "unknown keys" in capsys.readouterr().err


def test_missing_manifest_exits_2(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "r")]) == 2


def test_class_conditioning_on_unlabeled_manifest_exits_2(tmp_path):
    syn = _synth(tmp_path)
    rows = [line.split("\t")[:3] for line in (syn / "manifest.tsv").read_text().splitlines()]
    (syn / "unlabeled.tsv").write_text("".join("\t".join(r) + "\n" for r in rows))
    code = main(["train", "--manifest", str(syn / "unlabeled.tsv"), "--variant", "standard+class",
                 "--out", str(tmp_path / "r"), *TINY_TRAIN])
    assert code == 2
    assert not (tmp_path / "r" / "final").exists()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    syn = root / "syn"
    assert main(["make-synthetic", "--out", str(syn), "--count", "6", "--cloud-coverage", "0.4"]) == 0
    run = root / "run"
    assert main(["train", "--manifest", str(syn / "manifest.tsv"), "--out", str(run), *TINY_TRAIN]) == 0
    return root, syn, run


def test_train_report_and_checkpoints(tiny_run):
    _, _, run = tiny_run
    report = json.loads((run / "report.json").read_text())
    assert report["results"]["steps"] == 4
    assert report["results"]["checkpoints"] == ["step_2", "step_4", "final"]
    assert len(report["provenance"]["train_ids"]) == 6


def _sample(root, syn, run, name, *extra):
    out = root / name
    args = ["sample", "--run", str(run), "--manifest", str(syn / "manifest.tsv"), "--split", "all",
            "--count", "4", "--batch-size", "3", "--out", str(out), *extra]
    assert main(args) == 0
    return out


def test_sample_deterministic_with_grid(tiny_run):
    root, syn, run = tiny_run
    a = _sample(root, syn, run, "s1", "--seed", "1")
    b = _sample(root, syn, run, "s2", "--seed", "1")
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "samples.tsv").read_bytes() == (b / "samples.tsv").read_bytes()
    grid = read_raster(a / "grid.png")
    # one row of (SAR | generated | real) tiles per sample
    assert grid.shape == (3, 4 * 32, 3 * 32)
    m = load_manifest(a / "samples.tsv")
    assert [e.id for e in m.entries] == ["syn00000", "syn00001", "syn00002", "syn00003"]
    assert read_raster(m.entries[0].rgb_path).shape == (3, 32, 32)


def test_sample_trajectory(tiny_run):
    root, syn, run = tiny_run
    out = _sample(root, syn, run, "traj", "--trajectory-every", "5", "--no-grid")
    assert (out / "trajectory.png").is_file() and not (out / "grid.png").exists()


def test_eval_gen_against_itself(tiny_run):
    root, syn, _ = tiny_run
    out = root / "eg"
    man = str(syn / "manifest.tsv")
    assert main(["eval-gen", "--manifest", man, "--generated", man, "--feature-dim", "8", "--out", str(out)]) == 0
    res = json.loads((out / "report.json").read_text())["results"]
    assert res["SSIM"] == pytest.approx(1.0, abs=1e-12)
    assert abs(res["FID"]) <= 1e-6


def test_eval_gen_on_samples(tiny_run):
    root, syn, run = tiny_run
    samples = _sample(root, syn, run, "s3")
    out = root / "eg2"
    assert main(["eval-gen", "--manifest", str(syn / "manifest.tsv"), "--generated", str(samples / "samples.tsv"),
                 "--feature-dim", "8", "--out", str(out)]) == 0
    res = json.loads((out / "report.json").read_text())["results"]
    assert res["n"] == 4 and -1.0 <= res["SSIM"] < 1.0 and res["FID"] > 0


def test_cloud_removal_builtin_generators(tiny_run):
    root, syn, run = tiny_run
    out = root / "cr"
    assert main(["eval-downstream", "--task", "cloud-removal", "--manifest", str(syn / "manifest.tsv"),
                 "--split", "all", "--generators", f"oracle,passthrough,{run}", "--out", str(out)]) == 0
    methods = json.loads((out / "report.json").read_text())["results"]["methods"]
    assert methods["oracle"]["MAE"] == 0.0 and methods["oracle"]["PSNR"] == "inf"
    pt = methods["passthrough"]
    assert {k: pt[k] for k in ("MAE", "PSNR", "SSIM")} == pt["cloudy_baseline"]
    assert set(methods) == {"oracle", "passthrough", "run"}
    assert "inf" in (out / "report.txt").read_text()


def test_echoed_config_reproduces_report(tiny_run):
    root, syn, run = tiny_run
    a = _sample(root, syn, run, "r1", "--seed", "11")
    out = root / "r2"
    assert main(["sample", "--config", str(a / "config.json"), "--out", str(out)]) == 0
    assert (a / "config.json").read_bytes() == (out / "config.json").read_bytes()
    assert (a / "report.json").read_bytes() == (out / "report.json").read_bytes()
