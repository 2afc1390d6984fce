import json
import math

import numpy as np
import pytest
import torch

from sardiff.downstream import (
    CONFIGURATIONS,
    COLUMNS,
    ClassifierSpec,
    DownstreamError,
    SmallResNet,
    assemble_input,
    build_classifier,
    run_classification_experiment,
    run_cloud_removal_eval,
    train_classifier,
    widen_first_conv,
)
from sardiff.imagery import (
    SAR_AMBIGUOUS_PALETTE,
    SyntheticSceneSpec,
    add_synthetic_clouds,
    generate_synthetic_pair,
    preprocess_rgb,
    to_unit,
)
from sardiff.metrics import mae, psnr, ssim


def _pairs(n, region_count=1, palette=SAR_AMBIGUOUS_PALETTE, clouds=False, offset=0):
    out = []
    for i in range(n):
        p = generate_synthetic_pair(SyntheticSceneSpec(region_count=region_count, palette=palette, seed=offset + i), id=f"p{offset + i}")
        if clouds:
            p.cloudy_rgb = add_synthetic_clouds(p.rgb, seed=100 + i)
        out.append(p)
    return out


def _fake_generated(pair, value=0.25):
    return np.full((3, 32, 32), value, dtype=np.float32)


def test_configuration_table():
    assert [CONFIGURATIONS[i].column for i in (1, 2, 4, 3, 5)] == list(COLUMNS)
    assert {i: c.channels for i, c in CONFIGURATIONS.items()} == {1: 3, 2: 3, 3: 3, 4: 6, 5: 6}


@pytest.mark.parametrize("cid", [1, 2, 3, 4, 5])
def test_assemble_channel_count(cid):
    pair = _pairs(1)[0]
    cfg = CONFIGURATIONS[cid]
    gen = _fake_generated(pair) if cfg.uses_generated else None
    x = assemble_input(cid, pair, gen)
    assert x.shape == (cfg.channels, 32, 32) and x.dtype == np.float32


def test_assemble_layouts():
    pair = _pairs(1, region_count=3, palette=SAR_AMBIGUOUS_PALETTE)[0]
    sar = assemble_input(1, pair)
    assert np.array_equal(sar[0], sar[1]) and np.array_equal(sar[1], sar[2])
    four = assemble_input(4, pair)
    assert np.array_equal(four[:3], sar)
    assert np.array_equal(four[3:], preprocess_rgb(pair.rgb))
    gen = _fake_generated(pair, -0.5)
    five = assemble_input(5, pair, gen)
    assert np.array_equal(five[:3], four[:3])
    assert np.array_equal(five[3:], gen)
    assert np.array_equal(assemble_input(3, pair, gen), gen)


def test_assemble_generated_iff_required():
    pair = _pairs(1)[0]
    with pytest.raises(DownstreamError, match="needs generated"):
        assemble_input(3, pair)
    with pytest.raises(DownstreamError, match="does not take"):
        assemble_input(2, pair, _fake_generated(pair))
    with pytest.raises(DownstreamError, match="unknown"):
        assemble_input(6, pair)


def test_widen_first_conv_copy_and_halve():
    torch.manual_seed(0)
    model = SmallResNet(4)
    old = model.conv1.weight.detach().clone()
    widen_first_conv(model, 6)
    w = model.conv1.weight.detach()
    assert w.shape[1] == 6
    assert torch.equal(w[:, :3], old * 0.5) and torch.equal(w[:, 3:], old * 0.5)
    # duplicated input halves reproduce the original first-layer response
    x = torch.randn(2, 3, 16, 16)
    ref = torch.nn.functional.conv2d(x, old, padding=1)
    torch.testing.assert_close(model.conv1(torch.cat([x, x], 1)), ref)


def test_widen_torchvision_resnet():
    spec = ClassifierSpec(class_count=3, input_channels=6, arch="resnet18")
    model = build_classifier(spec)
    assert model.conv1.in_channels == 6
    assert model(torch.zeros(2, 6, 32, 32)).shape == (2, 3)


def test_unknown_architecture_rejected():
    with pytest.raises(DownstreamError, match="architecture"):
        build_classifier(ClassifierSpec(class_count=2, arch="vgg11"))


def _spec(**kw):
    base = dict(class_count=4, epochs=3, lr=1e-3, arch="small-resnet")
    base.update(kw)
    return ClassifierSpec(**base)


def test_single_class_rejected():
    x = np.zeros((4, 3, 32, 32), dtype=np.float32)
    with pytest.raises(DownstreamError, match="single class"):
        train_classifier(x, [1, 1, 1, 1], _spec())


def test_channel_mismatch_rejected():
    with pytest.raises(DownstreamError, match="channels"):
        train_classifier(np.zeros((4, 6, 32, 32), np.float32), [0, 1, 0, 1], _spec())


def test_classifier_deterministic_and_logs_history():
    pairs = _pairs(20)
    x = np.stack([assemble_input(2, p) for p in pairs])
    y = [p.class_label for p in pairs]
    a = train_classifier(x, y, _spec(), x[:5], y[:5])
    b = train_classifier(x, y, _spec(), x[:5], y[:5])
    assert a.history == b.history and len(a.history) == 3
    assert {"epoch", "train_accuracy", "eval_accuracy"} <= set(a.history[0])
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_eval_accuracy_invariant_to_eval_order():
    pairs = _pairs(24)
    x = np.stack([assemble_input(2, p) for p in pairs])
    y = np.array([p.class_label for p in pairs])
    clf = train_classifier(x[:16], y[:16], _spec())
    perm = np.random.default_rng(0).permutation(8)
    pred = clf.predict(x[16:])
    assert np.array_equal(clf.predict(x[16:][perm]), pred[perm])


def test_experiment_report_schema_and_baseline_reproducibility():
    pairs = _pairs(30)
    calls = []

    def gen(batch, seed):
        calls.append(seed)
        rng = np.random.default_rng(seed)
        return np.stack([preprocess_rgb(p.rgb) for p in batch]) + 0.01 * rng.standard_normal((len(batch), 3, 32, 32))

    report = run_classification_experiment(pairs[:24], pairs[24:], {"toy": gen}, repeats=2, spec=_spec(epochs=2), seed=7)
    d = report.to_dict()
    assert d["columns"] == ["S1", "S2", "S1&S2", "GenS2", "S1&GenS2"]
    assert [r["setup"] for r in d["rows"]] == ["baseline", "toy"]
    base, toy = d["rows"][0]["cells"], d["rows"][1]["cells"]
    assert base["GenS2"] is None and toy["S1"] is None
    for col in ("S1", "S2", "S1&S2"):
        assert base[col]["runs"][0] == base[col]["runs"][1] and base[col]["std"] == 0.0
    assert calls == [7, 37]
    assert d["seeds"]["generation"] == [7, 37]
    text = report.render()
    assert "±" in text and text.count("\n") == 4
    json.dumps(d)


def test_single_repeat_std_zero():
    pairs = _pairs(20)
    report = run_classification_experiment(pairs[:16], pairs[16:], None, configs=[2], repeats=1, spec=_spec(epochs=1))
    assert report.to_dict()["rows"][0]["cells"]["S2"]["std"] == 0.0
    assert "0.00" in report.render()


def test_missing_generator_rejected():
    pairs = _pairs(10)
    with pytest.raises(DownstreamError, match="generator"):
        run_classification_experiment(pairs[:8], pairs[8:], None, configs=[3], spec=_spec())


def test_shuffled_labels_permute_whole_dataset():
    pairs = _pairs(20)
    report = run_classification_experiment(pairs[:16], pairs[16:], None, configs=[2], repeats=2, spec=_spec(epochs=1), shuffle_labels=True)
    assert report.seeds["label_permutation"] == [0, 1]


# --------------------------------------------------------------------------- #
# Cloud removal
# --------------------------------------------------------------------------- #


def _oracle(pairs, seed):
    return np.stack([preprocess_rgb(p.rgb, np.float64) for p in pairs])


def _passthrough(pairs, seed):
    return np.stack([preprocess_rgb(p.cloudy_rgb, np.float64) for p in pairs])


def test_cloud_removal_oracle():
    pairs = _pairs(4, region_count=3, palette=SAR_AMBIGUOUS_PALETTE, clouds=True)
    rep = run_cloud_removal_eval(pairs, _oracle, generator_id="oracle")
    assert rep.means["MAE"] == 0.0
    assert rep.means["SSIM"] == pytest.approx(1.0, abs=1e-12)
    assert rep.means["PSNR"] == math.inf
    assert "inf" in rep.render()


def test_cloud_removal_passthrough_equals_direct_metrics():
    pairs = _pairs(5, region_count=3, clouds=True)
    rep = run_cloud_removal_eval(pairs, _passthrough, generator_id="passthrough")
    direct = {"MAE": [], "PSNR": [], "SSIM": []}
    for p in pairs:
        clean = p.rgb.astype(np.float64) / 10000
        cloudy = np.clip(p.cloudy_rgb, 0, 10000).astype(np.float64) / 10000
        direct["MAE"].append(mae(cloudy, clean))
        direct["PSNR"].append(psnr(cloudy, clean))
        direct["SSIM"].append(ssim(cloudy, clean))
    for k, v in direct.items():
        assert abs(rep.means[k] - float(np.mean(v))) <= 1e-9
        assert abs(rep.cloudy_baseline[k] - float(np.mean(v))) <= 1e-9
    # means are arithmetic means of the per-item entries
    for k in ("MAE", "PSNR", "SSIM"):
        assert rep.means[k] == pytest.approx(np.mean([it[k] for it in rep.per_item]), abs=1e-15)


def test_cloud_removal_generator_never_sees_cloudy_image():
    pairs = _pairs(3, clouds=True)

    def gen(batch, seed):
        assert all(p.sar is not None for p in batch)
        return np.stack([to_unit(np.zeros((3, 32, 32))) for _ in batch])

    rep = run_cloud_removal_eval(pairs, gen, seed=5)
    assert rep.seed == 5 and rep.n == 3


def test_cloud_removal_rejections():
    with pytest.raises(DownstreamError, match="at least one"):
        run_cloud_removal_eval([], _oracle)
    with pytest.raises(DownstreamError, match="cloudy"):
        run_cloud_removal_eval(_pairs(2), _oracle)
