import math

import numpy as np
import pytest

from sardiff.metrics import (
    PSNR_IDENTICAL,
    MetricConfig,
    MetricError,
    accuracy,
    extract_features,
    fid,
    frechet_distance,
    mae,
    make_extractor,
    psnr,
    read_feature_file,
    ssim,
    write_feature_file,
)


def _loop_ssim(a, b, window=11, sigma=1.5, data_range=1.0):
    """Direct per-pixel reference: explicit 2-D Gaussian weights, explicit window loops."""
    half = window // 2
    w = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2)) for j in range(window)] for i in range(window)]
    total = sum(sum(r) for r in w)
    w = [[v / total for v in r] for r in w]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, wd = len(a), len(a[0])
    vals = []
    for y in range(h - window + 1):
        for x in range(wd - window + 1):
            ma = mb = 0.0
            for i in range(window):
                for j in range(window):
                    ma += w[i][j] * a[y + i][x + j]
                    mb += w[i][j] * b[y + i][x + j]
            va = vb = cov = 0.0
            for i in range(window):
                for j in range(window):
                    da, db = a[y + i][x + j] - ma, b[y + i][x + j] - mb
                    va += w[i][j] * da * da
                    vb += w[i][j] * db * db
                    cov += w[i][j] * da * db
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def test_ssim_matches_loop_reference():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16))
    b = np.clip(a + 0.2 * rng.standard_normal((16, 16)), 0, 1)
    assert abs(ssim(a, b) - _loop_ssim(a.tolist(), b.tolist())) <= 1e-9


def test_ssim_identity_and_range():
    rng = np.random.default_rng(1)
    x = rng.random((3, 24, 24))
    assert abs(ssim(x, x) - 1.0) <= 1e-6
    y = rng.random((3, 24, 24))
    assert -1.0 <= ssim(x, y) <= 1.0


def test_ssim_checkerboard_anticorrelated_is_negative():
    board = (np.indices((16, 16)).sum(0) % 2).astype(np.float64)
    assert ssim(board, 1 - board) < 0


def test_ssim_symmetric():
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 20, 20)), rng.random((2, 20, 20))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_ssim_invariant_to_joint_rescaling_of_range():
    # scaling both images and the data range together leaves every term unchanged
    rng = np.random.default_rng(3)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    scaled = ssim(4 * a, 4 * b, MetricConfig(data_range=4.0))
    assert scaled == pytest.approx(ssim(a, b), abs=1e-12)


def test_ssim_multichannel_is_channel_mean():
    rng = np.random.default_rng(4)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert ssim(a, b) == pytest.approx(np.mean([ssim(a[i], b[i]) for i in range(3)]), abs=1e-15)


def test_ssim_rejects_small_grid_and_even_window():
    with pytest.raises(MetricError, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(MetricError):
        MetricConfig(window=10)


def test_mae_cases():
    rng = np.random.default_rng(5)
    a = rng.random((4, 4))
    assert mae(a, a) == 0.0
    b = np.clip(a, 0, 0.8)
    assert mae(b + 0.1, b) == pytest.approx(0.1, abs=1e-15)
    ref = 0.0
    c = rng.random((4, 4))
    for i in range(4):
        for j in range(4):
            ref += abs(a[i, j] - c[i, j])
    assert abs(mae(a, c) - ref / 16) <= 1e-12
    with pytest.raises(MetricError):
        mae(a, c[:3])


def test_psnr_analytic_cases():
    a = np.zeros((10, 10))
    assert psnr(a, np.full((10, 10), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, np.full((10, 10), 0.01)) == pytest.approx(40.0, abs=1e-12)
    assert psnr(a, a) == PSNR_IDENTICAL
    assert psnr(a, np.full((10, 10), 0.5), data_range=2.0) == pytest.approx(10 * math.log10(16), abs=1e-12)


def test_accuracy_cases():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75
    with pytest.raises(MetricError):
        accuracy([0], [0, 1])


def test_fid_same_set_is_zero():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((500, 8))
    assert fid(a, a) <= 1e-6


def test_fid_gaussian_mean_shift():
    rng = np.random.default_rng(7)
    n, d = 100_000, 4
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((n, d)) + np.array([1.0, 0, 0, 0])
    assert fid(a, b) == pytest.approx(1.0, rel=0.02)


def test_frechet_exact_moments():
    d = 5
    value = frechet_distance(np.zeros(d), 4 * np.eye(d), np.zeros(d), np.eye(d))
    assert value == pytest.approx(d, abs=1e-12)


def test_frechet_non_commuting_covariances_match_scipy():
    from scipy import linalg

    rng = np.random.default_rng(8)
    m1, m2 = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    a, b = m1 @ m1.T + 0.1 * np.eye(6), m2 @ m2.T + 0.1 * np.eye(6)
    mu1, mu2 = rng.standard_normal(6), rng.standard_normal(6)
    ref = np.sum((mu1 - mu2) ** 2) + np.trace(a + b - 2 * linalg.sqrtm(a @ b).real)
    assert frechet_distance(mu1, a, mu2, b) == pytest.approx(ref, rel=1e-8)


def test_fid_symmetric_and_non_negative():
    rng = np.random.default_rng(9)
    a, b = rng.standard_normal((50, 4)), 2 * rng.standard_normal((60, 4))
    assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-10)
    assert fid(a, b) >= 0


def test_fid_rejections():
    with pytest.raises(MetricError):
        fid(np.zeros((5, 3)), np.zeros((5, 4)))
    with pytest.raises(MetricError):
        fid(np.zeros((1, 3)), np.zeros((5, 3)))


@pytest.mark.parametrize("name", ["random-projection", "random-conv"])
def test_extractor_deterministic_dim_and_permutation(name):
    rng = np.random.default_rng(10)
    imgs = rng.random((6, 3, 32, 32)) * 2 - 1
    ext = make_extractor(name, dim=16, seed=3)
    f1 = extract_features(imgs, ext)
    assert f1.shape == (6, 16)
    assert np.array_equal(f1, extract_features(imgs, make_extractor(name, dim=16, seed=3)))
    perm = np.array([3, 0, 5, 1, 4, 2])
    np.testing.assert_allclose(extract_features(imgs[perm], ext), f1[perm], rtol=0, atol=1e-10)
    assert name in ext.id and "d=16" in ext.id


def test_extractor_resizes_larger_images():
    imgs = np.zeros((2, 3, 64, 64))
    assert extract_features(imgs, make_extractor("random-projection", dim=8)).shape == (2, 8)


def test_unknown_extractor_rejected(tmp_path):
    with pytest.raises(MetricError, match="unavailable"):
        make_extractor("inception")
    with pytest.raises(MetricError, match="unavailable"):
        make_extractor("feature-file", path=tmp_path / "none.f32")


def test_feature_file_round_trip(tmp_path):
    feats = np.random.default_rng(11).standard_normal((7, 5)).astype(np.float32)
    write_feature_file(tmp_path / "f.f32", feats)
    assert np.array_equal(read_feature_file(tmp_path / "f.f32"), feats.astype(np.float64))
    ext = make_extractor("feature-file", path=tmp_path / "f.f32")
    assert ext.dim == 5 and ext.id.startswith("feature-file")
    with pytest.raises(MetricError, match="rows"):
        ext(np.zeros((3, 3, 8, 8)))
