"""Image-quality and classification metrics (numpy, float64).

Image metrics expect the normalized [0, 1] reflectance domain unless a
``data_range`` says otherwise.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PSNR_IDENTICAL = math.inf  # sentinel for zero error


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, data_range: float = 1.0) -> float:
    if err == 0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(data_range**2 / err))


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    return psnr_from_mse(mse(a, b), data_range)


@dataclass(frozen=True)
class MetricConfig:
    window: int = 11
    sigma: float = 1.5
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window % 2 == 0 or self.window < 1:
            raise MetricError(f"SSIM window must be odd, got {self.window}")
        if self.data_range <= 0:
            raise MetricError("data_range must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable weighted sum over every full window position
    k = g.size
    x = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(x, k, axis=-2) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, config: MetricConfig = MetricConfig()) -> np.ndarray:
    """Per-window SSIM for 2-D grids (valid windows only)."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise MetricError("ssim_map expects 2-D grids")
    if min(a.shape) < config.window:
        raise MetricError(f"grid {a.shape} is smaller than the {config.window}px SSIM window")
    g = gaussian_window(config.window, config.sigma)
    c1 = (config.k1 * config.data_range) ** 2
    c2 = (config.k2 * config.data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b, config: MetricConfig = MetricConfig()) -> float:
    """Gaussian-window SSIM; multi-channel ``(C, H, W)`` inputs average the per-channel means."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return float(ssim_map(a, b, config).mean())
    if a.ndim != 3:
        raise MetricError(f"expected (H, W) or (C, H, W), got {a.shape}")
    return float(np.mean([ssim_map(a[i], b[i], config).mean() for i in range(a.shape[0])]))


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise MetricError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise MetricError("accuracy of an empty set")
    return float(np.mean(pred == truth))


# --------------------------------------------------------------------------- #
# FID
# --------------------------------------------------------------------------- #


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((A B)^{1/2}) via the symmetric form A^{1/2} B A^{1/2}."""
    sa = _psd_sqrt(cov_a)
    m = sa @ cov_b @ sa
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eps: float = 0.0) -> float:
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    cov_a, cov_b = np.asarray(cov_a, np.float64), np.asarray(cov_b, np.float64)
    if eps:
        eye = np.eye(cov_a.shape[0])
        cov_a, cov_b = cov_a + eps * eye, cov_b + eps * eye
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * trace_sqrt_product(cov_a, cov_b)
    return max(float(value), 0.0)


def fid(features_a, features_b, eps: float = 0.0) -> float:
    """Frechet distance between Gaussian fits (unbiased covariance) of two feature sets."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise MetricError(f"feature dimension mismatch: {fa.shape} vs {fb.shape}")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise MetricError("FID needs at least 2 samples per set")
    return frechet_distance(
        fa.mean(0), np.cov(fa, rowvar=False, ddof=1).reshape(fa.shape[1], -1),
        fb.mean(0), np.cov(fb, rowvar=False, ddof=1).reshape(fb.shape[1], -1),
        eps,
    )


# --------------------------------------------------------------------------- #
# Feature extractors
# --------------------------------------------------------------------------- #


def write_feature_file(path, features) -> None:
    f = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    Path(path).write_bytes(struct.pack("<II", *f.shape) + f.tobytes())


def read_feature_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    n, d = struct.unpack("<II", blob[:8])
    data = np.frombuffer(blob, dtype="<f4", offset=8)
    if data.size != n * d:
        raise MetricError(f"{path}: header says {n}x{d} but payload has {data.size} values")
    return data.reshape(n, d).astype(np.float64)


def _resize(images: np.ndarray, size: int) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.shape[-1] != size or x.shape[-2] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return x.numpy().astype(np.float64)


class RandomProjectionExtractor:
    """Resize to ``size`` px, flatten, project with a fixed Gaussian matrix."""

    def __init__(self, dim: int = 64, size: int = 32, channels: int = 3, seed: int = 0):
        self.dim, self.size, self.seed = dim, size, seed
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((channels * size * size, dim)) / math.sqrt(channels * size * size)

    @property
    def id(self) -> str:
        return f"random-projection(d={self.dim},size={self.size},seed={self.seed})"

    def __call__(self, images) -> np.ndarray:
        x = _resize(images, self.size)
        return x.reshape(x.shape[0], -1) @ self.matrix


class RandomConvExtractor:
    """Small fixed-seed random conv net; mean- and max-pooled ReLU maps as features."""

    def __init__(self, dim: int = 64, size: int = 32, channels: int = 3, seed: int = 0):
        import torch

        if dim % 2:
            raise MetricError("conv extractor dim must be even")
        self.dim, self.size, self.seed = dim, size, seed
        gen = torch.Generator().manual_seed(seed)
        self.w1 = torch.randn(32, channels, 3, 3, generator=gen, dtype=torch.float64) / math.sqrt(9 * channels)
        self.w2 = torch.randn(dim // 2, 32, 3, 3, generator=gen, dtype=torch.float64) / math.sqrt(9 * 32)

    @property
    def id(self) -> str:
        return f"random-conv(d={self.dim},size={self.size},seed={self.seed})"

    def __call__(self, images) -> np.ndarray:
        import torch
        import torch.nn.functional as F

        x = torch.as_tensor(_resize(images, self.size))
        h = F.relu(F.conv2d(x, self.w1, padding=1))
        h = F.relu(F.conv2d(F.avg_pool2d(h, 2), self.w2, padding=1))
        return torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1).numpy()


class FeatureFileExtractor:
    """Precomputed features (e.g. from an external Inception run), row order = image order."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_file():
            raise MetricError(f"feature file {self.path} is unavailable")
        self.features = read_feature_file(self.path)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def id(self) -> str:
        return f"feature-file({self.path.name})"

    def __call__(self, images) -> np.ndarray:
        n = len(images)
        if n != self.features.shape[0]:
            raise MetricError(f"feature file has {self.features.shape[0]} rows for {n} images")
        return self.features


EXTRACTORS = {"random-projection": RandomProjectionExtractor, "random-conv": RandomConvExtractor}


def make_extractor(name: str, dim: int = 64, seed: int = 0, path=None):
    if name == "feature-file":
        if path is None:
            raise MetricError("feature-file extractor needs a path")
        return FeatureFileExtractor(path)
    if name not in EXTRACTORS:
        raise MetricError(f"feature extractor {name!r} is unavailable (choose from {sorted(EXTRACTORS)})")
    return EXTRACTORS[name](dim=dim, seed=seed)


def extract_features(images, extractor) -> np.ndarray:
    return np.asarray(extractor(images), dtype=np.float64)
