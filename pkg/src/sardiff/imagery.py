"""Data preparation, raster I/O, manifests, label maps and synthetic scenes.

Arrays are channel-first: SAR rasters are ``(H, W)`` in dB, RGB rasters are
``(3, H, W)`` reflectance counts, standardized images are ``(C, H, W)`` float32
in ``[-1, 1]``.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .fileio import atomic_write_bytes, atomic_write_text

SAR_CLIP = (-25.0, 0.0)
RGB_CLIP = (0.0, 10000.0)
RGB_RAW_MAX = 28000


class ImageryError(ValueError):
    pass


class ManifestError(ImageryError):
    pass


def _check_finite(raw: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(raw)
    if bad.any():
        coord = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ImageryError(f"{what} has non-finite value {raw[coord]!r} at {coord}")


def _standardize(unit: np.ndarray, dtype=np.float32) -> np.ndarray:
    # fixed affine map [0, 1] -> [-1, 1] (mean 0.5 / std 0.5 convention)
    return ((unit - 0.5) / 0.5).astype(dtype)


def preprocess_sar(raw, dtype=np.float32) -> np.ndarray:
    """Clip a VV backscatter grid (dB) to [-25, 0], scale to [-1, 1], replicate to 3 channels."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ImageryError(f"SAR grid must be 2-D, got shape {raw.shape}")
    _check_finite(raw, "SAR grid")
    lo, hi = SAR_CLIP
    unit = (np.clip(raw, lo, hi) - lo) / (hi - lo)
    img = _standardize(unit, dtype)
    return np.repeat(img[None], 3, axis=0)


def preprocess_rgb(raw, dtype=np.float32) -> np.ndarray:
    """Clip reflectance counts to [0, 10000], divide by 10000, map to [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != 3:
        raise ImageryError(f"RGB grid must have shape (3, H, W), got {raw.shape}")
    _check_finite(raw, "RGB grid")
    if (raw < 0).any():
        coord = tuple(int(i) for i in np.argwhere(raw < 0)[0])
        raise ImageryError(f"RGB grid has negative count {raw[coord]} at {coord}")
    unit = np.clip(raw, *RGB_CLIP) / RGB_CLIP[1]
    return _standardize(unit, dtype)


def inverse_preprocess_rgb(img) -> np.ndarray:
    """Map a standardized RGB image back to uint16 counts; out-of-range values are clamped."""
    v = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.rint(RGB_CLIP[1] * (v * 0.5 + 0.5)).astype(np.uint16)


def to_unit(img):
    """Standardized [-1, 1] values to the normalized [0, 1] reflectance domain."""
    return img * 0.5 + 0.5


# --------------------------------------------------------------------------- #
# Raw pairs and raster files
# --------------------------------------------------------------------------- #


@dataclass
class RawPair:
    id: str
    sar: np.ndarray
    rgb: np.ndarray
    class_label: int | None = None
    cloudy_rgb: np.ndarray | None = None

    def __post_init__(self):
        if self.sar.ndim != 2 or self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ImageryError(f"pair {self.id}: expected sar (H, W) and rgb (3, H, W)")
        if self.sar.shape != self.rgb.shape[1:]:
            raise ImageryError(
                f"pair {self.id}: sar {self.sar.shape} and rgb {self.rgb.shape[1:]} differ in size"
            )
        if (self.rgb < 0).any():
            raise ImageryError(f"pair {self.id}: negative rgb counts")
        if self.cloudy_rgb is not None and self.cloudy_rgb.shape != self.rgb.shape:
            raise ImageryError(f"pair {self.id}: cloudy rgb shape {self.cloudy_rgb.shape} != {self.rgb.shape}")


# .u16: unsigned counts; .s16: signed SAR in units of 0.01 dB. Both carry an
# 8-byte header (width u32, height u32) and an HWC little-endian payload.
SAR_DB_UNIT = 0.01
_BIN_DTYPES = {".u16": "<u2", ".s16": "<i2"}
_IMAGE_EXTS = {".png", ".tif", ".tiff"}


def write_raster(path, arr) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    arr = np.asarray(arr)
    if ext == ".s16":
        arr = np.rint(np.asarray(arr, dtype=np.float64) / SAR_DB_UNIT)
    hwc = arr if arr.ndim == 2 else np.moveaxis(arr, 0, -1)
    if ext in _BIN_DTYPES:
        info = np.iinfo(np.dtype(_BIN_DTYPES[ext]))
        if hwc.min(initial=0) < info.min or hwc.max(initial=0) > info.max:
            raise ImageryError(f"{path}: values out of range for {ext}")
        h, w = hwc.shape[:2]
        payload = np.ascontiguousarray(hwc.astype(_BIN_DTYPES[ext])).tobytes()
        atomic_write_bytes(path, struct.pack("<II", w, h) + payload)
    elif ext in _IMAGE_EXTS:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(hwc).save(buf, format="PNG" if ext == ".png" else "TIFF")
        atomic_write_bytes(path, buf.getvalue())
    elif ext == ".npy":
        buf = io.BytesIO()
        np.save(buf, arr)
        atomic_write_bytes(path, buf.getvalue())
    else:
        raise ImageryError(f"unsupported raster extension {ext!r} ({path})")


def read_raster(path) -> np.ndarray:
    """Load a raster as ``(H, W)`` or ``(C, H, W)``; dispatches on extension."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext in _BIN_DTYPES:
        blob = path.read_bytes()
        if len(blob) < 8:
            raise ImageryError(f"{path}: truncated header")
        w, h = struct.unpack("<II", blob[:8])
        data = np.frombuffer(blob, dtype=_BIN_DTYPES[ext], offset=8)
        if w * h == 0 or data.size % (w * h):
            raise ImageryError(f"{path}: payload of {data.size} values does not fit {w}x{h}")
        c = data.size // (w * h)
        arr = data.reshape(h, w, c)
        arr = arr[..., 0] if c == 1 else np.moveaxis(arr, -1, 0)
        if ext == ".s16":
            return arr.astype(np.float32) * np.float32(SAR_DB_UNIT)
        return arr.astype(np.int64)
    if ext in _IMAGE_EXTS:
        from PIL import Image

        arr = np.asarray(Image.open(path))
        return arr if arr.ndim == 2 else np.moveaxis(arr, -1, 0)
    if ext == ".npy":
        return np.load(path)
    raise ImageryError(f"unsupported raster extension {ext!r} ({path})")


# --------------------------------------------------------------------------- #
# Label maps
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LabelMap:
    entries: Mapping[int, int]
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        targets = sorted(set(self.entries.values()))
        if targets and targets != list(range(len(targets))):
            raise ImageryError(f"label map targets must be contiguous from 0, got {targets}")

    @property
    def class_count(self) -> int:
        return len(set(self.entries.values()))

    def compose(self, then: "LabelMap") -> "LabelMap":
        """Table for ``then(self(code))``."""
        return LabelMap({k: map_label(v, then) for k, v in self.entries.items()}, then.class_names)

    @classmethod
    def from_json(cls, path) -> "LabelMap":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls._from_doc(doc)

    @classmethod
    def _from_doc(cls, doc) -> "LabelMap":
        entries = {int(k): int(v) for k, v in doc["entries"].items()}
        return cls(entries, tuple(doc.get("class_names", ())))

    @classmethod
    def default(cls) -> "LabelMap":
        """IGBP (1-17) to the 10-class simplified scheme."""
        text = resources.files("sardiff.data").joinpath("igbp_simplified.json").read_text("utf-8")
        return cls._from_doc(json.loads(text))

    @classmethod
    def identity(cls, n: int) -> "LabelMap":
        return cls({k: k for k in range(n)})


def map_label(code: int, label_map: LabelMap) -> int:
    try:
        return label_map.entries[int(code)]
    except KeyError:
        raise ImageryError(f"land-cover code {code} is not in the label map") from None


# --------------------------------------------------------------------------- #
# Synthetic scenes
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PaletteEntry:
    rgb: tuple[int, int, int]
    sar_db: float


DEFAULT_PALETTE: tuple[PaletteEntry, ...] = (
    PaletteEntry((1200, 3800, 1500), -11.0),  # vegetation
    PaletteEntry((6200, 5200, 2400), -17.0),  # bare soil
    PaletteEntry((700, 1500, 4800), -23.0),  # water
    PaletteEntry((7600, 7400, 7800), -4.0),  # built-up
)

# Same colours, but classes 0 and 1 share a backscatter level: RGB separates all
# four classes while SAR alone cannot tell vegetation from bare soil.
SAR_AMBIGUOUS_PALETTE: tuple[PaletteEntry, ...] = (
    PaletteEntry((1200, 3800, 1500), -14.0),
    PaletteEntry((6200, 5200, 2400), -14.0),
    DEFAULT_PALETTE[2],
    DEFAULT_PALETTE[3],
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    size: int = 32
    region_count: int = 4
    palette: tuple[PaletteEntry, ...] = DEFAULT_PALETTE
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.size < 32 or self.size & (self.size - 1):
            raise ImageryError(f"size must be a power of two >= 32, got {self.size}")
        if self.region_count < 1:
            raise ImageryError("region_count must be >= 1")
        if self.region_count > len(self.palette):
            raise ImageryError(
                f"region_count {self.region_count} exceeds palette size {len(self.palette)}"
            )
        if self.noise_sigma < 0:
            raise ImageryError("noise_sigma must be >= 0")
        for e in self.palette:
            if not all(0 <= v <= RGB_RAW_MAX for v in e.rgb) or not -50.0 <= e.sar_db <= 5.0:
                raise ImageryError(f"palette entry out of raw range: {e}")


def modal_class(class_map: np.ndarray, n_classes: int) -> int:
    """Most frequent class; ties go to the lowest index."""
    return int(np.argmax(np.bincount(class_map.ravel(), minlength=n_classes)))


def synthesize_scene(spec: SyntheticSceneSpec, id: str | None = None) -> tuple[RawPair, np.ndarray]:
    """Generate a pair together with its per-pixel class map."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    k = spec.region_count
    classes = rng.permutation(len(spec.palette))[:k]
    centers = rng.uniform(0, n, size=(k, 2))
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    class_map = classes[np.argmin(d2, axis=0)]

    rgb_table = np.array([e.rgb for e in spec.palette], dtype=np.float64)
    sar_table = np.array([e.sar_db for e in spec.palette], dtype=np.float64)
    rgb = np.moveaxis(rgb_table[class_map], -1, 0)
    sar = sar_table[class_map]
    if spec.noise_sigma > 0:
        # sigma is a fraction of the clipped range of each modality
        rgb = rgb + rng.normal(0.0, spec.noise_sigma * RGB_CLIP[1], size=rgb.shape)
        sar = sar + rng.normal(0.0, spec.noise_sigma * (SAR_CLIP[1] - SAR_CLIP[0]), size=sar.shape)
    rgb = np.clip(np.rint(rgb), 0, RGB_RAW_MAX).astype(np.int64)
    pair = RawPair(
        id=id if id is not None else f"synth-{spec.seed}",
        sar=sar.astype(np.float32),
        rgb=rgb,
        class_label=modal_class(class_map, len(spec.palette)),
    )
    return pair, class_map


def generate_synthetic_pair(spec: SyntheticSceneSpec, id: str | None = None) -> RawPair:
    return synthesize_scene(spec, id)[0]


def add_synthetic_clouds(rgb: np.ndarray, seed: int, coverage: float = 0.3) -> np.ndarray:
    """Overlay a bright, soft-edged cloud blob on an RGB counts grid."""
    rng = np.random.default_rng(seed)
    _, h, w = rgb.shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    radius = math.sqrt(coverage * h * w / math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    alpha = np.clip((radius - dist) / (0.25 * radius) + 0.5, 0.0, 1.0) * 0.85
    cloudy = rgb * (1 - alpha) + 9000.0 * alpha
    return np.clip(np.rint(cloudy), 0, RGB_RAW_MAX).astype(np.int64)


# --------------------------------------------------------------------------- #
# Manifests
# --------------------------------------------------------------------------- #


@dataclass
class ManifestEntry:
    id: str
    sar_path: Path
    rgb_path: Path
    label: int | None = None
    cloudy_rgb_path: Path | None = None
    row: int = 0

    def load(self) -> RawPair:
        cloudy = read_raster(self.cloudy_rgb_path) if self.cloudy_rgb_path else None
        return RawPair(self.id, read_raster(self.sar_path), read_raster(self.rgb_path), self.label, cloudy)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    train: list[ManifestEntry] = field(default_factory=list)
    eval: list[ManifestEntry] = field(default_factory=list)

    @property
    def labeled(self) -> bool:
        return bool(self.entries) and all(e.label is not None for e in self.entries)


def split_counts(n: int, train_fraction: float) -> tuple[int, int]:
    """Floor on the train side; the remainder goes to eval."""
    n_train = math.floor(train_fraction * n + 1e-9)
    return n_train, n - n_train


def load_manifest(path, train_fraction: float = 0.8, seed: int = 0) -> Manifest:
    """Parse a tab-separated manifest ``id, sar, rgb, [label], [cloudy_rgb]``.

    Relative paths resolve against the manifest's directory. Rasters are not
    read here; use :meth:`ManifestEntry.load`.
    """
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for row, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if not 3 <= len(cols) <= 5:
            raise ManifestError(f"{path}:{row}: expected 3-5 tab-separated fields, got {len(cols)}")
        ident, sar, rgb = cols[:3]
        if not ident or ident in seen:
            raise ManifestError(f"{path}:{row}: empty or duplicate id {ident!r}")
        seen.add(ident)
        label = None
        if len(cols) > 3 and cols[3] != "":
            try:
                label = int(cols[3])
            except ValueError:
                raise ManifestError(f"{path}:{row}: label {cols[3]!r} is not an integer") from None
        cloudy = root / cols[4] if len(cols) > 4 and cols[4] else None
        entry = ManifestEntry(ident, root / sar, root / rgb, label, cloudy, row)
        for p in (entry.sar_path, entry.rgb_path, entry.cloudy_rgb_path):
            if p is not None and not p.is_file():
                raise ManifestError(f"{path}:{row}: referenced file {p} does not exist")
        entries.append(entry)

    n_train, _ = split_counts(len(entries), train_fraction)
    order = np.random.default_rng(seed).permutation(len(entries))
    train_idx = sorted(order[:n_train].tolist())
    eval_idx = sorted(order[n_train:].tolist())
    return Manifest(entries, [entries[i] for i in train_idx], [entries[i] for i in eval_idx])


def write_manifest(path, rows: Sequence[Sequence[object]]) -> None:
    lines = ["\t".join("" if c is None else str(c) for c in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")
