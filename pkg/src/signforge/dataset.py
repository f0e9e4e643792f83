"""Dataset pipeline: frame extraction, quality filtering, labeled manifests,
augmentation, and batch loading.

Images live on disk as PNG under one folder per letter; a JSON manifest binds
paths to labels, split assignment, and the normalization constants used by
both training and serving. The 24 recognized letters are A..Y without J
(the two dynamic letters are out of scope).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional

import numpy as np
from PIL import Image

from . import CLASSES
from .tensor import Tensor

MANIFEST_VERSION = 1
NORM_MEAN = (0.5, 0.5, 0.5)
NORM_STD = (0.5, 0.5, 0.5)

FRAME_HEADER = struct.Struct("<III")  # width, height, frame index


class DatasetError(Exception):
    pass


# ---------------------------------------------------------------------------
# Frame streams

@dataclass
class FrameStream:
    """A decoded video stream: uniform-resolution RGB frames at a nominal fps."""
    source_id: str
    fps: float
    frames: list[np.ndarray]  # each H x W x 3 uint8

    def __post_init__(self):
        if self.fps <= 0:
            raise DatasetError(f"fps must be > 0, got {self.fps}")
        if self.frames:
            first = self.frames[0].shape
            for i, f in enumerate(self.frames):
                if f.shape != first:
                    raise DatasetError(f"frame {i} resolution {f.shape} differs from {first}")


def extract_frames(stream: FrameStream, stride: int = 2) -> list[np.ndarray]:
    """Keep every `stride`-th frame starting at index 0: ceil(n/stride) images."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if not stream.frames:
        raise DatasetError(f"stream {stream.source_id!r} has no frames")
    return stream.frames[::stride]


def write_frame_pipe(frames: Iterable[np.ndarray], out: BinaryIO) -> int:
    """Raw frame pipe: 12-byte header (w, h, index; u32 LE) + RGB24 payload."""
    n = 0
    for i, f in enumerate(frames):
        h, w = f.shape[0], f.shape[1]
        out.write(FRAME_HEADER.pack(w, h, i))
        out.write(np.ascontiguousarray(f, dtype=np.uint8).tobytes())
        n += 1
    return n


def read_frame_pipe(inp: BinaryIO) -> Iterator[tuple[int, np.ndarray]]:
    """Yields (frame index, HxWx3 uint8) until the stream ends."""
    while True:
        head = inp.read(FRAME_HEADER.size)
        if not head:
            return
        if len(head) < FRAME_HEADER.size:
            raise DatasetError("truncated frame header")
        w, h, idx = FRAME_HEADER.unpack(head)
        payload = inp.read(w * h * 3)
        if len(payload) < w * h * 3:
            raise DatasetError(f"truncated frame {idx}: expected {w * h * 3} payload bytes")
        yield idx, np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# Quality

_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def quality_score(image: np.ndarray) -> float:
    """Sharpness proxy: variance of the Laplacian of the grayscale image.
    Constant images score exactly 0; blur lowers the score."""
    if image.size == 0:
        raise DatasetError("empty image")
    img = np.asarray(image, dtype=np.float64)
    gray = img @ np.array([0.299, 0.587, 0.114]) if img.ndim == 3 else img
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        return 0.0
    lap = sum(_LAPLACIAN[i, j] * gray[i:gray.shape[0] - 2 + i, j:gray.shape[1] - 2 + j]
              for i in range(3) for j in range(3))
    return float(lap.var())


def filter_invalid(samples: list, threshold: float,
                   score_of=lambda s: s.quality) -> tuple[list, list]:
    """Partition samples into (kept, rejected) by score >= threshold."""
    kept = [s for s in samples if score_of(s) >= threshold]
    rejected = [s for s in samples if not (score_of(s) >= threshold)]
    return kept, rejected


# ---------------------------------------------------------------------------
# Manifest

@dataclass
class LabeledSample:
    path: str
    label: str
    split: str  # train | validation
    quality: float = 0.0


@dataclass
class DatasetManifest:
    classes: list[str]
    samples: list[LabeledSample]
    image_size: tuple[int, int]  # (H, W)
    normalization_mean: tuple[float, float, float] = NORM_MEAN
    normalization_std: tuple[float, float, float] = NORM_STD
    version: int = MANIFEST_VERSION
    class_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        recomputed = self.recount()
        if not self.class_counts:
            self.class_counts = recomputed
        elif self.class_counts != recomputed:
            raise DatasetError("stored per-class counts disagree with samples")
        for s in self.samples:
            if s.label not in self.classes:
                raise DatasetError(f"sample label {s.label!r} not in classes")

    def recount(self) -> dict[str, int]:
        counts = {c: 0 for c in self.classes}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts

    def split_indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.split == split]

    def label_index(self, label: str) -> int:
        return self.classes.index(label)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "classes": self.classes,
            "image_size": list(self.image_size),
            "normalization": {"mean": list(self.normalization_mean),
                              "std": list(self.normalization_std)},
            "samples": [{"path": s.path, "label": s.label, "split": s.split,
                         "quality": s.quality} for s in self.samples],
        }

    def save(self, path: str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @staticmethod
    def load(path: str) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        return DatasetManifest(
            classes=list(d["classes"]),
            samples=[LabeledSample(**s) for s in d["samples"]],
            image_size=tuple(d["image_size"]),
            normalization_mean=tuple(d["normalization"]["mean"]),
            normalization_std=tuple(d["normalization"]["std"]),
            version=d["version"],
        )


def build_manifest(root: str, image_size: tuple[int, int] = (32, 32),
                   val_fraction: float = 0.2, val_dir: Optional[str] = None,
                   seed: int = 0, with_quality: bool = True) -> DatasetManifest:
    """Index a folder-per-letter tree into a manifest.

    Validation comes from `val_dir` when given (separately collected images),
    otherwise from a per-class fraction chosen by a seeded shuffle. Unknown
    folder names (including "J" and "Z") are rejected.
    """
    rootp = Path(root)
    if not rootp.is_dir():
        raise DatasetError(f"dataset root {root!r} is not a directory")
    folders = sorted(p.name for p in rootp.iterdir() if p.is_dir())
    bad = [f for f in folders if f not in CLASSES]
    if bad:
        raise DatasetError(f"folder names are not valid letters (J/Z are dynamic and "
                           f"excluded): {', '.join(bad)}")
    if not folders:
        raise DatasetError(f"no class folders under {root!r}")
    rng = np.random.default_rng(seed)
    samples: list[LabeledSample] = []

    def scan(base: Path, label: str) -> list[Path]:
        files = sorted(p for p in (base / label).iterdir() if p.is_file())
        if not files:
            raise DatasetError(f"class {label!r} has no images in {base}")
        return files

    for label in folders:
        files = scan(rootp, label)
        if val_dir is None:
            order = rng.permutation(len(files))
            n_val = int(round(val_fraction * len(files)))
            val_set = {int(i) for i in order[:n_val]}
        else:
            val_set = set()
        for i, f in enumerate(files):
            q = quality_score(np.asarray(Image.open(f).convert("RGB"))) if with_quality else 0.0
            split = "validation" if i in val_set else "train"
            samples.append(LabeledSample(str(f), label, split, q))
    if val_dir is not None:
        vp = Path(val_dir)
        vfolders = sorted(p.name for p in vp.iterdir() if p.is_dir())
        bad = [f for f in vfolders if f not in CLASSES]
        if bad:
            raise DatasetError(f"validation folder names invalid: {', '.join(bad)}")
        for label in vfolders:
            for f in scan(vp, label):
                q = quality_score(np.asarray(Image.open(f).convert("RGB"))) if with_quality else 0.0
                samples.append(LabeledSample(str(f), label, "validation", q))
    return DatasetManifest(classes=folders, samples=samples, image_size=image_size)


def class_histogram(manifest: DatasetManifest) -> tuple[dict[str, int], float]:
    """Per-class counts and the max/min imbalance ratio."""
    counts = manifest.recount()
    present = [c for c in counts.values() if c > 0]
    ratio = max(present) / min(present) if present else 0.0
    return counts, ratio


def histogram_csv(counts: dict[str, int]) -> str:
    lines = ["label,count"] + [f"{label},{n}" for label, n in counts.items()]
    return "\n".join(lines) + "\n"


def histogram_chart(counts: dict[str, int], width: int = 50) -> str:
    """Text bar chart of per-class sample counts."""
    peak = max(counts.values(), default=1) or 1
    rows = []
    for label, n in counts.items():
        bar = "#" * max(1 if n else 0, round(n / peak * width))
        rows.append(f"{label:>2s} | {bar} {n}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Geometry: bilinear resize and affine warping (zero fill)

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; channels-last float64 math."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[0], img.shape[1]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    if img.ndim == 2:
        img = img[:, :, None]
    top = img[y0][:, x0] * (1 - wx[..., None]) + img[y0][:, x1] * wx[..., None]
    bot = img[y1][:, x0] * (1 - wx[..., None]) + img[y1][:, x1] * wx[..., None]
    out = top * (1 - wy[..., None]) + bot * wy[..., None]
    return out if image.ndim == 3 else out[:, :, 0]


def warp_affine(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Inverse-map an affine transform (2x3, output->input in centered
    coordinates) with bilinear sampling and zero fill outside the frame."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[0], img.shape[1]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sx = matrix[0, 0] * xx + matrix[0, 1] * yy + matrix[0, 2] + cx
    sy = matrix[1, 0] * xx + matrix[1, 1] * yy + matrix[1, 2] + cy
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(img)
    for dy in (0, 1):
        for dx in (0, 1):
            yi = y0 + dy
            xi = x0 + dx
            weight = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = np.where(valid[..., None],
                            img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
            out += weight[..., None] * vals
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# Augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Random rotation/scale/translation/flip, the usual robustness set."""
    rotation_max_deg: float = 12.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_max_frac: float = 0.1
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rotation_max_deg < 0:
            raise ValueError("rotation_max_deg must be >= 0")
        if self.scale_range[0] <= 0 or self.scale_range[1] <= 0:
            raise ValueError("scale_range must be positive")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must be in [0, 1]")

    def is_identity_draw_free(self) -> bool:
        return (self.rotation_max_deg == 0 and self.scale_range == (1.0, 1.0)
                and self.translation_max_frac == 0 and self.flip_prob == 0)


def augment(image: np.ndarray, label: str, config: AugmentConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Apply maybe-flip then rotation∘scale∘translation in one bilinear warp.

    A pure flip (all other ranges zero) is an exact mirror, so flipping twice
    restores the original. The label is never changed.
    """
    img = np.asarray(image, dtype=np.float64)
    flip = rng.random() < config.flip_prob
    theta = np.deg2rad(rng.uniform(-config.rotation_max_deg, config.rotation_max_deg))
    lo, hi = config.scale_range
    scale = rng.uniform(lo, hi)
    h, w = img.shape[0], img.shape[1]
    tmax = config.translation_max_frac
    tx = rng.uniform(-tmax, tmax) * w
    ty = rng.uniform(-tmax, tmax) * h
    if flip:
        img = img[:, ::-1].copy()
    if theta == 0.0 and scale == 1.0 and tx == 0.0 and ty == 0.0:
        return img, label
    # forward map is rotate(scale(translate(p))); inverse-map each output
    # pixel: un-rotate, un-scale, un-translate
    cos, sin = np.cos(theta), np.sin(theta)
    inv = 1.0 / scale
    m = np.array([
        [cos * inv, sin * inv, -tx],
        [-sin * inv, cos * inv, -ty],
    ])
    return warp_affine(img, m), label


# ---------------------------------------------------------------------------
# Batch loading

@lru_cache(maxsize=4096)
def _decode_cached(path: str, mtime_ns: int) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    arr.flags.writeable = False
    return arr


def load_image(path: str) -> np.ndarray:
    """Decode an image file to HxWx3 uint8 (read-only, cached by mtime);
    names the path on failure."""
    try:
        return _decode_cached(path, Path(path).stat().st_mtime_ns)
    except Exception as e:
        raise DatasetError(f"cannot decode image {path!r}: {e}") from e


def preprocess(image: np.ndarray, size: tuple[int, int],
               mean=NORM_MEAN, std=NORM_STD) -> Tensor:
    """uint8 HxWx3 -> standardized float32 CxHxW, the single path shared by
    training-side loading and the live service."""
    img = resize_bilinear(image, size[0], size[1])
    img = img.astype(np.float32) / 255.0
    img = (img - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def load_batch(manifest: DatasetManifest, indices: list[int],
               size: Optional[tuple[int, int]] = None, normalize: bool = True,
               augment_config: Optional[AugmentConfig] = None,
               rng: Optional[np.random.Generator] = None) -> tuple[Tensor, np.ndarray]:
    """Decode, optionally augment, resize, and standardize a batch.

    Returns (batch N x 3 x H x W float32, labels int64) ordered by `indices`.
    """
    size = size or manifest.image_size
    mean = manifest.normalization_mean if normalize else (0, 0, 0)
    std = manifest.normalization_std if normalize else (1, 1, 1)
    xs, ys = [], []
    for i in indices:
        s = manifest.samples[i]
        img = load_image(s.path)
        if augment_config is not None and rng is not None:
            img, _ = augment(img, s.label, augment_config, rng)
            img = np.clip(img, 0, 255)
        xs.append(preprocess(img, size, mean, std))
        ys.append(manifest.label_index(s.label))
    return np.stack(xs), np.asarray(ys, dtype=np.int64)
