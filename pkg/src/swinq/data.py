"""Dataset handling: directory-per-class corpora, deterministic stratified
splits, preprocessing, and a synthetic separable dataset generator.

PPM (P6) is the mandatory codec and keeps the core dependency-free; PNG is
supported when Pillow is importable. Corpus layout: ``root/<class>/*.ppm|png``.
"""

from __future__ import annotations

import colorsys
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SUFFIXES = (".ppm", ".png")
SPLIT_NAMES = ("train", "val", "test")
TRAIN_FRACTION = 0.7
VAL_FRACTION = 0.2
CALIBRATION_SET_SIZE = 32

SYNTHETIC_MEAN = (0.5, 0.5, 0.5)
SYNTHETIC_STD = (0.5, 0.5, 0.5)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DecodeError(ValueError):
    """Undecodable image; message carries the offending path."""


@dataclass(frozen=True)
class PreprocessSpec:
    resize_shorter: int
    crop: int
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.crop > self.resize_shorter:
            raise ValueError("crop must not exceed resize_shorter")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be positive")

    @classmethod
    def synthetic(cls, size: int) -> "PreprocessSpec":
        return cls(resize_shorter=size, crop=size, mean=SYNTHETIC_MEAN, std=SYNTHETIC_STD)


@dataclass(frozen=True)
class Sample:
    path: str
    class_index: int
    split: str


@dataclass
class DatasetIndex:
    root: str
    seed: int
    classes: list[str]
    samples: list[Sample]
    skipped: int = 0

    def split(self, name: str) -> list[Sample]:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]

    def to_manifest(self) -> dict:
        return {
            "seed": self.seed,
            "classes": list(self.classes),
            "samples": [
                {"path": s.path, "class": s.class_index, "split": s.split} for s in self.samples
            ],
        }

    @classmethod
    def from_manifest(cls, doc: dict, root: str = "") -> "DatasetIndex":
        return cls(
            root=root,
            seed=doc["seed"],
            classes=list(doc["classes"]),
            samples=[Sample(s["path"], s["class"], s["split"]) for s in doc["samples"]],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        return cls.from_manifest(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# codecs


def write_ppm(path, image: np.ndarray) -> None:
    """Write an [H, W, 3] uint8 array as binary PPM (P6)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("write_ppm expects an [H, W, 3] uint8 array")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc
    try:
        tokens: list[bytes] = []
        pos = 0
        while len(tokens) < 4:
            while pos < len(raw) and raw[pos : pos + 1].isspace():
                pos += 1
            if pos < len(raw) and raw[pos : pos + 1] == b"#":  # header comment
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
        if tokens[0] != b"P6" or int(tokens[3]) != 255:
            raise ValueError("not an 8-bit P6 file")
        w, h = int(tokens[1]), int(tokens[2])
        pos += 1  # single whitespace after maxval
        pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
        return pixels.reshape(h, w, 3).copy()
    except (ValueError, IndexError) as exc:
        raise DecodeError(f"corrupt PPM {path}: {exc}") from exc


def decode_image(path) -> np.ndarray:
    """Decode to an [H, W, 3] uint8 array; PNG requires Pillow."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise DecodeError(f"PNG support needs Pillow (reading {path})") from exc
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8)
        except Exception as exc:
            raise DecodeError(f"corrupt PNG {path}: {exc}") from exc
    raise DecodeError(f"unsupported image type {path}")


# ---------------------------------------------------------------------------
# preprocessing


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def preprocess(image: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """uint8 [H, W, 3] -> f32 [crop, crop, 3]: bilinear resize of the shorter
    side, center crop, scale to [0, 1], per-channel normalize."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    if h <= w:
        new_h = spec.resize_shorter
        new_w = max(spec.resize_shorter, int(round(w * spec.resize_shorter / h)))
    else:
        new_w = spec.resize_shorter
        new_h = max(spec.resize_shorter, int(round(h * spec.resize_shorter / w)))
    resized = bilinear_resize(img.astype(np.float32), new_h, new_w)
    top = (new_h - spec.crop) // 2
    left = (new_w - spec.crop) // 2
    cropped = resized[top : top + spec.crop, left : left + spec.crop, :]
    scaled = cropped / np.float32(255.0)
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    return ((scaled - mean) / std).astype(np.float32)


def load_sample(index: DatasetIndex, sample: Sample, spec: PreprocessSpec) -> np.ndarray:
    path = Path(index.root) / sample.path if index.root else Path(sample.path)
    return preprocess(decode_image(path), spec)


# ---------------------------------------------------------------------------
# indexing and splitting


def index_and_split(root, seed: int) -> DatasetIndex:
    """Per-class seeded shuffle, then floor(0.7n) train / floor(0.2n) val /
    remainder test. Unreadable files are skipped with a warning and counted."""
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")
    rng = np.random.default_rng(seed)
    classes = [d.name for d in class_dirs]
    samples: list[Sample] = []
    skipped = 0
    for ci, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        readable = []
        for p in files:
            try:
                with open(p, "rb") as f:
                    f.read(1)
                readable.append(p)
            except OSError:
                warnings.warn(f"skipping unreadable file {p}")
                skipped += 1
        if not readable:
            raise ValueError(f"class directory {d} has no readable images")
        order = rng.permutation(len(readable))
        n = len(readable)
        n_train = int(TRAIN_FRACTION * n)
        n_val = int(VAL_FRACTION * n)
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            samples.append(Sample(str(readable[idx].relative_to(root)), ci, split))
    return DatasetIndex(root=str(root), seed=seed, classes=classes, samples=samples, skipped=skipped)


def calibration_samples(index: DatasetIndex, size: int = CALIBRATION_SET_SIZE) -> list[Sample]:
    """First `size` training images in index order."""
    return index.split("train")[:size]


# ---------------------------------------------------------------------------
# synthetic dataset


def _class_base_color(class_index: int, num_classes: int) -> np.ndarray:
    hue = class_index / num_classes
    return np.asarray(colorsys.hsv_to_rgb(hue, 0.7, 0.8), dtype=np.float64) * 255.0


def synthesize_image(class_index: int, num_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One sample: class hue + class-frequency sinusoid + noise (sigma = 0.1
    of the dynamic range). Classes stay linearly separable in mean color."""
    base = _class_base_color(class_index, num_classes)
    freq = class_index + 2
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    wave = 0.25 * np.sin(2.0 * np.pi * freq * (xx + yy) / (2.0 * size))
    img = base[None, None, :] * (0.75 + wave[:, :, None])
    img = img + rng.normal(0.0, 25.5, size=(size, size, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic(out_dir, num_classes: int, per_class: int, size: int, seed: int) -> list[Path]:
    """Write a directory-per-class PPM corpus; byte-identical for a fixed seed."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 30:
        raise ValueError("need at least 30 images per class")
    out_dir = Path(out_dir)
    paths = []
    for c in range(num_classes):
        class_dir = out_dir / f"class_{c:02d}"
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, c, i)))
            img = synthesize_image(c, num_classes, size, rng)
            path = class_dir / f"img_{i:05d}.ppm"
            write_ppm(path, img)
            paths.append(path)
    return paths


def centroid_oracle_accuracy(root) -> float:
    """Nearest-centroid classification on mean RGB; the separability check."""
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    feats, labels = [], []
    for ci, d in enumerate(class_dirs):
        for p in sorted(d.iterdir()):
            if p.suffix.lower() in IMAGE_SUFFIXES:
                img = decode_image(p).astype(np.float64)
                feats.append(img.mean(axis=(0, 1)))
                labels.append(ci)
    feats = np.stack(feats)
    labels = np.asarray(labels)
    centroids = np.stack([feats[labels == c].mean(axis=0) for c in range(len(class_dirs))])
    dists = np.linalg.norm(feats[:, None, :] - centroids[None, :, :], axis=-1)
    return float(np.mean(np.argmin(dists, axis=1) == labels))


def load_split(
    index: DatasetIndex, split: str, spec: PreprocessSpec
) -> list[tuple[np.ndarray, int]]:
    """Materialize a split as (preprocessed image, label) pairs in index order."""
    out = []
    for s in index.split(split):
        out.append((load_sample(index, s, spec), s.class_index))
    return out
