"""STL-10 binary ingestion, crop augmentation and foreground-confidence maps."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from sklearn.model_selection import train_test_split

logger = logging.getLogger(__name__)

STL10_SIZE = 96
STL10_CHANNELS = 3
RECORD_BYTES = STL10_CHANNELS * STL10_SIZE * STL10_SIZE
SPLITS = ("unlabeled", "train", "test")
STL10_CLASSES = (
    "airplane", "bird", "car", "cat", "deer",
    "dog", "horse", "monkey", "ship", "truck",
)

SEGMENTABLE_CONFIDENCE = 0.8
SEGMENTABLE_MIN_PIXELS = 100


class DataError(Exception):
    """Dataset files are missing, truncated or inconsistent."""


@dataclass(frozen=True)
class DatasetSpec:
    root_path: str
    split: str = "unlabeled"
    with_labels: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "unlabeled" and self.with_labels:
            raise ValueError("the unlabeled split has no labels")

    @property
    def image_file(self) -> Path:
        return Path(self.root_path) / f"{self.split}_X.bin"

    @property
    def label_file(self) -> Path:
        return Path(self.root_path) / f"{self.split}_y.bin"


class STL10Split:
    """Images of one split as a lazily decoded uint8 ``N x 96 x 96 x 3`` view.

    Indexing returns ``(float32 image in [0, 1], label or None)``.
    """

    def __init__(self, images: np.ndarray, labels: Optional[np.ndarray] = None):
        if labels is not None and len(labels) != len(images):
            raise DataError(f"{len(labels)} labels for {len(images)} images")
        self.images = images
        self.labels = labels

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        img = np.asarray(self.images[i], dtype=np.float32) / 255.0
        return img, (None if self.labels is None else int(self.labels[i]))

    def array(self, indices=None) -> np.ndarray:
        """Float32 copy of the selected images."""
        sel = self.images if indices is None else self.images[np.asarray(indices)]
        return np.asarray(sel, dtype=np.float32) / 255.0

    def subset(self, indices) -> "STL10Split":
        idx = np.asarray(indices)
        labels = None if self.labels is None else self.labels[idx]
        return STL10Split(np.asarray(self.images[idx]), labels)


def decode_records(raw: np.ndarray) -> np.ndarray:
    """Raw STL-10 bytes to ``N x H x W x C``; planes are stored column-major."""
    return raw.reshape(-1, STL10_CHANNELS, STL10_SIZE, STL10_SIZE).transpose(0, 3, 2, 1)


def encode_records(images: np.ndarray) -> np.ndarray:
    """Inverse of :func:`decode_records`; returns a flat uint8 array."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (STL10_SIZE, STL10_SIZE, STL10_CHANNELS):
        raise ValueError(f"expected uint8 N x 96 x 96 x 3, got {images.dtype} {images.shape}")
    return np.ascontiguousarray(images.transpose(0, 3, 2, 1)).reshape(-1)


def load_stl10(spec: DatasetSpec, mmap: bool = True) -> STL10Split:
    path = spec.image_file
    if not path.exists():
        raise FileNotFoundError(f"missing STL-10 file {path}")
    size = path.stat().st_size
    if size % RECORD_BYTES:
        raise DataError(f"{path} is truncated: {size} bytes is not a multiple of {RECORD_BYTES}")
    if mmap:
        raw = np.memmap(path, dtype=np.uint8, mode="r")
    else:
        raw = np.fromfile(path, dtype=np.uint8)
    images = decode_records(raw)
    labels = None
    if spec.with_labels:
        if not spec.label_file.exists():
            raise FileNotFoundError(f"missing STL-10 label file {spec.label_file}")
        y = np.fromfile(spec.label_file, dtype=np.uint8)
        if len(y) != len(images):
            raise DataError(f"{len(y)} labels for {len(images)} images in split {spec.split!r}")
        if len(y) and (y.min() < 1 or y.max() > 10):
            raise DataError("STL-10 labels must lie in 1..10")
        labels = y.astype(np.int64) - 1
    logger.info("loaded %d images from %s", len(images), path)
    return STL10Split(images, labels)


def write_stl10(root, split: str, images: np.ndarray, labels: Optional[np.ndarray] = None):
    """Write images (uint8, HWC) and 0-based labels in STL-10 binary layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    encode_records(images).tofile(root / f"{split}_X.bin")
    if labels is not None:
        (np.asarray(labels, dtype=np.uint8) + 1).tofile(root / f"{split}_y.bin")


def split_train_val(labels: Sequence[int], seed: int = 0, val_size: int = 1000, expected: Optional[int] = 5000):
    """Class-stratified train/validation split of the labeled train split.

    Returns sorted index arrays ``(train_idx, val_idx)``.
    """
    labels = np.asarray(labels)
    if expected is not None and len(labels) != expected:
        raise ValueError(f"expected {expected} labeled inputs, got {len(labels)}")
    idx = np.arange(len(labels))
    train_idx, val_idx = train_test_split(idx, test_size=val_size, stratify=labels, random_state=seed)
    return np.sort(train_idx), np.sort(val_idx)


def sample_crop_box(height: int, width: int, scale=(0.08, 1.0), ratio=(0.75, 1.33), rng=None, attempts: int = 10):
    """Draw ``(top, left, h, w)`` with area fraction in ``scale`` and aspect ``w/h`` in ``ratio``.

    Aspect is drawn log-uniformly. Boxes whose integer size falls outside the
    ranges are rejected; after ``attempts`` failures a centered box of the
    largest in-range aspect is used.
    """
    if scale[0] > scale[1] or ratio[0] > ratio[1]:
        raise ValueError(f"degenerate crop ranges scale={scale} ratio={ratio}")
    if scale[0] <= 0 or ratio[0] <= 0:
        raise ValueError("crop ranges must be positive")
    rng = np.random.default_rng() if rng is None else rng
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if not (0 < w <= width and 0 < h <= height):
            continue
        if not (scale[0] <= h * w / area <= scale[1] and ratio[0] <= w / h <= ratio[1]):
            continue
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        return top, left, h, w
    return _center_box(height, width, scale, ratio)


def _center_box(height, width, scale, ratio):
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        h, w = height, width
    h, w = max(1, min(h, height)), max(1, min(w, width))
    return (height - h) // 2, (width - w) // 2, h, w


def resize_bilinear(img: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` array (half-pixel centers, no antialiasing)."""
    if img.shape[:2] == tuple(size):
        return img.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def random_resized_crop(img, scale=(0.08, 1.0), ratio=(0.75, 1.33), out_size=(96, 96), rng=None, return_box=False):
    """Crop a random box and resize it back to ``out_size``.

    Extra channels (e.g. a stacked confidence map) are cropped with the same box.
    """
    img = np.asarray(img, dtype=np.float32)
    top, left, h, w = sample_crop_box(img.shape[0], img.shape[1], scale, ratio, rng)
    out = np.clip(resize_bilinear(img[top:top + h, left:left + w], out_size), 0.0, 1.0)
    if return_box:
        return out, (top, left, h, w)
    return out


@dataclass(frozen=True)
class SegmentationConfidenceMap:
    values: np.ndarray
    image_index: int

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class SplitIndex:
    kept_indices: Tuple[int, ...]
    provenance: str
    total: int = 0

    @property
    def discarded_fraction(self) -> float:
        return 0.0 if not self.total else 1.0 - len(self.kept_indices) / self.total

    def save(self, path):
        lines = [f"# {self.provenance}", f"# total={self.total} kept={len(self.kept_indices)}"]
        lines += [str(i) for i in self.kept_indices]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SplitIndex":
        provenance, total, kept = "", 0, []
        for line in Path(path).read_text().splitlines():
            if line.startswith("# total="):
                total = int(line.split()[1].split("=")[1])
            elif line.startswith("#"):
                provenance = provenance or line[1:].strip()
            elif line.strip():
                kept.append(int(line))
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise DataError(f"{path}: indices are not strictly increasing")
        return cls(tuple(kept), provenance, total)


def confidence_path(directory, index: int) -> Path:
    return Path(directory) / f"{index}.png"


def write_confidence_mask(directory, index: int, values):
    """Store a confidence map in [0, 1] as an 8-bit grayscale PNG."""
    arr = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(directory).mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(confidence_path(directory, index))


def read_confidence_mask(directory, index: int, shape=(STL10_SIZE, STL10_SIZE)) -> SegmentationConfidenceMap:
    path = confidence_path(directory, index)
    if not path.exists():
        raise FileNotFoundError(f"missing confidence mask for index {index}: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    if arr.shape != tuple(shape):
        raise DataError(f"{path} has shape {arr.shape}, expected {tuple(shape)}")
    return SegmentationConfidenceMap(arr / np.float32(255.0), index)


def load_confidence_masks(directory, indices: Optional[Sequence[int]] = None, shape=(STL10_SIZE, STL10_SIZE)):
    """Read ``{index}.png`` maps; by default every consecutive index from 0 present."""
    if indices is None:
        found = sorted(int(p.stem) for p in Path(directory).glob("*.png") if p.stem.isdigit())
        if found and found != list(range(len(found))):
            missing = sorted(set(range(found[-1] + 1)) - set(found))
            raise FileNotFoundError(f"confidence masks missing for indices {missing[:10]}")
        indices = found
    return [read_confidence_mask(directory, i, shape) for i in indices]


def confidence_array(masks: Sequence[SegmentationConfidenceMap]) -> np.ndarray:
    return np.stack([m.values for m in masks]).astype(np.float32)


def is_segmentable(values, threshold: float = SEGMENTABLE_CONFIDENCE, min_pixels: int = SEGMENTABLE_MIN_PIXELS) -> bool:
    # tolerance absorbs float32 rounding of 8-bit levels such as 204/255
    v = np.asarray(values, dtype=np.float64)
    return int((v >= threshold - 1e-6).sum()) >= min_pixels


def filter_segmentable(masks, threshold: float = SEGMENTABLE_CONFIDENCE, min_pixels: int = SEGMENTABLE_MIN_PIXELS) -> SplitIndex:
    """Keep images with at least ``min_pixels`` pixels at confidence >= ``threshold``.

    Kept indices come out in input order.
    """
    kept = []
    total = 0
    for pos, m in enumerate(masks):
        total += 1
        values = m.values if isinstance(m, SegmentationConfidenceMap) else m
        index = m.image_index if isinstance(m, SegmentationConfidenceMap) else pos
        if is_segmentable(values, threshold, min_pixels):
            kept.append(int(index))
    provenance = f"confidence >= {threshold} on >= {min_pixels} pixels"
    split = SplitIndex(tuple(kept), provenance, total)
    logger.info("segmentable filter kept %d/%d (discarded %.1f%%)", len(kept), total, 100 * split.discarded_fraction)
    return split


def stl10_available(root) -> bool:
    return root is not None and os.path.exists(Path(root) / "train_X.bin")
