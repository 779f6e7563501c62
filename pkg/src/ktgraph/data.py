"""Dataset ingestion, the class-balanced half split, augmentation, and a
procedural synthetic dataset that keeps experiments desk-sized.

Images are held in memory as float32 arrays of shape [N, 3, H, W] in [0, 1];
batches are converted to torch tensors on the fly.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from torch import Tensor


class SplitError(ValueError):
    """Raised when a dataset cannot be split as requested."""


class IngestionError(ValueError):
    """Raised when a dataset source is missing or malformed."""


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset comes from: a generator recipe or a directory tree."""

    name: str = "synthetic"
    num_classes: int = 10
    per_class: int = 200
    test_per_class: int = 50
    image_size: int = 32
    seed: int = 0
    noise: float = 0.1
    color_jitter: float = 0.0
    distractors: int = 0
    label_noise: float = 0.0  # train split only
    source: Optional[str] = None  # directory root for name="folder"


@dataclass
class ImageDataset:
    name: str
    images: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree on sample count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices: np.ndarray, suffix: str = "") -> "ImageDataset":
        return ImageDataset(
            self.name + suffix,
            self.images[indices],
            self.labels[indices],
            self.num_classes,
        )


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

_NUM_SHAPES = 10


def _shape_mask(kind: int, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    ay, ax = np.abs(dy), np.abs(dx)
    if kind == 0:  # filled square
        return (ay <= r) & (ax <= r)
    if kind == 1:  # disk
        return dy * dy + dx * dx <= r * r
    if kind == 2:  # plus
        t = max(1, r // 3)
        return ((ax <= t) & (ay <= r)) | ((ay <= t) & (ax <= r))
    if kind == 3:  # diagonal cross
        t = max(1, r // 3)
        return ((np.abs(dy - dx) <= t) | (np.abs(dy + dx) <= t)) & (ay <= r) & (ax <= r)
    if kind == 4:  # ring
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (max(1, r - max(2, r // 2))) ** 2)
    if kind == 5:  # horizontal stripes
        return (ay <= r) & (ax <= r) & (yy % 4 < 2)
    if kind == 6:  # vertical stripes
        return (ay <= r) & (ax <= r) & (xx % 4 < 2)
    if kind == 7:  # lower-left triangle wedge
        return (ay <= r) & (ax <= r) & (dx <= dy)
    if kind == 8:  # checkerboard patch
        return (ay <= r) & (ax <= r) & ((yy // 3 + xx // 3) % 2 == 0)
    if kind == 9:  # diamond
        return ay + ax <= r
    raise ValueError(f"unknown shape kind {kind}")


def _render(
    rng: np.random.Generator, spec: DatasetSpec, cls: int
) -> np.ndarray:
    size = spec.image_size
    img = np.zeros((3, size, size), dtype=np.float32)

    def draw(kind: int, radius_lo: int, radius_hi: int, hue: float):
        r = int(rng.integers(radius_lo, radius_hi + 1))
        cy = int(rng.integers(r, size - r))
        cx = int(rng.integers(r, size - r))
        mask = _shape_mask(kind, size, cy, cx, r)
        sat = 0.75
        val = float(rng.uniform(0.6, 1.0))
        rgb = colorsys.hsv_to_rgb(hue % 1.0, sat, val)
        for ch in range(3):
            img[ch][mask] = rgb[ch]

    hue = cls / spec.num_classes + float(
        rng.uniform(-spec.color_jitter, spec.color_jitter)
    )
    if spec.color_jitter >= 0.5:
        # Fully jittered hue carries no class signal; draw it uniformly.
        hue = float(rng.uniform(0.0, 1.0))
    for _ in range(spec.distractors):
        d_kind = int(rng.integers(_NUM_SHAPES))
        d_hue = float(rng.uniform(0.0, 1.0))
        draw(d_kind, max(2, size // 12), max(3, size // 8), d_hue)
    draw(cls % _NUM_SHAPES, size // 6, size // 4, hue)

    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(
    num_classes: int,
    per_class: int,
    image_size: int = 32,
    seed: int = 0,
    noise: float = 0.1,
    color_jitter: float = 0.0,
    distractors: int = 0,
    label_noise: float = 0.0,
) -> ImageDataset:
    """Procedurally generated, class-separable images (one shape per class).

    Bitwise deterministic for a given argument tuple. Difficulty is tuned with
    ``noise`` (additive Gaussian), ``color_jitter`` (>= 0.5 removes the color
    shortcut entirely), ``distractors`` (small off-class shapes), and
    ``label_noise`` (fraction of labels flipped to a random other class).
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    spec = DatasetSpec(
        name="synthetic",
        num_classes=num_classes,
        per_class=per_class,
        image_size=image_size,
        seed=seed,
        noise=noise,
        color_jitter=color_jitter,
        distractors=distractors,
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, num_classes, per_class]))
    images = np.empty((num_classes * per_class, 3, image_size, image_size), np.float32)
    labels = np.empty(num_classes * per_class, np.int64)
    i = 0
    for cls in range(num_classes):
        for _ in range(per_class):
            images[i] = _render(rng, spec, cls)
            labels[i] = cls
            i += 1
    if label_noise > 0.0:
        flip = rng.random(len(labels)) < label_noise
        shift = rng.integers(1, num_classes, size=len(labels))
        labels[flip] = (labels[flip] + shift[flip]) % num_classes
    return ImageDataset("synthetic", images, labels, num_classes)


# ---------------------------------------------------------------------------
# Loading and splitting
# ---------------------------------------------------------------------------

def load_dataset(spec: DatasetSpec, split: str = "train") -> ImageDataset:
    """Materialize one split of a dataset spec, with deterministic ordering."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if spec.name == "synthetic":
        per = spec.per_class if split == "train" else spec.test_per_class
        # Distinct derived seed per split, stable across reloads. Label noise
        # only corrupts the training split; evaluation labels stay clean.
        seed = spec.seed if split == "train" else spec.seed + 7919
        return synthetic_dataset(
            spec.num_classes,
            per,
            spec.image_size,
            seed=seed,
            noise=spec.noise,
            color_jitter=spec.color_jitter,
            distractors=spec.distractors,
            label_noise=spec.label_noise if split == "train" else 0.0,
        )
    if spec.name == "folder":
        return _load_folder(spec, split)
    raise IngestionError(f"unknown dataset name {spec.name!r}")


def _load_folder(spec: DatasetSpec, split: str) -> ImageDataset:
    if not spec.source:
        raise IngestionError("folder datasets need a source directory")
    root = Path(spec.source) / split
    if not root.is_dir():
        raise IngestionError(f"dataset split directory not found: {root}")
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover
        raise IngestionError("folder datasets require Pillow") from e
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((spec.image_size, spec.image_size))
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except OSError as e:
                raise IngestionError(f"cannot read image {f}: {e}") from e
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise IngestionError(f"no images found under {root}")
    return ImageDataset(
        "folder",
        np.stack(images),
        np.asarray(labels, np.int64),
        len(class_dirs),
    )


def balanced_half_split(
    dataset: ImageDataset, seed: int = 0
) -> tuple[ImageDataset, ImageDataset]:
    """Per-class 50/50 partition into (explore-train, explore-val).

    Odd class counts put the extra sample on the explore-train side. Sides
    are disjoint and jointly exhaustive; per-class counts differ by at most 1.
    """
    rng = np.random.default_rng(seed)
    first, second = [], []
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) < 2:
            raise SplitError(
                f"class {cls} has {len(idx)} sample(s); need at least 2 to split"
            )
        idx = rng.permutation(idx)
        take = (len(idx) + 1) // 2
        first.append(idx[:take])
        second.append(idx[take:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return dataset.subset(a, "/explore-train"), dataset.subset(b, "/explore-val")


# ---------------------------------------------------------------------------
# Batching and augmentation
# ---------------------------------------------------------------------------

def _augment(
    images: np.ndarray, rng: np.random.Generator, pad: int = 4
) -> np.ndarray:
    """Random shift crop (zero padding) and horizontal flip, per sample."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offs[i]
        crop = padded[i, :, oy : oy + h, ox : ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


class BatchStream:
    """Deterministic mini-batch iterator over an in-memory dataset.

    Epoch ``e`` reshuffles and re-augments with an RNG derived from
    ``(seed, e)``, so two streams built identically replay identical batches.
    """

    def __init__(
        self,
        dataset: ImageDataset,
        batch_size: int,
        seed: int = 0,
        shuffle: bool = True,
        augment: bool = False,
    ):
        if len(dataset) == 0:
            raise ValueError("cannot stream an empty dataset")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = seed
        self.shuffle = shuffle
        self.augment = augment

    @property
    def steps_per_epoch(self) -> int:
        n = len(self.dataset)
        return (n + self.batch_size - 1) // self.batch_size

    def epoch(self, epoch_index: int = 0) -> Iterator[tuple[Tensor, Tensor]]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch_index]))
        n = len(self.dataset)
        order = rng.permutation(n) if self.shuffle else np.arange(n)
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            images = self.dataset.images[idx]
            if self.augment:
                images = _augment(images, rng)
            yield (
                torch.from_numpy(np.ascontiguousarray(images)),
                torch.from_numpy(self.dataset.labels[idx]),
            )
