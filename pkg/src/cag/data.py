"""Dataset loading: procedural synthetic shapes, CIFAR-10 binary batches,
and directories of image files.

All loaders return float32 images in [0, 1], channels-first, with labels
validated against the label space. Integer sources are divided by 255.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from .core import LabeledDataset, LabelSpace, RngHandle
from .errors import ConfigError, DatasetLoadError

SHAPE_NAMES = (
    "circle",
    "square",
    "triangle",
    "diamond",
    "plus",
    "ring",
    "hbar",
    "vbar",
    "checker",
    "xcross",
)

# Distinct unit-ish color directions, one per class.
_PALETTE = np.array(
    [
        [1.00, 0.10, 0.10],
        [0.10, 1.00, 0.10],
        [0.15, 0.25, 1.00],
        [1.00, 0.90, 0.10],
        [1.00, 0.15, 1.00],
        [0.10, 0.95, 0.95],
        [1.00, 0.55, 0.10],
        [0.55, 0.10, 1.00],
        [0.30, 0.65, 0.15],
        [0.90, 0.45, 0.60],
    ],
    dtype=np.float32,
)


@dataclass(frozen=True)
class DatasetSpec:
    """Descriptor for a dataset source.

    source: "synthetic" (procedural shapes), "cifar10" (binary batches under
    `path`), or "image-dir" (one subdirectory per class under `path`).
    For synthetic data, `contrast` scales the shape color offset, `noise` is
    the per-pixel Gaussian sigma, and `jitter` the max center displacement.
    """

    source: str = "synthetic"
    split: str = "train"
    count: int = 1000
    path: str | None = None
    image_size: int = 32
    num_classes: int = 10
    seed: int = 0
    contrast: float = 0.12
    noise: float = 0.015
    jitter: int = 5


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    box = np.maximum(np.abs(dx), np.abs(dy))
    dist = np.sqrt(dx * dx + dy * dy)
    if kind == "circle":
        return dist <= r
    if kind == "square":
        return box <= r * 0.85
    if kind == "triangle":
        return (dy <= r * 0.9) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r * 1.25
    if kind == "plus":
        return ((np.abs(dx) <= r * 0.35) | (np.abs(dy) <= r * 0.35)) & (box <= r)
    if kind == "ring":
        return (dist <= r) & (dist >= r * 0.55)
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.4) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.4) & (np.abs(dy) <= r)
    if kind == "checker":
        cell = max(r / 2.0, 1.0)
        par = (np.floor(dx / cell) + np.floor(dy / cell)) % 2 == 0
        return par & (box <= r)
    if kind == "xcross":
        return (np.abs(np.abs(dx) - np.abs(dy)) <= r * 0.3) & (box <= r)
    raise ConfigError(f"unknown shape kind: {kind}")


def synthetic_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Procedurally render `count` images of colored geometric shapes.

    Class k is shape SHAPE_NAMES[k] drawn in palette color k on a gray
    background. Deterministic given (seed, split): the val split uses a
    stream disjoint from train.
    """
    if spec.num_classes < 1 or spec.num_classes > len(SHAPE_NAMES):
        raise ConfigError(f"synthetic supports 1..{len(SHAPE_NAMES)} classes")
    if spec.count < 1:
        raise ConfigError("count must be positive")
    rng = RngHandle(spec.seed, f"synthetic/{spec.split}").numpy()
    size = spec.image_size
    labels = np.arange(spec.count) % spec.num_classes
    rng.shuffle(labels)
    images = np.empty((spec.count, 3, size, size), dtype=np.float32)
    half = size / 2.0
    for n, label in enumerate(labels):
        base = rng.uniform(0.42, 0.58)
        img = np.full((size, size, 3), base, dtype=np.float32)
        cx = half + rng.uniform(-spec.jitter, spec.jitter)
        cy = half + rng.uniform(-spec.jitter, spec.jitter)
        r = rng.uniform(0.26, 0.36) * size
        mask = _shape_mask(SHAPE_NAMES[label], size, cx, cy, r)
        img[mask] += spec.contrast * (_PALETTE[label] - 0.5) * 2.0
        img += rng.normal(0.0, spec.noise, img.shape).astype(np.float32)
        images[n] = np.clip(img, 0.0, 1.0).transpose(2, 0, 1)
    space = LabelSpace(spec.num_classes, SHAPE_NAMES[: spec.num_classes])
    return LabeledDataset(
        torch.from_numpy(images),
        torch.from_numpy(labels.astype(np.int64)),
        space,
        name="synthetic",
        split=spec.split,
    )


CIFAR10_NAMES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)
_CIFAR_RECORD = 3073  # 1 label byte + 3072 pixel bytes, CHW order


def read_cifar10_batch(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read one CIFAR-10 binary batch file bit-exactly.

    Returns (images uint8 (n, 3, 32, 32), labels uint8 (n,)).
    """
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except (OSError, FileNotFoundError) as exc:
        raise DatasetLoadError(f"cannot read CIFAR-10 batch {path}: {exc}") from exc
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise DatasetLoadError(
            f"corrupt CIFAR-10 batch {path}: {raw.size} bytes is not a multiple of {_CIFAR_RECORD}"
        )
    records = raw.reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0]
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def cifar10_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Load CIFAR-10 from binary batches under spec.path.

    split "train" reads data_batch_*.bin, split "val" reads test_batch.bin.
    """
    if not spec.path or not os.path.isdir(spec.path):
        raise DatasetLoadError(f"CIFAR-10 directory not found: {spec.path}")
    if spec.split == "train":
        names = sorted(f for f in os.listdir(spec.path) if f.startswith("data_batch"))
    else:
        names = [f for f in os.listdir(spec.path) if f == "test_batch.bin"]
    if not names:
        raise DatasetLoadError(f"no CIFAR-10 batches for split {spec.split!r} in {spec.path}")
    chunks = [read_cifar10_batch(os.path.join(spec.path, name)) for name in names]
    images = np.concatenate([c[0] for c in chunks])
    labels = np.concatenate([c[1] for c in chunks]).astype(np.int64)
    if spec.count:
        images, labels = images[: spec.count], labels[: spec.count]
    space = LabelSpace(10, CIFAR10_NAMES)
    return LabeledDataset(
        torch.from_numpy(images.astype(np.float32) / 255.0),
        torch.from_numpy(labels),
        space,
        name="cifar10",
        split=spec.split,
    )


def image_dir_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Load a directory-of-images tree: path/<class_name>/<image files>."""
    from PIL import Image

    if not spec.path or not os.path.isdir(spec.path):
        raise DatasetLoadError(f"image directory not found: {spec.path}")
    class_dirs = sorted(
        d for d in os.listdir(spec.path) if os.path.isdir(os.path.join(spec.path, d))
    )
    if not class_dirs:
        raise DatasetLoadError(f"no class subdirectories in {spec.path}")
    images, labels = [], []
    for label, cls in enumerate(class_dirs):
        cls_dir = os.path.join(spec.path, cls)
        for fname in sorted(os.listdir(cls_dir)):
            fpath = os.path.join(cls_dir, fname)
            try:
                with Image.open(fpath) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except Exception as exc:
                raise DatasetLoadError(f"cannot decode image {fpath}: {exc}") from exc
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise DatasetLoadError(f"no images found under {spec.path}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DatasetLoadError(f"inconsistent image shapes in {spec.path}: {sorted(shapes)}")
    space = LabelSpace(len(class_dirs), tuple(class_dirs))
    return LabeledDataset(
        torch.from_numpy(np.stack(images)),
        torch.tensor(labels, dtype=torch.int64),
        space,
        name=os.path.basename(os.path.normpath(spec.path)),
        split=spec.split,
    )


def load_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Dispatch on spec.source; see DatasetSpec."""
    if spec.source == "synthetic":
        return synthetic_dataset(spec)
    if spec.source == "cifar10":
        return cifar10_dataset(spec)
    if spec.source == "image-dir":
        return image_dir_dataset(spec)
    raise ConfigError(f"unknown dataset source: {spec.source!r}")
