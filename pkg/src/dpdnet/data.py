"""Datasets: CIFAR binary ingestion, a synthetic generator and augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptDataError, FormatError, ShapeError
from .tensor import DTYPE, make_rng

IMAGE_BYTES = 3 * 32 * 32

_CIFAR_LAYOUT = {
    # variant: (record size, label byte offset, class count, train files, test files, subdir)
    "cifar10": (1 + IMAGE_BYTES, 0, 10,
                [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"],
                "cifar-10-batches-bin"),
    "cifar100": (2 + IMAGE_BYTES, 1, 100, ["train.bin"], ["test.bin"], "cifar-100-binary"),
}


@dataclass
class Dataset:
    """Images in [0, 1] as (N, 3, H, W) plus integer labels.

    ``channel_mean`` / ``channel_std`` are what :meth:`normalize` uses; for
    CIFAR they come from the training split.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    channel_mean: np.ndarray
    channel_std: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.channel_mean = np.asarray(self.channel_mean, dtype=DTYPE)
        self.channel_std = np.asarray(self.channel_std, dtype=DTYPE)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"images must be (N, 3, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("need exactly one label per image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise CorruptDataError(f"labels must lie in [0, {self.class_count})")
        if self.channel_mean.shape != (3,) or self.channel_std.shape != (3,):
            raise ShapeError("channel statistics must have 3 entries")
        if np.any(self.channel_std <= 0):
            raise ValueError("channel_std must be positive")

    def __len__(self):
        return self.images.shape[0]

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.channel_mean[None, :, None, None]) / self.channel_std[None, :, None, None]

    def with_stats(self, mean, std) -> "Dataset":
        return Dataset(self.images, self.labels, self.class_count, mean, std)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def read_cifar_records(path, variant: str = "cifar10", dtype=DTYPE):
    """Parse one binary batch file into ``(images, labels)``.

    CIFAR-10 records are 1 label byte + 3072 pixel bytes; CIFAR-100 records
    carry a coarse and a fine label byte, and the fine label is returned.
    Pixels are channel-planar (R, G, B), each plane row-major 32x32.
    """
    record, label_at, classes = _CIFAR_LAYOUT[variant][:3]
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record:
        raise FormatError(
            f"{path}: size {raw.size} bytes is not a multiple of the {record}-byte {variant} record"
        )
    raw = raw.reshape(-1, record)
    labels = raw[:, label_at].astype(np.int64)
    if labels.size and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise CorruptDataError(f"{path}: record {bad} has label {labels[bad]} >= {classes}")
    images = raw[:, record - IMAGE_BYTES:].reshape(-1, 3, 32, 32).astype(dtype) / 255.0
    return images, labels


def _locate(root: Path, names, subdir):
    for base in (root, root / subdir):
        if all((base / n).is_file() for n in names):
            return [base / n for n in names]
    raise FileNotFoundError(f"{root}: expected {', '.join(names)} (optionally under {subdir}/)")


def load_cifar(path, variant: str = "cifar10", dtype=DTYPE) -> tuple[Dataset, Dataset]:
    """Load the train and test splits of CIFAR-10 or CIFAR-100 (binary version)."""
    if variant not in _CIFAR_LAYOUT:
        raise ValueError(f"variant must be one of {sorted(_CIFAR_LAYOUT)}, got {variant!r}")
    _, _, classes, train_files, test_files, subdir = _CIFAR_LAYOUT[variant]
    root = Path(path)
    splits = []
    for names in (train_files, test_files):
        parts = [read_cifar_records(f, variant, dtype) for f in _locate(root, names, subdir)]
        splits.append((np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])))
    mean, std = channel_stats(splits[0][0])
    return tuple(Dataset(x, y, classes, mean, std) for x, y in splits)


def synth_templates(classes: int, hw: int) -> np.ndarray:
    """Class patterns shared by every synthetic dataset: (classes, 3, hw, hw).

    Each class gets its own colour and an oriented stripe pattern; the
    patterns are drawn from a fixed generator so train and test sets made
    with different seeds share them.
    """
    rng = make_rng(0x5EED)
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    out = np.empty((classes, 3, hw, hw), DTYPE)
    for c in range(classes):
        colour = rng.uniform(0.25, 0.75, size=3)
        fx, fy = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        for ch in range(3):
            stripes = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase[ch])
            out[c, ch] = colour[ch] + 0.2 * stripes
    return np.clip(out, 0.0, 1.0)


def synth_dataset(rng, classes: int = 10, per_class: int = 20, hw: int = 32,
                  noise: float = 0.1) -> Dataset:
    """Template + Gaussian noise images, ``per_class`` of each label, shuffled."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1 or hw < 1 or noise < 0:
        raise ValueError("per_class and hw must be positive, noise non-negative")
    rng = make_rng(rng)
    templates = synth_templates(classes, hw)
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(labels.size)
    labels = labels[order]
    images = templates[labels] + noise * rng.standard_normal((labels.size, 3, hw, hw))
    images = np.clip(images, 0.0, 1.0)
    mean, std = channel_stats(images)
    return Dataset(images, labels, classes, mean, np.maximum(std, 1e-6))


def augment_batch(rng, batch: np.ndarray, pad: int = 4, offsets=None, flips=None) -> np.ndarray:
    """Zero-pad by ``pad``, take a random crop of the original size, mirror half.

    ``offsets`` ((N, 2) crop corners in ``0..2*pad``) and ``flips`` ((N,)
    booleans) override the random draws.
    """
    if batch.ndim != 4 or batch.shape[2:] != (32, 32):
        raise ShapeError(f"augmentation expects (N, C, 32, 32) batches, got {batch.shape}")
    n, _, h, w = batch.shape
    rng = make_rng(rng)
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    if flips is None:
        flips = rng.random(n) < 0.5
    offsets = np.asarray(offsets)
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
