"""Dataset ingestion and victim sampling.

Supports the big-endian IDX format used by MNIST plus a synthetic
class-conditioned blob generator so every test runs without downloads.
The dataset directory can be pointed at via the GRADLEAK_DATA environment
variable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncation, or count mismatch."""


@dataclass
class Dataset:
    images: np.ndarray         # (N, C, H, W) floats in [0, 1]
    labels: np.ndarray         # (N,) class indices
    num_classes: int
    mean: np.ndarray           # per-channel
    std: np.ndarray            # per-channel

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray         # (B, C, H, W)
    labels: np.ndarray         # (B,)


def _with_stats(images: np.ndarray, labels: np.ndarray, num_classes: int) -> Dataset:
    if images.size:
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
        std = np.where(std < 1e-6, 1.0, std)
    else:
        channels = images.shape[1] if images.ndim == 4 else 1
        mean = np.zeros(channels)
        std = np.ones(channels)
    return Dataset(images, labels, num_classes, mean, std)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IdxFormatError(f"truncated IDX file while reading {what}")
    return data


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Parse an MNIST-style IDX image/label file pair."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x}")
        raw = _read_exact(fh, count * rows * cols, "image payload")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = images.astype(np.float64) / 255.0

    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x}")
        raw = _read_exact(fh, label_count, "label payload")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise IdxFormatError(f"image count {count} != label count {label_count}")
    if labels.size and labels.max() >= num_classes:
        raise IdxFormatError(f"label {labels.max()} outside {num_classes} classes")
    return _with_stats(images, labels, num_classes)


def synthetic(num_classes: int = 10, n: int = 512, h: int = 28, w: int = 28,
              seed: int = 0) -> Dataset:
    """Class-conditioned Gaussian blobs: one blob location per class plus noise."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    angles = 2.0 * np.pi * np.arange(num_classes) / max(num_classes, 1)
    cy = h / 2.0 + 0.28 * h * np.sin(angles)
    cx = w / 2.0 + 0.28 * w * np.cos(angles)
    sigma = max(h, w) / 9.0
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.empty((n, 1, h, w))
    jitter = rng.normal(0.0, 0.8, size=(n, 2))
    noise = rng.normal(0.0, 0.06, size=(n, h, w))
    for k in range(n):
        c = labels[k]
        d2 = (yy - (cy[c] + jitter[k, 0])) ** 2 + (xx - (cx[c] + jitter[k, 1])) ** 2
        images[k, 0] = np.exp(-d2 / (2.0 * sigma * sigma)) + noise[k]
    np.clip(images, 0.0, 1.0, out=images)
    return _with_stats(images, labels, num_classes)


def sample_victims(ds: Dataset, count: int, batch_size: int = 1,
                   distinct_labels: bool = False, seed: int = 0) -> list[Batch]:
    """Seeded victim batches; optionally pairwise-distinct labels per batch."""
    if count % batch_size != 0:
        raise ValueError("victim count must be a multiple of the batch size")
    if distinct_labels and batch_size > ds.num_classes:
        raise ValueError("cannot draw more distinct labels than classes")
    rng = np.random.default_rng(seed)
    num_batches = count // batch_size
    batches = []
    if not distinct_labels:
        picks = rng.choice(len(ds), size=count, replace=False)
        for b in range(num_batches):
            idx = np.sort(picks[b * batch_size:(b + 1) * batch_size])
            batches.append(Batch(idx, ds.images[idx], ds.labels[idx]))
        return batches

    by_label: dict[int, list[int]] = {}
    order = rng.permutation(len(ds))
    for i in order:
        by_label.setdefault(int(ds.labels[i]), []).append(int(i))
    classes = sorted(by_label)
    for b in range(num_batches):
        chosen = rng.choice(classes, size=batch_size, replace=False)
        idx = []
        for c in sorted(int(c) for c in chosen):
            pool = by_label[c]
            if not pool:
                raise ValueError(f"class {c} exhausted while sampling victims")
            idx.append(pool.pop())
        idx = np.array(idx)
        batches.append(Batch(idx, ds.images[idx], ds.labels[idx]))
    return batches


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0.0):
        raise ValueError("zero standard deviation")
    return (x - mean[:, None, None]) / std[:, None, None]


def denormalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    out = x * np.asarray(std)[:, None, None] + np.asarray(mean)[:, None, None]
    return np.clip(out, 0.0, 1.0)
