"""Dataset ingestion and augmentation.

Covers the CIFAR-10 binary batch format (1 label byte followed by 3072
pixel bytes per record, R/G/B planes row-major), the pad-crop-mirror
augmentation pipeline, and synthetic separable image sets used as fast
training oracles.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


class DatasetError(RuntimeError):
    """Raised when dataset files are missing, truncated, or malformed."""


@dataclass
class LabeledImageSet:
    """Images in [0,1] (pre-normalization) with integer labels.

    ``channel_means`` and ``channel_stds`` are the statistics used for
    normalization; for a test split they are copied from the training
    split.
    """

    images: np.ndarray
    labels: np.ndarray
    channel_means: np.ndarray
    channel_stds: np.ndarray

    def __len__(self):
        return self.images.shape[0]

    def subset(self, n):
        """First-n subset sharing this set's normalization statistics."""
        return LabeledImageSet(
            self.images[:n], self.labels[:n], self.channel_means, self.channel_stds
        )


def compute_channel_stats(images):
    means = images.mean(axis=(0, 2, 3))
    stds = images.std(axis=(0, 2, 3))
    return means, stds


def normalize(images, means, stds):
    """Standardize per channel using the given (training-split) statistics."""
    means = np.asarray(means, dtype=images.dtype)
    stds = np.asarray(stds, dtype=images.dtype)
    return (images - means[None, :, None, None]) / stds[None, :, None, None]


def _read_batch_file(path):
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    n, rem = divmod(raw.size, RECORD_BYTES)
    if rem != 0:
        raise DatasetError(
            f"{path}: truncated at record {n} (byte offset {n * RECORD_BYTES}, "
            f"file has {raw.size} bytes)"
        )
    if n == 0:
        raise DatasetError(f"{path}: no records")
    records = raw.reshape(n, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(n, *IMAGE_SHAPE)
    return labels, images


def load_cifar10(path, dtype=np.float32):
    """Load the binary-format CIFAR-10 batches from a directory.

    Returns (train, test) LabeledImageSets with pixels scaled to [0,1];
    both carry the training split's channel statistics.
    """

    def load_split(files):
        labels, images = [], []
        for name in files:
            fp = os.path.join(path, name)
            if not os.path.exists(fp):
                raise DatasetError(f"missing dataset file {fp}")
            lab, img = _read_batch_file(fp)
            labels.append(lab)
            images.append(img)
        images = np.concatenate(images).astype(dtype) / 255.0
        return np.concatenate(labels), images

    train_labels, train_images = load_split(TRAIN_FILES)
    test_labels, test_images = load_split(TEST_FILES)
    means, stds = compute_channel_stats(train_images)
    train = LabeledImageSet(train_images, train_labels, means, stds)
    test = LabeledImageSet(test_images, test_labels, means, stds)
    return train, test


def shift_crop(images, oy, ox, pad=4):
    """Zero-pad by ``pad`` and crop back to the original size at (oy, ox).

    Offsets index into the padded image, so (pad, pad) recovers the input
    exactly and (0, 0) shifts content down-right leaving zeros at the top
    and left.
    """
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = images
    return padded[:, :, oy : oy + h, ox : ox + w].copy()


def random_crop_flip(images, rng, pad=4):
    """Per-image random crop from the zero-padded frame, then a coin-flip
    horizontal mirror."""
    n, c, h, w = images.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = images
    out = np.empty_like(images)
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, :, oy : oy + h, ox : ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment(images, rng, means, stds, pad=4):
    """Training pipeline: pad, random crop, random mirror, then normalize."""
    return normalize(random_crop_flip(images, rng, pad), means, stds)


def synthetic_set(num_classes, n, seed, dtype=np.float32, noise=0.04):
    """Class-conditional Gaussian blobs rendered as 3x32x32 images.

    Each class gets a fixed random template in [0.25, 0.75]; samples add
    small Gaussian noise and clip to [0,1]. Templates are far apart
    relative to the noise, so the set is linearly separable at the pixel
    level. Deterministic given the seed; labels cycle through the classes
    so every class appears when n >= num_classes.
    """
    if n < num_classes:
        raise ValueError(f"need at least one sample per class ({n} < {num_classes})")
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.25, 0.75, size=(num_classes, *IMAGE_SHAPE))
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = templates[labels] + noise * rng.standard_normal((n, *IMAGE_SHAPE))
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    means, stds = compute_channel_stats(images)
    return LabeledImageSet(images, labels, means, stds)
