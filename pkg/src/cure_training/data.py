"""
Datasets: MNIST in the IDX container and a synthetic blob set for fast runs.

IDX layout (big-endian):

    images: u32 magic 0x00000803 | u32 count | u32 rows | u32 cols | u8 pixels
    labels: u32 magic 0x00000801 | u32 count | u8 labels

Files may be gzip-compressed; compression is detected from the content.
"""
from __future__ import annotations
import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    IdxCountMismatchError,
    IdxDimensionError,
    IdxMagicError,
    IdxTruncatedError,
)
from .logging_setup import get_logger

logger = get_logger("cure_training.data")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_SIDE = 28
_GZIP_MAGIC = b"\x1f\x8b"

PathLike = Union[str, os.PathLike]


@dataclass
class Dataset:
    images: np.ndarray   # (N, *input_shape), values in [0, 1]
    labels: np.ndarray   # (N,)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.images.shape[0] == 0:
            raise ValueError("dataset is empty")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, n: Optional[int]) -> "Dataset":
        """First ``n`` samples in canonical order (all when n is None or 0)."""
        if not n or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)

    def batches(self, batch_size: int, seed: Optional[int] = None) -> Iterator[np.ndarray]:
        """Index arrays covering the set once; shuffled when a seed is given."""
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        order = np.arange(len(self)) if seed is None else np.random.default_rng(seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]

    def fingerprint(self) -> str:
        """sha256 over shapes, images and labels."""
        h = hashlib.sha256()
        h.update(repr((self.images.shape, self.num_classes)).encode("utf-8"))
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


# =========================
# IDX
# =========================

def _read_maybe_gzip(path: PathLike) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == _GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except EOFError as e:
            raise IdxTruncatedError(f"{path}: compressed stream ends early") from e
    return raw


def _parse_images(blob: bytes, path: PathLike) -> np.ndarray:
    if len(blob) < 16:
        raise IdxTruncatedError(f"{path}: image header needs 16 bytes, file has {len(blob)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IMAGES_MAGIC:
        raise IdxMagicError(f"{path}: image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    if (rows, cols) != (MNIST_SIDE, MNIST_SIDE):
        raise IdxDimensionError(f"{path}: images are {rows}x{cols}, expected {MNIST_SIDE}x{MNIST_SIDE}")
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise IdxTruncatedError(f"{path}: {count} images need {need} bytes, file has {len(blob)}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0


def _parse_labels(blob: bytes, path: PathLike) -> np.ndarray:
    if len(blob) < 8:
        raise IdxTruncatedError(f"{path}: label header needs 8 bytes, file has {len(blob)}")
    magic, count = struct.unpack_from(">II", blob, 0)
    if magic != LABELS_MAGIC:
        raise IdxMagicError(f"{path}: label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(blob) < 8 + count:
        raise IdxTruncatedError(f"{path}: {count} labels need {8 + count} bytes, file has {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_mnist_idx(
    images_path: PathLike,
    labels_path: PathLike,
    split: str = "train",
    limit: Optional[int] = None,
) -> Dataset:
    images = _parse_images(_read_maybe_gzip(images_path), images_path)
    labels = _parse_labels(_read_maybe_gzip(labels_path), labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {images.shape[0]} images, {labels_path} holds {labels.shape[0]} labels"
        )
    data = Dataset(images, labels, num_classes=10, split=split).subset(limit)
    logger.info("Loaded %d %s samples from %s", len(data), split, images_path)
    return data


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist_files(data_dir: PathLike, split: str) -> Tuple[str, str]:
    """Standard MNIST file names in ``data_dir``, with or without .gz."""
    found = []
    for stem in MNIST_FILES[split]:
        for candidate in (stem, stem + ".gz"):
            path = os.path.join(os.fspath(data_dir), candidate)
            if os.path.exists(path):
                found.append(path)
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")
    return found[0], found[1]


# =========================
# Synthetic
# =========================

def make_synthetic(
    n: int,
    k: int,
    input_shape: Sequence[int] = (1, 8, 8),
    seed: int = 0,
    noise: float = 0.05,
    split: str = "train",
) -> Dataset:
    """
    k Gaussian blobs rendered as images and clamped to [0, 1]. Labels are
    balanced within one sample per class. Blob centers depend only on
    (k, input_shape, seed), so train and test sets drawn with different
    ``split`` names share them.
    """
    if n < 1 or k < 2:
        raise ValueError(f"need n >= 1 and k >= 2, got n={n} k={k}")
    shape = tuple(int(d) for d in input_shape)
    centers = np.random.default_rng(seed).uniform(0.2, 0.8, size=(k,) + shape)
    rng = np.random.default_rng([seed, n, len(split)] + [ord(c) for c in split])
    labels = rng.permutation(np.arange(n) % k)
    images = np.clip(centers[labels] + noise * rng.standard_normal((n,) + shape), 0.0, 1.0)
    return Dataset(images, labels, num_classes=k, split=split)
