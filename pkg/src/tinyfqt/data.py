"""IDX dataset loading, deterministic splits and synthetic data."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .qcore import QTensor, QuantParams

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
INPUT_QPARAMS = QuantParams(1.0 / 255.0, 0)


class IDXError(ValueError):
    pass


class MagicError(IDXError):
    pass


class TruncatedError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


class LabelRangeError(IDXError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be a uint8 array of shape (N, C, H, W)")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.labels) != len(self.images):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise LabelRangeError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    def __iter__(self) -> Iterator:
        """Yields one (QTensor, label) pair at a time."""
        for i in range(len(self)):
            yield to_input_qtensor(self.images[i]), int(self.labels[i])


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedError(f"{path}: expected at least 4 header bytes, got {len(raw)}")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise MagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(f"{path}: expected {header} header bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise TruncatedError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise IDXError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    return np.frombuffer(raw, np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Load an images/labels IDX pair (optionally gzip-compressed)."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= class_count:
        raise LabelRangeError(f"label {int(labels.max())} out of range for {class_count} classes")
    return Dataset(images[:, None].copy(), labels.astype(np.int64), class_count)


def write_idx(path, array: np.ndarray, compress: bool = None) -> None:
    """Write a uint8 array (3-D images or 1-D labels) as IDX."""
    array = np.ascontiguousarray(array, np.uint8)
    magic = 0x00000800 | array.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    path.write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


def to_input_qtensor(sample: np.ndarray) -> QTensor:
    """Pixels are taken as the quantized form of [0, 1]: scale 1/255, zero point 0."""
    return QTensor(np.asarray(sample, np.uint8), INPUT_QPARAMS)


def split_shuffle(ds: Dataset, fraction: float, seed: int = 0) -> tuple:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(fraction * len(ds)))
    return ds.subset(perm[:cut]), ds.subset(perm[cut:])


def synthetic_blobs(n: int, classes: int = 2, seed: int = 0, shape: tuple = (1, 4, 4), spread: float = 20.0) -> Dataset:
    """Well separated Gaussian clusters rendered as uint8 images."""
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    centers = rng.uniform(40, 215, size=(classes, dim))
    labels = rng.integers(0, classes, size=n)
    x = centers[labels] + rng.normal(0.0, spread, size=(n, dim))
    images = np.clip(np.rint(x), 0, 255).astype(np.uint8).reshape((n,) + tuple(shape))
    return Dataset(images, labels.astype(np.int64), classes)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Per-epoch sample order, reproducible from (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def stream(ds: Dataset, order) -> Iterator:
    for i in order:
        yield to_input_qtensor(ds.images[i]), int(ds.labels[i])
