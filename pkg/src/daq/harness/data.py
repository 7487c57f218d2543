"""Datasets: IDX (MNIST-format) files and a synthetic Gaussian-blobs fixture."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


class IdxMagicError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: truncated IDX file, expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class IdxCountMismatchError(DatasetError):
    pass


# IDX type codes -> big-endian numpy dtypes
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    """Images ``[N, C, H, W]`` in ``[0, 1]``, integer labels, and per-sample split tags."""

    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.images.shape[0]
        if n == 0:
            raise DatasetError("empty dataset")
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise DatasetError("labels and split tags must have one entry per image")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, tag: str) -> "Dataset":
        mask = self.split == tag
        if not mask.any():
            raise DatasetError(f"no samples tagged {tag!r}")
        return Dataset(self.images[mask], self.labels[mask], self.split[mask], self.num_classes)

    def has_split(self, tag: str) -> bool:
        return bool((self.split == tag).any())


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (optionally gzip-compressed) into an array."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise IdxMagicError(f"{path}: bad IDX magic {raw[:4].hex() or '<empty>'}")
    dtype = _IDX_TYPES[raw[2]]
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(path, head, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < expected:
        raise IdxTruncatedError(path, expected, len(raw))
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write ``array`` as IDX; handy for fixtures.  Only uint8 and int32 are supported."""
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int32): 0x0C}
    array = np.asarray(array)
    code = codes.get(array.dtype)
    if code is None:
        raise DatasetError(f"cannot write IDX dtype {array.dtype}")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(array.dtype.newbyteorder(">")).tobytes())


def load_idx(images_path, labels_path, *, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair.  ``uint8`` pixels are scaled by 1/255."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: labels must be 1-D, got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise DatasetError(f"{images_path}: expected 3-D or 4-D image array, got {images.ndim}-D")
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255.0
    else:
        images = images.astype(np.float64)
    labels = labels.astype(np.int64)
    classes = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(images, labels, np.full(labels.shape, split), classes)


def blob_centers(classes: int, dim: int, separation: float) -> np.ndarray:
    """Class ``k`` sits at ``+-separation/sqrt(2)`` along axis ``k mod dim`` (sign flips for ``k >= dim``).

    Any two centers are at least ``separation`` apart.
    """
    if classes > 2 * dim:
        raise DatasetError(f"at most 2*dim = {2 * dim} classes fit in {dim} dimensions")
    centers = np.zeros((classes, dim))
    for k in range(classes):
        centers[k, k % dim] = (1.0 if k < dim else -1.0) * separation / np.sqrt(2.0)
    return centers


def make_blobs(
    n: int,
    classes: int,
    dim: int,
    spread: float = 1.0,
    seed: int = 0,
    *,
    separation: float | None = None,
    val_fraction: float = 0.2,
) -> Dataset:
    """Gaussian clusters with labels assigned round-robin.

    ``separation`` defaults to ``10 * spread``.  Images come out as
    ``[n, dim, 1, 1]``; a deterministic ``val_fraction`` of samples is tagged
    ``"val"``.
    """
    if classes < 2:
        raise DatasetError("make_blobs needs at least 2 classes")
    if n < classes:
        raise DatasetError("make_blobs needs at least one sample per class")
    separation = 10.0 * spread if separation is None else separation
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    centers = blob_centers(classes, dim, separation)
    points = centers[labels] + rng.normal(0.0, spread, size=(n, dim))
    split = np.full(n, "train", dtype=object)
    n_val = int(round(val_fraction * n))
    if n_val:
        split[rng.permutation(n)[:n_val]] = "val"
    return Dataset(points[:, :, None, None], labels, split.astype(str), classes)
