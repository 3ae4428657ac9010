"""Synthetic blobs, the MNIST IDX format, and deterministic batching.

IDX layout (all integers big-endian uint32):

* images: magic 0x00000803, count, rows, cols, then count*rows*cols ubytes
* labels: magic 0x00000801, count, then count ubytes

Files ending in ``.gz`` are decompressed transparently.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, DataFormatError, TruncatedFileError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: str = ""
    split: str = "all"

    def __post_init__(self):
        if self.inputs.shape[0] == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per input row required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label outside class range")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite input")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, index, split=None):
        return Dataset(self.inputs[index], self.labels[index], self.num_classes,
                       self.source, split or self.split)

    def split_off(self, n_test):
        """``(train, test)`` with the last ``n_test`` rows as test."""
        n = len(self)
        if not 0 < n_test < n:
            raise ValueError(f"test split of {n_test} from {n} rows")
        return (self.subset(slice(0, n - n_test), "train"),
                self.subset(slice(n - n_test, n), "test"))

    def astype(self, dtype):
        return Dataset(self.inputs.astype(dtype), self.labels, self.num_classes,
                       self.source, self.split)


def blob_centers(classes, dim, separation):
    """Class c sits at ``+-separation`` on axis ``c mod dim`` (sign flips every ``dim``)."""
    if classes > 2 * dim:
        raise ValueError("at most 2*dim classes have distinct axis-aligned centers")
    centers = np.zeros((classes, dim))
    for c in range(classes):
        centers[c, c % dim] = separation if (c // dim) % 2 == 0 else -separation
    return centers


def synth_blobs(rng, n, dim, classes, separation, nonnegative=False):
    """Unit-variance Gaussian clusters; ``nonnegative`` clips features at 0."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if not separation > 0:
        raise ValueError("separation must be positive")
    labels = rng.integers(n, classes)
    x = blob_centers(classes, dim, separation)[labels] + rng.normal(n * dim).reshape(n, dim)
    if nonnegative:
        x = np.maximum(x, 0.0)
    src = f"synth_blobs(n={n},dim={dim},classes={classes},separation={separation}" \
          f"{',nonnegative' if nonnegative else ''},seed={rng.seed})"
    return Dataset(x, labels.astype(np.int64), classes, src)


def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: bad gzip stream ({exc})") from exc
    return raw


def _header(raw, path, magic, ndims):
    need = 4 * (1 + ndims)
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    fields = struct.unpack(f">{1 + ndims}I", raw[:need])
    if fields[0] != magic:
        raise BadMagicError(f"{path}: magic 0x{fields[0]:08x}, expected 0x{magic:08x}")
    return fields[1:], raw[need:]


def read_idx_images(path):
    raw = _read_bytes(path)
    (count, rows, cols), body = _header(raw, path, IMAGES_MAGIC, 3)
    need = count * rows * cols
    if len(body) < need:
        raise TruncatedFileError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(count, rows, cols)


def read_idx_labels(path):
    raw = _read_bytes(path)
    (count,), body = _header(raw, path, LABELS_MAGIC, 1)
    if len(body) < count:
        raise TruncatedFileError(f"{path}: expected {count} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count)


def load_idx(images_path, labels_path, num_classes=10):
    """Pixels scaled by 1/255 into ``[N, rows*cols]`` float64."""
    try:
        images = read_idx_images(images_path)
        labels = read_idx_labels(labels_path)
    except FileNotFoundError as exc:
        raise DataFormatError(f"missing IDX file: {exc.filename}") from exc
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes,
                   f"idx({Path(images_path).name},{Path(labels_path).name})")


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    blob = struct.pack(">4I", IMAGES_MAGIC, count, rows, cols) + images.tobytes()
    _write(path, blob)


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    _write(path, struct.pack(">2I", LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def _write(path, blob):
    path = Path(path)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def epoch_order(n, rng, shuffle):
    return rng.permutation(n) if shuffle else np.arange(n)


def batch_iter(dataset, batch_size, rng=None, shuffle=True, start=0):
    """Yield ``(x, y)`` over one epoch; the final partial batch is kept.

    ``start`` skips that many leading batches (used when resuming).
    """
    n = len(dataset)
    if not 0 < batch_size <= n:
        raise ValueError(f"batch_size {batch_size} not in [1, {n}]")
    if shuffle and rng is None:
        raise ValueError("shuffling needs an rng")
    order = epoch_order(n, rng, shuffle)
    for i in range(start * batch_size, n, batch_size):
        idx = order[i:i + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]


def batches_per_epoch(n, batch_size):
    return -(-n // batch_size)
