"""MNIST IDX ingestion, binarization, and the training data generators."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "DISTILKIT_DATA_DIR"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxParseError(Exception):
    """Malformed IDX file; the message names the failing byte offset."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, d) float64 in [0, 1]
    labels: np.ndarray | None = None  # (N,) int64 in 0..9

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2:
            raise ValueError("images must be (N, d)")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("label count must match image count")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
                raise ValueError("labels must lie in 0..9")

    def __len__(self):
        return self.images.shape[0]

    @property
    def dim(self):
        return self.images.shape[1]

    def subset(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels)


def _open_maybe_gz(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, offset, path):
    buf = f.read(n)
    if len(buf) != n:
        raise IdxParseError(
            f"{path}: truncated file, wanted {n} bytes at offset {offset}, got {len(buf)}"
        )
    return buf


def load_idx(path) -> np.ndarray:
    """Parse one IDX file (big-endian) into an array; images give (N, rows*cols)
    float64 scaled to [0,1] by /255, labels give (N,) int64."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with _open_maybe_gz(path) as f:
        magic = struct.unpack(">I", _read_exact(f, 4, 0, path))[0]
        if magic == IDX_IMAGES_MAGIC:
            n, rows, cols = struct.unpack(">III", _read_exact(f, 12, 4, path))
            raw = _read_exact(f, n * rows * cols, 16, path)
            data = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
            return data.astype(np.float64) / 255.0
        if magic == IDX_LABELS_MAGIC:
            (n,) = struct.unpack(">I", _read_exact(f, 4, 4, path))
            raw = _read_exact(f, n, 8, path)
            return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        raise IdxParseError(f"{path}: bad magic 0x{magic:08x} at offset 0")


def load_idx_pair(images_path, labels_path=None) -> Dataset:
    images = load_idx(images_path)
    labels = None
    if labels_path is not None:
        labels = load_idx(labels_path)
        if labels.shape[0] != images.shape[0]:
            raise IdxParseError(
                f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
            )
    return Dataset(images, labels)


def find_mnist(data_dir=None):
    """Resolve the four MNIST IDX files (optionally .gz) or return None.

    Looks in ``data_dir`` if given, else $DISTILKIT_DATA_DIR.
    """
    root = data_dir or os.environ.get(DATA_DIR_ENV)
    if not root:
        return None
    root = Path(root)
    found = {}
    for key, stem in MNIST_FILES.items():
        for candidate in (root / stem, root / (stem + ".gz")):
            if candidate.exists():
                found[key] = candidate
                break
        else:
            return None
    return found


def load_mnist(data_dir=None):
    """(train, test) Datasets, or raise FileNotFoundError with guidance."""
    paths = find_mnist(data_dir)
    if paths is None:
        raise FileNotFoundError(
            f"MNIST IDX files not found; set ${DATA_DIR_ENV} to a directory "
            f"containing {', '.join(MNIST_FILES.values())}"
        )
    train = load_idx_pair(paths["train_images"], paths["train_labels"])
    test = load_idx_pair(paths["test_images"], paths["test_labels"])
    return train, test


def binarize(ds: Dataset, mode="round", seed=None) -> Dataset:
    """'round' thresholds at 0.5; 'stochastic' sets each pixel to 1 with
    probability equal to its intensity (reproducible per seed)."""
    if mode == "round":
        pixels = np.rint(ds.images)
    elif mode == "stochastic":
        rng = np.random.default_rng(seed)
        pixels = (rng.random(ds.images.shape) < ds.images).astype(np.float64)
    else:
        raise ValueError(f"unknown binarization mode {mode!r}")
    return Dataset(pixels, ds.labels)


def stratified_subset(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Class-stratified random subset (used for the 10%-of-train runs)."""
    if ds.labels is None:
        raise ValueError("stratified subset needs labels")
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == cls)
        n_keep = int(round(len(idx) * fraction))
        keep.append(rng.permutation(idx)[:n_keep])
    keep = np.sort(np.concatenate(keep))
    return ds.subset(keep)


def raster_columnwise_permutation(rows: int, cols: int) -> np.ndarray:
    """perm[k] = flat row-major index of the k-th variable in column order."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return (r.T * cols + c.T).ravel()


# ---------------------------------------------------------------------------
# data generators


class ResampleWith:
    """I.i.d. uniform draws from a fixed dataset (with replacement)."""

    def __init__(self, images: np.ndarray, rng: np.random.Generator):
        self.images = np.asarray(images, dtype=np.float64)
        if len(self.images) == 0:
            raise ValueError("empty dataset")
        self.rng = rng

    def next_batch(self, size: int) -> np.ndarray:
        idx = self.rng.integers(0, len(self.images), size=size)
        return self.images[idx]


class ResampleWithout:
    """Epoch-permutation sampling: every point appears once per epoch."""

    def __init__(self, images: np.ndarray, rng: np.random.Generator):
        self.images = np.asarray(images, dtype=np.float64)
        if len(self.images) == 0:
            raise ValueError("empty dataset")
        self.rng = rng
        self._perm = rng.permutation(len(self.images))
        self._cursor = 0

    def next_batch(self, size: int) -> np.ndarray:
        out = np.empty((size, self.images.shape[1]))
        filled = 0
        while filled < size:
            take = min(size - filled, len(self._perm) - self._cursor)
            sel = self._perm[self._cursor : self._cursor + take]
            out[filled : filled + take] = self.images[sel]
            self._cursor += take
            filled += take
            if self._cursor == len(self._perm):
                self._perm = self.rng.permutation(len(self.images))
                self._cursor = 0
        return out


class GaussianNoise:
    """Each pixel drawn from a zero-mean unit-variance Gaussian."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.rng = rng

    def next_batch(self, size: int) -> np.ndarray:
        return self.rng.normal(size=(size, self.dim))


class NadeGen:
    """Draw from a trained NADE but emit the conditional probabilities of
    each sampled vector instead of the binary sample itself, mapped back to
    data (row-major pixel) order."""

    def __init__(self, model, rng: np.random.Generator):
        self.model = model
        self.rng = rng

    def next_batch(self, size: int) -> np.ndarray:
        _, conditionals = self.model.sample(size, self.rng)
        out = np.empty_like(conditionals)
        out[:, self.model.ordering] = conditionals
        return out


def make_generator(kind: str, rng: np.random.Generator, images=None, dim=None, nade=None):
    if kind == "resample-with":
        return ResampleWith(images, rng)
    if kind == "resample-without":
        return ResampleWithout(images, rng)
    if kind == "gaussian-noise":
        return GaussianNoise(dim, rng)
    if kind == "nade":
        return NadeGen(nade, rng)
    raise ValueError(f"unknown generator kind {kind!r}")


def save_dataset(path, ds: Dataset, meta=None):
    from . import serialize

    arrays = {"images": ds.images}
    if ds.labels is not None:
        arrays["labels"] = ds.labels
    serialize.save_arrays(path, "dataset", dict(meta or {}), arrays)


def load_dataset(path) -> Dataset:
    from . import serialize

    _, _, arrays = serialize.load_arrays(path, expect_kind="dataset")
    return Dataset(arrays["images"], arrays.get("labels"))
