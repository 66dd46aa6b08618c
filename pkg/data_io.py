"""
Datasets: IDX (MNIST) reading and writing, synthetic Gaussian blobs,
train/validation splitting and seed derivation.

Every random draw in the project goes through `derive_rng(seed, *keys)`:
the top-level seed is the SeedSequence entropy and the keys (strings are
crc32-hashed, integers used as-is) form its spawn key. Re-running one
component with the same seed and keys reproduces its draws exactly,
whatever else ran before it.
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np

from errors import (
    BadMagicError,
    ConfigError,
    CountMismatchError,
    DataFormatError,
    LabelError,
    ShapeError,
    TruncatedFileError,
)
from network import _atomic_write

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def derive_rng(seed: int, *keys: Union[str, int]) -> np.random.Generator:
    """Generator for one component: SeedSequence(seed, spawn_key=keys)."""
    spawn = tuple(zlib.crc32(k.encode("utf-8")) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn))


def _empty() -> np.ndarray:
    return np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class Dataset:
    """Inputs in [0, 1] with integer labels and a train/val/test index split.

    Attributes:
        inputs: (N, d) or (N, C, H, W) float64 array in [0, 1].
        labels: (N,) int64 array in [0, num_classes - 1].
        num_classes: k.
        train, val, test: disjoint index arrays covering range(N).
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    train: np.ndarray = field(default_factory=_empty)
    val: np.ndarray = field(default_factory=_empty)
    test: np.ndarray = field(default_factory=_empty)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise CountMismatchError(len(self.inputs), len(self.labels))
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes - 1}]")
        if not (len(self.train) or len(self.val) or len(self.test)):
            object.__setattr__(self, "train", np.arange(len(self.labels)))
        covered = np.concatenate([self.train, self.val, self.test])
        if len(covered) != len(self.labels) or len(np.unique(covered)) != len(covered):
            raise DataFormatError("split indices must be disjoint and cover every sample")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def part(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """(inputs, labels) of the "train", "val" or "test" split."""
        idx = getattr(self, name)
        return self.inputs[idx], self.labels[idx]

    def heldout(self) -> Tuple[str, np.ndarray, np.ndarray]:
        """Split used for per-epoch metrics: val, else test, else train."""
        for name in ("val", "test", "train"):
            if len(getattr(self, name)):
                return (name,) + self.part(name)
        return ("train",) + self.part("train")


# -----------------------------
# IDX files
# -----------------------------
def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e


def _header(path: str, raw: bytes, magic: int, ndims: int) -> Tuple[int, ...]:
    size = 4 * (1 + ndims)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, too short for an IDX magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(path, found, magic, offset=0)
    if len(raw) < size:
        raise TruncatedFileError(f"{path}: header needs {size} bytes, file has {len(raw)}")
    return struct.unpack(">" + "I" * ndims, raw[4:size])


def _payload(path: str, raw: bytes, offset: int, count: int) -> np.ndarray:
    if len(raw) < offset + count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes after offset {offset}, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)


def read_idx_images(path: str) -> np.ndarray:
    """(N, 1, rows, cols) float64 pixels scaled to [0, 1]."""
    raw = _read_bytes(path)
    n, rows, cols = _header(path, raw, IMAGES_MAGIC, 3)
    pixels = _payload(path, raw, 16, n * rows * cols)
    return pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path: str) -> np.ndarray:
    raw = _read_bytes(path)
    (n,) = _header(path, raw, LABELS_MAGIC, 1)
    return _payload(path, raw, 8, n).astype(np.int64)


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (plain or .gz) into a Dataset."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(len(images), len(labels))
    logger.debug("Loaded %d images of %s from %s", len(images), images.shape[1:], images_path)
    return Dataset(images, labels, num_classes)


def write_idx(dataset: Dataset, images_path: str, labels_path: str) -> None:
    """Write inputs as unsigned-byte IDX images (round(255 x)) and labels as IDX labels."""
    images = dataset.inputs
    if images.ndim == 4 and images.shape[1] == 1:
        images = images[:, 0]
    if images.ndim != 3:
        raise ShapeError(f"IDX images need (N, 1, H, W) or (N, H, W) inputs, got {dataset.inputs.shape}")
    if dataset.labels.size and dataset.labels.max() > 255:
        raise LabelError("IDX labels are single bytes")
    n, rows, cols = images.shape
    pixels = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    image_bytes = struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()
    label_bytes = struct.pack(">II", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, image_bytes), (labels_path, label_bytes)):
        if path.endswith(".gz"):
            payload = gzip.compress(payload, mtime=0)
        _atomic_write(path, lambda f, data=payload: f.write(data))


def _find(directory: str, stem: str) -> str:
    for name in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            path = os.path.join(directory, name + suffix)
            if os.path.exists(path):
                return path
    raise DataFormatError(f"no {stem} file (plain or .gz) in {directory}")


def load_mnist(directory: str, limit: Optional[int] = None) -> Dataset:
    """MNIST train + test files from `directory`; the test files become the test split.

    `limit` keeps the first `limit` samples of each file pair.
    """
    parts = []
    for name in ("train", "test"):
        images_stem, labels_stem = MNIST_FILES[name]
        part = load_idx(_find(directory, images_stem), _find(directory, labels_stem))
        x, y = part.inputs, part.labels
        if limit is not None:
            x, y = x[:limit], y[:limit]
        parts.append((x, y))
    (xtr, ytr), (xte, yte) = parts
    n_train = len(ytr)
    logger.info("MNIST from %s: %d train, %d test", directory, n_train, len(yte))
    return Dataset(
        np.concatenate([xtr, xte]),
        np.concatenate([ytr, yte]),
        10,
        train=np.arange(n_train),
        test=np.arange(n_train, n_train + len(yte)),
    )


# -----------------------------
# Synthetic data and splits
# -----------------------------
def blob_centers(k: int, d: int) -> np.ndarray:
    """k centers on a circle of radius 0.35 around 0.5 in the first two dims; 0.5 elsewhere."""
    centers = np.full((k, d), 0.5)
    angles = 2.0 * np.pi * np.arange(k) / k
    centers[:, 0] += 0.35 * np.cos(angles)
    centers[:, 1] += 0.35 * np.sin(angles)
    return centers


def synth_blobs(k: int, n_per_class: int, d: int, spread: float = 0.05, seed: int = 0) -> Dataset:
    """Gaussian blobs around `blob_centers`, clipped into [0, 1]^d."""
    if k < 2:
        raise ConfigError("k must be >= 2", field="data.classes")
    if d < 2:
        raise ConfigError("d must be >= 2", field="data.dims")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1", field="data.n_per_class")
    if spread < 0:
        raise ConfigError("spread must be >= 0", field="data.spread")
    rng = derive_rng(seed, "blobs")
    labels = np.repeat(np.arange(k), n_per_class)
    noise = rng.normal(0.0, spread, size=(k * n_per_class, d))
    inputs = np.clip(blob_centers(k, d)[labels] + noise, 0.0, 1.0)
    return Dataset(inputs, labels.astype(np.int64), k)


def split(dataset: Dataset, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Shuffle the training indices and hold out round(val_fraction * n) for validation."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must be in [0,1)", field="data.val_fraction")
    pool = np.concatenate([dataset.train, dataset.val])
    perm = pool[derive_rng(seed, "split").permutation(len(pool))]
    n_val = int(np.floor(val_fraction * len(pool) + 0.5))
    return replace(dataset, train=perm[n_val:], val=perm[:n_val])


# -----------------------------
# Configured datasets
# -----------------------------
DATA_SOURCES = ("blobs", "idx", "mnist")


@dataclass
class DataConfig:
    """Where the data comes from.

    Attributes:
        source: "blobs" (synthetic), "idx" (an image/label file pair) or "mnist"
            (a directory holding the four MNIST files).
        classes, n_per_class, dims, spread: synth_blobs settings.
        images, labels: IDX file paths for source "idx".
        directory: MNIST directory; defaults to the `IBPLAB_MNIST_DIR` environment variable.
        limit: keep at most this many samples per file pair.
        val_fraction: share of the training samples held out for validation.
    """

    source: str = ""
    classes: int = 3
    n_per_class: int = 200
    dims: int = 2
    spread: float = 0.05
    images: Optional[str] = None
    labels: Optional[str] = None
    directory: Optional[str] = None
    limit: Optional[int] = None
    val_fraction: float = 0.2

    def validate(self, prefix: str = "data") -> "DataConfig":
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"source must be one of {', '.join(DATA_SOURCES)}", field=f"{prefix}.source")
        if self.source == "idx" and not (self.images and self.labels):
            raise ConfigError("source 'idx' needs both images and labels paths", field=f"{prefix}.images")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2", field=f"{prefix}.classes")
        if self.dims < 2:
            raise ConfigError("dims must be >= 2", field=f"{prefix}.dims")
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1", field=f"{prefix}.n_per_class")
        if self.spread < 0:
            raise ConfigError("spread must be >= 0", field=f"{prefix}.spread")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be >= 1", field=f"{prefix}.limit")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0,1)", field=f"{prefix}.val_fraction")
        return self


def get_dataset(config: DataConfig, seed: int = 0) -> Dataset:
    """Load or generate the configured dataset and split off the validation set."""
    if config.source == "blobs":
        data = synth_blobs(config.classes, config.n_per_class, config.dims, config.spread, seed)
    elif config.source == "idx":
        data = load_idx(config.images, config.labels)
        if config.limit is not None:
            data = Dataset(data.inputs[: config.limit], data.labels[: config.limit], data.num_classes)
    else:
        directory = config.directory or os.getenv("IBPLAB_MNIST_DIR")
        if not directory:
            raise ConfigError("no MNIST directory (set data.directory or IBPLAB_MNIST_DIR)", field="data.directory")
        data = load_mnist(directory, config.limit)
    return split(data, config.val_fraction, seed)
