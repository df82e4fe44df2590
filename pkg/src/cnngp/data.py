"""MNIST IDX reading/writing and train/validation splits."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_DIR_ENV = "CNNGP_DATA_DIR"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


@dataclass(frozen=True)
class LabelledDataset:
    """``images`` is (N, C, H, W) float64; ``labels`` is (N,) int64."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "LabelledDataset":
        return LabelledDataset(self.images[idx], self.labels[idx])

    def head(self, n: int | None) -> "LabelledDataset":
        if n is None:
            return self
        if n > len(self):
            raise DataError(f"requested {n} examples but only {len(self)} available")
        return self.take(slice(0, n))


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except (OSError, EOFError) as e:
        raise DataError(f"{path}: {e}") from e


def read_idx(path: str | Path, magic: int) -> np.ndarray:
    """Raw unsigned-byte array from a (optionally gzipped) IDX file."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise DataError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise DataError(f"{path}: magic 0x{found:08X}, expected 0x{magic:08X}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < count:
        raise DataError(f"{path}: truncated, header declares {count} bytes, found {len(data) - header}")
    if len(data) - header > count:
        raise DataError(f"{path}: {len(data) - header - count} trailing bytes after data")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, normalize: bool = True) -> LabelledDataset:
    """Images as (N, 1, H, W), scaled to [0, 1] unless ``normalize`` is False."""
    raw = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if raw.shape[0] != labels.shape[0]:
        raise DataError(
            f"{images_path} has {raw.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    images = raw[:, None].astype(np.float64)
    if normalize:
        images /= 255.0
    return LabelledDataset(images, labels.astype(np.int64))


def write_idx(path: str | Path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write unsigned bytes; 3-D arrays get the image magic, 1-D the label magic."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError("IDX writer expects uint8 data")
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}.get(array.ndim)
    if magic is None:
        raise DataError("IDX writer supports 1-D labels or 3-D images")
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    payload += np.ascontiguousarray(array).tobytes()
    if compress is None:
        compress = str(path).endswith(".gz")
    if compress:
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


def split(dataset: LabelledDataset, train_count: int, val_count: int, seed: int | None = None):
    """First ``train_count`` then the next ``val_count`` examples.

    A seed shuffles the indices first (numpy Philox keyed by the seed).
    """
    if train_count < 0 or val_count < 0:
        raise DataError("split counts must be nonnegative")
    if train_count + val_count > len(dataset):
        raise DataError(f"split {train_count}+{val_count} exceeds {len(dataset)} examples")
    order = np.arange(len(dataset))
    if seed is not None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
        order = rng.permutation(len(dataset))
    return (
        dataset.take(order[:train_count]),
        dataset.take(order[train_count : train_count + val_count]),
    )


def default_data_dir() -> Path:
    """``$CNNGP_DATA_DIR`` or the bundled MNIST subset."""
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data" / "mnist-subset"


def mnist_paths(data_dir: str | Path | None = None) -> dict[str, Path]:
    d = Path(data_dir) if data_dir else default_data_dir()
    out = {}
    for key, name in MNIST_FILES.items():
        p = d / name
        if not p.exists() and (d / name[:-3]).exists():
            p = d / name[:-3]
        out[key] = p
    return out
