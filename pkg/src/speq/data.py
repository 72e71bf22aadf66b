"""Dataset readers (MNIST IDX, CIFAR-10 binary batches, scikit-learn digits,
synthetic) and minibatch iteration with CIFAR-style augmentation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_BATCH_RECORDS = 10000
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], np.float32)
MNIST_MEAN, MNIST_STD = 0.1307, 0.3081

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DatasetFormatError(ValueError):
    """A dataset file does not match its declared binary format."""


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, n: int, rng: np.random.Generator | None = None) -> "Dataset":
        if not n or n >= len(self):
            return self
        idx = rng.permutation(len(self))[:n] if rng is not None else np.arange(n)
        return Dataset(self.x[idx], self.y[idx])


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise DatasetFormatError(f"{path}: magic number {magic:#010x}, expected {expected_magic:#010x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _IDX_DTYPES:
        raise DatasetFormatError(f"{path}: bad IDX magic number {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_DTYPES[(magic >> 8) & 0xFF])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise DatasetFormatError(f"{path}: payload is {len(raw) - header} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def _find(path: Path, stem: str) -> Path:
    for cand in (path / stem, path / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no {stem}[.gz] under {path}")


def load_mnist(path, split: str = "train", pad_to: int | None = None) -> Dataset:
    """MNIST from the four standard IDX files in directory ``path``.

    Images are scaled to [0, 1] then standardized; ``pad_to`` zero-pads them
    to a square side (32 suits networks that pool three times).
    """
    prefix = {"train": "train", "test": "t10k"}[split]
    path = Path(path)
    images = read_idx(_find(path, f"{prefix}-images-idx3-ubyte"), 0x00000803)
    labels = read_idx(_find(path, f"{prefix}-labels-idx1-ubyte"), 0x00000801)
    if len(images) != len(labels):
        raise DatasetFormatError(f"MNIST {split}: {len(images)} images but {len(labels)} labels")
    if labels.max(initial=0) > 9:
        raise DatasetFormatError("MNIST label out of range")
    x = (images.astype(np.float32) / 255.0 - MNIST_MEAN) / MNIST_STD
    x = x[:, None]
    if pad_to:
        p = pad_to - x.shape[-1]
        lo = p // 2
        x = np.pad(x, ((0, 0), (0, 0), (lo, p - lo), (lo, p - lo)), constant_values=-MNIST_MEAN / MNIST_STD)
    return Dataset(np.ascontiguousarray(x, dtype=np.float32), labels.astype(np.int64))


def read_cifar_batch(path, expected_records: int | None = CIFAR_BATCH_RECORDS) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    n = len(raw) // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise DatasetFormatError(f"{path}: {n} records, expected {expected_records}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DatasetFormatError(f"{path}: label out of range")
    return arr[:, 1:].reshape(n, 3, 32, 32), labels


def load_cifar10(path, split: str = "train", expected_records: int | None = CIFAR_BATCH_RECORDS) -> Dataset:
    """CIFAR-10 from the binary distribution directory (``data_batch_{1..5}.bin``, ``test_batch.bin``)."""
    path = Path(path)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    xs, ys = [], []
    for name in names:
        x, y = read_cifar_batch(path / name, expected_records)
        xs.append(x)
        ys.append(y)
    x = np.concatenate(xs).astype(np.float32) / 255.0
    x = (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]
    return Dataset(np.ascontiguousarray(x, dtype=np.float32), np.concatenate(ys))


def load_digits(seed: int = 0, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """scikit-learn's bundled 8x8 handwritten digits, stratified train/test split."""
    from sklearn.datasets import load_digits as _sk_digits

    d = _sk_digits()
    x = (d.images.astype(np.float32) / 16.0)[:, None]
    y = d.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        test_idx.extend(rng.permutation(idx)[: int(round(len(idx) * test_fraction))])
    mask = np.zeros(len(y), bool)
    mask[test_idx] = True
    mu, sd = x[~mask].mean(), x[~mask].std()
    x = (x - mu) / sd
    return Dataset(x[~mask], y[~mask]), Dataset(x[mask], y[mask])


def synthetic(n: int, seed: int = 0, image_size: int = 8, channels: int = 1,
              n_classes: int = 10, noise: float = 0.6) -> Dataset:
    """Class prototypes plus Gaussian noise; prototypes depend only on the
    generator seed 12345 so train and test draws share them."""
    protos = np.random.default_rng(12345).standard_normal((n_classes, channels, image_size, image_size))
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, n)
    x = protos[y] + noise * rng.standard_normal((n, channels, image_size, image_size))
    return Dataset(x.astype(np.float32), y.astype(np.int64))


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image plus random horizontal flip."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        img = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = img[:, :, ::-1] if flip[i] else img
    return out


def minibatches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None,
                augment: bool = False):
    """Yield ``(x, y)`` batches; shuffled when ``rng`` is given."""
    n = len(ds)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        x = ds.x[idx]
        if augment:
            x = augment_batch(x, rng)
        yield x, ds.y[idx]
