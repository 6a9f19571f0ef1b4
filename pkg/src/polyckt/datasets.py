"""Dataset loading: a synthetic quadrant-blob task plus IDX and CIFAR-10
binary readers.

Everything is returned as float64 image tensors in [0, 1]-ish range with
integer labels, shaped (N, C, H, W).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "DatasetError",
    "synthetic_blobs",
    "split",
    "batches",
    "load_idx",
    "save_idx",
    "load_idx_pair",
    "load_cifar10_bin",
    "ingest_dataset",
]

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
               0x0D: ">f4", 0x0E: ">f8"}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise DatasetError(
                f"{self.x.shape[0]} samples but {self.y.shape[0]} labels"
            )

    def __len__(self):
        return self.x.shape[0]


def synthetic_blobs(
    n: int = 512,
    image_size: int = 32,
    channels: int = 3,
    classes: int = 4,
    noise: float = 0.3,
    seed: int = 0,
) -> Dataset:
    """Gaussian bump in one of four quadrants over channel-tinted noise.

    The quadrant encodes the label, so the task is separable but still needs
    spatial pooling to solve from pixels.
    """
    if classes != 4:
        raise DatasetError("the quadrant construction defines exactly 4 classes")
    rng = np.random.default_rng(seed)
    h = w = image_size
    y = rng.integers(0, classes, size=n)
    x = noise * rng.standard_normal((n, channels, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    tint = np.linspace(1.0, 0.4, channels).reshape(channels, 1, 1)
    sigma = image_size / 8.0
    for idx in range(n):
        row, col = divmod(int(y[idx]), 2)
        cy = h / 4.0 + row * h / 2.0 + rng.uniform(-1.5, 1.5)
        cx = w / 4.0 + col * w / 2.0 + rng.uniform(-1.5, 1.5)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        x[idx] += tint * bump
    return Dataset(x, y)


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic shuffled split; returns one Dataset per fraction."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must sum to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for k, frac in enumerate(fractions):
        stop = n if k == len(fractions) - 1 else start + int(round(frac * n))
        idx = order[start:stop]
        parts.append(Dataset(dataset.x[idx], dataset.y[idx]))
        start = stop
    return tuple(parts)


def batches(dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
    """Yield (x, y) batches; the tail batch may be short."""
    n = len(dataset)
    order = (np.random.default_rng(seed).permutation(n) if shuffle
             else np.arange(n))
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.x[idx], dataset.y[idx]


# ---------------------------------------------------------------- IDX files


def load_idx(path) -> np.ndarray:
    """One IDX array: 4-byte magic, big-endian u32 dims, then raw data."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: not an IDX file")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code not in _IDX_DTYPES:
        raise DatasetError(f"{path}: unsupported IDX element type 0x{dtype_code:02x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dt = np.dtype(_IDX_DTYPES[dtype_code])
    count = int(np.prod(dims)) if ndim else 1
    expect = 4 + 4 * ndim + count * dt.itemsize
    if len(raw) != expect:
        raise DatasetError(f"{path}: expected {expect} bytes, file has {len(raw)}")
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=4 + 4 * ndim)
    return arr.reshape(dims)


def save_idx(arr: np.ndarray, path):
    arr = np.asarray(arr)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09,
             np.dtype(">i2"): 0x0B, np.dtype(">i4"): 0x0C,
             np.dtype(">f4"): 0x0D, np.dtype(">f8"): 0x0E}
    key = arr.dtype.newbyteorder(">") if arr.dtype.itemsize > 1 else arr.dtype
    if key not in codes:
        raise DatasetError(f"cannot store dtype {arr.dtype} as IDX")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, codes[key], arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=key).tobytes())


def load_idx_pair(images_path, labels_path) -> Dataset:
    """Image/label IDX pair: (N, H, W) images scaled to [0, 1], (N,) labels."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected 3-d image array")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DatasetError(f"{labels_path}: label count does not match images")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64))


# ---------------------------------------------------------------- CIFAR-10


def load_cifar10_bin(path) -> Dataset:
    """CIFAR-10 binary batch: 3073-byte records, label then channel-major RGB."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % 3073 != 0:
        raise DatasetError(f"{path}: size {len(raw)} is not a whole number of records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
    y = rec[:, 0].astype(np.int64)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, y)


def ingest_dataset(spec: str, seed: int = 0, n: int = 512,
                   image_size: int = 32) -> Dataset:
    """Dispatch on a dataset spec: "synthetic", a .bin path, or "imgs,labels"."""
    if spec == "synthetic":
        return synthetic_blobs(n=n, image_size=image_size, seed=seed)
    if "," in spec:
        images, labels = spec.split(",", 1)
        return load_idx_pair(images.strip(), labels.strip())
    p = Path(spec)
    if p.suffix == ".bin":
        return load_cifar10_bin(p)
    raise DatasetError(
        f"cannot ingest {spec!r}: expected 'synthetic', a CIFAR .bin path, "
        "or an 'images.idx,labels.idx' pair"
    )
