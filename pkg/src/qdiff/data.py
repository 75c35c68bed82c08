"""IDX-format image/label loading (MNIST, Fashion-MNIST) and deterministic batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX content; the message names the field and byte offset."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, H, W) in [-1, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return int(self.images.shape[0])

    def subset(self, n: int, seed: int | None = None) -> "Dataset":
        """First ``n`` items, or a seeded random choice of ``n`` items."""
        if n > len(self):
            raise ValueError(f"requested {n} items from a dataset of {len(self)}")
        idx = np.arange(n) if seed is None else np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return Dataset(self.images[idx], self.labels[idx])


def normalize(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def denormalize(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded and clipped to bytes."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_idx(blob: bytes, expected_magic: int, what: str = "idx") -> np.ndarray:
    if len(blob) < 4:
        raise IdxFormatError(f"{what}: truncated header, missing magic number at byte {len(blob)}")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = []
    for i in range(ndim):
        off = 4 + 4 * i
        if off + 4 > len(blob):
            raise IdxFormatError(f"{what}: truncated header, missing dimension {i} at byte {off}")
        dims.append(struct.unpack_from(">I", blob, off)[0])
    start = 4 + 4 * ndim
    size = int(np.prod(dims, dtype=np.int64))
    if len(blob) - start < size:
        raise IdxFormatError(f"{what}: data ends at byte {len(blob)}, header promises {start + size}")
    if len(blob) - start > size:
        raise IdxFormatError(f"{what}: {len(blob) - start - size} unexpected bytes after byte {start + size}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=start).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an image/label IDX pair (raw or gzipped) and normalise pixels to [-1, 1]."""
    imgs = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, str(labels_path))
    if imgs.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 dimensions (N, rows, cols), got {imgs.ndim}")
    if imgs.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images_path}: {imgs.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    return Dataset(normalize(imgs)[:, None], labels.astype(np.int64))


def write_idx(path, array: np.ndarray, compress: bool | None = None):
    """Write a uint8 array as IDX; gzip when ``compress`` or when the name ends in ``.gz``."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if compress or (compress is None and path.suffix == ".gz"):
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffled image batches; the order is a function of ``(seed, epoch)`` only."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for lo in range(0, len(ds), batch_size):
        yield ds.images[order[lo : lo + batch_size]]


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


def default_data_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "data" / "mnist"


def load_split(data_dir, split: str = "train") -> Dataset:
    """Load ``train`` or ``test`` from a directory of standard-named IDX files (``.gz`` optional)."""
    data_dir = Path(data_dir)
    names = []
    for name in MNIST_FILES[split]:
        p = data_dir / name
        if not p.exists() and (data_dir / name[:-3]).exists():
            p = data_dir / name[:-3]
        names.append(p)
    for p in names:
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    return load_idx(*names)


MNIST_MIRROR = "https://storage.googleapis.com/cvdf-datasets/mnist/"


def fetch(data_dir, base_url: str = MNIST_MIRROR, overwrite: bool = False) -> list[Path]:
    """Download the four standard IDX files into ``data_dir`` (never used by tests)."""
    import urllib.request

    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for pair in MNIST_FILES.values():
        for name in pair:
            dest = data_dir / name
            if dest.exists() and not overwrite:
                continue
            with urllib.request.urlopen(base_url + name) as resp:
                blob = resp.read()
            parse_idx(gzip.decompress(blob), IMAGES_MAGIC if "images" in name else LABELS_MAGIC, name)
            dest.write_bytes(blob)
            written.append(dest)
    return written
