"""Dataset loading and input-window geometry.

Images are kept as float64 [n, channels, height, width] scaled to
[-0.5, 0.5] via x/255 - 0.5.  Each network branch reads one square window
(an InputRange) flattened row-major into a 9-vector.
"""

from __future__ import annotations

import gzip
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_RECORD_BYTES = 1 + 3 * 32 * 32  # label byte + 3072 pixel bytes


@dataclass(frozen=True)
class InputRange:
    """One square input window: channel plus top-left corner, size x size pixels."""

    channel: int
    row_start: int
    col_start: int
    size: int = 3

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.channel, self.row_start, self.col_start, self.size)

    def __str__(self) -> str:
        return (f"c{self.channel}[{self.row_start}:{self.row_start + self.size},"
                f"{self.col_start}:{self.col_start + self.size}]")


@dataclass
class Dataset:
    images: np.ndarray  # [n, channels, height, width] float64 in [-0.5, 0.5]
    labels: np.ndarray  # [n] int64
    tag: str
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4-d, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels length does not match image count")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices: np.ndarray, tag: str | None = None) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices],
                       tag or self.tag, self.n_classes)


def normalize_pixels(raw: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float64 in [-0.5, 0.5]."""
    return raw.astype(np.float64) / 255.0 - 0.5


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_cifar10_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch file -> (images [n,3,32,32] float64, labels)."""
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR10_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {len(raw)} is not a positive multiple of "
            f"{CIFAR10_RECORD_BYTES}"
        )
    count = len(raw) // CIFAR10_RECORD_BYTES
    records = np.frombuffer(raw, dtype=np.uint8).reshape(count, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise ValueError(f"{path}: label byte exceeds 9")
    images = normalize_pixels(records[:, 1:].reshape(count, 3, 32, 32))
    return images, labels


def load_cifar10(data_dir: str | Path, split: str = "train") -> Dataset:
    """CIFAR-10 binary-version directory -> Dataset for 'train' or 'test'."""
    data_dir = Path(data_dir)
    if split == "train":
        files = [data_dir / f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        files = [data_dir / "test_batch.bin"]
    else:
        raise ValueError(f"unknown split {split!r}")
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files: {missing}")
    parts = [load_cifar10_batch(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, f"cifar10-{split}", 10)


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    """IDX file (big-endian, unsigned byte payload) -> ndarray of its dims."""
    with _open_maybe_gzip(path) as fh:
        header = fh.read(4)
        if len(header) != 4:
            raise ValueError(f"{path}: truncated IDX header")
        magic = int.from_bytes(header, "big")
        if magic != expected_magic:
            raise ValueError(f"{path}: IDX magic {magic}, expected {expected_magic}")
        n_dims = magic & 0xFF
        dims = []
        for _ in range(n_dims):
            chunk = fh.read(4)
            if len(chunk) != 4:
                raise ValueError(f"{path}: truncated IDX dimension header")
            dims.append(int.from_bytes(chunk, "big"))
        payload = fh.read()
    expected = int(np.prod(dims)) if dims else 0
    if len(payload) != expected:
        raise ValueError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _find_idx_file(data_dir: Path, stem: str, kind: str) -> Path:
    """Locate e.g. train-images-idx3-ubyte under its common filename variants."""
    candidates = [
        f"{stem}-{kind}-idx3-ubyte" if kind == "images" else f"{stem}-{kind}-idx1-ubyte",
        f"{stem}-{kind}.idx3-ubyte" if kind == "images" else f"{stem}-{kind}.idx1-ubyte",
    ]
    candidates += [c + ".gz" for c in candidates]
    for name in candidates:
        p = data_dir / name
        if p.exists():
            return p
    raise FileNotFoundError(
        f"no MNIST {stem} {kind} file in {data_dir} (tried {candidates})"
    )


def load_mnist(data_dir: str | Path, split: str = "train") -> Dataset:
    """MNIST IDX directory -> Dataset for 'train' or 'test'."""
    data_dir = Path(data_dir)
    stem = {"train": "train", "test": "t10k"}.get(split)
    if stem is None:
        raise ValueError(f"unknown split {split!r}")
    images_raw = _read_idx(_find_idx_file(data_dir, stem, "images"), 2051)
    labels = _read_idx(_find_idx_file(data_dir, stem, "labels"), 2049).astype(np.int64)
    if images_raw.ndim != 3:
        raise ValueError("MNIST image file is not 3-dimensional")
    if images_raw.shape[0] != labels.shape[0]:
        raise ValueError("MNIST image/label counts differ")
    if labels.size and labels.max() >= 10:
        raise ValueError("MNIST label exceeds 9")
    images = normalize_pixels(images_raw[:, None, :, :])
    return Dataset(images, labels, f"mnist-{split}", 10)


def base_grid_ranges(shape: tuple[int, int, int], size: int = 3,
                     spacing: int = 6) -> list[InputRange]:
    """Sparse grid: windows at every `spacing` pixels, channels outermost."""
    channels, height, width = shape
    ranges = []
    for c in range(channels):
        for r in range(0, height - size + 1, spacing):
            for col in range(0, width - size + 1, spacing):
                ranges.append(InputRange(c, r, col, size))
    return ranges


def full_perception_ranges(shape: tuple[int, int, int],
                           size: int = 3) -> list[InputRange]:
    """Dense tiling: windows every `size` pixels, channels outermost."""
    channels, height, width = shape
    ranges = []
    for c in range(channels):
        for r in range(0, (height // size) * size, size):
            for col in range(0, (width // size) * size, size):
                ranges.append(InputRange(c, r, col, size))
    return ranges


def range_flat_indices(input_range: InputRange,
                       shape: tuple[int, int, int]) -> np.ndarray:
    """Flat pixel indices (into a flattened [C*H*W] image) of one window, row-major."""
    channels, height, width = shape
    r = input_range
    if not (0 <= r.channel < channels
            and 0 <= r.row_start <= height - r.size
            and 0 <= r.col_start <= width - r.size):
        raise ValueError(f"input range {r} out of bounds for shape {shape}")
    rows = np.arange(r.row_start, r.row_start + r.size)
    cols = np.arange(r.col_start, r.col_start + r.size)
    grid = (r.channel * height * width
            + rows[:, None] * width + cols[None, :])
    return grid.reshape(-1)


def extract_patch(image: np.ndarray, input_range: InputRange) -> np.ndarray:
    """One image [C,H,W] -> the window's 9-vector (row-major)."""
    r = input_range
    patch = image[r.channel,
                  r.row_start:r.row_start + r.size,
                  r.col_start:r.col_start + r.size]
    if patch.shape != (r.size, r.size):
        raise ValueError(f"input range {r} out of bounds for image {image.shape}")
    return patch.reshape(-1).astype(np.float64)


def extract_patches(images: np.ndarray,
                    ranges: list[InputRange]) -> np.ndarray:
    """Images [n,C,H,W] -> per-range windows [len(ranges), n, size*size]."""
    n = images.shape[0]
    shape = images.shape[1:]
    flat = images.reshape(n, -1)
    idx = np.stack([range_flat_indices(r, shape) for r in ranges])  # [R, s*s]
    return np.ascontiguousarray(flat[:, idx].transpose(1, 0, 2))


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
