"""Dataset containers, MNIST (IDX) and CIFAR-10 (binary) readers, CIFAR augmentation and synthetic blobs."""

import gzip
import logging
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Final

import numpy as np
import numpy.typing as npt

from py_rce_detect.exception import DataFormatError, InvalidLabelError, ShapeError
from py_rce_detect.tensor import Array

logger = logging.getLogger(__name__)

PIXEL_MIN: Final = -0.5
PIXEL_MAX: Final = 0.5
IDX_IMAGE_MAGIC: Final = 0x00000803
IDX_LABEL_MAGIC: Final = 0x00000801
CIFAR_RECORD_SIZE: Final = 3073
CIFAR_SHAPE: Final = (3, 32, 32)
CIFAR_PAD: Final = 4

MNIST_FILES: Final = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES: Final = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass(frozen=True, slots=True)
class Dataset:
    images: Array  # N×C×H×W in [-0.5, 0.5]
    labels: npt.NDArray[np.int64]
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        if self.images.ndim != 4:  # noqa: PLR2004
            msg = f"Images must be N×C×H×W, got shape {self.images.shape}."
            raise ShapeError(msg)
        if self.labels.shape != (self.images.shape[0],):
            msg = f"Got {self.labels.shape} labels for {self.images.shape[0]} images."
            raise ShapeError(msg)
        if self.images.size and (self.images.min() < PIXEL_MIN or self.images.max() > PIXEL_MAX):
            raise ValueError("Pixel values must lie in [-0.5, 0.5].")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            msg = f"Labels must lie in [0, {self.num_classes})."
            raise InvalidLabelError(msg)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        _, c, h, w = self.images.shape
        return (c, h, w)

    def subset(self, indices: npt.ArrayLike) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)

    def head(self, count: int | None) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return self.subset(np.arange(count))

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {label: int(count) for label, count in enumerate(counts)}


def scale_pixels(raw: npt.NDArray[np.uint8]) -> Array:
    """Map bytes 0..255 onto [-0.5, 0.5] via x/255 - 0.5."""
    return raw.astype(np.float64) / 255.0 - 0.5


def unscale_pixels(x: Array) -> Array:
    """Inverse of `scale_pixels`, on the 0..255 scale (not rounded)."""
    return (np.asarray(x, dtype=np.float64) + 0.5) * 255.0


def clip_domain(x: Array) -> Array:
    return np.clip(x, PIXEL_MIN, PIXEL_MAX)


# ============================================================================
# MNIST (IDX)
# ============================================================================


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(blob: bytes, magic: int, rank: int) -> tuple[tuple[int, ...], npt.NDArray[np.uint8]]:
    header_size = 4 * (rank + 1)
    if len(blob) < header_size:
        raise DataFormatError("Truncated IDX header", len(blob))
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise DataFormatError(f"Bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    dims = struct.unpack(f">{rank}I", blob[4:header_size])
    expected = header_size + math.prod(dims)
    if len(blob) < expected:
        raise DataFormatError(f"Truncated IDX payload: expected {expected} bytes, got {len(blob)}", len(blob))
    data = np.frombuffer(blob, dtype=np.uint8, count=math.prod(dims), offset=header_size)
    return dims, data


def load_mnist_idx(images_path: Path, labels_path: Path, split: str = "train") -> Dataset:
    image_dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, 3)
    (label_count,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, 1)
    count, rows, cols = image_dims
    if count != label_count:
        raise DataFormatError(f"Image count {count} does not match label count {label_count}", 4)
    if labels.size and labels.max() >= 10:  # noqa: PLR2004
        raise DataFormatError("MNIST label byte out of range", 8 + int(np.argmax(labels >= 10)))  # noqa: PLR2004
    images = scale_pixels(pixels).reshape(count, 1, rows, cols)
    logger.info("Loaded %d MNIST %s images from %s", count, split, images_path)
    return Dataset(images, labels.astype(np.int64), 10, split)


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    msg = f"{name}[.gz] not found in {directory}"
    raise FileNotFoundError(msg)


def load_mnist_dir(directory: Path, split: str) -> Dataset:
    images_name, labels_name = MNIST_FILES[split]
    return load_mnist_idx(_find(directory, images_name), _find(directory, labels_name), split)


# ============================================================================
# CIFAR-10 (binary)
# ============================================================================


def load_cifar_binary(paths: Sequence[Path], split: str = "train") -> Dataset:
    images: list[Array] = []
    labels: list[npt.NDArray[np.int64]] = []
    for path in paths:
        blob = path.read_bytes()
        if len(blob) % CIFAR_RECORD_SIZE != 0:
            msg = f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD_SIZE}"
            raise DataFormatError(msg, len(blob) - len(blob) % CIFAR_RECORD_SIZE)
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_SIZE)
        if records.size and records[:, 0].max() >= 10:  # noqa: PLR2004
            bad = int(np.argmax(records[:, 0] >= 10))  # noqa: PLR2004
            raise DataFormatError(f"{path}: label byte out of range", bad * CIFAR_RECORD_SIZE)
        labels.append(records[:, 0].astype(np.int64))
        images.append(scale_pixels(records[:, 1:]).reshape(-1, *CIFAR_SHAPE))
    dataset = Dataset(np.concatenate(images), np.concatenate(labels), 10, split)
    logger.info("Loaded %d CIFAR-10 %s images", len(dataset), split)
    return dataset


def load_cifar_dir(directory: Path, split: str) -> Dataset:
    return load_cifar_binary([directory / name for name in CIFAR_FILES[split]], split)


def crop_and_flip(batch: Array, offsets: npt.NDArray[np.int64], flips: npt.NDArray[np.bool_]) -> Array:
    """Zero-pad 32×32 images to 40×40, crop 32×32 at the given (row, col) offsets, flip along width where asked."""
    if batch.shape[1:] != CIFAR_SHAPE:
        msg = f"Augmentation expects N×3×32×32 inputs, got {batch.shape}."
        raise ShapeError(msg)
    padded = np.pad(batch, ((0, 0), (0, 0), (CIFAR_PAD, CIFAR_PAD), (CIFAR_PAD, CIFAR_PAD)))
    out = np.empty_like(batch)
    size = CIFAR_SHAPE[1]
    for i, (row, col) in enumerate(offsets):
        crop = padded[i, :, row : row + size, col : col + size]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment_cifar(batch: Array, seed: int) -> Array:
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, 2 * CIFAR_PAD + 1, size=(batch.shape[0], 2))
    flips = rng.random(batch.shape[0]) < 0.5  # noqa: PLR2004
    return crop_and_flip(batch, offsets, flips)


# ============================================================================
# Synthetic data
# ============================================================================


def synthetic_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    *,
    cluster_std: float = 0.05,
    as_image: bool = True,
) -> Dataset:
    """Gaussian clusters with seeded centres at pairwise distance >= `separation`, clipped to the pixel domain."""
    if separation <= 0:
        raise ValueError("Separation must be positive.")
    side = math.isqrt(dim)
    if as_image and side * side != dim:
        msg = f"Dimension {dim} is not a perfect square; cannot reshape to an image."
        raise ShapeError(msg)
    rng = np.random.default_rng(seed)
    centers: list[Array] = []
    attempts = 0
    while len(centers) < num_classes:
        attempts += 1
        if attempts > 10_000 * num_classes:
            msg = f"Could not place {num_classes} centres {separation} apart in {dim} dimensions."
            raise ValueError(msg)
        candidate = rng.uniform(PIXEL_MIN + 0.1, PIXEL_MAX - 0.1, size=dim)
        if all(np.linalg.norm(candidate - c) >= separation for c in centers):
            centers.append(candidate)
    points = np.concatenate([c + rng.normal(0.0, cluster_std, size=(per_class, dim)) for c in centers])
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    order = rng.permutation(points.shape[0])
    shape = (1, side, side) if as_image else (1, 1, dim)
    images = clip_domain(points[order]).reshape(-1, *shape)
    return Dataset(images, labels[order], num_classes, "synthetic")
