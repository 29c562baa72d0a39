"""Datasets: IDX and CIFAR-10 binary readers, a synthetic blob set, and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    """Images [N,C,H,W] in [0,1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be rank 4 [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (not np.all(np.isfinite(self.images)) or self.images.min() < 0 or self.images.max() > 1):
            raise FormatError("pixels must be finite and inside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.name, self.split, self.num_classes)

    def head(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))


def _read_idx(path: Union[str, Path], magic: int) -> Tuple[Tuple[int, ...], bytes]:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated IDX header", len(buf))
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"{path}: truncated IDX dimensions", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:end])
    need = int(np.prod(dims))
    if len(buf) - end < need:
        raise FormatError(f"{path}: payload has {len(buf) - end} bytes, header declares {need}", len(buf))
    if len(buf) - end > need:
        raise FormatError(f"{path}: {len(buf) - end - need} trailing bytes after payload", end + need)
    return dims, buf[end:]


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "test", num_classes: int = 10) -> Dataset:
    """Parse an IDX image/label file pair (MNIST layout) into a [N,1,H,W] dataset."""
    (n, h, w), pix = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (m,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if n != m:
        raise FormatError(f"image count {n} does not match label count {m}", 4)
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"label {labels[bad]} out of range", 8 + bad)
    return Dataset(images, labels, name, split, num_classes)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise FormatError("IDX writer supports single-channel images only")
    pix = np.rint(dataset.images * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def load_cifar10_binary(paths: Union[str, Path, Sequence[Union[str, Path]]], split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches: records of 1 label byte + 3072 R,G,B plane bytes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in paths:
        buf = Path(path).read_bytes()
        if len(buf) % CIFAR_RECORD:
            raise FormatError(
                f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD}",
                len(buf) - len(buf) % CIFAR_RECORD,
            )
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if lab.size and lab.max() > 9:
            bad = int(np.argmax(lab > 9))
            raise FormatError(f"{path}: label {lab[bad]} out of range", bad * CIFAR_RECORD)
        labels.append(lab)
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if not images:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64), "cifar10", split, 10)
    return Dataset(np.concatenate(images), np.concatenate(labels), "cifar10", split, 10)


def cifar10_bytes(dataset: Dataset) -> bytes:
    """Serialize back to CIFAR-10 binary records."""
    if dataset.images.shape[1:] != (3, 32, 32):
        raise FormatError(f"CIFAR records need [N,3,32,32] images, got {dataset.images.shape}")
    pix = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pix], axis=1)
    return rec.tobytes()


def synth_blobs(
    seed: int,
    n: int,
    size: int = 32,
    classes: int = 4,
    channels: int = 1,
    amplitude: float = 0.45,
    width: float = 2.5,
    noise: float = 0.12,
    background: float = 0.35,
    split: str = "train",
) -> Dataset:
    """Noisy images holding a pair of Gaussian blobs whose placement encodes the class.

    Class ``k`` places two blobs symmetrically about the image centre along
    the direction ``k * pi / classes``; the pair's orientation is what a
    convolutional network keys on, while the fixed positions keep the task
    linearly separable on raw pixels.
    """
    if size < 5:
        raise ConfigError("synth_blobs needs size >= 5")
    if classes < 2:
        raise ConfigError("synth_blobs needs at least two classes")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    radius = size / 4.0
    templates = np.zeros((classes, size, size))
    for k in range(classes):
        angle = np.pi * k / classes
        dy, dx = radius * np.sin(angle), radius * np.cos(angle)
        for s in (1.0, -1.0):
            cy, cx = centre + s * dy, centre + s * dx
            templates[k] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    jitter = rng.uniform(0.7, 1.0, size=(n, 1, 1, 1))
    images = background + amplitude * jitter * templates[labels][:, None, :, :]
    images = images + noise * rng.standard_normal((n, channels, size, size))
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), "synth_blobs", split, classes)


def minibatches(n: Union[int, Dataset], batch_size: int, shuffle: bool = False, seed: int = 0) -> List[np.ndarray]:
    """Index arrays covering ``range(n)`` once, in ``batch_size`` chunks (last one may be short)."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    n = len(n) if isinstance(n, Dataset) else int(n)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def iterate(dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    for idx in minibatches(len(dataset), batch_size, shuffle, seed):
        yield dataset.images[idx], dataset.labels[idx]
