"""Datasets: synthetic generators, IDX files, stratified splits and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from src.errors import DataConsistencyError, DataFormatError, DataIOError
from src.tensor import Array

Labels = NDArray[np.int64]
PathLike = Union[str, Path]

SPLITS = ("train", "val", "test")
SYNTHETIC_KINDS = ("gaussians", "moons", "patterns")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GAUSSIAN_RADIUS = 2.0


@dataclass(frozen=True)
class Batch:
    features: Array
    labels: Labels

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class Dataset:
    """Immutable features/labels pair tagged with its split."""

    features: Array
    labels: Labels
    classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataConsistencyError(
                f"{self.features.shape[0]} feature rows for {self.labels.shape[0]} labels"
            )
        if self.split not in SPLITS:
            raise DataConsistencyError(f"unknown split {self.split!r}")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.classes
        ):
            raise DataConsistencyError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, indices: Sequence[int], split: str) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.classes, split)

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)


def derive_seed(seed: int, *keys: int) -> int:
    """A child seed for ``(seed, *keys)``; no ambient entropy involved."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(1)
    return int(state[0])


# --- synthetic data --------------------------------------------------------


def make_synthetic(
    kind: str,
    n: int,
    classes: int,
    noise: float,
    seed: int,
    *,
    size: int = 8,
    split: str = "train",
) -> Dataset:
    """Deterministic toy classification data.

    ``gaussians``: class means on a circle of radius 2 with isotropic noise.
    ``moons``: two interleaved half circles (two classes only).
    ``patterns``: ``1 x size x size`` images of per-class templates plus noise.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataFormatError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if classes < 2 or n < classes:
        raise DataConsistencyError(f"need n >= classes >= 2, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n).astype(np.int64)

    if kind == "gaussians":
        angles = 2.0 * np.pi * labels / classes
        means = GAUSSIAN_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        features = means + noise * rng.standard_normal((n, 2))
    elif kind == "moons":
        if classes != 2:
            raise DataConsistencyError(f"moons has exactly 2 classes, got {classes}")
        t = rng.uniform(0.0, np.pi, size=n)
        outer = np.stack([np.cos(t), np.sin(t)], axis=1)
        inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        features = np.where(labels[:, None] == 0, outer, inner)
        features = features + noise * rng.standard_normal((n, 2))
    else:
        templates = rng.uniform(0.0, 1.0, size=(classes, 1, size, size))
        noisy = templates[labels] + noise * rng.standard_normal((n, 1, size, size))
        features = np.clip(noisy, 0.0, 1.0)

    return Dataset(np.asarray(features, dtype=np.float64), labels, classes, split)


# --- IDX files -------------------------------------------------------------


def _read_bytes(path: PathLike) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (EOFError, gzip.BadGzipFile) as exc:
            raise DataIOError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


def read_idx(path: PathLike, expected_magic: int) -> NDArray[np.uint8]:
    """Parse an unsigned-byte IDX file whose magic number must match."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataIOError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0
        )
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataIOError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataIOError(
            f"{path}: expected {count} data bytes after offset {header}, "
            f"found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], 1, *images.shape[1:]) / 255.0
    label_array = labels.astype(np.int64)
    classes = int(label_array.max()) + 1 if label_array.size else 1
    return Dataset(features.astype(np.float64), label_array, max(classes, 1), split)


def _write_idx(path: PathLike, magic: int, data: NDArray[np.uint8]) -> None:
    header = magic.to_bytes(4, "big") + struct.pack(f">{data.ndim}I", *data.shape)
    payload = header + data.tobytes()
    target = Path(path)
    if target.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    target.write_bytes(payload)


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Write ``[N, 1, H, W]`` features in [0, 1] as 8-bit IDX files."""
    if dataset.features.ndim != 4 or dataset.features.shape[1] != 1:
        raise DataFormatError(f"IDX export needs [N, 1, H, W], got {dataset.features.shape}")
    pixels = np.rint(np.clip(dataset.features[:, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    _write_idx(images_path, IDX_IMAGES_MAGIC, pixels)
    _write_idx(labels_path, IDX_LABELS_MAGIC, dataset.labels.astype(np.uint8))


# --- splitting and batching ------------------------------------------------


def split_half(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified, seeded split into two halves whose class counts differ by <= 1."""
    if len(dataset) < 2:
        raise DataConsistencyError("split_half needs at least two samples")
    rng = np.random.default_rng(seed)
    first: list[int] = []
    second: list[int] = []
    odd_goes_first = True
    for label in range(dataset.classes):
        idx = np.flatnonzero(dataset.labels == label)
        rng.shuffle(idx)
        take = len(idx) // 2
        if len(idx) % 2:
            take += int(odd_goes_first)
            odd_goes_first = not odd_goes_first
        first.extend(idx[:take].tolist())
        second.extend(idx[take:].tolist())
    return dataset.subset(sorted(first), "train"), dataset.subset(sorted(second), "val")


def batches(
    dataset: Dataset,
    batch_size: int,
    seed: int,
    drop_last: bool = False,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Mini-batches in a seeded order."""
    if batch_size < 1:
        raise DataConsistencyError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield Batch(dataset.features[idx], dataset.labels[idx])


def sample_batch(dataset: Dataset, size: int, seed: int) -> Batch:
    """A seeded random subset of at most ``size`` samples (probe batches)."""
    n = min(size, len(dataset))
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n, replace=False))
    return Batch(dataset.features[idx], dataset.labels[idx])
