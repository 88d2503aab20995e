"""Tests for synthetic datasets, IDX files, splitting and batching."""

from pathlib import Path

import numpy as np
import pytest

from src.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    Dataset,
    batches,
    derive_seed,
    load_idx,
    make_synthetic,
    read_idx,
    sample_batch,
    split_half,
    write_idx,
)
from src.errors import DataConsistencyError, DataFormatError, DataIOError


@pytest.fixture
def idx_pair(tmp_path: Path, patterns: Dataset) -> tuple[Path, Path]:
    """The ``patterns`` fixture written as an IDX image/label pair."""
    images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
    write_idx(patterns, images, labels)
    return images, labels


@pytest.mark.parametrize("kind,classes,dim", [("gaussians", 4, (2,)), ("moons", 2, (2,)), ("patterns", 3, (1, 8, 8))])
def test_synthetic_is_deterministic(kind: str, classes: int, dim: tuple[int, ...]) -> None:
    a = make_synthetic(kind, 100, classes, 0.2, seed=11)
    b = make_synthetic(kind, 100, classes, 0.2, seed=11)
    c = make_synthetic(kind, 100, classes, 0.2, seed=12)
    assert a.feature_shape == dim
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, c.features)


def test_synthetic_rejects_bad_arguments() -> None:
    with pytest.raises(DataFormatError):
        make_synthetic("spirals", 100, 2, 0.1, seed=0)
    with pytest.raises(DataConsistencyError):
        make_synthetic("moons", 100, 3, 0.1, seed=0)
    with pytest.raises(DataConsistencyError):
        make_synthetic("gaussians", 1, 2, 0.1, seed=0)


def test_patterns_stay_in_unit_range(patterns: Dataset) -> None:
    assert patterns.features.min() >= 0.0
    assert patterns.features.max() <= 1.0


def test_dataset_validation() -> None:
    with pytest.raises(DataConsistencyError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=np.int64), 2)
    with pytest.raises(DataConsistencyError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), 2)
    with pytest.raises(DataConsistencyError):
        Dataset(np.zeros((2, 2)), np.array([0, 1]), 2, split="holdout")


def test_derive_seed_is_stable() -> None:
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert derive_seed(0, 1) != derive_seed(0, 2)
    assert derive_seed(0, 1) != derive_seed(1, 1)


def test_idx_round_trip(idx_pair: tuple[Path, Path], patterns: Dataset) -> None:
    """Write then read keeps labels and pixels up to 8-bit rounding."""
    loaded = load_idx(*idx_pair, split="test")
    assert loaded.split == "test"
    assert loaded.classes == 4
    assert np.array_equal(loaded.labels, patterns.labels)
    assert loaded.features.shape == patterns.features.shape
    assert np.abs(loaded.features - patterns.features).max() <= 0.5 / 255 + 1e-12


def test_idx_gzip_round_trip(tmp_path: Path, patterns: Dataset) -> None:
    images, labels = tmp_path / "images.idx.gz", tmp_path / "labels.idx.gz"
    write_idx(patterns, images, labels)
    assert images.read_bytes()[:2] == b"\x1f\x8b"
    assert np.array_equal(load_idx(images, labels).labels, patterns.labels)


def test_idx_bad_magic(idx_pair: tuple[Path, Path]) -> None:
    images, labels = idx_pair
    with pytest.raises(DataFormatError) as excinfo:
        read_idx(labels, IDX_IMAGES_MAGIC)
    assert excinfo.value.offset == 0
    assert "byte offset 0" in str(excinfo.value)


def test_idx_truncated_payload(idx_pair: tuple[Path, Path]) -> None:
    images, _ = idx_pair
    images.write_bytes(images.read_bytes()[:-10])
    with pytest.raises(DataIOError):
        read_idx(images, IDX_IMAGES_MAGIC)


def test_idx_truncated_header(tmp_path: Path) -> None:
    path = tmp_path / "short.idx"
    path.write_bytes(IDX_LABELS_MAGIC.to_bytes(4, "big")[:3])
    with pytest.raises(DataIOError):
        read_idx(path, IDX_LABELS_MAGIC)


def test_idx_count_mismatch(tmp_path: Path, patterns: Dataset) -> None:
    images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
    write_idx(patterns, images, labels)
    shorter = patterns.subset(range(50), "train")
    write_idx(shorter, tmp_path / "unused.idx", labels)
    with pytest.raises(DataConsistencyError):
        load_idx(images, labels)


def test_idx_export_needs_images(gaussians: Dataset, tmp_path: Path) -> None:
    with pytest.raises(DataFormatError):
        write_idx(gaussians, tmp_path / "a.idx", tmp_path / "b.idx")


def test_split_half_is_stratified(gaussians: Dataset) -> None:
    """Halves partition the data and per-class counts differ by at most one."""
    train, val = split_half(gaussians, seed=5)
    assert (train.split, val.split) == ("train", "val")
    assert len(train) + len(val) == len(gaussians)
    assert abs(len(train) - len(val)) <= 1
    for label in range(gaussians.classes):
        a = int((train.labels == label).sum())
        b = int((val.labels == label).sum())
        assert abs(a - b) <= 1
    again, _ = split_half(gaussians, seed=5)
    assert np.array_equal(train.features, again.features)


def test_split_half_needs_two_samples() -> None:
    tiny = Dataset(np.zeros((1, 2)), np.zeros(1, dtype=np.int64), 2)
    with pytest.raises(DataConsistencyError):
        split_half(tiny, seed=0)


def test_batches_cover_dataset_once(gaussians: Dataset) -> None:
    seen = [batch.labels for batch in batches(gaussians, 64, seed=3)]
    assert [len(b) for b in seen] == [64] * 6 + [16]
    assert sorted(np.concatenate(seen).tolist()) == sorted(gaussians.labels.tolist())
    first = next(batches(gaussians, 64, seed=3))
    assert np.array_equal(first.labels, seen[0])


def test_batches_drop_last_and_order(gaussians: Dataset) -> None:
    assert len(list(batches(gaussians, 64, seed=3, drop_last=True))) == 6
    ordered = next(batches(gaussians, 10, seed=0, shuffle=False))
    assert np.array_equal(ordered.features, gaussians.features[:10])
    with pytest.raises(DataConsistencyError):
        next(batches(gaussians, 0, seed=0))


def test_sample_batch(gaussians: Dataset) -> None:
    batch = sample_batch(gaussians, 50, seed=9)
    assert len(batch) == 50
    assert np.array_equal(batch.labels, sample_batch(gaussians, 50, seed=9).labels)
    assert len(sample_batch(gaussians, 10_000, seed=9)) == len(gaussians)
