"""Shared test fixtures: tiny datasets, tiny models and a finite-difference helper."""

from pathlib import Path
from typing import Callable, Generator

import numpy as np
import pytest

from src.data import Dataset, make_synthetic
from src.logs import close_logging
from src.netlib import Model, build_model, miniconv, mlp
from src.quantizer import QuantSpec

FD_STEP = 1e-5


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


@pytest.fixture
def rng() -> np.random.Generator:
    """A seeded generator, fresh per test."""
    return np.random.default_rng(1234)


@pytest.fixture
def gaussians() -> Dataset:
    """400 two-dimensional samples in four classes."""
    return make_synthetic("gaussians", 400, 4, 0.5, seed=7)


@pytest.fixture
def patterns() -> Dataset:
    """200 noisy 1x8x8 template images in four classes."""
    return make_synthetic("patterns", 200, 4, 0.1, seed=7)


@pytest.fixture
def tiny_mlp() -> Model:
    """A 2-16-4 MLP over the default bitwidth set, weight norm off."""
    return build_model(mlp(2, (16,), 4), QuantSpec(weight_norm=False), seed=3)


@pytest.fixture
def tiny_conv() -> Model:
    """MiniConv over 1x8x8 inputs with four searchable layers."""
    return build_model(miniconv(1, 8, 4), QuantSpec(), seed=3)


@pytest.fixture
def output_root(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Generator[Path, None, None]:
    """Run directory root for CLI tests; logging handlers are closed afterwards."""
    runs = tmp_path / "runs"
    runs.mkdir()
    (runs / "runs.json").write_text("[]")
    monkeypatch.setenv("SAQLAB_OUTPUT_ROOT", str(runs))
    monkeypatch.chdir(tmp_path)
    yield runs
    close_logging()
