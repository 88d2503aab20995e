"""Sharpness probes: Hessian-vector products, power iteration, 2-D loss slices."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
from numpy.typing import ArrayLike

from src.data import Batch
from src.errors import ContractError
from src.netlib import BitwidthConfig, ForwardTrace, Mode, flatten_layers, split_layers
from src.optim import Trainable, quantized_gradient, run_backward, weight_gradient
from src.quantizer import QuantizedView
from src.tensor import Array, Tensor, add, constant, matmul, mul, parameter, sum_all

logger = logging.getLogger(__name__)

Wrt = Literal["quantized", "full_precision"]
PROBE_SAMPLES = 500
HVP_SCALE = 1e-3 * float(np.cbrt(np.finfo(np.float64).eps))


def _shift(wrt: Wrt, layers: dict[int, Array]) -> dict[str, Any]:
    if wrt == "quantized":
        return {"perturbation": layers}
    if wrt == "full_precision":
        return {"perturbation": {}, "fp_perturbation": layers}
    raise ContractError(f"wrt must be 'quantized' or 'full_precision', got {wrt!r}")


def _gradient(
    model: Trainable, batch: Batch, config: Optional[BitwidthConfig],
    layers: dict[int, Array], wrt: Wrt, mode: Mode,
) -> Array:
    trace = run_backward(
        model, batch, config, mode, update_stats=False, retain=True, **_shift(wrt, layers)
    )
    return quantized_gradient(trace, model) if wrt == "quantized" else weight_gradient(model)


def probe_point(
    model: Trainable, batch: Batch, config: Optional[BitwidthConfig], wrt: Wrt = "quantized",
    mode: Mode = "eval",
) -> tuple[float, Array]:
    """Loss and flat weights at the unperturbed point."""
    trace = model.loss(batch, config, mode, update_stats=False, **_shift(wrt, {}))
    assert trace.loss is not None
    if wrt == "quantized":
        values = {i: trace.effective[i].values for i in model.perturbable()}
    else:
        values = {i: model.weights[i].values for i in model.perturbable()}
    return trace.loss.item(), flatten_layers(model, values)


def hvp(
    model: Trainable,
    batch: Batch,
    config: Optional[BitwidthConfig],
    v: Array,
    *,
    wrt: Wrt = "quantized",
    mode: Mode = "eval",
    theta_norm: Optional[float] = None,
) -> Array:
    """Central finite difference of gradients along ``v``.

    ``Hv ~ [g(theta + h v/|v|) - g(theta - h v/|v|)] / (2h) * |v|`` with
    ``h = 1e-3 * cbrt(machine eps) * (1 + |theta|)``.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(v))
    if norm == 0:
        raise ContractError("hvp direction must be nonzero")
    if theta_norm is None:
        theta_norm = float(np.linalg.norm(probe_point(model, batch, config, wrt, mode)[1]))
    h = HVP_SCALE * (1.0 + theta_norm)
    unit = v / norm
    plus = _gradient(model, batch, config, split_layers(model, h * unit), wrt, mode)
    minus = _gradient(model, batch, config, split_layers(model, -h * unit), wrt, mode)
    return (plus - minus) / (2.0 * h) * norm


@dataclass(frozen=True)
class SpectrumResult:
    value: float
    iterations: int
    residual: float
    batch_size: int
    converged: bool
    wrt: str = "quantized"


def lambda_max(
    model: Trainable,
    batch: Batch,
    config: Optional[BitwidthConfig],
    iters: int = 100,
    tol: float = 1e-5,
    *,
    seed: int = 0,
    wrt: Wrt = "quantized",
    mode: Mode = "eval",
) -> SpectrumResult:
    """Largest Hessian eigenvalue by power iteration with Rayleigh quotients."""
    if iters < 1:
        raise ContractError(f"iters must be >= 1, got {iters}")
    _, theta = probe_point(model, batch, config, wrt, mode)
    theta_norm = float(np.linalg.norm(theta))
    v = np.random.default_rng(seed).standard_normal(theta.size)
    v /= np.linalg.norm(v)
    estimate: Optional[float] = None
    residual = float("inf")
    converged = False
    it = 0
    for it in range(1, iters + 1):
        hv = hvp(model, batch, config, v, wrt=wrt, mode=mode, theta_norm=theta_norm)
        rayleigh = float(v @ hv)
        residual = float(np.linalg.norm(hv - rayleigh * v))
        hv_norm = float(np.linalg.norm(hv))
        converged = estimate is not None and abs(rayleigh - estimate) < tol * max(abs(rayleigh), 1e-30)
        estimate = rayleigh
        if converged or hv_norm == 0:
            converged = True
            break
        v = hv / hv_norm
    assert estimate is not None
    logger.info("lambda_max %.6g after %d iterations (residual %.3g)", estimate, it, residual)
    return SpectrumResult(estimate, it, residual, len(batch), converged, wrt)


# --- loss landscapes ---------------------------------------------------------


@dataclass
class LandscapeGrid:
    direction_x: Array
    direction_y: Array
    halfwidth: float
    resolution: int
    coords: Array
    losses: Array
    center_loss: float
    seed: int


def filter_normalize(direction: Array, reference: Array) -> Array:
    """Rescale each filter (slice along axis 0) of ``direction`` to its reference norm."""
    d = direction.reshape(direction.shape[0], -1)
    ref = reference.reshape(reference.shape[0], -1)
    d_norm = np.linalg.norm(d, axis=1, keepdims=True)
    scale = np.divide(np.linalg.norm(ref, axis=1, keepdims=True), d_norm, out=np.zeros_like(d_norm), where=d_norm > 0)
    return (d * scale).reshape(direction.shape)


def landscape_slice(
    model: Trainable,
    batch: Batch,
    config: Optional[BitwidthConfig],
    halfwidth: float = 1.0,
    resolution: int = 21,
    *,
    seed: int = 0,
    mode: Mode = "eval",
) -> LandscapeGrid:
    """Losses over ``Q(w) + a d1 + b d2`` for two filter-normalized directions."""
    if resolution < 1 or resolution % 2 == 0:
        raise ContractError(f"resolution must be odd, got {resolution}")
    center, theta = probe_point(model, batch, config, "quantized", mode)
    reference = split_layers(model, theta)
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(2):
        layers = {
            i: filter_normalize(rng.standard_normal(ref.shape), ref) for i, ref in reference.items()
        }
        dirs.append(flatten_layers(model, layers))
    d1, d2 = dirs
    d1_sq = float(d1 @ d1)
    if d1_sq > 0:
        d2 = d2 - (float(d2 @ d1) / d1_sq) * d1

    k = resolution // 2
    coords = np.arange(-k, k + 1) * (halfwidth / k) if k else np.zeros(1)
    losses = np.empty((resolution, resolution))
    for r, a in enumerate(coords):
        for c, b in enumerate(coords):
            if a == 0 and b == 0:
                losses[r, c] = center
                continue
            layers = split_layers(model, a * d1 + b * d2)
            trace = model.loss(batch, config, mode, update_stats=False, perturbation=layers)
            assert trace.loss is not None
            losses[r, c] = trace.loss.item()
    return LandscapeGrid(d1, d2, halfwidth, resolution, coords, losses, center, seed)


def write_landscape(grid: LandscapeGrid, path: Union[str, Path]) -> Path:
    """Whitespace-delimited matrix (rows follow ``direction_x``) under a ``#`` header."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    header = (
        f"halfwidth={grid.halfwidth!r} resolution={grid.resolution} "
        f"seed={grid.seed} center_loss={grid.center_loss!r}"
    )
    np.savetxt(target, grid.losses, fmt="%.17g", header=header)
    return target


# --- analytic fixture --------------------------------------------------------


class QuadraticBowl:
    """``0.5 * theta^T A theta`` exposed through the model interface.

    The single weight layer holds ``theta`` as a ``[1, n]`` row; bitwidth
    configs are accepted and ignored.
    """

    def __init__(self, matrix: ArrayLike, theta: Optional[ArrayLike] = None) -> None:
        a = np.asarray(matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.allclose(a, a.T):
            raise ContractError("QuadraticBowl needs a symmetric square matrix")
        n = a.shape[0]
        start = np.ones(n) if theta is None else np.asarray(theta, dtype=np.float64)
        self.matrix = a
        self.weights: dict[int, Tensor] = {0: parameter(start.reshape(1, n), name="bowl.theta")}
        self.perturbation: Optional[dict[int, Array]] = None

    def perturbable(self) -> list[int]:
        return [0]

    def parameters(self) -> list[Tensor]:
        return [self.weights[0]]

    def decayed(self) -> set[int]:
        return set()

    def quantized_weights(
        self, config: Optional[BitwidthConfig], fp_eps: Optional[dict[int, Array]] = None
    ) -> dict[int, QuantizedView]:
        return {}

    def loss(
        self, batch: Batch, config: Optional[BitwidthConfig], mode: Mode = "train", **kwargs: Any
    ) -> ForwardTrace:
        theta = self.weights[0]
        fp_eps = kwargs.get("fp_perturbation")
        if fp_eps and 0 in fp_eps:
            theta = add(theta, constant(fp_eps[0]))
        eps = kwargs.get("perturbation")
        eps = self.perturbation if eps is None else eps
        if eps and 0 in eps:
            theta = add(theta, constant(eps[0]))
        if kwargs.get("retain"):
            theta.retain_grad = True
        value = mul(sum_all(mul(theta, matmul(theta, constant(self.matrix)))), 0.5)
        return ForwardTrace(value, value, {0: theta}, [self.weights[0]])
