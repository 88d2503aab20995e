"""Sharpness-aware optimizers for shared-weight quantized models.

``SharpnessOptimizer`` implements momentum SGD and the two-pass
perturb-then-descend steps (SAM on full-precision weights, SAQ and ASAQ on
quantized weights) with m-sharpness microbatching. ``Adam`` trains the
bitwidth policy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Protocol

import numpy as np

from src.data import Batch
from src.errors import ContractError, NonFiniteError
from src.netlib import (
    BitwidthConfig,
    BNStatsBuffer,
    ForwardTrace,
    Mode,
    WeightHolder,
    flatten_layers,
    split_layers,
)
from src.quantizer import QuantizedView, quantize_w_values
from src.tensor import Array, Tape, Tensor, backward

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sam", "saq", "asaq")
SCHEDULES = ("cosine", "step", "constant")
GRAD_FLOOR = 1e-12
ASAQ_XI = 0.01
DEFAULT_RHO = 0.05
RHO_GRID: tuple[float, ...] = (0.02, 0.05) + tuple(round(0.05 * k, 2) for k in range(2, 21))

# Published per-bitwidth perturbation radii.
_RHO_TABLE: dict[str, dict[int, float]] = {
    "resnet20": {2: 0.4, 3: 0.7, 4: 0.9},
    "resnet18": {2: 0.15, 3: 0.15, 4: 0.3},
}


def default_rho(model_name: str, bitwidth: int) -> Optional[float]:
    """Tabulated rho for ``model_name`` at ``bitwidth``, or None if not tabulated."""
    return _RHO_TABLE.get(model_name, {}).get(bitwidth)


class Trainable(WeightHolder, Protocol):
    """What the optimizers need from a model."""

    def loss(
        self, batch: Batch, config: Optional[BitwidthConfig], mode: Mode = "train", **kwargs: Any
    ) -> ForwardTrace: ...

    def parameters(self) -> list[Tensor]: ...

    def decayed(self) -> set[int]: ...

    def quantized_weights(
        self, config: Optional[BitwidthConfig], fp_eps: Optional[dict[int, Array]] = None
    ) -> dict[int, QuantizedView]: ...


# --- schedules -------------------------------------------------------------


def lr_schedule(
    base_lr: float,
    epoch: float,
    *,
    mode: str = "cosine",
    total_epochs: int = 200,
    milestones: tuple[int, ...] = (80, 120),
    gamma: float = 0.1,
) -> float:
    """Learning rate at ``epoch`` under step decay or cosine annealing to 0."""
    if mode == "constant":
        return base_lr
    if mode == "step":
        return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)
    if mode == "cosine":
        if total_epochs <= 0:
            return base_lr
        progress = min(max(epoch / total_epochs, 0.0), 1.0)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ContractError(f"unknown schedule {mode!r}; choose from {SCHEDULES}")


# --- state -----------------------------------------------------------------


@dataclass
class OptimState:
    """Hyperparameters plus the mutable buffers a checkpoint must carry."""

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    rho: float = DEFAULT_RHO
    xi: float = ASAQ_XI
    schedule: str = "cosine"
    epochs: int = 30
    milestones: tuple[int, ...] = (80, 120)
    microbatch: Optional[int] = None
    epoch: int = 0
    step: int = 0
    velocity: dict[str, Array] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.rho < 0:
            raise ContractError(f"rho must be >= 0, got {self.rho}")
        if self.microbatch is not None and self.microbatch < 1:
            raise ContractError(f"microbatch must be >= 1, got {self.microbatch}")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown schedule {self.schedule!r}")

    @property
    def current_lr(self) -> float:
        return lr_schedule(
            self.lr, self.epoch, mode=self.schedule, total_epochs=self.epochs,
            milestones=self.milestones,
        )


@dataclass
class PerturbationState:
    """A perturbation over the perturbable weights, flat and per layer."""

    epsilon: Array
    norm: float
    gradient: Array
    layers: dict[int, Array]
    scale: Optional[Array] = None


# --- perturbation rules ----------------------------------------------------


def epsilon_from_gradient(gradient: Array, rho: float) -> Array:
    """``rho * g / ||g||``, or zeros when ``||g|| < 1e-12``."""
    norm = float(np.linalg.norm(gradient))
    if norm < GRAD_FLOOR or rho == 0:
        return np.zeros_like(gradient)
    return rho * gradient / norm


def adaptive_epsilon(gradient: Array, scale: Array, rho: float) -> Array:
    """``rho * t**2 * g / ||t * g||`` for elementwise scales ``t``."""
    tg = scale * gradient
    norm = float(np.linalg.norm(tg))
    if norm < GRAD_FLOOR or rho == 0:
        return np.zeros_like(gradient)
    return rho * scale * tg / norm


def _state(model: WeightHolder, epsilon: Array, gradient: Array, scale: Optional[Array] = None) -> PerturbationState:
    return PerturbationState(
        epsilon, float(np.linalg.norm(epsilon)), gradient, split_layers(model, epsilon), scale
    )


def run_backward(
    model: Trainable, batch: Batch, config: Optional[BitwidthConfig], mode: Mode, **kwargs: Any
) -> ForwardTrace:
    """Forward under a fresh tape, then fill ``grad`` on every on-path leaf."""
    with Tape():
        trace = model.loss(batch, config, mode, **kwargs)
    if trace.loss is None:
        raise ContractError("forward pass returned no loss")
    if not np.isfinite(trace.loss.values):
        raise NonFiniteError(f"loss is {trace.loss.item()}")
    backward(trace.loss, trace.params)
    return trace


def quantized_gradient(trace: ForwardTrace, model: WeightHolder) -> Array:
    """Flat gradient with respect to the weight tensors each layer consumed."""
    grads = {}
    for i in model.perturbable():
        g = trace.effective[i].grad
        grads[i] = np.zeros(model.weights[i].shape) if g is None else g
    return flatten_layers(model, grads)


def weight_gradient(model: WeightHolder) -> Array:
    """Flat gradient already stored on the full-precision weights."""
    grads = {}
    for i in model.perturbable():
        g = model.weights[i].grad
        grads[i] = np.zeros(model.weights[i].shape) if g is None else g
    return flatten_layers(model, grads)


def compute_epsilon_hat(
    model: Trainable, batch: Batch, config: Optional[BitwidthConfig], rho: float, mode: Mode = "train"
) -> PerturbationState:
    """One ascent step on the quantized weights: ``rho * grad / ||grad||``."""
    if rho < 0:
        raise ContractError(f"rho must be >= 0, got {rho}")
    trace = run_backward(
        model, batch, config, mode, update_stats=False, retain=True, perturbation={}
    )
    g = quantized_gradient(trace, model)
    return _state(model, epsilon_from_gradient(g, rho), g)


def asaq_epsilon(
    model: Trainable,
    batch: Batch,
    config: Optional[BitwidthConfig],
    rho: float,
    xi: float = ASAQ_XI,
    mode: Mode = "train",
) -> PerturbationState:
    """Scale-adaptive ascent step with ``t = |Q_w(w, b)| + xi``."""
    if xi <= 0:
        raise ContractError(f"xi must be positive, got {xi}")
    trace = run_backward(
        model, batch, config, mode, update_stats=False, retain=True, perturbation={}
    )
    g = quantized_gradient(trace, model)
    quantized = flatten_layers(model, {i: trace.effective[i].values for i in model.perturbable()})
    scale = np.abs(quantized) + xi
    return _state(model, adaptive_epsilon(g, scale, rho), g, scale)


def perturbation_survival(w: Array, eps: Array, alpha: float, bitwidth: int) -> float:
    """Fraction of elements with ``Q_w(w + eps) == Q_w(w)``."""
    before = quantize_w_values(w, alpha, bitwidth)
    after = quantize_w_values(w + eps, alpha, bitwidth)
    return float(np.mean(before == after))


def survival_rate(before: dict[int, QuantizedView], after: dict[int, QuantizedView]) -> float:
    same = sum(int((before[i].values == after[i].values).sum()) for i in before)
    total = sum(before[i].values.size for i in before)
    return same / total if total else 1.0


def naive_sam_quant_diag(
    model: Trainable, batch: Batch, config: BitwidthConfig, rho: float
) -> float:
    """Survival rate of the quantized weights under a full-precision SAM perturbation."""
    run_backward(model, batch, config, "train", update_stats=False, perturbation={})
    g = weight_gradient(model)
    fp_eps = split_layers(model, epsilon_from_gradient(g, rho))
    return survival_rate(model.quantized_weights(config), model.quantized_weights(config, fp_eps))


def microbatches(batch: Batch, size: Optional[int]) -> Iterator[Batch]:
    """Consecutive slices of ``batch`` of length ``size`` (whole batch if None)."""
    n = len(batch)
    step = n if size is None or size >= n else size
    for start in range(0, n, step):
        yield Batch(batch.features[start : start + step], batch.labels[start : start + step])


# --- the optimizer -----------------------------------------------------------

class SharpnessOptimizer:
    """Momentum SGD with optional perturb-then-descend steps.

    ``passes`` counts forward+backward passes, so a sharpness step over ``k``
    microbatches adds ``2 * k``.
    """

    def __init__(self, model: Trainable, state: OptimState) -> None:
        self.model = model
        self.state = state
        self.passes = 0

    # -- plumbing -----------------------------------------------------------

    def _pass(self, batch: Batch, config: Optional[BitwidthConfig], **kwargs: Any) -> ForwardTrace:
        self.passes += 1
        return run_backward(self.model, batch, config, "train", **kwargs)

    @staticmethod
    def _grads(trace: ForwardTrace) -> dict[str, tuple[Tensor, Array]]:
        out: dict[str, tuple[Tensor, Array]] = {}
        for p in trace.params:
            if p.name is None:
                raise ContractError("trainable tensors must be named")
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            out[p.name] = (p, grad)
        return out

    def _apply(self, grads: dict[str, tuple[Tensor, Array]]) -> None:
        """Momentum SGD with L2 decay on conv/linear weights only."""
        lr = self.state.current_lr
        decayed = self.model.decayed()
        for name in sorted(grads):
            p, g = grads[name]
            if id(p) in decayed and self.state.weight_decay:
                g = g + self.state.weight_decay * p.values
            buf = self.state.velocity.get(name)
            buf = g if buf is None or not self.state.momentum else self.state.momentum * buf + g
            self.state.velocity[name] = buf
            p.values = p.values - lr * buf
        self.state.step += 1

    def _guard(self, kind: str, fn: Callable[[], float]) -> float:
        try:
            return fn()
        except NonFiniteError as exc:
            logger.error("%s step %d aborted: %s", kind, self.state.step, exc)
            raise

    # -- steps --------------------------------------------------------------

    def sgd_step(self, batch: Batch, config: Optional[BitwidthConfig]) -> float:
        """One momentum-SGD step at ``Q_w(w, b)``; returns the batch loss."""

        def run() -> float:
            trace = self._pass(batch, config)
            assert trace.loss is not None
            self._apply(self._grads(trace))
            return trace.loss.item()

        return self._guard("sgd", run)

    def _two_pass(
        self,
        kind: str,
        batch: Batch,
        config: Optional[BitwidthConfig],
        ascent: Callable[[ForwardTrace], Array],
        perturb_weights: bool,
    ) -> float:
        """Shared m-sharpness loop: ascend per microbatch, average perturbed grads.

        BN running averages move once per step, from the size-weighted batch
        statistics of the perturbed passes.
        """

        def run() -> float:
            n = len(batch)
            accum: dict[str, tuple[Tensor, Array]] = {}
            stats = BNStatsBuffer()
            total = 0.0
            for mb in microbatches(batch, self.state.microbatch):
                share = len(mb) / n
                first = self._pass(mb, config, update_stats=False, retain=True, perturbation={})
                assert first.loss is not None
                eps = ascent(first)
                layers = split_layers(self.model, eps) if np.any(eps) else {}
                if perturb_weights:
                    second = self._pass(mb, config, fp_perturbation=layers, perturbation={}, stats=stats)
                else:
                    second = self._pass(mb, config, perturbation=layers, stats=stats)
                for name, (p, g) in self._grads(second).items():
                    weighted = g if share == 1.0 else share * g
                    if name in accum:
                        accum[name] = (p, accum[name][1] + weighted)
                    else:
                        accum[name] = (p, weighted)
                total += first.loss.item() * share
            stats.flush()
            self._apply(accum)
            return total

        return self._guard(kind, run)

    def saq_step(self, batch: Batch, config: BitwidthConfig) -> float:
        """Perturb the quantized weights along their loss gradient, then descend."""
        rho = self.state.rho
        return self._two_pass(
            "saq", batch, config,
            lambda trace: epsilon_from_gradient(quantized_gradient(trace, self.model), rho),
            perturb_weights=False,
        )

    def asaq_step(self, batch: Batch, config: BitwidthConfig) -> float:
        rho, xi = self.state.rho, self.state.xi

        def ascent(trace: ForwardTrace) -> Array:
            g = quantized_gradient(trace, self.model)
            q = flatten_layers(
                self.model, {i: trace.effective[i].values for i in self.model.perturbable()}
            )
            return adaptive_epsilon(g, np.abs(q) + xi, rho)

        return self._two_pass("asaq", batch, config, ascent, perturb_weights=False)

    def sam_step(self, batch: Batch, config: Optional[BitwidthConfig] = None) -> float:
        """SAM on the full-precision weights.

        Without ``config`` this is plain full-precision SAM; with one, the
        perturbation is added to ``w`` before quantization.
        """
        rho = self.state.rho
        return self._two_pass(
            "sam", batch, config,
            lambda trace: epsilon_from_gradient(weight_gradient(self.model), rho),
            perturb_weights=config is not None,
        )

    def step(self, kind: str, batch: Batch, config: Optional[BitwidthConfig]) -> float:
        """Dispatch to one of ``OPTIMIZERS``."""
        if kind == "sgd":
            return self.sgd_step(batch, config)
        if kind == "sam":
            return self.sam_step(batch, config)
        if config is None:
            raise ContractError(f"{kind} needs a bitwidth configuration")
        if kind == "saq":
            return self.saq_step(batch, config)
        if kind == "asaq":
            return self.asaq_step(batch, config)
        raise ContractError(f"unknown optimizer {kind!r}; choose from {OPTIMIZERS}")


# --- policy optimizer --------------------------------------------------------


@dataclass
class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    params: list[Tensor]
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-5
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def step(self, grads: dict[str, Array]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p in self.params:
            assert p.name is not None
            g = grads.get(p.name)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            m = b1 * self.m.get(p.name, np.zeros_like(g)) + (1 - b1) * g
            v = b2 * self.v.get(p.name, np.zeros_like(g)) + (1 - b2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
