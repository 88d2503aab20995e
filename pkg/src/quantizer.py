"""Uniform fixed-point quantizers with learnable clipping levels.

Weights are mapped through ``alpha * (2 * D(w_hat) - 1)`` and activations
through ``alpha * D(z_hat)``, where ``D`` rounds onto ``s = 2**b - 1`` steps.
Rounding is differentiated with the straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from src.errors import ContractError, ModelConfigError, QuantizationError
from src.tensor import (
    Array,
    CustomGradRule,
    GradTuple,
    Tensor,
    add,
    div,
    exp,
    mul,
    parameter,
    register_custom_grad,
    sub,
)

DEFAULT_BITWIDTHS: tuple[int, ...] = (2, 3, 4, 5)
FIXED_BITWIDTH = 8
FULL_PRECISION = 32
INIT_CLIP = 1.0
ROUNDING_RULES = ("half_away_from_zero",)

Alpha = Union[Tensor, float]


def levels(bitwidth: int) -> int:
    """Number of nonzero quantization steps ``s = 2**b - 1``."""
    if bitwidth < 2:
        raise QuantizationError(f"bitwidth must be >= 2, got {bitwidth}")
    return 2**bitwidth - 1


def round_half_away(x: Array) -> Array:
    magnitude = np.abs(x)
    floor = np.floor(magnitude)
    rounded = floor + (magnitude - floor >= 0.5)
    return np.asarray(np.copysign(rounded, x), dtype=np.float64)


def _check_alpha(alpha: Union[Array, float], name: str) -> None:
    if np.any(np.asarray(alpha) <= 0):
        raise QuantizationError(f"{name} must be positive, got {alpha}")


def quantize_w_values(w: Array, alpha: Union[Array, float], bitwidth: int) -> Array:
    """Array form of ``quantize_w``; same arithmetic order as the taped path."""
    _check_alpha(alpha, "alpha_w")
    s = levels(bitwidth)
    w_hat = (np.clip(w / alpha, -1.0, 1.0) + 1.0) * 0.5
    d = round_half_away(w_hat * s) / s
    return np.asarray(alpha * (2.0 * d - 1.0), dtype=np.float64)


def quantize_z_values(z: Array, alpha: Union[Array, float], bitwidth: int) -> Array:
    _check_alpha(alpha, "alpha_z")
    s = levels(bitwidth)
    z_hat = np.clip(z / alpha, 0.0, 1.0)
    return np.asarray(alpha * (round_half_away(z_hat * s) / s), dtype=np.float64)


def weight_levels(alpha: float, bitwidth: int) -> Array:
    """The codomain ``{alpha * (2k/s - 1) : k = 0..s}`` of ``quantize_w``."""
    s = levels(bitwidth)
    return alpha * (2.0 * (np.arange(s + 1) / s) - 1.0)


# --- straight-through rules ------------------------------------------------


def _round_backward(g: Array, inputs: tuple[Array, ...], out: Array) -> GradTuple:
    return (g,)


def _clip_forward(x: Array, *, low: float, high: float) -> Array:
    return np.clip(x, low, high)


def _clip_backward(
    g: Array, inputs: tuple[Array, ...], out: Array, *, low: float, high: float
) -> GradTuple:
    (x,) = inputs
    return (g * ((x > low) & (x < high)),)


def _quantize_w_forward(w: Array, alpha: Array, *, bitwidth: int) -> Array:
    return quantize_w_values(w, alpha, bitwidth)


def _quantize_w_backward(
    g: Array, inputs: tuple[Array, ...], out: Array, *, bitwidth: int
) -> GradTuple:
    w, alpha = inputs
    inside = np.abs(w) < alpha
    d_alpha = np.where(inside, (out - w) / alpha, np.sign(w))
    return (g * inside, np.asarray((g * d_alpha).sum()))


def _quantize_z_forward(z: Array, alpha: Array, *, bitwidth: int) -> Array:
    return quantize_z_values(z, alpha, bitwidth)


def _quantize_z_backward(
    g: Array, inputs: tuple[Array, ...], out: Array, *, bitwidth: int
) -> GradTuple:
    z, alpha = inputs
    inside = (z > 0) & (z < alpha)
    d_alpha = np.where(z >= alpha, 1.0, np.where(z <= 0, 0.0, (out - z) / alpha))
    return (g * inside, np.asarray((g * d_alpha).sum()))


ROUND_RULE = CustomGradRule("ste_round", 1, round_half_away, _round_backward)
CLIP_RULE = CustomGradRule("ste_clip", 1, _clip_forward, _clip_backward)
QUANTIZE_W_RULE = CustomGradRule(
    "quantize_w", 2, _quantize_w_forward, _quantize_w_backward
)
QUANTIZE_Z_RULE = CustomGradRule(
    "quantize_z", 2, _quantize_z_forward, _quantize_z_backward
)

_round = register_custom_grad(ROUND_RULE)
_clip = register_custom_grad(CLIP_RULE)
_quantize_w = register_custom_grad(QUANTIZE_W_RULE)
_quantize_z = register_custom_grad(QUANTIZE_Z_RULE)


def ste_rules() -> dict[str, CustomGradRule]:
    """The registered straight-through rules, keyed by primitive name."""
    return {
        rule.name: rule
        for rule in (ROUND_RULE, CLIP_RULE, QUANTIZE_W_RULE, QUANTIZE_Z_RULE)
    }


# --- taped quantizer ops ---------------------------------------------------


def _alpha_tensor(alpha: Alpha, name: str) -> Tensor:
    tensor = alpha if isinstance(alpha, Tensor) else Tensor(float(alpha))
    _check_alpha(tensor.values, name)
    return tensor


def normalize_w(w: Tensor, alpha_w: Alpha) -> Tensor:
    """``(clip(w / alpha, -1, 1) + 1) / 2``, in [0, 1]."""
    alpha = _alpha_tensor(alpha_w, "alpha_w")
    return mul(add(_clip(div(w, alpha), low=-1.0, high=1.0), 1.0), 0.5)


def normalize_z(z: Tensor, alpha_z: Alpha) -> Tensor:
    """``clip(z / alpha, 0, 1)``."""
    alpha = _alpha_tensor(alpha_z, "alpha_z")
    return _clip(div(z, alpha), low=0.0, high=1.0)


def discretize(v_hat: Tensor, bitwidth: int) -> Tensor:
    """``round(v_hat * s) / s`` with ties rounded away from zero."""
    s = levels(bitwidth)
    if v_hat.size and (v_hat.values.min() < -1e-12 or v_hat.values.max() > 1 + 1e-12):
        raise ContractError("discretize expects inputs in [0, 1]")
    return div(_round(mul(v_hat, float(s))), float(s))


def quantize_w(w: Tensor, bitwidth: int, alpha_w: Alpha) -> Tensor:
    """Weight quantizer with the closed-form straight-through gradient."""
    return _quantize_w(w, _alpha_tensor(alpha_w, "alpha_w"), bitwidth=bitwidth)


def quantize_z(z: Tensor, bitwidth: int, alpha_z: Alpha) -> Tensor:
    """Activation quantizer with the closed-form straight-through gradient."""
    return _quantize_z(z, _alpha_tensor(alpha_z, "alpha_z"), bitwidth=bitwidth)


def quantize_w_composed(w: Tensor, bitwidth: int, alpha_w: Alpha) -> Tensor:
    """``quantize_w`` spelled out through the round and clip rules."""
    alpha = _alpha_tensor(alpha_w, "alpha_w")
    d = discretize(normalize_w(w, alpha), bitwidth)
    return mul(alpha, sub(mul(d, 2.0), 1.0))


def quantize_z_composed(z: Tensor, bitwidth: int, alpha_z: Alpha) -> Tensor:
    alpha = _alpha_tensor(alpha_z, "alpha_z")
    return mul(alpha, discretize(normalize_z(z, alpha), bitwidth))


# --- quantization state ----------------------------------------------------


@dataclass(frozen=True)
class QuantSpec:
    """Candidate bitwidths and the initial values of every clipping level."""

    bitwidths: tuple[int, ...] = DEFAULT_BITWIDTHS
    fixed_bitwidth: int = FIXED_BITWIDTH
    init_alpha_w: float = INIT_CLIP
    init_alpha_z: float = INIT_CLIP
    rounding: str = "half_away_from_zero"
    weight_norm: bool = True

    def __post_init__(self) -> None:
        if not self.bitwidths:
            raise QuantizationError("bitwidth set is empty")
        for b in (*self.bitwidths, self.fixed_bitwidth):
            levels(b)
        if tuple(sorted(set(self.bitwidths))) != tuple(self.bitwidths):
            raise QuantizationError(
                f"bitwidths must be sorted and unique, got {self.bitwidths}"
            )
        _check_alpha(self.init_alpha_w, "init_alpha_w")
        _check_alpha(self.init_alpha_z, "init_alpha_z")
        if self.rounding not in ROUNDING_RULES:
            raise QuantizationError(f"unknown rounding rule {self.rounding!r}")


@dataclass
class ClippingLevels:
    """Switchable clipping: one learnable ``log(alpha)`` per bitwidth."""

    log_alpha: dict[int, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, bitwidths: tuple[int, ...], init: float, name: str) -> "ClippingLevels":
        return cls(
            {b: parameter(np.log(init), name=f"{name}.{b}") for b in bitwidths}
        )

    def alpha(self, bitwidth: int) -> Tensor:
        if bitwidth not in self.log_alpha:
            raise ModelConfigError(
                f"no clipping level for bitwidth {bitwidth}; "
                f"available: {sorted(self.log_alpha)}"
            )
        return exp(self.log_alpha[bitwidth])

    def value(self, bitwidth: int) -> float:
        return float(self.alpha(bitwidth).values)


@dataclass
class QuantizedView:
    """Quantized values of a shared full-precision weight at one bitwidth."""

    weight: Tensor
    bitwidth: int
    alpha: float
    values: Array

    @classmethod
    def of(
        cls, weight: Tensor, bitwidth: int, alpha: float, source: Optional[Array] = None
    ) -> "QuantizedView":
        base = weight.values if source is None else source
        return cls(weight, bitwidth, alpha, quantize_w_values(base, alpha, bitwidth))

    def levels(self) -> Array:
        return weight_levels(self.alpha, self.bitwidth)
