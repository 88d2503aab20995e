"""Tests for the quantizers and their straight-through gradients."""

import numpy as np
import pytest

from src.errors import ContractError, ModelConfigError, QuantizationError
from src.quantizer import (
    ClippingLevels,
    QuantizedView,
    QuantSpec,
    discretize,
    levels,
    normalize_w,
    normalize_z,
    quantize_w,
    quantize_w_composed,
    quantize_w_values,
    quantize_z,
    quantize_z_composed,
    quantize_z_values,
    ste_rules,
    weight_levels,
)
from src.tensor import Tape, backward, constant, parameter, sum_all


def closed_form_w(w: np.ndarray, alpha: np.ndarray, b: int) -> tuple[np.ndarray, np.ndarray]:
    q = quantize_w_values(w, alpha, b)
    inside = np.abs(w) < alpha
    return inside.astype(float), np.where(inside, (q - w) / alpha, np.sign(w))


def closed_form_z(z: np.ndarray, alpha: np.ndarray, b: int) -> tuple[np.ndarray, np.ndarray]:
    q = quantize_z_values(z, alpha, b)
    inside = (z > 0) & (z < alpha)
    d_alpha = np.where(z >= alpha, 1.0, np.where(z <= 0, 0.0, (q - z) / alpha))
    return inside.astype(float), d_alpha


def test_levels() -> None:
    assert levels(2) == 3
    assert levels(8) == 255
    with pytest.raises(QuantizationError):
        levels(1)


def test_normalize_examples() -> None:
    """Normalization maps clip into [0, 1]."""
    w = normalize_w(constant(np.array([0.0, 2.0, -0.5])), 1.0)
    assert w.values.tolist() == [0.5, 1.0, 0.25]
    z = normalize_z(constant(np.array([0.4, -3.0])), 1.0)
    assert z.values.tolist() == [0.4, 0.0]
    assert normalize_z(constant(np.array([5.0])), 2.0).values.tolist() == [1.0]


@pytest.mark.parametrize("alpha", [0.0, -1.0])
def test_non_positive_clipping_level(alpha: float) -> None:
    with pytest.raises(QuantizationError):
        normalize_w(constant(np.zeros(2)), alpha)
    with pytest.raises(QuantizationError):
        normalize_z(constant(np.zeros(2)), alpha)
    with pytest.raises(QuantizationError):
        quantize_w_values(np.zeros(2), alpha, 2)


def test_discretize_examples() -> None:
    """round(v s) / s with ties away from zero."""
    out = discretize(constant(np.array([0.4, 0.0, 1.0, 0.5])), 2)
    assert out.values[0] == pytest.approx(1 / 3, abs=1e-15)
    assert out.values[1] == 0.0
    assert out.values[2] == 1.0
    assert out.values[3] == pytest.approx(2 / 3, abs=1e-15)


def test_discretize_rejects_out_of_range() -> None:
    with pytest.raises(ContractError):
        discretize(constant(np.array([1.1])), 3)
    with pytest.raises(ContractError):
        discretize(constant(np.array([-0.01])), 3)


def test_quantize_examples() -> None:
    q = quantize_w(constant(np.array([0.4, 3.0, -3.0])), 2, 1.0).values
    assert q[0] == pytest.approx(1 / 3, abs=1e-15)
    assert q[1:].tolist() == [1.0, -1.0]
    z = quantize_z(constant(np.array([0.4, 0.0])), 2, 1.0).values
    assert z[0] == pytest.approx(1 / 3, abs=1e-15)
    assert z[1] == 0.0


def test_fused_and_composed_forward_agree(rng: np.random.Generator) -> None:
    """The fused quantizers and the round/clip compositions give identical values."""
    w = rng.uniform(-2, 2, 1000)
    for b in (2, 3, 4, 8):
        fused = quantize_w(constant(w), b, 0.7).values
        composed = quantize_w_composed(constant(w), b, 0.7).values
        assert np.array_equal(fused, composed)
        fused_z = quantize_z(constant(w), b, 1.3).values
        composed_z = quantize_z_composed(constant(w), b, 1.3).values
        assert np.array_equal(fused_z, composed_z)


def test_quantize_w_properties(rng: np.random.Generator) -> None:
    """Codomain, idempotence, monotonicity and bounded error over 10^4 weights per bitwidth."""
    for b in (2, 3, 4, 5, 8):
        alpha = float(rng.uniform(0.1, 3.0))
        w = np.sort(rng.uniform(-2 * alpha, 2 * alpha, 10_000))
        q = quantize_w_values(w, alpha, b)
        assert np.isin(q, weight_levels(alpha, b)).all()
        assert len(np.unique(q)) <= 2**b
        assert np.array_equal(quantize_w_values(q, alpha, b), q)
        assert np.all(np.diff(q) >= 0)
        error = np.abs(q - np.clip(w, -alpha, alpha))
        assert error.max() <= alpha / levels(b) + 1e-12


def test_quantize_z_codomain(rng: np.random.Generator) -> None:
    z = rng.uniform(-1, 3, 100_000)
    for b in (2, 3, 4):
        assert len(np.unique(quantize_z_values(z, 1.5, b))) <= 2**b


def test_ste_examples() -> None:
    """Branch formulas at an interior and a clipped weight."""
    w = parameter(np.array([0.4, 2.0]))
    alpha = parameter(1.0)
    with Tape():
        loss = sum_all(quantize_w(w, 2, alpha))
    backward(loss)
    assert w.grad.tolist() == [1.0, 0.0]  # type: ignore[union-attr]
    assert float(alpha.grad) == pytest.approx(-1 / 15 + 1.0, abs=1e-12)  # type: ignore[arg-type]


def test_fused_gradients_match_branch_formulas(rng: np.random.Generator) -> None:
    """Autodiff through the fused rules equals the closed forms over 10^4 instances."""
    for trial in range(100):
        b = int(rng.choice([2, 3, 4, 5, 8]))
        a = float(rng.uniform(0.2, 2.0))
        x = rng.uniform(-2.5, 2.5, 100)
        for fn, closed in ((quantize_w, closed_form_w), (quantize_z, closed_form_z)):
            w, alpha = parameter(x), parameter(a)
            with Tape():
                loss = sum_all(fn(w, b, alpha))
            backward(loss)
            d_x, d_alpha = closed(x, np.full_like(x, a), b)
            assert np.allclose(w.grad, d_x, rtol=0, atol=1e-12), trial
            assert float(alpha.grad) == pytest.approx(d_alpha.sum(), abs=1e-9)  # type: ignore[arg-type]


def test_composed_gradients_match_branch_formulas(rng: np.random.Generator) -> None:
    """Round and clip rules compose into the same elementwise gradients."""
    for b in (2, 3, 4, 5, 8):
        x = rng.uniform(-2.5, 2.5, 2000)
        a = rng.uniform(0.2, 2.0, 2000)
        for fn, closed in ((quantize_w_composed, closed_form_w), (quantize_z_composed, closed_form_z)):
            w, alpha = parameter(x), parameter(a)
            with Tape():
                loss = sum_all(fn(w, b, alpha))
            backward(loss)
            d_x, d_alpha = closed(x, a, b)
            assert np.allclose(w.grad, d_x, rtol=0, atol=1e-12)
            assert np.allclose(alpha.grad, d_alpha, rtol=0, atol=1e-12)


def test_ste_rules_registered() -> None:
    assert set(ste_rules()) == {"ste_round", "ste_clip", "quantize_w", "quantize_z"}


def test_quant_spec_validation() -> None:
    assert QuantSpec().bitwidths == (2, 3, 4, 5)
    with pytest.raises(QuantizationError):
        QuantSpec(bitwidths=())
    with pytest.raises(QuantizationError):
        QuantSpec(bitwidths=(4, 2))
    with pytest.raises(QuantizationError):
        QuantSpec(bitwidths=(1, 2))
    with pytest.raises(QuantizationError):
        QuantSpec(init_alpha_w=0.0)


def test_clipping_levels_switch_per_bitwidth() -> None:
    """Each bitwidth owns an independent, positive clipping level."""
    clip = ClippingLevels.create((2, 3, 4), 1.0, "layer0.alpha_w")
    assert clip.value(2) == 1.0
    clip.log_alpha[3].values = np.log(np.array(2.5))
    assert clip.value(3) == pytest.approx(2.5)
    assert clip.value(2) == 1.0
    assert clip.log_alpha[4].name == "layer0.alpha_w.4"
    with pytest.raises(ModelConfigError):
        clip.alpha(8)


def test_quantized_view_on_grid(rng: np.random.Generator) -> None:
    w = parameter(rng.standard_normal((4, 3)))
    view = QuantizedView.of(w, 3, 0.8)
    assert view.values.shape == (4, 3)
    assert np.isin(view.values, view.levels()).all()
    shifted = QuantizedView.of(w, 3, 0.8, source=w.values + 10.0)
    assert np.all(shifted.values == 0.8)
