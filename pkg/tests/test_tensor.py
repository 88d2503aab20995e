"""Tests for the tensor engine."""

import math
from typing import Callable

import numpy as np
import pytest

from src.errors import ContractError, DimensionError, LabelIndexError, NonFiniteError
from src.tensor import (
    CustomGradRule,
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    batch_norm,
    columns,
    constant,
    conv2d,
    div,
    exp,
    global_avg_pool,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean_all,
    mul,
    parameter,
    register_custom_grad,
    relu,
    reshape,
    sigmoid,
    softmax_cross_entropy,
    standardize_rows,
    strict_finite,
    sub,
    sum_all,
    tanh,
    transpose,
)
from tests.conftest import numeric_grad, relative_error

Build = Callable[..., Tensor]


def autodiff(build: Build, *arrays: np.ndarray) -> list[np.ndarray]:
    params = [parameter(a) for a in arrays]
    with Tape():
        loss = build(*params)
    backward(loss, params)
    return [p.grad for p in params]  # type: ignore[misc]


def finite_difference(build: Build, *arrays: np.ndarray) -> list[np.ndarray]:
    grads = []
    for i in range(len(arrays)):

        def f(x: np.ndarray, i: int = i) -> float:
            args = [constant(a) for a in arrays]
            args[i] = constant(x)
            return build(*args).item()

        grads.append(numeric_grad(f, arrays[i]))
    return grads


def weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return sum_all(mul(out, constant(r)))


def away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return np.sign(rng.standard_normal(shape)) * (0.05 + np.abs(rng.standard_normal(shape)))


def separated(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Values with pairwise gaps of at least 0.1 (no max-pool ties)."""
    n = math.prod(shape)
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _cases(rng: np.random.Generator) -> dict[str, tuple[Build, list[np.ndarray]]]:
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    r = rng.standard_normal((3, 4))
    r_mm, r_conv = rng.standard_normal((3, 2)), rng.standard_normal((1, 3, 4, 4))
    r_pool, r_gap, r_bn = (
        rng.standard_normal((1, 2, 2, 2)), rng.standard_normal((2, 3)), rng.standard_normal((5, 3))
    )
    return {
        "add": (lambda x, y: weighted(add(x, y), r), [a, b]),
        "sub": (lambda x, y: weighted(sub(x, y), r), [a, b]),
        "mul": (lambda x, y: weighted(mul(x, y), r), [a, b]),
        "div": (lambda x, y: weighted(div(x, y), r), [a, 1.5 + np.abs(b)]),
        "exp": (lambda x: weighted(exp(x), r), [a]),
        "log": (lambda x: weighted(log(x), r), [0.5 + np.abs(a)]),
        "tanh": (lambda x: weighted(tanh(x), r), [a]),
        "sigmoid": (lambda x: weighted(sigmoid(x), r), [a]),
        "relu": (lambda x: weighted(relu(x), r), [away_from_zero(rng, (3, 4))]),
        "mean": (lambda x: mul(mean_all(mul(x, x)), 3.0), [a]),
        "reshape": (lambda x: weighted(reshape(x, (4, 3)), r.reshape(4, 3)), [a]),
        "transpose": (lambda x: weighted(transpose(x), r.T.copy()), [a]),
        "columns": (lambda x: weighted(columns(x, 1, 3), r[:, 1:3].copy()), [a]),
        "matmul": (
            lambda x, y: weighted(matmul(x, y), r_mm),
            [a, rng.standard_normal((4, 2))],
        ),
        "add_bias": (lambda x, y: weighted(add_bias(x, y), r), [a, rng.standard_normal(4)]),
        "conv2d": (
            lambda x, w: weighted(conv2d(x, w, stride=1, pad=1), r_conv),
            [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3))],
        ),
        "max_pool2d": (
            lambda x: weighted(max_pool2d(x, 2, 2), r_pool),
            [separated(rng, (1, 2, 4, 4))],
        ),
        "global_avg_pool": (
            lambda x: weighted(global_avg_pool(x), r_gap),
            [rng.standard_normal((2, 3, 2, 2))],
        ),
        "batch_norm": (
            lambda x, g, be: weighted(batch_norm(x, g, be)[0], r_bn),
            [rng.standard_normal((5, 3)), 1 + rng.uniform(0, 1, 3), rng.standard_normal(3)],
        ),
        "standardize_rows": (
            lambda x: weighted(standardize_rows(x), r),
            [a],
        ),
        "log_softmax": (lambda x: weighted(log_softmax(x), r), [a]),
        "cross_entropy": (lambda x: softmax_cross_entropy(x, [0, 3, 1]), [a]),
    }


def test_matmul_forward_and_gradient(rng: np.random.Generator) -> None:
    """matmul matches numpy and its gradient matches finite differences."""
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    assert np.allclose(matmul(constant(a), constant(b)).values, a @ b)
    build = lambda x, y: sum_all(matmul(x, y))  # noqa: E731
    ga, gb = autodiff(build, a, b)
    fa, fb = finite_difference(build, a, b)
    assert relative_error(ga, fa) < 1e-6
    assert relative_error(gb, fb) < 1e-6
    assert np.allclose(ga, np.ones((4, 3)) @ b.T)


def test_matmul_shape_mismatch() -> None:
    """Inner dimensions must agree."""
    with pytest.raises(DimensionError):
        matmul(constant(np.ones((2, 3))), constant(np.ones((4, 2))))


def test_conv2d_ones() -> None:
    """A 3x3 ones filter over a 3x3 ones image sums to 9."""
    out = conv2d(constant(np.ones((1, 1, 3, 3))), constant(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_output_extent() -> None:
    """Output size is floor((H + 2 pad - k) / stride) + 1."""
    out = conv2d(constant(np.zeros((2, 3, 7, 7))), constant(np.zeros((4, 3, 3, 3))), stride=2, pad=1)
    assert out.shape == (2, 4, 4, 4)
    with pytest.raises(DimensionError):
        conv2d(constant(np.zeros((1, 1, 2, 2))), constant(np.zeros((1, 1, 3, 3))))


def test_conv2d_gradient(rng: np.random.Generator) -> None:
    """Input and filter gradients agree with finite differences."""
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    r = rng.standard_normal((1, 3, 3, 3))
    build = lambda a, b: weighted(conv2d(a, b), r)  # noqa: E731
    for got, want in zip(autodiff(build, x, w), finite_difference(build, x, w)):
        assert relative_error(got, want) < 1e-5


def test_cross_entropy_values() -> None:
    """Uniform logits give ln K; a saturated correct logit gives ~0."""
    uniform = softmax_cross_entropy(constant(np.zeros((3, 10))), [0, 4, 9])
    assert uniform.item() == pytest.approx(math.log(10), abs=1e-12)
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 3] = 1000.0
    assert softmax_cross_entropy(constant(logits), [1, 3]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient(rng: np.random.Generator) -> None:
    logits = rng.standard_normal((4, 5))
    build = lambda x: softmax_cross_entropy(x, [0, 1, 4, 2])  # noqa: E731
    assert relative_error(autodiff(build, logits)[0], finite_difference(build, logits)[0]) < 1e-6


def test_cross_entropy_label_out_of_range() -> None:
    """Labels outside [0, K) raise an IndexError subclass."""
    with pytest.raises(LabelIndexError):
        softmax_cross_entropy(constant(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        softmax_cross_entropy(constant(np.zeros((2, 3))), [-1, 0])


def test_backward_simple_losses(rng: np.random.Generator) -> None:
    """sum(w) gives ones; 0.5 |w|^2 gives w."""
    w = rng.standard_normal((3, 2))
    assert np.array_equal(autodiff(sum_all, w)[0], np.ones((3, 2)))
    half_sq = lambda x: mul(sum_all(mul(x, x)), 0.5)  # noqa: E731
    assert np.allclose(autodiff(half_sq, w)[0], w)


def test_backward_requires_scalar() -> None:
    w = parameter(np.ones((2, 2)))
    with Tape():
        out = mul(w, 2.0)
    with pytest.raises(ContractError):
        backward(out)


def test_backward_runs_once() -> None:
    """A second backward over the same forward is rejected."""
    w = parameter(np.ones(3))
    with Tape():
        loss = sum_all(mul(w, w))
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_off_path_leaves_get_zero_grad() -> None:
    """Leaves the loss does not depend on receive a zero gradient."""
    used, unused = parameter(np.ones(2)), parameter(np.full(3, 5.0))
    with Tape():
        loss = sum_all(used)
    backward(loss, [used, unused])
    assert np.array_equal(unused.grad, np.zeros(3))  # type: ignore[arg-type]


def test_strict_mode_rejects_non_finite() -> None:
    with pytest.raises(NonFiniteError):
        log(constant(np.array([0.0, 1.0])))
    with strict_finite(False):
        out = log(constant(np.array([0.0, 1.0])))
    assert np.isneginf(out.values[0])


def test_custom_identity_round() -> None:
    """A straight-through round passes the gradient unchanged."""
    ste_round = register_custom_grad(
        CustomGradRule("test_identity_round", 1, np.round, lambda g, inputs, out: (g,))
    )
    x = parameter(np.array([1.4, -2.6, 0.2]))
    with Tape():
        y = ste_round(x)
        loss = sum_all(mul(y, constant(np.array([1.0, 2.0, 3.0]))))
    backward(loss)
    assert np.array_equal(y.values, [1.0, -3.0, 0.0])
    assert np.array_equal(x.grad, [1.0, 2.0, 3.0])  # type: ignore[arg-type]


def test_custom_zero_backward() -> None:
    """A zero-backward rule blocks gradient flow to upstream leaves."""
    blocked = register_custom_grad(
        CustomGradRule("test_zero", 1, lambda a: a * 2, lambda g, inputs, out: (np.zeros_like(inputs[0]),))
    )
    x = parameter(np.ones(4))
    with Tape():
        loss = sum_all(blocked(x))
    backward(loss)
    assert np.array_equal(x.grad, np.zeros(4))  # type: ignore[arg-type]


def test_custom_arity_checked() -> None:
    prim = register_custom_grad(CustomGradRule("test_pair", 2, np.add, lambda g, i, o: (g, g)))
    with pytest.raises(ContractError):
        prim(constant(1.0))


@pytest.mark.parametrize("name", sorted(_cases(np.random.default_rng(0))))
def test_primitive_gradients_over_seeds(name: str) -> None:
    """Every differentiable primitive agrees with central differences over 100 seeds."""
    for seed in range(100):
        build, arrays = _cases(np.random.default_rng(seed))[name]
        for got, want in zip(autodiff(build, *arrays), finite_difference(build, *arrays)):
            assert relative_error(got, want) < 1e-4, f"{name} seed {seed}"


def test_determinism(rng: np.random.Generator) -> None:
    """Identical inputs give bit-identical values and gradients."""
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    build = lambda a, b: sum_all(tanh(conv2d(a, b, pad=1)))  # noqa: E731
    first, second = autodiff(build, x, w), autodiff(build, x, w)
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
