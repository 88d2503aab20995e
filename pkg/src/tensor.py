"""Dense float64 tensors with tape-based reverse-mode differentiation.

A computation is recorded while a ``Tape`` is active::

    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), labels)
    backward(loss)

Every primitive checks its output for NaN/Inf while strict mode is on, and a
tape can be replayed backward exactly once.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import ArrayLike, NDArray

from src.errors import ContractError, DimensionError, LabelIndexError, NonFiniteError

Array = NDArray[np.float64]
GradTuple = tuple[Optional[Array], ...]
Operand = Union["Tensor", int, float]

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)
_strict: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "strict_finite", default=True
)


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "retain_grad", "name", "_tape")

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.values: Array = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self.retain_grad = False
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, values: Array) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.values = values
        tensor.requires_grad = False
        tensor.grad = None
        tensor.retain_grad = False
        tensor.name = None
        tensor._tape = None
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> Array:
        return self.values

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Node:
    """One recorded primitive application."""

    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[Array], GradTuple]
    op: str


class Tape:
    """Ordered record of primitive applications, replayed once by ``backward``."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        self._token: Optional[contextvars.Token[Optional[Tape]]] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def record(self, node: Node) -> None:
        if self.consumed:
            raise ContractError("cannot record onto a tape that was already replayed")
        self.nodes.append(node)

    def backward(self, loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
        """Fill ``grad`` of every leaf that requires it with d(loss)/d(leaf).

        Leaves that the loss does not depend on (including any passed in
        ``leaves``) receive a zero gradient.
        """
        if self.consumed:
            raise ContractError(
                "backward was already run for this forward pass; re-run the forward"
            )
        if loss.values.ndim != 0:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True

        grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
        produced = {id(node.output) for node in self.nodes}
        leaf_refs: dict[int, Tensor] = {id(leaf): leaf for leaf in leaves}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    leaf_refs[id(tensor)] = tensor

        for node in reversed(self.nodes):
            out_grad = grads.pop(id(node.output), None)
            if node.output.retain_grad:
                node.output.grad = (
                    np.array(out_grad)
                    if out_grad is not None
                    else np.zeros_like(node.output.values)
                )
            if out_grad is None:
                continue
            input_grads = node.backward(out_grad)
            if len(input_grads) != len(node.inputs):
                raise ContractError(
                    f"{node.op}: backward returned {len(input_grads)} gradients "
                    f"for {len(node.inputs)} inputs"
                )
            for tensor, grad in zip(node.inputs, input_grads):
                if not tensor.requires_grad or grad is None:
                    continue
                if grad.shape != tensor.values.shape:
                    raise ContractError(
                        f"{node.op}: gradient shape {grad.shape} does not match "
                        f"input shape {tensor.values.shape}"
                    )
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad

        for key, leaf in leaf_refs.items():
            grad = grads.get(key)
            leaf.grad = (
                np.array(grad, dtype=np.float64)
                if grad is not None
                else np.zeros_like(leaf.values)
            )


def backward(loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
    """Replay the tape ``loss`` was recorded on."""
    if loss._tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.values)
            return
        raise ContractError("loss was not recorded on a tape; nothing to differentiate")
    loss._tape.backward(loss, leaves)


@contextmanager
def strict_finite(enabled: bool) -> Iterator[None]:
    """Temporarily switch the NaN/Inf guard on or off."""
    token = _strict.set(enabled)
    try:
        yield
    finally:
        _strict.reset(token)


def constant(values: ArrayLike) -> Tensor:
    return Tensor(values)


def parameter(values: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _emit(
    values: Array,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[Array], GradTuple],
    op: str,
) -> Tensor:
    if _strict.get() and not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(np.asarray(values, dtype=np.float64))
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(Node(tuple(inputs), out, backward_fn, op))
    return out


def _as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(float(value))


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(grad: Array, like: Tensor) -> Array:
    if grad.shape == like.values.shape:
        return grad
    return np.asarray(grad.sum(), dtype=np.float64).reshape(like.values.shape)


# --- elementwise -----------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    _check_elementwise(ta, tb, "add")
    return _emit(
        ta.values + tb.values,
        (ta, tb),
        lambda g: (_reduce_to(g, ta), _reduce_to(g, tb)),
        "add",
    )


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    _check_elementwise(ta, tb, "sub")
    return _emit(
        ta.values - tb.values,
        (ta, tb),
        lambda g: (_reduce_to(g, ta), _reduce_to(-g, tb)),
        "sub",
    )


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    _check_elementwise(ta, tb, "mul")
    return _emit(
        ta.values * tb.values,
        (ta, tb),
        lambda g: (_reduce_to(g * tb.values, ta), _reduce_to(g * ta.values, tb)),
        "mul",
    )


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = _as_tensor(a), _as_tensor(b)
    _check_elementwise(ta, tb, "div")
    out = ta.values / tb.values
    return _emit(
        out,
        (ta, tb),
        lambda g: (
            _reduce_to(g / tb.values, ta),
            _reduce_to(-g * out / tb.values, tb),
        ),
        "div",
    )


def neg(x: Tensor) -> Tensor:
    return _emit(-x.values, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _emit(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _emit(np.log(x.values), (x,), lambda g: (g / x.values,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.values) + 1.0)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _emit(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


# --- reductions and reshaping ---------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return _emit(
        np.asarray(x.values.sum()),
        (x,),
        lambda g: (np.broadcast_to(g, x.values.shape).copy(),),
        "sum",
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size
    return _emit(
        np.asarray(x.values.mean()),
        (x,),
        lambda g: (np.full(x.values.shape, float(g) / n),),
        "mean",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.values.shape
    return _emit(
        x.values.reshape(tuple(shape)),
        (x,),
        lambda g: (g.reshape(original),),
        "reshape",
    )


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _emit(x.values.T.copy(), (x,), lambda g: (g.T.copy(),), "transpose")


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[:, start:stop]``."""
    def _backward(g: Array) -> GradTuple:
        full = np.zeros_like(x.values)
        full[:, start:stop] = g
        return (full,)

    return _emit(x.values[:, start:stop].copy(), (x,), _backward, "columns")


def row(table: Tensor, index: int) -> Tensor:
    """Embedding lookup: ``table[index]`` as a ``[1, D]`` tensor."""
    if not 0 <= index < table.shape[0]:
        raise LabelIndexError(f"row {index} out of range for {table.shape[0]} rows")

    def _backward(g: Array) -> GradTuple:
        full = np.zeros_like(table.values)
        full[index] = g[0]
        return (full,)

    return _emit(table.values[index : index + 1].copy(), (table,), _backward, "row")


def take(x: Tensor, index: int) -> Tensor:
    """Scalar element at flat position ``index``."""
    def _backward(g: Array) -> GradTuple:
        full = np.zeros_like(x.values)
        full.reshape(-1)[index] = g
        return (full,)

    return _emit(np.asarray(x.values.reshape(-1)[index]), (x,), _backward, "take")


# --- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _emit(
        a.values @ b.values,
        (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
        "matmul",
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel vector along axis 1 of ``x``."""
    if bias.values.ndim != 1 or x.values.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"bias of shape {bias.shape} does not fit input {x.shape}")
    view = (1, -1) + (1,) * (x.values.ndim - 2)
    axes = tuple(i for i in range(x.values.ndim) if i != 1)
    return _emit(
        x.values + bias.values.reshape(view),
        (x, bias),
        lambda g: (g, g.sum(axis=axes)),
        "add_bias",
    )


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of ``[N,C,H,W]`` with ``[F,C,k,k]``."""
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if c != cw or k != k2:
        raise DimensionError(f"conv2d filter {w.shape} does not fit input {x.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if k > hp or k > wp or ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output extent is empty for input {x.shape}")

    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    wmat = w.values.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def _backward(g: Array) -> GradTuple:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (g2.T @ cols).reshape(w.values.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return (dxp[:, :, pad : pad + h, pad : pad + wd].copy(), dw)

    return _emit(np.ascontiguousarray(out), (x, w), _backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2, pad: int = 0) -> Tensor:
    if x.values.ndim != 4:
        raise DimensionError(f"max_pool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, wd = x.shape
    ho, wo = (h + 2 * pad - kernel) // stride + 1, (wd + 2 * pad - kernel) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"max_pool2d output extent is empty for input {x.shape}")
    xp = np.pad(
        x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf
    )
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g: Array) -> GradTuple:
        dxp = np.zeros_like(xp)
        rows = np.arange(ho)[:, None] * stride + arg // kernel
        cols = np.arange(wo)[None, :] * stride + arg % kernel
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dxp, (ni, ci, rows, cols), g)
        return (dxp[:, :, pad : pad + h, pad : pad + wd].copy(),)

    return _emit(out, (x,), _backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the spatial axes: ``[N,C,H,W] -> [N,C]``."""
    if x.values.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return _emit(
        x.values.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.values.shape).copy(),),
        "global_avg_pool",
    )


# --- normalisation ---------------------------------------------------------


def _channel_axes(ndim: int) -> tuple[int, ...]:
    return (0,) if ndim == 2 else (0, 2, 3)


def _channel_view(values: Array, ndim: int) -> Array:
    return values.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> tuple[Tensor, Array, Array]:
    """Normalise with batch statistics; returns ``(out, batch_mean, batch_var)``."""
    ndim = x.values.ndim
    if ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} vs {gamma.shape} channels")
    axes = _channel_axes(ndim)
    count = x.values.size // x.shape[1]
    mean = x.values.mean(axis=axes)
    var = x.values.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - _channel_view(mean, ndim)) * _channel_view(inv_std, ndim)
    out = _channel_view(gamma.values, ndim) * xhat + _channel_view(beta.values, ndim)

    def _backward(g: Array) -> GradTuple:
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * _channel_view(gamma.values, ndim)
        sum_dxhat = _channel_view(dxhat.sum(axis=axes), ndim)
        sum_dxhat_xhat = _channel_view((dxhat * xhat).sum(axis=axes), ndim)
        dx = (
            _channel_view(inv_std, ndim)
            / count
            * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        )
        return (dx, dgamma, dbeta)

    return _emit(out, (x, gamma, beta), _backward, "batch_norm"), mean, var


def batch_norm_inference(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise with fixed running statistics."""
    ndim = x.values.ndim
    axes = _channel_axes(ndim)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.values - _channel_view(running_mean, ndim)) * _channel_view(inv_std, ndim)
    out = _channel_view(gamma.values, ndim) * xhat + _channel_view(beta.values, ndim)
    return _emit(
        out,
        (x, gamma, beta),
        lambda g: (
            g * _channel_view(gamma.values * inv_std, ndim),
            (g * xhat).sum(axis=axes),
            g.sum(axis=axes),
        ),
        "batch_norm_inference",
    )


def standardize_values(values: Array, eps: float = 1e-5) -> tuple[Array, Array]:
    """Row-standardised ``[F, -1]`` view of ``values`` and its inverse stds."""
    flat = values.reshape(values.shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(flat.var(axis=1, keepdims=True) + eps)
    return (flat - mean) * inv_std, inv_std


def standardize_rows(w: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rescaling of each output channel (axis 0)."""
    xhat, inv_std = standardize_values(w.values, eps)
    count = xhat.shape[1]

    def _backward(g: Array) -> GradTuple:
        g2 = g.reshape(xhat.shape)
        dx = inv_std / count * (
            count * g2
            - g2.sum(axis=1, keepdims=True)
            - xhat * (g2 * xhat).sum(axis=1, keepdims=True)
        )
        return (dx.reshape(w.values.shape),)

    return _emit(xhat.reshape(w.values.shape), (w,), _backward, "standardize_rows")


# --- losses ----------------------------------------------------------------


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax of a ``[N, K]`` tensor."""
    if logits.values.ndim != 2:
        raise DimensionError(f"log_softmax expects [N, K], got {logits.shape}")
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _emit(
        out,
        (logits,),
        lambda g: (g - probs * g.sum(axis=1, keepdims=True),),
        "log_softmax",
    )


def softmax_cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.values.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [N, K], got {logits.shape}")
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if idx.shape[0] != n:
        raise DimensionError(f"{idx.shape[0]} labels for a batch of {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise LabelIndexError(f"labels must lie in [0, {k}), got {idx.min()}..{idx.max()}")
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, idx])

    def _backward(g: Array) -> GradTuple:
        probs = np.exp(shifted - lse[:, None])
        probs[rows, idx] -= 1.0
        return (probs * (float(g) / n),)

    return _emit(np.asarray(loss), (logits,), _backward, "softmax_cross_entropy")


# --- custom gradients ------------------------------------------------------


@dataclass(frozen=True)
class CustomGradRule:
    """Forward on raw arrays plus the backward that replaces its derivative.

    ``backward(grad_out, inputs, output, **params)`` returns one gradient (or
    None) per forward input.
    """

    name: str
    arity: int
    forward: Callable[..., Array]
    backward: Callable[..., GradTuple]


class CustomPrimitive:
    """A primitive whose backward dispatches to a registered rule."""

    def __init__(self, rule: CustomGradRule) -> None:
        self.rule = rule

    def __call__(self, *inputs: Operand, **params: Any) -> Tensor:
        if len(inputs) != self.rule.arity:
            raise ContractError(
                f"{self.rule.name} takes {self.rule.arity} inputs, got {len(inputs)}"
            )
        tensors = tuple(_as_tensor(t) for t in inputs)
        arrays = tuple(t.values for t in tensors)
        out = np.asarray(self.rule.forward(*arrays, **params), dtype=np.float64)
        rule = self.rule

        def _backward(g: Array) -> GradTuple:
            grads = rule.backward(g, arrays, out, **params)
            if len(grads) != len(arrays):
                raise ContractError(
                    f"{rule.name}: backward arity {len(grads)} != forward arity {len(arrays)}"
                )
            return tuple(
                None if grad is None else _reduce_to(np.asarray(grad), t)
                for grad, t in zip(grads, tensors)
            )

        return _emit(out, tensors, _backward, rule.name)

    def __repr__(self) -> str:
        return f"CustomPrimitive({self.rule.name!r})"


def register_custom_grad(rule: CustomGradRule) -> CustomPrimitive:
    """Make ``rule`` usable inside taped computations."""
    return CustomPrimitive(rule)
