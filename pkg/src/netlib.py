"""Layer graphs, builders and the switchable quantized model.

A ``ModelSpec`` is an ordered list of ``LayerSpec`` nodes. Every node reads
the output of ``source`` (``INPUT`` for the network input, the previous node
by default); residual adds also read ``skip``. Weighted nodes (conv/linear)
share one full-precision weight across every bitwidth; clipping levels and
batch-norm sets are kept per bitwidth.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Literal, Mapping, Optional, Protocol

import numpy as np

from src.data import Batch, Dataset
from src.errors import CheckpointError, ContractError, ModelBuildError, ModelConfigError
from src.quantizer import (
    FULL_PRECISION,
    ClippingLevels,
    QuantizedView,
    QuantSpec,
    quantize_w,
    quantize_z,
)
from src.tensor import (
    Array,
    Tensor,
    add,
    add_bias,
    batch_norm,
    batch_norm_inference,
    constant,
    conv2d,
    flatten,
    global_avg_pool,
    matmul,
    max_pool2d,
    parameter,
    relu,
    softmax_cross_entropy,
    standardize_rows,
    standardize_values,
    transpose,
)

logger = logging.getLogger(__name__)

INPUT = -1
LAYER_KINDS = ("conv", "linear", "bn", "relu", "pool", "add", "flatten")
WEIGHT_KINDS = ("conv", "linear")
POOL_MODES = ("max", "global_avg")
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
WEIGHT_NORM_EPS = 1e-5
EVAL_CHUNK = 256

Mode = Literal["train", "eval"]


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer graph.

    ``in_size`` is the spatial extent (H = W) of the node's input; linear
    layers use ``in_channels``/``out_channels`` as feature counts.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_size: int = 1
    quantized: bool = False
    fixed_bitwidth: Optional[int] = None
    bias: bool = False
    quantize_input: bool = False
    source: Optional[int] = None
    skip: Optional[int] = None
    pool_mode: str = "max"
    shortcut: bool = False

    @property
    def out_size(self) -> int:
        if self.kind == "conv" or (self.kind == "pool" and self.pool_mode == "max"):
            return (self.in_size + 2 * self.padding - self.kernel) // self.stride + 1
        if self.kind in ("linear", "flatten") or self.pool_mode == "global_avg":
            return 1
        return self.in_size

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind == "linear":
            return (self.out_channels, self.in_channels)
        return ()

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHT_KINDS


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    classes: int
    pin_ends: bool = False

    def source_of(self, index: int) -> int:
        src = self.layers[index].source
        return index - 1 if src is None else src

    def validate(self) -> None:
        """Raise ``ModelBuildError`` unless shapes chain and the bit policy holds."""
        if not self.layers:
            raise ModelBuildError(f"{self.name}: no layers")
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ModelBuildError(f"{self.name}[{i}]: unknown kind {layer.kind!r}")
            src = self.source_of(i)
            if not INPUT <= src < i:
                raise ModelBuildError(f"{self.name}[{i}]: source {src} is not an earlier node")
            if layer.kind == "add" and (layer.skip is None or not INPUT <= layer.skip < i):
                raise ModelBuildError(f"{self.name}[{i}]: residual add needs an earlier skip")
            if layer.kind == "pool" and layer.pool_mode not in POOL_MODES:
                raise ModelBuildError(f"{self.name}[{i}]: unknown pool mode {layer.pool_mode!r}")
            if layer.out_size <= 0:
                raise ModelBuildError(f"{self.name}[{i}]: empty output extent")
            if layer.is_weighted and min(layer.in_channels, layer.out_channels) < 1:
                raise ModelBuildError(f"{self.name}[{i}]: weighted layer needs channels")
        self._check_shapes()
        self._check_policy()

    def _check_shapes(self) -> None:
        shapes = self.shapes()
        if shapes[-1] != (self.classes,):
            raise ModelBuildError(f"{self.name}: output {shapes[-1]} != ({self.classes},)")

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every node."""
        out: list[tuple[int, ...]] = []

        def shape_at(idx: int) -> tuple[int, ...]:
            return tuple(self.input_shape) if idx == INPUT else out[idx]

        for i, layer in enumerate(self.layers):
            inp = shape_at(self.source_of(i))
            if layer.kind == "conv":
                if len(inp) != 3 or inp[0] != layer.in_channels or inp[1] != layer.in_size:
                    raise ModelBuildError(f"{self.name}[{i}]: conv input {inp} mismatch")
                out.append((layer.out_channels, layer.out_size, layer.out_size))
            elif layer.kind == "linear":
                if int(np.prod(inp)) != layer.in_channels:
                    raise ModelBuildError(f"{self.name}[{i}]: linear input {inp} mismatch")
                out.append((layer.out_channels,))
            elif layer.kind == "pool":
                if len(inp) != 3:
                    raise ModelBuildError(f"{self.name}[{i}]: pooling needs an image input")
                if layer.pool_mode == "global_avg":
                    out.append((inp[0],))
                else:
                    out.append((inp[0], layer.out_size, layer.out_size))
            elif layer.kind == "flatten":
                out.append((int(np.prod(inp)),))
            elif layer.kind == "add":
                other = shape_at(layer.skip if layer.skip is not None else INPUT)
                if other != inp:
                    raise ModelBuildError(f"{self.name}[{i}]: add of {inp} and {other}")
                out.append(inp)
            else:
                if layer.kind == "bn" and inp[0] != layer.in_channels:
                    raise ModelBuildError(f"{self.name}[{i}]: bn channels mismatch")
                out.append(inp)
        return out

    def _check_policy(self) -> None:
        quantized = self.quantized_layers()
        fixed = [i for i in quantized if self.layers[i].fixed_bitwidth is not None]
        if self.pin_ends:
            if not quantized or fixed != sorted({quantized[0], quantized[-1]}):
                raise ModelBuildError(
                    f"{self.name}: pinned ends fix exactly the first and last quantized layers"
                )
        elif fixed:
            raise ModelBuildError(f"{self.name}: fixed bitwidths need pin_ends")

    def weight_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.is_weighted]

    def quantized_layers(self) -> list[int]:
        return [i for i in self.weight_layers() if self.layers[i].quantized]

    def searchable_layers(self) -> list[int]:
        """Quantized layers whose bitwidth comes from a BitwidthConfig."""
        return [i for i in self.quantized_layers() if self.layers[i].fixed_bitwidth is None]

    def depth(self) -> int:
        """Weighted layers on the main path (projection shortcuts excluded)."""
        return sum(1 for i in self.weight_layers() if not self.layers[i].shortcut)

    def parameter_count(self) -> int:
        total = 0
        for layer in self.layers:
            if layer.is_weighted:
                total += int(np.prod(layer.weight_shape))
                total += layer.out_channels if layer.bias else 0
            elif layer.kind == "bn":
                total += 2 * layer.in_channels
        return total

    def nonnegative_outputs(self) -> list[bool]:
        """Whether each node's output is provably >= 0 (fed through a ReLU)."""
        flags: list[bool] = []
        for i, layer in enumerate(self.layers):
            src = self.source_of(i)
            src_flag = False if src == INPUT else flags[src]
            if layer.kind == "relu":
                flags.append(True)
            elif layer.kind in ("pool", "flatten"):
                flags.append(src_flag)
            else:
                flags.append(False)
        return flags


def spec_to_dict(spec: ModelSpec) -> dict[str, Any]:
    return {
        "name": spec.name,
        "layers": [asdict(layer) for layer in spec.layers],
        "input_shape": list(spec.input_shape),
        "classes": spec.classes,
        "pin_ends": spec.pin_ends,
    }


def spec_from_dict(data: Mapping[str, Any]) -> ModelSpec:
    try:
        return ModelSpec(
            name=str(data["name"]),
            layers=tuple(LayerSpec(**layer) for layer in data["layers"]),
            input_shape=tuple(int(v) for v in data["input_shape"]),
            classes=int(data["classes"]),
            pin_ends=bool(data["pin_ends"]),
        )
    except (KeyError, TypeError) as exc:
        raise ModelBuildError(f"malformed model spec: {exc}") from exc


# --- builders --------------------------------------------------------------


def _apply_policy(layers: list[LayerSpec], pin_ends: bool, fixed: int = 8) -> tuple[LayerSpec, ...]:
    """Pin the first and last quantized layers to ``fixed`` bits when ``pin_ends`` is set.

    Only the first layer also quantizes its raw input; the last one already
    reads post-ReLU activations.
    """
    if not pin_ends:
        return tuple(layers)
    quantized = [i for i, layer in enumerate(layers) if layer.is_weighted and layer.quantized]
    first, last = quantized[0], quantized[-1]
    layers[last] = replace(layers[last], fixed_bitwidth=fixed)
    layers[first] = replace(layers[first], fixed_bitwidth=fixed, quantize_input=True)
    return tuple(layers)


def mlp(
    input_dim: int = 784,
    hidden: tuple[int, ...] = (64,),
    classes: int = 10,
    pin_ends: bool = False,
) -> ModelSpec:
    """Fully connected network with ReLU between quantized linear layers."""
    layers: list[LayerSpec] = []
    width = input_dim
    for h in hidden:
        layers.append(LayerSpec("linear", width, h, quantized=True, bias=True))
        layers.append(LayerSpec("relu", h, h))
        width = h
    layers.append(LayerSpec("linear", width, classes, quantized=True, bias=True))
    spec = ModelSpec("mlp", _apply_policy(layers, pin_ends), (input_dim,), classes, pin_ends)
    spec.validate()
    return spec


def miniconv(
    in_channels: int = 1,
    size: int = 8,
    classes: int = 4,
    width: int = 8,
    hidden: int = 16,
    pin_ends: bool = False,
) -> ModelSpec:
    """Two conv-BN-ReLU-pool stages followed by two linear layers."""
    layers: list[LayerSpec] = []
    channels, extent = in_channels, size
    for _ in range(2):
        layers += [
            LayerSpec("conv", channels, width, kernel=3, padding=1, in_size=extent, quantized=True),
            LayerSpec("bn", width, width, in_size=extent),
            LayerSpec("relu", width, width, in_size=extent),
            LayerSpec("pool", width, width, kernel=2, stride=2, in_size=extent),
        ]
        channels, extent = width, extent // 2
    flat = channels * extent * extent
    layers += [
        LayerSpec("linear", flat, hidden, quantized=True, bias=True),
        LayerSpec("relu", hidden, hidden),
        LayerSpec("linear", hidden, classes, quantized=True, bias=True),
    ]
    spec = ModelSpec(
        "miniconv", _apply_policy(layers, pin_ends), (in_channels, size, size), classes, pin_ends
    )
    spec.validate()
    return spec


def _basic_block(
    layers: list[LayerSpec], in_ch: int, out_ch: int, stride: int, size: int
) -> int:
    """Append a two-conv residual block; returns the output spatial size."""
    block_in = len(layers) - 1
    out_size = (size + 2 - 3) // stride + 1
    layers += [
        LayerSpec("conv", in_ch, out_ch, kernel=3, stride=stride, padding=1, in_size=size, quantized=True),
        LayerSpec("bn", out_ch, out_ch, in_size=out_size),
        LayerSpec("relu", out_ch, out_ch, in_size=out_size),
        LayerSpec("conv", out_ch, out_ch, kernel=3, padding=1, in_size=out_size, quantized=True),
        LayerSpec("bn", out_ch, out_ch, in_size=out_size),
    ]
    main_out = len(layers) - 1
    skip = block_in
    if stride != 1 or in_ch != out_ch:
        layers += [
            LayerSpec(
                "conv", in_ch, out_ch, kernel=1, stride=stride, in_size=size,
                quantized=True, source=block_in, shortcut=True,
            ),
            LayerSpec("bn", out_ch, out_ch, in_size=out_size),
        ]
        skip = len(layers) - 1
    layers += [
        LayerSpec("add", out_ch, out_ch, in_size=out_size, source=main_out, skip=skip),
        LayerSpec("relu", out_ch, out_ch, in_size=out_size),
    ]
    return out_size


def _resnet(
    name: str,
    stem: list[LayerSpec],
    size: int,
    stages: tuple[int, ...],
    blocks: int,
    classes: int,
    input_shape: tuple[int, ...],
    pin_ends: bool,
) -> ModelSpec:
    layers = list(stem)
    in_ch = stages[0]
    for s, out_ch in enumerate(stages):
        for block in range(blocks):
            stride = 2 if s > 0 and block == 0 else 1
            size = _basic_block(layers, in_ch, out_ch, stride, size)
            in_ch = out_ch
    layers += [
        LayerSpec("pool", in_ch, in_ch, in_size=size, pool_mode="global_avg"),
        LayerSpec("linear", in_ch, classes, quantized=True, bias=True),
    ]
    spec = ModelSpec(name, _apply_policy(layers, pin_ends), input_shape, classes, pin_ends)
    spec.validate()
    return spec


def resnet20(classes: int = 100, size: int = 32, pin_ends: bool = True) -> ModelSpec:
    """CIFAR ResNet-20 with 1x1 projection shortcuts between stages."""
    stem = [
        LayerSpec("conv", 3, 16, kernel=3, padding=1, in_size=size, quantized=True),
        LayerSpec("bn", 16, 16, in_size=size),
        LayerSpec("relu", 16, 16, in_size=size),
    ]
    return _resnet("resnet20", stem, size, (16, 32, 64), 3, classes, (3, size, size), pin_ends)


def resnet18(classes: int = 1000, size: int = 224, pin_ends: bool = True) -> ModelSpec:
    """ImageNet ResNet-18: 7x7 stem, max pool, four stages of two basic blocks."""
    stem_out = (size + 6 - 7) // 2 + 1
    pooled = (stem_out + 2 - 3) // 2 + 1
    stem = [
        LayerSpec("conv", 3, 64, kernel=7, stride=2, padding=3, in_size=size, quantized=True),
        LayerSpec("bn", 64, 64, in_size=stem_out),
        LayerSpec("relu", 64, 64, in_size=stem_out),
        LayerSpec("pool", 64, 64, kernel=3, stride=2, padding=1, in_size=stem_out),
    ]
    return _resnet("resnet18", stem, pooled, (64, 128, 256, 512), 2, classes, (3, size, size), pin_ends)


MODEL_BUILDERS: dict[str, Callable[..., ModelSpec]] = {
    "mlp": mlp,
    "miniconv": miniconv,
    "resnet20": resnet20,
    "resnet18": resnet18,
}


# --- bitwidth configurations -----------------------------------------------


@dataclass(frozen=True)
class BitwidthConfig:
    """Bitwidths of the searchable layers, in layer order."""

    bits: tuple[int, ...]
    log_prob: Optional[float] = None

    @classmethod
    def uniform(cls, layers: int, bitwidth: int) -> "BitwidthConfig":
        return cls(tuple([bitwidth] * layers))

    def __str__(self) -> str:
        return ",".join(str(b) for b in self.bits)


# --- switchable batch norm ---------------------------------------------------


@dataclass
class BatchNormSet:
    gamma: Tensor
    beta: Tensor
    running_mean: Array
    running_var: Array

    @classmethod
    def create(cls, channels: int, name: str) -> "BatchNormSet":
        return cls(
            parameter(np.ones(channels), name=f"{name}.gamma"),
            parameter(np.zeros(channels), name=f"{name}.beta"),
            np.zeros(channels),
            np.ones(channels),
        )

    def update(self, mean: Array, var: Array, momentum: float = BN_MOMENTUM) -> None:
        self.running_mean = momentum * self.running_mean + (1.0 - momentum) * mean
        self.running_var = momentum * self.running_var + (1.0 - momentum) * var


class BNStatsBuffer:
    """Batch statistics held back from the running averages until ``flush``.

    Every set that received statistics gets a single update per flush, from
    the size-weighted mean of what was added.
    """

    def __init__(self) -> None:
        self._pending: dict[int, tuple[BatchNormSet, list[tuple[Array, Array, int]]]] = {}

    def add(self, bn_set: BatchNormSet, mean: Array, var: Array, size: int) -> None:
        self._pending.setdefault(id(bn_set), (bn_set, []))[1].append((mean, var, size))

    def flush(self) -> None:
        for bn_set, stats in self._pending.values():
            if len(stats) == 1:
                mean, var, _ = stats[0]
            else:
                sizes = [s for _, _, s in stats]
                mean = np.average([m for m, _, _ in stats], axis=0, weights=sizes)
                var = np.average([v for _, v, _ in stats], axis=0, weights=sizes)
            bn_set.update(mean, var)
        self._pending.clear()


@dataclass
class SwitchableBN:
    """Independent batch-norm state per bitwidth (32 = full precision)."""

    sets: dict[int, BatchNormSet] = field(default_factory=dict)

    def select(self, bitwidth: int) -> BatchNormSet:
        if bitwidth not in self.sets:
            raise ModelConfigError(
                f"no batch-norm set for bitwidth {bitwidth}; available: {sorted(self.sets)}"
            )
        return self.sets[bitwidth]


# --- model -------------------------------------------------------------------


class WeightHolder(Protocol):
    """Anything with per-layer weights that a perturbation can be laid over."""

    weights: dict[int, Tensor]
    perturbation: Optional[dict[int, Array]]

    def perturbable(self) -> list[int]: ...


@dataclass
class ForwardTrace:
    """Outputs of one forward pass plus the tensors the optimizers need.

    ``effective`` maps each weighted layer to the weight tensor its conv or
    matmul consumed, i.e. ``Q_w(w, b) + eps``. ``params`` lists the trainable
    leaves on the path of this pass.
    """

    logits: Tensor
    loss: Optional[Tensor]
    effective: dict[int, Tensor]
    params: list[Tensor]


class Model:
    """Shared full-precision weights with switchable clipping and BN state."""

    def __init__(self, spec: ModelSpec, quant: QuantSpec, seed: int = 0) -> None:
        spec.validate()
        self.spec = spec
        self.quant = quant
        self.seed = seed
        self.weights: dict[int, Tensor] = {}
        self.biases: dict[int, Tensor] = {}
        self.alpha_w: dict[int, ClippingLevels] = {}
        self.alpha_z: dict[int, ClippingLevels] = {}
        self.bn: dict[int, SwitchableBN] = {}
        self.perturbation: Optional[dict[int, Array]] = None
        self._nonneg = spec.nonnegative_outputs()
        self._init_parameters(np.random.default_rng(seed))

    def _bitwidths_of(self, index: int) -> tuple[int, ...]:
        layer = self.spec.layers[index]
        if layer.fixed_bitwidth is not None:
            return (layer.fixed_bitwidth,)
        return self.quant.bitwidths

    def _init_parameters(self, rng: np.random.Generator) -> None:
        bn_bitwidths = sorted(
            {*self.quant.bitwidths, self.quant.fixed_bitwidth, FULL_PRECISION}
        )
        for i, layer in enumerate(self.spec.layers):
            name = f"layer{i}"
            if layer.is_weighted:
                fan_in = int(np.prod(layer.weight_shape[1:]))
                bound = float(np.sqrt(6.0 / fan_in))
                self.weights[i] = parameter(
                    rng.uniform(-bound, bound, size=layer.weight_shape), name=f"{name}.weight"
                )
                if layer.bias:
                    self.biases[i] = parameter(np.zeros(layer.out_channels), name=f"{name}.bias")
                if layer.quantized:
                    bits = self._bitwidths_of(i)
                    self.alpha_w[i] = ClippingLevels.create(
                        bits, self.quant.init_alpha_w, f"{name}.alpha_w"
                    )
                    self.alpha_z[i] = ClippingLevels.create(
                        bits, self.quant.init_alpha_z, f"{name}.alpha_z"
                    )
            elif layer.kind == "bn":
                self.bn[i] = SwitchableBN(
                    {b: BatchNormSet.create(layer.in_channels, f"{name}.bn.{b}") for b in bn_bitwidths}
                )

    # -- configuration ------------------------------------------------------

    def layer_bitwidths(self, config: Optional[BitwidthConfig]) -> dict[int, int]:
        """Bitwidth per quantized layer; empty for a full-precision pass."""
        if config is None:
            return {}
        searchable = self.spec.searchable_layers()
        if len(config.bits) != len(searchable):
            raise ModelConfigError(
                f"{self.spec.name} has {len(searchable)} searchable layers, "
                f"config has {len(config.bits)}"
            )
        for b in config.bits:
            if b not in self.quant.bitwidths:
                raise ModelConfigError(f"bitwidth {b} not in {self.quant.bitwidths}")
        chosen = dict(zip(searchable, config.bits))
        for i in self.spec.quantized_layers():
            fixed = self.spec.layers[i].fixed_bitwidth
            if fixed is not None:
                chosen[i] = fixed
        return chosen

    def perturbable(self) -> list[int]:
        """Weighted layers whose (quantized) weights a perturbation covers."""
        return self.spec.weight_layers()

    def perturbation_size(self) -> int:
        return sum(self.weights[i].size for i in self.perturbable())

    def _bn_bitwidth(self, index: int, bits: Mapping[int, int]) -> int:
        src = self.spec.source_of(index)
        return bits.get(src, FULL_PRECISION)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for i in range(len(self.spec.layers)):
            if i in self.weights:
                named.append((f"layer{i}.weight", self.weights[i]))
            if i in self.biases:
                named.append((f"layer{i}.bias", self.biases[i]))
            for label, store in (("alpha_w", self.alpha_w), ("alpha_z", self.alpha_z)):
                if i in store:
                    for b, t in sorted(store[i].log_alpha.items()):
                        named.append((f"layer{i}.{label}.{b}", t))
            if i in self.bn:
                for b, bn_set in sorted(self.bn[i].sets.items()):
                    named.append((f"layer{i}.bn.{b}.gamma", bn_set.gamma))
                    named.append((f"layer{i}.bn.{b}.beta", bn_set.beta))
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def decayed(self) -> set[int]:
        """Ids of the tensors that receive weight decay (conv/linear weights)."""
        return {id(t) for t in self.weights.values()}

    def buffers(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for i, sbn in sorted(self.bn.items()):
            for b, bn_set in sorted(sbn.sets.items()):
                out[f"layer{i}.bn.{b}.running_mean"] = bn_set.running_mean
                out[f"layer{i}.bn.{b}.running_var"] = bn_set.running_var
        return out

    def state_dict(self) -> dict[str, Array]:
        state = {name: t.values.copy() for name, t in self.named_parameters()}
        state.update({name: v.copy() for name, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: Mapping[str, Array]) -> None:
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CheckpointError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in self.named_parameters():
            t.values = _checked(name, state[name], t.values.shape)
        for i, sbn in self.bn.items():
            for b, bn_set in sbn.sets.items():
                prefix = f"layer{i}.bn.{b}"
                bn_set.running_mean = _checked(prefix, state[f"{prefix}.running_mean"], bn_set.running_mean.shape)
                bn_set.running_var = _checked(prefix, state[f"{prefix}.running_var"], bn_set.running_var.shape)

    # -- weights ------------------------------------------------------------

    def _weight_base(self, index: int, fp_eps: Optional[Mapping[int, Array]]) -> Tensor:
        w = self.weights[index]
        if fp_eps is not None and index in fp_eps:
            return add(w, constant(fp_eps[index]))
        return w

    def effective_weight(
        self,
        index: int,
        bitwidth: Optional[int],
        fp_eps: Optional[Mapping[int, Array]] = None,
        eps: Optional[Mapping[int, Array]] = None,
    ) -> Tensor:
        """``Q_w(w + fp_eps, b) + eps`` for one weighted layer."""
        base = self._weight_base(index, fp_eps)
        if bitwidth is None:
            out = base
        else:
            if self.quant.weight_norm:
                base = standardize_rows(base, WEIGHT_NORM_EPS)
            out = quantize_w(base, bitwidth, self.alpha_w[index].alpha(bitwidth))
        if eps is not None and index in eps:
            out = add(out, constant(eps[index]))
        return out

    def quantized_weights(
        self, config: Optional[BitwidthConfig], fp_eps: Optional[Mapping[int, Array]] = None
    ) -> dict[int, QuantizedView]:
        """Array-only ``Q_w(w + fp_eps, b)`` per quantized layer."""
        views: dict[int, QuantizedView] = {}
        for i, b in self.layer_bitwidths(config).items():
            w = self.weights[i]
            base = w.values if fp_eps is None or i not in fp_eps else w.values + fp_eps[i]
            if self.quant.weight_norm:
                base = standardize_values(base, WEIGHT_NORM_EPS)[0].reshape(w.shape)
            views[i] = QuantizedView.of(w, b, self.alpha_w[i].value(b), source=base)
        return views

    # -- forward ------------------------------------------------------------

    def run(
        self,
        x: Array,
        config: Optional[BitwidthConfig],
        mode: Mode = "train",
        *,
        labels: Optional[Array] = None,
        update_stats: bool = True,
        perturbation: Optional[Mapping[int, Array]] = None,
        fp_perturbation: Optional[Mapping[int, Array]] = None,
        retain: bool = False,
        stats: Optional[BNStatsBuffer] = None,
    ) -> ForwardTrace:
        """One forward pass under ``config`` (``None`` = full precision).

        ``perturbation`` defaults to whatever ``apply_perturbation`` installed.
        With ``stats``, batch statistics go to the buffer instead of the
        running averages.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        bits = self.layer_bitwidths(config)
        eps = self.perturbation if perturbation is None else perturbation
        acts: list[Tensor] = []
        effective: dict[int, Tensor] = {}
        params: list[Tensor] = []
        inp_tensor = constant(x)

        def act(idx: int) -> Tensor:
            return inp_tensor if idx == INPUT else acts[idx]

        for i, layer in enumerate(self.spec.layers):
            src = self.spec.source_of(i)
            inp = act(src)
            if layer.is_weighted:
                b = bits.get(i)
                w_eff = self.effective_weight(i, b, fp_perturbation, eps)
                if retain:
                    w_eff.retain_grad = True
                effective[i] = w_eff
                params.append(self.weights[i])
                if b is not None:
                    params.append(self.alpha_w[i].log_alpha[b])
                    nonneg = self._nonneg[src] if src != INPUT else False
                    if nonneg or layer.quantize_input:
                        inp = quantize_z(inp, b, self.alpha_z[i].alpha(b))
                        params.append(self.alpha_z[i].log_alpha[b])
                if layer.kind == "conv":
                    out = conv2d(inp, w_eff, stride=layer.stride, pad=layer.padding)
                else:
                    if inp.values.ndim > 2:
                        inp = flatten(inp)
                    out = matmul(inp, transpose(w_eff))
                if i in self.biases:
                    out = add_bias(out, self.biases[i])
                    params.append(self.biases[i])
            elif layer.kind == "bn":
                bn_set = self.bn[i].select(self._bn_bitwidth(i, bits))
                params += [bn_set.gamma, bn_set.beta]
                if mode == "train":
                    out, mean, var = batch_norm(inp, bn_set.gamma, bn_set.beta, BN_EPS)
                    if update_stats and stats is not None:
                        stats.add(bn_set, mean, var, len(x))
                    elif update_stats:
                        bn_set.update(mean, var)
                else:
                    out = batch_norm_inference(
                        inp, bn_set.gamma, bn_set.beta, bn_set.running_mean, bn_set.running_var, BN_EPS
                    )
            elif layer.kind == "relu":
                out = relu(inp)
            elif layer.kind == "pool":
                if layer.pool_mode == "global_avg":
                    out = global_avg_pool(inp)
                else:
                    out = max_pool2d(inp, layer.kernel, layer.stride, layer.padding)
            elif layer.kind == "flatten":
                out = flatten(inp)
            else:
                out = add(inp, act(layer.skip if layer.skip is not None else INPUT))
            acts.append(out)

        logits = acts[-1]
        loss = softmax_cross_entropy(logits, labels) if labels is not None else None
        return ForwardTrace(logits, loss, effective, params)

    def loss(
        self, batch: Batch, config: Optional[BitwidthConfig], mode: Mode = "train", **kwargs: Any
    ) -> ForwardTrace:
        return self.run(batch.features, config, mode, labels=batch.labels, **kwargs)


def _checked(name: str, value: Array, shape: tuple[int, ...]) -> Array:
    array = np.array(value, dtype=np.float64)
    if array.shape != shape:
        raise CheckpointError(f"{name}: shape {array.shape} != {shape}")
    return array


def build_model(spec: ModelSpec, quant: QuantSpec, seed: int = 0) -> Model:
    """Validate ``spec`` and initialise a model (He-uniform weights, BN gamma=1, beta=0)."""
    model = Model(spec, quant, seed)
    logger.debug(
        "built %s: %d layers, %d searchable, seed %d",
        spec.name, len(spec.layers), len(spec.searchable_layers()), seed,
    )
    return model


def forward(
    model: Model, x: Array, config: Optional[BitwidthConfig], mode: Mode = "train"
) -> Tensor:
    return model.run(x, config, mode).logits


def flatten_layers(model: WeightHolder, per_layer: Mapping[int, Array]) -> Array:
    """Concatenate per-layer arrays in ``perturbable()`` order."""
    return np.concatenate([np.asarray(per_layer[i]).reshape(-1) for i in model.perturbable()])


def split_layers(model: WeightHolder, flat: Array) -> dict[int, Array]:
    """Inverse of ``flatten_layers``; the length must match exactly."""
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    expected = sum(model.weights[i].size for i in model.perturbable())
    if flat.size != expected:
        raise ContractError(f"perturbation has {flat.size} entries, model has {expected}")
    out: dict[int, Array] = {}
    offset = 0
    for i in model.perturbable():
        shape = model.weights[i].shape
        count = model.weights[i].size
        out[i] = flat[offset : offset + count].reshape(shape)
        offset += count
    return out


def apply_perturbation(model: WeightHolder, eps: Array | Tensor) -> None:
    """Make subsequent forwards use ``Q_w(w, b) + eps`` per layer."""
    values = eps.values if isinstance(eps, Tensor) else eps
    model.perturbation = split_layers(model, values)


def remove_perturbation(model: WeightHolder) -> None:
    model.perturbation = None


def evaluate(
    model: Model, dataset: Dataset, config: Optional[BitwidthConfig]
) -> tuple[float, float]:
    """Eval-mode mean loss and accuracy over the whole dataset."""
    total_loss = 0.0
    correct = 0
    for start in range(0, len(dataset), EVAL_CHUNK):
        x = dataset.features[start : start + EVAL_CHUNK]
        y = dataset.labels[start : start + EVAL_CHUNK]
        trace = model.run(x, config, "eval", labels=y)
        assert trace.loss is not None
        total_loss += trace.loss.item() * len(y)
        correct += int((trace.logits.values.argmax(axis=1) == y).sum())
    n = max(len(dataset), 1)
    return total_loss / n, correct / n

