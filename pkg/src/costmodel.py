"""MAC and bit-operation (BOP) accounting for layer graphs."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

from src.errors import CostModelError
from src.netlib import BitwidthConfig, LayerSpec, ModelSpec
from src.quantizer import FULL_PRECISION

BUDGET_MODES = ("fraction", "absolute")
UNITS = {"M": 1e6, "G": 1e9}


def layer_macs(spec: LayerSpec) -> int:
    """Multiply-accumulates of one conv or linear layer (bias excluded)."""
    if spec.kind == "conv":
        return spec.in_channels * spec.out_channels * spec.kernel**2 * spec.out_size**2
    if spec.kind == "linear":
        return spec.in_channels * spec.out_channels
    raise CostModelError(f"layer kind {spec.kind!r} has no MAC count")


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: str
    macs: int
    weight_bits: int
    act_bits: int

    @property
    def bops(self) -> int:
        return self.macs * self.weight_bits * self.act_bits


@dataclass(frozen=True)
class CostReport:
    """Per-layer and total BOPs of one (model, config) pair."""

    model: str
    layers: tuple[LayerCost, ...]
    total_bops: int
    fp_bops: int

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def compression_ratio(self) -> float:
        return self.fp_bops / self.total_bops if self.total_bops else float("inf")

    @property
    def normalized(self) -> float:
        """Total BOPs as a fraction of the full-precision count."""
        return self.total_bops / self.fp_bops if self.fp_bops else 0.0


def _layer_bits(model: ModelSpec, config: Optional[BitwidthConfig]) -> dict[int, int]:
    if config is None:
        return {}
    searchable = model.searchable_layers()
    if len(config.bits) != len(searchable):
        raise CostModelError(
            f"{model.name} has {len(searchable)} searchable layers, config has {len(config.bits)}"
        )
    if any(b < 1 for b in config.bits):
        raise CostModelError(f"bitwidths must be positive, got {config.bits}")
    bits = dict(zip(searchable, config.bits))
    for i in model.quantized_layers():
        fixed = model.layers[i].fixed_bitwidth
        if fixed is not None:
            bits[i] = fixed
    return bits


def total_bops(model: ModelSpec, config: Optional[BitwidthConfig]) -> CostReport:
    """Sum of ``MACs * b_w * b_a`` over weighted layers; ``None`` means FP32."""
    bits = _layer_bits(model, config)
    layers = []
    fp = 0
    for i in model.weight_layers():
        macs = layer_macs(model.layers[i])
        b = bits.get(i, FULL_PRECISION)
        layers.append(LayerCost(i, model.layers[i].kind, macs, b, b))
        fp += macs * FULL_PRECISION * FULL_PRECISION
    return CostReport(model.name, tuple(layers), sum(c.bops for c in layers), fp)


def constraint_penalty(cost: float, budget: float, beta: float, *, scale: float = 1.0) -> float:
    """``beta * ((cost - budget) / scale)**2``.

    Pass the model's full-precision BOPs as ``scale`` to penalise normalised
    costs; ``scale=1`` keeps raw units.
    """
    if beta < 0:
        raise CostModelError(f"beta must be >= 0, got {beta}")
    if scale <= 0:
        raise CostModelError(f"scale must be positive, got {scale}")
    return beta * ((cost - budget) / scale) ** 2


def resolve_budget(model: ModelSpec, budget: float, mode: str = "fraction") -> float:
    """BOP budget in raw units from either a fraction of FP BOPs or an absolute count."""
    if mode not in BUDGET_MODES:
        raise CostModelError(f"budget mode must be one of {BUDGET_MODES}, got {mode!r}")
    if budget <= 0:
        raise CostModelError(f"budget must be positive, got {budget}")
    if mode == "absolute":
        return budget
    return budget * total_bops(model, None).fp_bops


def all_configs(model: ModelSpec, bitwidths: Sequence[int]) -> Iterator[BitwidthConfig]:
    """Every config over the searchable layers, in lexicographic order."""
    for bits in itertools.product(sorted(bitwidths), repeat=len(model.searchable_layers())):
        yield BitwidthConfig(tuple(bits))


def format_bops(value: float, unit: str = "M") -> str:
    if unit not in UNITS:
        raise CostModelError(f"unit must be one of {sorted(UNITS)}, got {unit!r}")
    return f"{value / UNITS[unit]:.1f}{unit}"


def format_report(report: CostReport, unit: str = "M") -> str:
    """Human-readable per-layer table followed by totals."""
    rows = [f"{'layer':>5}  {'kind':<6} {'MACs':>14} {'w':>3} {'a':>3} {'BOPs':>16}"]
    for c in report.layers:
        rows.append(
            f"{c.index:>5}  {c.kind:<6} {c.macs:>14,} {c.weight_bits:>3} {c.act_bits:>3} {c.bops:>16,}"
        )
    rows.append(f"total BOPs: {format_bops(report.total_bops, unit)}")
    rows.append(f"FP32 BOPs:  {format_bops(report.fp_bops, unit)}")
    rows.append(f"compression ratio: {report.compression_ratio:.2f}x")
    return "\n".join(rows)


def report_items(report: CostReport) -> list[tuple[str, str]]:
    """Machine-readable ``key=value`` pairs for a report."""
    return [
        ("model", report.model),
        ("total_macs", str(report.total_macs)),
        ("total_bops", str(report.total_bops)),
        ("fp_bops", str(report.fp_bops)),
        ("total_bops_m", f"{report.total_bops / 1e6:.1f}"),
        ("total_bops_g", f"{report.total_bops / 1e9:.1f}"),
        ("compression_ratio", f"{report.compression_ratio:.4f}"),
    ]
