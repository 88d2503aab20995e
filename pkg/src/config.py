"""Run configuration: a flat dataclass fed from INI files and CLI flags."""

from __future__ import annotations

import configparser
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from src.errors import ConfigError

OUTPUT_ROOT_ENV = "SAQLAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
SECTIONS = ("model", "data", "optim", "search", "probe", "run")
DATASETS = ("gaussians", "moons", "patterns", "idx")
MODELS = ("mlp", "miniconv", "resnet20", "resnet18", "quadratic")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _opt(default: Any, section: str, help: str) -> Any:
    return field(default=default, metadata={"section": section, "help": help})


@dataclass
class RunConfig:
    """Every knob of a run, with its default."""

    # model
    model: str = _opt("mlp", "model", "mlp | miniconv | resnet20 | resnet18 | quadratic")
    hidden: int = _opt(64, "model", "hidden width of the MLP")
    classes: Optional[int] = _opt(None, "model", "class count (default: dataset or builder)")
    pin_ends: Optional[bool] = _opt(None, "model", "pin first/last layers to 8 bits")
    bitwidths: tuple[int, ...] = _opt((2, 3, 4, 5), "model", "candidate bitwidths")
    bits: int = _opt(4, "model", "uniform bitwidth for train/bops (32 = full precision)")
    layer_bits: str = _opt("", "model", "explicit per-layer bitwidths, e.g. 2,3,4,4")
    weight_norm: bool = _opt(True, "model", "standardize weights before quantizing")
    init_alpha_w: float = _opt(1.0, "model", "initial weight clipping level")
    init_alpha_z: float = _opt(1.0, "model", "initial activation clipping level")
    bowl: tuple[float, ...] = _opt((1.0, 2.0, 5.0), "model", "diagonal of the quadratic fixture")
    # data
    dataset: str = _opt("gaussians", "data", "gaussians | moons | patterns | idx")
    samples: int = _opt(2000, "data", "synthetic training samples")
    test_samples: int = _opt(500, "data", "synthetic held-out samples")
    noise: float = _opt(0.5, "data", "synthetic noise level")
    train_images: str = _opt("", "data", "IDX training images")
    train_labels: str = _opt("", "data", "IDX training labels")
    test_images: str = _opt("", "data", "IDX test images")
    test_labels: str = _opt("", "data", "IDX test labels")
    # optim
    optimizer: str = _opt("saq", "optim", "sgd | sam | saq | asaq")
    lr: float = _opt(0.05, "optim", "base learning rate")
    momentum: float = _opt(0.9, "optim", "SGD momentum")
    weight_decay: float = _opt(5e-4, "optim", "L2 decay on conv/linear weights")
    rho: Optional[float] = _opt(None, "optim", "perturbation radius (default: published table, else 0.05)")
    xi: float = _opt(0.01, "optim", "ASAQ scale stabilizer")
    schedule: str = _opt("cosine", "optim", "cosine | step | constant")
    milestones: tuple[int, ...] = _opt((80, 120), "optim", "step-decay epochs")
    microbatch: Optional[int] = _opt(None, "optim", "m-sharpness microbatch size")
    batch_size: int = _opt(128, "optim", "mini-batch size")
    epochs: int = _opt(30, "optim", "training epochs")
    stop_epoch: Optional[int] = _opt(None, "optim", "checkpoint and stop after this epoch")
    # search
    budget: float = _opt(0.05, "search", "BOP budget")
    budget_mode: str = _opt("fraction", "search", "fraction (of FP BOPs) | absolute")
    beta: float = _opt(1e-4, "search", "budget penalty weight")
    alpha: float = _opt(5e-3, "search", "entropy bonus weight")
    search_epochs: int = _opt(30, "search", "alternating search epochs")
    warmup: int = _opt(10, "search", "weight-only epochs before policy updates")
    k: int = _opt(20, "search", "feasible configs evaluated at inference")
    baseline: bool = _opt(True, "search", "subtract an EMA reward baseline")
    normalize_cost: bool = _opt(True, "search", "penalise FP-normalised BOPs")
    reward_sharpness: bool = _opt(True, "search", "perturb weights when computing rewards")
    policy_hidden: int = _opt(64, "search", "LSTM hidden size")
    policy_lr: float = _opt(5e-4, "search", "policy Adam learning rate")
    # probe
    probe_samples: int = _opt(500, "probe", "probe batch size")
    iters: int = _opt(100, "probe", "power iterations")
    tol: float = _opt(1e-5, "probe", "relative eigenvalue tolerance")
    wrt: str = _opt("quantized", "probe", "quantized | full_precision")
    halfwidth: float = _opt(1.0, "probe", "landscape half-width")
    resolution: int = _opt(21, "probe", "landscape points per axis (odd)")
    # run
    seed: int = _opt(0, "run", "master seed")
    output_dir: str = _opt("", "run", "run directory (default: under the output root)")
    checkpoint: str = _opt("", "run", "checkpoint to start from (finetune/probe/landscape)")
    resume: str = _opt("", "run", "checkpoint of an interrupted run to continue")
    log_level: str = _opt("INFO", "run", "logging level")
    deterministic: bool = _opt(True, "run", "single-threaded numerics")
    unit: str = _opt("M", "run", "BOP unit for reports (M | G)")

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        from src.optim import OPTIMIZERS, SCHEDULES

        checks = [
            (self.model in MODELS, f"model must be one of {MODELS}"),
            (self.dataset in DATASETS, f"dataset must be one of {DATASETS}"),
            (self.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}"),
            (self.schedule in SCHEDULES, f"schedule must be one of {SCHEDULES}"),
            (self.budget_mode in ("fraction", "absolute"), "budget_mode must be fraction or absolute"),
            (self.wrt in ("quantized", "full_precision"), "wrt must be quantized or full_precision"),
            (self.unit in ("M", "G"), "unit must be M or G"),
            (self.log_level.upper() in LOG_LEVELS, f"log_level must be one of {LOG_LEVELS}"),
            (self.lr > 0, "lr must be positive"),
            (self.rho is None or self.rho >= 0, "rho must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0 and self.search_epochs >= 0, "epochs must be >= 0"),
            (self.resolution >= 1 and self.resolution % 2 == 1, "resolution must be odd"),
            (self.k >= 1, "k must be >= 1"),
            (self.budget > 0, "budget must be positive"),
            (self.alpha >= 0 and self.beta >= 0, "alpha and beta must be >= 0"),
            (bool(self.bitwidths) and min(self.bitwidths) >= 2, "bitwidths must be >= 2"),
            (tuple(sorted(set(self.bitwidths))) == self.bitwidths, "bitwidths must be sorted and unique"),
            (self.bits == 32 or self.bits in self.bitwidths, "bits must be a candidate bitwidth or 32"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))

    def run_dir(self, command: str) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return self.output_root() / f"{command}-{self.model}-s{self.seed}"


def _hints() -> dict[str, Any]:
    return typing.get_type_hints(RunConfig)


def field_names() -> list[str]:
    return [f.name for f in fields(RunConfig)]


def coerce(name: str, raw: Any) -> Any:
    """Convert a string from a file or flag into the type of field ``name``."""
    hints = _hints()
    if name not in hints:
        raise ConfigError(f"unknown configuration key {name!r}")
    if not isinstance(raw, str):
        return raw
    return _coerce_type(name, hints[name], raw.strip())


def _coerce_type(name: str, tp: Any, text: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union:
        if text.lower() in ("", "none"):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce_type(name, inner, text)
    try:
        if origin is tuple:
            return tuple(args[0](part) for part in text.replace(" ", "").split(",") if part)
        if tp is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if tp in (int, float, str):
            return tp(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc
    raise ConfigError(f"unsupported type for {name}")


def load_config(path: Union[str, Path]) -> dict[str, Any]:
    """Parse an INI file into typed overrides; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    known = set(field_names())
    overrides: dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            overrides[key] = coerce(key, value)
    return overrides


def resolve_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Defaults, then the file, then explicit overrides."""
    values: dict[str, Any] = {}
    if path:
        values.update(load_config(path))
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Rebuild a RunConfig stored in a checkpoint (lists become tuples)."""
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    unknown = set(values) - set(field_names())
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    return RunConfig(**values)
