"""Command-line entry point: train, search, finetune, bops, probe, landscape."""

from __future__ import annotations

import argparse
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union, cast

import numpy as np

from src.checkpoint import load_checkpoint, save_checkpoint, section
from src.config import RunConfig, coerce, config_from_dict, resolve_config
from src.controller import PolicyNet, SearchState, infer_config, samq_train
from src.costmodel import format_report, report_items, resolve_budget, total_bops
from src.data import Batch, Dataset, derive_seed, load_idx, make_synthetic, sample_batch, split_half
from src.errors import ConfigError, InfeasibleBudgetError, NonFiniteError, SaqlabError
from src.logs import close_logging, configure_logging, log_event
from src.netlib import (
    MODEL_BUILDERS,
    BitwidthConfig,
    Model,
    ModelSpec,
    build_model,
    evaluate,
    miniconv,
    mlp,
)
from src.optim import DEFAULT_RHO, RHO_GRID, Adam, OptimState, SharpnessOptimizer, Trainable, default_rho
from src.probe import QuadraticBowl, Wrt, lambda_max, landscape_slice, write_landscape
from src.quantizer import QuantSpec
from src.runs import finish_run, open_ledger, start_run
from src.training import (
    EpochMetrics,
    fit,
    measure,
    model_snapshot,
    optim_snapshot,
    policy_snapshot,
    restore_model,
    restore_optim,
    restore_policy,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NONFINITE = 4

CHECKPOINT_NAME = "checkpoint.json"
METRICS_NAME = "metrics.jsonl"
BOPS_NAME = "bops.txt"
SEARCH_NAME = "search.txt"
PROBE_NAME = "probe.txt"
LANDSCAPE_NAME = "landscape.txt"

# seed-derivation keys
_DATA, _MODEL, _POLICY, _SPLIT, _INFER, _PROBE_BATCH, _PROBE_DIRECTION = 1, 2, 3, 4, 5, 6, 7


@dataclass
class RunOutcome:
    """What a command reports back to the ledger."""

    bitwidths: Optional[str] = None
    final_loss: Optional[float] = None
    final_acc: Optional[float] = None
    total_bops: Optional[int] = None


# --- shared plumbing ---------------------------------------------------------


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and held-out splits for ``cfg``."""
    if cfg.dataset == "idx":
        paths = (cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels)
        if not all(paths):
            raise ConfigError("dataset=idx needs train_images, train_labels, test_images and test_labels")
        return load_idx(paths[0], paths[1], "train"), load_idx(paths[2], paths[3], "test")
    classes = cfg.classes or (2 if cfg.dataset == "moons" else 4)
    total = cfg.samples + cfg.test_samples
    full = make_synthetic(cfg.dataset, total, classes, cfg.noise, derive_seed(cfg.seed, _DATA))
    return full.subset(range(cfg.samples), "train"), full.subset(range(cfg.samples, total), "test")


def build_spec(cfg: RunConfig, data: Optional[Dataset] = None) -> ModelSpec:
    """Model graph for ``cfg``; desk models take their input shape from ``data``."""
    if cfg.model in ("resnet20", "resnet18"):
        builder = MODEL_BUILDERS[cfg.model]
        kwargs: dict[str, Any] = {}
        if cfg.classes is not None:
            kwargs["classes"] = cfg.classes
        if cfg.pin_ends is not None:
            kwargs["pin_ends"] = cfg.pin_ends
        return builder(**kwargs)
    if data is None:
        data, _ = load_data(cfg)
    shape = data.feature_shape
    policy = bool(cfg.pin_ends)
    if cfg.model == "mlp":
        return mlp(math.prod(shape), (cfg.hidden,), data.classes, policy)
    if cfg.model == "miniconv":
        if len(shape) != 3 or shape[1] != shape[2]:
            raise ConfigError(f"miniconv needs square image features, got shape {shape}")
        return miniconv(shape[0], shape[1], data.classes, pin_ends=policy)
    raise ConfigError(f"model {cfg.model!r} has no layer graph")


def quant_spec(cfg: RunConfig) -> QuantSpec:
    return QuantSpec(
        bitwidths=cfg.bitwidths,
        init_alpha_w=cfg.init_alpha_w,
        init_alpha_z=cfg.init_alpha_z,
        weight_norm=cfg.weight_norm,
    )


def bit_config(cfg: RunConfig, spec: ModelSpec, chosen: Optional[Sequence[int]] = None) -> Optional[BitwidthConfig]:
    """Explicit ``layer_bits``, else ``chosen``, else uniform ``bits`` (None at 32)."""
    layers = len(spec.searchable_layers())
    if cfg.layer_bits:
        bits = coerce("bitwidths", cfg.layer_bits)
    elif chosen is not None:
        bits = tuple(int(b) for b in chosen)
    elif cfg.bits == 32:
        return None
    else:
        return BitwidthConfig.uniform(layers, cfg.bits)
    if len(bits) != layers:
        raise ConfigError(f"{spec.name} has {layers} searchable layers, got {len(bits)} bitwidths")
    unknown = sorted(set(bits) - set(cfg.bitwidths))
    if unknown:
        raise ConfigError(f"bitwidths {unknown} are not candidates {cfg.bitwidths}")
    return BitwidthConfig(bits)


def resolve_rho(cfg: RunConfig, config: Optional[BitwidthConfig]) -> float:
    if cfg.rho is not None:
        if cfg.rho > 0 and not any(math.isclose(cfg.rho, r) for r in RHO_GRID):
            logger.warning("rho %g is off the tuning grid %s", cfg.rho, RHO_GRID)
        return cfg.rho
    if config is not None and len(set(config.bits)) == 1:
        tabulated = default_rho(cfg.model, config.bits[0])
        if tabulated is not None:
            return tabulated
    return DEFAULT_RHO


def optim_state(cfg: RunConfig, rho: float, epochs: int) -> OptimState:
    return OptimState(
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        rho=rho,
        xi=cfg.xi,
        schedule=cfg.schedule,
        epochs=epochs,
        milestones=cfg.milestones,
        microbatch=cfg.microbatch,
    )


def _check_inputs(spec: ModelSpec, data: Dataset) -> None:
    if tuple(spec.input_shape) != data.feature_shape:
        raise ConfigError(f"{spec.name} expects inputs {spec.input_shape}, data has {data.feature_shape}")
    if spec.classes < data.classes:
        raise ConfigError(f"{spec.name} has {spec.classes} outputs for {data.classes} classes")


def _base_payload(cfg: RunConfig, command: str, model: Model, state: OptimState) -> dict[str, Any]:
    return {
        "command": command,
        "config": cfg.to_dict(),
        "model": model_snapshot(model),
        "optimizer": optim_snapshot(state),
        "counters": {"epoch": state.epoch, "step": state.step},
        "rng": {"bit_generator": "PCG64", "seed": cfg.seed},
    }


def _log_metrics(event: str, metrics: EpochMetrics) -> None:
    log_event(
        logger, event, epoch=metrics.epoch, train_loss=metrics.train_loss, train_acc=metrics.train_acc,
        val_loss=metrics.val_loss, val_acc=metrics.val_acc, lr=metrics.lr,
    )


def _train_fixed(
    cfg: RunConfig,
    run_dir: Path,
    command: str,
    model: Model,
    state: OptimState,
    config: Optional[BitwidthConfig],
    extra: Optional[dict[str, Any]] = None,
) -> RunOutcome:
    """Train at a fixed config, checkpointing at the end or on a numeric abort."""
    if config is None and cfg.optimizer in ("saq", "asaq"):
        raise ConfigError(f"optimizer {cfg.optimizer} needs a quantized configuration (bits != 32)")
    train, test = load_data(cfg)
    _check_inputs(model.spec, train)
    optimizer = SharpnessOptimizer(model, state)

    def payload() -> dict[str, Any]:
        body = _base_payload(cfg, command, model, state)
        body["bitwidths"] = None if config is None else list(config.bits)
        body.update(extra or {})
        return body

    last = measure(model, train, test, config, state.epoch, state.current_lr)
    if state.epoch == 0:
        _log_metrics("initial", last)
    try:
        metrics = fit(
            optimizer, cfg.optimizer, train, test, config,
            batch_size=cfg.batch_size, seed=cfg.seed, stop_epoch=cfg.stop_epoch,
        )
    except NonFiniteError:
        save_checkpoint(run_dir / CHECKPOINT_NAME, {**payload(), "aborted": True})
        raise
    save_checkpoint(run_dir / CHECKPOINT_NAME, payload())
    last = metrics or last
    return RunOutcome(
        bitwidths=None if config is None else str(config),
        final_loss=last.val_loss,
        final_acc=last.val_acc,
        total_bops=total_bops(model.spec, config).total_bops,
    )


# --- commands ----------------------------------------------------------------


def cmd_train(cfg: RunConfig, run_dir: Path) -> RunOutcome:
    """Train at a fixed bitwidth configuration with the chosen optimizer."""
    if cfg.resume:
        checkpoint = load_checkpoint(cfg.resume)
        model = restore_model(section(checkpoint, "model"))
        state = restore_optim(section(checkpoint, "optimizer"))
        config = bit_config(cfg, model.spec)
        logger.info("resuming %s at epoch %d", cfg.resume, state.epoch)
    else:
        train, _ = load_data(cfg)
        model = build_model(build_spec(cfg, train), quant_spec(cfg), derive_seed(cfg.seed, _MODEL))
        config = bit_config(cfg, model.spec)
        state = optim_state(cfg, resolve_rho(cfg, config), cfg.epochs)
    return _train_fixed(cfg, run_dir, "train", model, state, config)


def cmd_search(cfg: RunConfig, run_dir: Path) -> RunOutcome:
    """Alternating SAMQ search followed by constrained inference of one config."""
    train, test = load_data(cfg)
    train_half, val_half = split_half(train, derive_seed(cfg.seed, _SPLIT))
    if cfg.resume:
        checkpoint = load_checkpoint(cfg.resume)
        model = restore_model(section(checkpoint, "model"))
        state = restore_optim(section(checkpoint, "optimizer"))
        policy, adam, search = restore_policy(section(checkpoint, "policy"))
    else:
        model = build_model(build_spec(cfg, train), quant_spec(cfg), derive_seed(cfg.seed, _MODEL))
        rho = cfg.rho if cfg.rho is not None else DEFAULT_RHO
        state = optim_state(cfg, rho, cfg.search_epochs)
        policy = PolicyNet(
            cfg.bitwidths, len(model.spec.searchable_layers()), cfg.policy_hidden,
            derive_seed(cfg.seed, _POLICY),
        )
        adam = Adam(policy.parameters(), lr=cfg.policy_lr)
        search = SearchState(
            budget=resolve_budget(model.spec, cfg.budget, cfg.budget_mode),
            beta=cfg.beta,
            alpha=cfg.alpha,
            rho=rho,
            warmup=cfg.warmup,
            use_baseline=cfg.baseline,
            normalize_cost=cfg.normalize_cost,
            sharpness=cfg.reward_sharpness,
        )
    _check_inputs(model.spec, train)
    optimizer = SharpnessOptimizer(model, state)
    end = cfg.search_epochs if cfg.stop_epoch is None else min(cfg.stop_epoch, cfg.search_epochs)

    def payload(chosen: Optional[BitwidthConfig] = None) -> dict[str, Any]:
        body = _base_payload(cfg, "search", model, state)
        body["policy"] = policy_snapshot(policy, adam, search)
        if chosen is not None:
            body["chosen"] = list(chosen.bits)
        return body

    try:
        samq_train(
            model, policy, train_half, val_half, optimizer=optimizer, adam=adam, state=search,
            epochs=end, batch_size=cfg.batch_size, seed=cfg.seed, method=cfg.optimizer,
        )
    except NonFiniteError:
        save_checkpoint(run_dir / CHECKPOINT_NAME, {**payload(), "aborted": True})
        raise
    save_checkpoint(run_dir / CHECKPOINT_NAME, payload())
    if search.epoch < cfg.search_epochs:
        return RunOutcome()

    rng = np.random.default_rng(derive_seed(cfg.seed, _INFER))
    chosen = infer_config(policy, model, val_half, search.budget, cfg.k, rng=rng)
    report = total_bops(model.spec, chosen)
    loss, acc = evaluate(model, test, chosen)
    log_event(
        logger, "search_result", bitwidths=list(chosen.bits), total_bops=report.total_bops,
        budget=search.budget, val_loss=loss, val_acc=acc,
    )
    lines = [f"bitwidths={chosen}", f"budget={search.budget!r}"]
    lines += [f"{key}={value}" for key, value in report_items(report)]
    _emit(run_dir / SEARCH_NAME, lines)
    save_checkpoint(run_dir / CHECKPOINT_NAME, payload(chosen))
    return RunOutcome(str(chosen), loss, acc, report.total_bops)


def cmd_finetune(cfg: RunConfig, run_dir: Path) -> RunOutcome:
    """Fine-tune searched shared weights at one fixed mixed configuration."""
    if not cfg.checkpoint:
        raise ConfigError("finetune needs --checkpoint from a search run")
    source = load_checkpoint(cfg.checkpoint)
    searched = config_from_dict(section(source, "config"))
    if (searched.model, searched.bitwidths) != (cfg.model, cfg.bitwidths):
        raise ConfigError(
            f"{cfg.checkpoint} was searched as {searched.model} over {searched.bitwidths}, "
            f"not {cfg.model} over {cfg.bitwidths}"
        )
    chosen = source.get("chosen")
    if cfg.resume:
        checkpoint = load_checkpoint(cfg.resume)
        model = restore_model(section(checkpoint, "model"))
        state = restore_optim(section(checkpoint, "optimizer"))
    else:
        model = restore_model(section(source, "model"))
        state = None
    if chosen is None and not cfg.layer_bits:
        raise ConfigError(f"{cfg.checkpoint} holds no chosen config; pass --layer-bits")
    config = bit_config(cfg, model.spec, chosen)
    if state is None:
        state = optim_state(cfg, resolve_rho(cfg, config), cfg.epochs)
    return _train_fixed(
        cfg, run_dir, "finetune", model, state, config, {"source": str(cfg.checkpoint)}
    )


def cmd_bops(cfg: RunConfig, run_dir: Path) -> RunOutcome:
    """Print and save the BOP report of a model at a bitwidth configuration."""
    spec = build_spec(cfg)
    config = bit_config(cfg, spec)
    report = total_bops(spec, config)
    lines = [format_report(report, cfg.unit)]
    lines += [f"{key}={value}" for key, value in report_items(report)]
    _emit(run_dir / BOPS_NAME, lines)
    log_event(
        logger, "bops", model=spec.name, bitwidths=None if config is None else list(config.bits),
        total_bops=report.total_bops, fp_bops=report.fp_bops,
    )
    return RunOutcome(None if config is None else str(config), total_bops=report.total_bops)


def _probe_target(cfg: RunConfig) -> tuple[Trainable, Batch, Optional[BitwidthConfig]]:
    """The model, probe batch and config a probe or landscape command works on."""
    if cfg.model == "quadratic":
        bowl = QuadraticBowl(np.diag(cfg.bowl))
        return bowl, Batch(np.zeros((1, 1)), np.zeros(1, dtype=np.int64)), None
    train, _ = load_data(cfg)
    chosen = None
    if cfg.checkpoint:
        checkpoint = load_checkpoint(cfg.checkpoint)
        model = restore_model(section(checkpoint, "model"))
        chosen = checkpoint.get("chosen") or checkpoint.get("bitwidths")
    else:
        logger.warning("no checkpoint given; probing a freshly initialised model")
        model = build_model(build_spec(cfg, train), quant_spec(cfg), derive_seed(cfg.seed, _MODEL))
    _check_inputs(model.spec, train)
    batch = sample_batch(train, cfg.probe_samples, derive_seed(cfg.seed, _PROBE_BATCH))
    return model, batch, bit_config(cfg, model.spec, chosen)


def cmd_probe(cfg: RunConfig, run_dir: Path) -> RunOutcome:
    """Largest Hessian eigenvalue of the loss at a checkpoint (or the quadratic fixture)."""
    model, batch, config = _probe_target(cfg)
    result = lambda_max(
        model, batch, config, cfg.iters, cfg.tol,
        seed=derive_seed(cfg.seed, _PROBE_DIRECTION), wrt=cast(Wrt, cfg.wrt),
    )
    lines = [
        f"lambda_max={result.value!r}",
        f"iterations={result.iterations}",
        f"residual={result.residual!r}",
        f"converged={str(result.converged).lower()}",
        f"batch_size={result.batch_size}",
        f"wrt={result.wrt}",
    ]
    _emit(run_dir / PROBE_NAME, lines)
    log_event(
        logger, "lambda_max", value=result.value, iterations=result.iterations,
        residual=result.residual, converged=result.converged, wrt=result.wrt,
    )
    return RunOutcome(None if config is None else str(config), final_loss=None)


def cmd_landscape(cfg: RunConfig, run_dir: Path) -> RunOutcome:
    """Loss over a 2-D slice around the quantized weights, written as a matrix."""
    model, batch, config = _probe_target(cfg)
    trace = model.loss(batch, config, "eval", update_stats=False)
    assert trace.loss is not None
    eval_loss = trace.loss.item()
    log_event(logger, "eval_loss", loss=eval_loss, batch_size=len(batch))
    grid = landscape_slice(
        model, batch, config, cfg.halfwidth, cfg.resolution, seed=derive_seed(cfg.seed, _PROBE_DIRECTION)
    )
    path = write_landscape(grid, run_dir / LANDSCAPE_NAME)
    log_event(
        logger, "landscape", path=str(path), resolution=grid.resolution, halfwidth=grid.halfwidth,
        center_loss=grid.center_loss, min_loss=float(grid.losses.min()), max_loss=float(grid.losses.max()),
    )
    return RunOutcome(None if config is None else str(config), final_loss=eval_loss)


def _emit(path: Path, lines: Sequence[str]) -> None:
    """Print ``lines`` to stdout and save them to ``path``."""
    text = "\n".join(lines)
    print(text)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n", encoding="utf-8")


COMMANDS: dict[str, tuple[Callable[[RunConfig, Path], RunOutcome], str]] = {
    "train": (cmd_train, "train at a fixed bitwidth configuration"),
    "search": (cmd_search, "search a mixed-precision configuration under a BOP budget"),
    "finetune": (cmd_finetune, "fine-tune a searched configuration"),
    "bops": (cmd_bops, "report bit operations of a model"),
    "probe": (cmd_probe, "estimate the largest Hessian eigenvalue"),
    "landscape": (cmd_landscape, "export a 2-D loss-landscape slice"),
}


# --- parsing and dispatch -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    """One subcommand per experiment; every RunConfig field is a ``--flag``."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_file", metavar="PATH", help="INI configuration file")
    for f in fields(RunConfig):
        common.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            default=argparse.SUPPRESS,
            metavar="VALUE",
            help=f"{f.metadata['help']} (default: {f.default!r})",
        )
    parser = argparse.ArgumentParser(prog="saqlab", description="Sharpness-aware quantization lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, InfeasibleBudgetError):
        return EXIT_INFEASIBLE
    if isinstance(exc, NonFiniteError):
        return EXIT_NONFINITE
    return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_file: Optional[Union[str, Path]] = args.pop("config_file", None)
    try:
        cfg = resolve_config(config_file, args)
    except ConfigError as exc:
        configure_logging()
        logger.error("configuration error: %s", exc)
        close_logging()
        return EXIT_CONFIG

    run_dir = cfg.run_dir(command)
    metrics_path = run_dir / METRICS_NAME
    if not cfg.resume and metrics_path.exists():
        metrics_path.unlink()
    configure_logging(cfg.log_level, metrics_path)
    ledger = open_ledger(cfg.output_root())
    record = start_run(ledger, command, cfg.model, cfg.optimizer, cfg.seed, run_dir)
    log_event(logger, "run_config", command=command, **cfg.to_dict())

    outcome = RunOutcome()
    code = EXIT_ERROR
    handler, _ = COMMANDS[command]
    try:
        outcome = handler(cfg, run_dir)
        code = EXIT_OK
    except SaqlabError as exc:
        code = exit_code(exc)
        logger.error("%s failed: %s", command, exc)
    finally:
        finish_run(
            ledger, record, code, bitwidths=outcome.bitwidths, final_loss=outcome.final_loss,
            final_acc=outcome.final_acc, total_bops=outcome.total_bops,
        )
        log_event(logger, "run_end", command=command, exit_code=code)
        close_logging()
    return code
