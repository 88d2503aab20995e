"""Fixed-configuration training loop and the state snapshots checkpoints carry."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Optional

import numpy as np

from src.controller import PolicyNet, SearchState
from src.data import Dataset, batches, derive_seed
from src.errors import CheckpointError
from src.logs import log_event
from src.netlib import BitwidthConfig, Model, evaluate, spec_from_dict, spec_to_dict
from src.optim import Adam, OptimState, SharpnessOptimizer
from src.quantizer import QuantSpec

logger = logging.getLogger(__name__)

_TRAIN_ORDER = 21


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


def measure(
    model: Model, train: Dataset, val: Dataset, config: Optional[BitwidthConfig], epoch: int, lr: float
) -> EpochMetrics:
    """Eval-mode loss and accuracy on both splits."""
    train_loss, train_acc = evaluate(model, train, config)
    val_loss, val_acc = evaluate(model, val, config)
    return EpochMetrics(epoch, train_loss, train_acc, val_loss, val_acc, lr)


def fit(
    optimizer: SharpnessOptimizer,
    method: str,
    train: Dataset,
    val: Dataset,
    config: Optional[BitwidthConfig],
    *,
    batch_size: int,
    seed: int,
    stop_epoch: Optional[int] = None,
) -> Optional[EpochMetrics]:
    """Train from ``optimizer.state.epoch`` up to its schedule length (or ``stop_epoch``).

    Every finished epoch logs an ``epoch`` record. The model must be a
    ``Model``; returns the last epoch's metrics, or None if no epoch ran.
    """
    model = optimizer.model
    assert isinstance(model, Model)
    state = optimizer.state
    end = state.epochs if stop_epoch is None else min(stop_epoch, state.epochs)
    metrics: Optional[EpochMetrics] = None
    for epoch in range(state.epoch, end):
        state.epoch = epoch
        lr = state.current_lr
        for batch in batches(train, batch_size, derive_seed(seed, epoch, _TRAIN_ORDER)):
            optimizer.step(method, batch, config)
        state.epoch = epoch + 1
        metrics = measure(model, train, val, config, epoch + 1, lr)
        log_event(logger, "epoch", **asdict(metrics))
    return metrics


# --- snapshots -----------------------------------------------------------------


def model_snapshot(model: Model) -> dict[str, Any]:
    return {
        "spec": spec_to_dict(model.spec),
        "quant": asdict(model.quant),
        "seed": model.seed,
        "state": model.state_dict(),
    }


def restore_model(snapshot: Mapping[str, Any]) -> Model:
    try:
        quant_fields = dict(snapshot["quant"])
        quant_fields["bitwidths"] = tuple(quant_fields["bitwidths"])
        model = Model(spec_from_dict(snapshot["spec"]), QuantSpec(**quant_fields), int(snapshot["seed"]))
        state = snapshot["state"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed model section: {exc}") from exc
    model.load_state_dict(state)
    return model


def optim_snapshot(state: OptimState) -> dict[str, Any]:
    return asdict(state)


def restore_optim(snapshot: Mapping[str, Any]) -> OptimState:
    values = dict(snapshot)
    values["milestones"] = tuple(values.get("milestones", ()))
    values["velocity"] = {k: np.asarray(v) for k, v in values.get("velocity", {}).items()}
    try:
        return OptimState(**values)
    except TypeError as exc:
        raise CheckpointError(f"malformed optimizer section: {exc}") from exc


def policy_snapshot(policy: PolicyNet, adam: Adam, search: SearchState) -> dict[str, Any]:
    return {
        "bitwidths": list(policy.bitwidths),
        "layers": policy.layers,
        "hidden": policy.hidden,
        "state": policy.state_dict(),
        "adam": {
            "lr": adam.lr,
            "betas": list(adam.betas),
            "eps": adam.eps,
            "weight_decay": adam.weight_decay,
            "t": adam.t,
            "m": dict(adam.m),
            "v": dict(adam.v),
        },
        "search": asdict(search),
    }


def restore_policy(snapshot: Mapping[str, Any]) -> tuple[PolicyNet, Adam, SearchState]:
    try:
        policy = PolicyNet(snapshot["bitwidths"], int(snapshot["layers"]), int(snapshot["hidden"]))
        policy.load_state_dict(snapshot["state"])
        a = snapshot["adam"]
        adam = Adam(
            policy.parameters(), lr=a["lr"], betas=(a["betas"][0], a["betas"][1]), eps=a["eps"],
            weight_decay=a["weight_decay"], t=int(a["t"]), m=dict(a["m"]), v=dict(a["v"]),
        )
        search = SearchState(**snapshot["search"])
    except (KeyError, TypeError, IndexError) as exc:
        raise CheckpointError(f"malformed policy section: {exc}") from exc
    return policy, adam, search
