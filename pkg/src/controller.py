"""Bitwidth search: an LSTM policy over per-layer bitwidths trained by REINFORCE.

The policy emits one categorical decision per searchable layer; each
decision is fed back as the next step's input embedding. Rewards are
perturbed validation losses plus a squared BOP-budget penalty, and are
minimized.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.costmodel import constraint_penalty, total_bops
from src.data import Batch, Dataset, batches, derive_seed
from src.errors import ContractError, InfeasibleBudgetError, NonFiniteError
from src.logs import log_event
from src.netlib import BitwidthConfig, Model, evaluate
from src.optim import Adam, SharpnessOptimizer, compute_epsilon_hat
from src.tensor import (
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    columns,
    constant,
    exp,
    log_softmax,
    matmul,
    mul,
    neg,
    parameter,
    row,
    sigmoid,
    sum_all,
    tanh,
    take,
)

logger = logging.getLogger(__name__)

HIDDEN_SIZE = 64
ENTROPY_COEF = 5e-3
BASELINE_DECAY = 0.9
WARMUP_EPOCHS = 10
INFER_SAMPLES = 20
ATTEMPTS_PER_SAMPLE = 100
REWARD_SENTINEL = 1e6
INIT_SCALE = 0.1

# seed-derivation keys for the search streams
_POLICY_STREAM, _VAL_ORDER, _TRAIN_ORDER = 11, 12, 13


@dataclass
class Rollout:
    actions: list[int]
    log_prob: Tensor
    entropy: Tensor


class PolicyNet:
    """LSTM cell + linear head; step 0 reads the empty embedding."""

    def __init__(
        self, bitwidths: Sequence[int], layers: int, hidden: int = HIDDEN_SIZE, seed: int = 0
    ) -> None:
        if layers < 1:
            raise ContractError(f"policy needs at least one layer, got {layers}")
        self.bitwidths = tuple(bitwidths)
        self.layers = layers
        self.hidden = hidden
        k = len(self.bitwidths)
        rng = np.random.default_rng(seed)

        def init(*shape: int) -> np.ndarray:
            return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

        self.embed = parameter(init(k + 1, hidden), name="policy.embed")
        self.w_x = parameter(init(hidden, 4 * hidden), name="policy.w_x")
        self.w_h = parameter(init(hidden, 4 * hidden), name="policy.w_h")
        self.b = parameter(np.zeros(4 * hidden), name="policy.b")
        # zero head: the untrained policy is exactly uniform
        self.w_out = parameter(np.zeros((hidden, k)), name="policy.w_out")
        self.b_out = parameter(np.zeros(k), name="policy.b_out")

    @property
    def empty_index(self) -> int:
        return len(self.bitwidths)

    def parameters(self) -> list[Tensor]:
        return [self.embed, self.w_x, self.w_h, self.b, self.w_out, self.b_out]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name or "": p.values.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            assert p.name is not None
            if p.name not in state or state[p.name].shape != p.shape:
                raise ContractError(f"policy state for {p.name} is missing or misshapen")
            p.values = np.array(state[p.name], dtype=np.float64)

    def step_logits(self, prev: int, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """One LSTM step; returns ``(logits [1, K], h, c)``."""
        n = self.hidden
        x = row(self.embed, prev)
        gates = add_bias(add(matmul(x, self.w_x), matmul(h, self.w_h)), self.b)
        i = sigmoid(columns(gates, 0, n))
        f = sigmoid(columns(gates, n, 2 * n))
        g = tanh(columns(gates, 2 * n, 3 * n))
        o = sigmoid(columns(gates, 3 * n, 4 * n))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        return add_bias(matmul(h, self.w_out), self.b_out), h, c

    def rollout(
        self, actions: Optional[Sequence[int]] = None, rng: Optional[np.random.Generator] = None
    ) -> Rollout:
        """Sample (``actions`` is None) or replay a decision sequence."""
        if actions is None and rng is None:
            raise ContractError("sampling needs an rng")
        if actions is not None and len(actions) != self.layers:
            raise ContractError(f"expected {self.layers} decisions, got {len(actions)}")
        h = constant(np.zeros((1, self.hidden)))
        c = constant(np.zeros((1, self.hidden)))
        prev = self.empty_index
        chosen: list[int] = []
        log_probs: list[Tensor] = []
        entropies: list[Tensor] = []
        for t in range(self.layers):
            logits, h, c = self.step_logits(prev, h, c)
            logp = log_softmax(logits)
            if actions is None:
                assert rng is not None
                probs = np.exp(logp.values[0])
                a = int(rng.choice(len(self.bitwidths), p=probs / probs.sum()))
            else:
                a = int(actions[t])
            log_probs.append(take(logp, a))
            entropies.append(neg(sum_all(mul(exp(logp), logp))))
            chosen.append(a)
            prev = a
        return Rollout(chosen, functools.reduce(add, log_probs), functools.reduce(add, entropies))

    def actions_of(self, config: BitwidthConfig) -> list[int]:
        try:
            return [self.bitwidths.index(b) for b in config.bits]
        except ValueError as exc:
            raise ContractError(f"{config.bits} uses a bitwidth outside {self.bitwidths}") from exc


def categorical_entropy(logits: Tensor) -> Tensor:
    """``-sum(p * log p)`` of ``softmax(logits)`` for a ``[1, K]`` row."""
    logp = log_softmax(logits)
    return neg(sum_all(mul(exp(logp), logp)))


def sample_config(policy: PolicyNet, rng: np.random.Generator) -> BitwidthConfig:
    """Autoregressive sample with its exact joint log-probability."""
    ro = policy.rollout(rng=rng)
    return BitwidthConfig(tuple(policy.bitwidths[a] for a in ro.actions), ro.log_prob.item())


def log_prob(policy: PolicyNet, config: BitwidthConfig) -> float:
    """Joint log-probability of ``config`` obtained by replaying it."""
    return policy.rollout(policy.actions_of(config)).log_prob.item()


def greedy_config(policy: PolicyNet) -> BitwidthConfig:
    """The config built from each step's most likely decision."""
    h = constant(np.zeros((1, policy.hidden)))
    c = constant(np.zeros((1, policy.hidden)))
    prev = policy.empty_index
    actions = []
    for _ in range(policy.layers):
        logits, h, c = policy.step_logits(prev, h, c)
        prev = int(np.argmax(logits.values[0]))
        actions.append(prev)
    ro = policy.rollout(actions)
    return BitwidthConfig(tuple(policy.bitwidths[a] for a in actions), ro.log_prob.item())


def policy_entropy(
    policy: PolicyNet,
    config: Optional[BitwidthConfig] = None,
    *,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Sum of per-step entropies along a trajectory drawn with ``rng``, or along ``config``."""
    if config is not None:
        return policy.rollout(policy.actions_of(config)).entropy.item()
    if rng is None:
        raise ContractError("entropy needs a config to replay or an rng to sample with")
    return policy.rollout(rng=rng).entropy.item()


# --- rewards ---------------------------------------------------------------


@dataclass
class SearchState:
    """Knobs and running state of the alternating search."""

    budget: float
    beta: float = 1e-4
    alpha: float = ENTROPY_COEF
    rho: float = 0.05
    warmup: int = WARMUP_EPOCHS
    baseline: Optional[float] = None
    baseline_decay: float = BASELINE_DECAY
    use_baseline: bool = True
    normalize_cost: bool = True
    sharpness: bool = True
    epoch: int = 0
    history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ContractError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")


def compute_reward(
    model: Model,
    config: BitwidthConfig,
    val_batch: Batch,
    rho: float,
    beta: float,
    budget: float,
    *,
    normalize_cost: bool = True,
    sharpness: bool = True,
) -> float:
    """Perturbed validation loss plus ``beta * (c(b) - C)**2``; lower is better.

    Batch statistics are used for BN without touching running averages. A
    non-finite loss yields ``REWARD_SENTINEL``.
    """
    report = total_bops(model.spec, config)
    scale = float(report.fp_bops) if normalize_cost else 1.0
    penalty = constraint_penalty(report.total_bops, budget, beta, scale=scale)
    try:
        perturbation: dict[int, np.ndarray] = {}
        if sharpness and rho > 0:
            perturbation = compute_epsilon_hat(model, val_batch, config, rho).layers
        trace = model.loss(val_batch, config, "train", update_stats=False, perturbation=perturbation)
        assert trace.loss is not None
        loss = trace.loss.item()
    except NonFiniteError as exc:
        logger.warning("config %s gave a non-finite reward: %s", config, exc)
        return REWARD_SENTINEL
    if not np.isfinite(loss):
        return REWARD_SENTINEL
    return loss + penalty


def reinforce_gradient(
    policy: PolicyNet,
    samples: Sequence[tuple[BitwidthConfig, float]],
    alpha: float,
    baseline: float = 0.0,
) -> tuple[dict[str, np.ndarray], float]:
    """Score-function gradient of ``mean[(R - baseline) * log pi] - alpha * H``."""
    if not samples:
        raise ContractError("reinforce needs at least one sampled trajectory")
    with Tape():
        terms = []
        for config, reward in samples:
            ro = policy.rollout(policy.actions_of(config))
            terms.append(add(mul(ro.log_prob, reward - baseline), mul(ro.entropy, -alpha)))
        surrogate = mul(functools.reduce(add, terms), 1.0 / len(samples))
    params = policy.parameters()
    backward(surrogate, params)
    grads = {p.name or "": np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params}
    return grads, surrogate.item()


def reinforce_step(
    policy: PolicyNet,
    adam: Adam,
    samples: Sequence[tuple[BitwidthConfig, float]],
    state: SearchState,
) -> float:
    """One Adam step on the REINFORCE estimator; updates the reward baseline."""
    mean_reward = float(np.mean([r for _, r in samples]))
    if state.use_baseline and state.baseline is None:
        state.baseline = mean_reward
    base = state.baseline if state.use_baseline and state.baseline is not None else 0.0
    grads, surrogate = reinforce_gradient(policy, samples, state.alpha, base)
    adam.step(grads)
    if state.use_baseline:
        state.baseline = state.baseline_decay * base + (1 - state.baseline_decay) * mean_reward
    state.history.append(mean_reward)
    return surrogate


# --- alternating search ------------------------------------------------------


def samq_train(
    model: Model,
    policy: PolicyNet,
    train_data: Dataset,
    val_data: Dataset,
    *,
    optimizer: SharpnessOptimizer,
    adam: Adam,
    state: SearchState,
    epochs: int,
    batch_size: int,
    seed: int,
    method: str = "saq",
) -> None:
    """Alternate policy updates on validation batches with weight updates on training batches.

    Epochs before ``state.warmup`` only train the weights, under configs
    sampled from the (frozen) policy.
    """
    for epoch in range(state.epoch, epochs):
        state.epoch = epoch
        optimizer.state.epoch = epoch
        rng = np.random.default_rng(derive_seed(seed, epoch, _POLICY_STREAM))
        rewards: list[float] = []
        if epoch >= state.warmup:
            for vb in batches(val_data, batch_size, derive_seed(seed, epoch, _VAL_ORDER)):
                config = sample_config(policy, rng)
                reward = compute_reward(
                    model, config, vb, state.rho, state.beta, state.budget,
                    normalize_cost=state.normalize_cost, sharpness=state.sharpness,
                )
                reinforce_step(policy, adam, [(config, reward)], state)
                rewards.append(reward)
        losses = []
        for tb in batches(train_data, batch_size, derive_seed(seed, epoch, _TRAIN_ORDER)):
            losses.append(optimizer.step(method, tb, sample_config(policy, rng)))
        state.epoch = epoch + 1
        optimizer.state.epoch = epoch + 1
        log_event(
            logger,
            "search_epoch",
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else None,
            mean_reward=float(np.mean(rewards)) if rewards else None,
            baseline=state.baseline,
            greedy=str(greedy_config(policy)),
            entropy=policy_entropy(policy, rng=rng),
        )


def infer_config(
    policy: PolicyNet,
    model: Model,
    val_data: Dataset,
    budget: float,
    k: int = INFER_SAMPLES,
    *,
    rng: np.random.Generator,
) -> BitwidthConfig:
    """Best-accuracy config among ``k`` sampled configs with ``c(b) <= budget``.

    Ties go to lower BOPs, then to the lexicographically smaller config.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    cap = ATTEMPTS_PER_SAMPLE * k
    feasible: list[BitwidthConfig] = []
    attempts = 0
    while len(feasible) < k and attempts < cap:
        attempts += 1
        config = sample_config(policy, rng)
        if total_bops(model.spec, config).total_bops <= budget:
            feasible.append(config)
    if not feasible:
        raise InfeasibleBudgetError(budget, attempts)
    if len(feasible) < k:
        logger.warning("only %d of %d feasible configs after %d attempts", len(feasible), k, attempts)

    scored: dict[tuple[int, ...], tuple[float, int, BitwidthConfig]] = {}
    for config in feasible:
        if config.bits in scored:
            continue
        _, acc = evaluate(model, val_data, config)
        scored[config.bits] = (acc, total_bops(model.spec, config).total_bops, config)
    best = min(scored.values(), key=lambda s: (-s[0], s[1], s[2].bits))
    logger.info("chose %s (val acc %.4f, %d BOPs)", best[2], best[0], best[1])
    return best[2]
