"""Group-rollout RLVR training loop on a tabular policy.

One training step:

1. ``collect_groups`` freezes the current policy as the sampling policy and
   draws ``G`` rollouts for each of ``B`` queries (round-robin), recording
   per-token log-probabilities and group-standardized advantages.
2. ``train_step`` shuffles all ``B * G * T`` tokens, splits them into ``M``
   mini-batches and applies one Adam update per mini-batch.  Ratios are
   always taken against the frozen sampling log-probabilities, so later
   mini-batches are increasingly off-policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .advantage import group_advantages, reweight_advantage
from .gating import ConfigError, GateMethod, GateParams, clamp_log_ratio, surrogate_terms
from .metrics import MetricsRecord, summarize_step
from .policy import PolicyParams, entropy_grad, log_softmax, previous_tokens, row_entropy, sample_batch
from .tasks import TaskSpec, verify_batch


class ContractError(RuntimeError):
    """A batch was used against a policy it was not collected from."""


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    method: GateMethod = GateMethod.MASPO
    gate: GateParams = field(default_factory=GateParams)
    groups_per_step: int = 4
    group_size: int = 8
    minibatches_per_step: int = 16
    learning_rate: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    entropy_coeff: float = 0.0
    adv_reweight_alpha: float = 0.0
    total_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        self.method = GateMethod.parse(self.method)
        if not isinstance(self.gate, GateParams):
            raise ConfigError("train.gate must be a GateParams")
        for name in ("groups_per_step", "group_size", "minibatches_per_step", "total_steps", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"train.{name} must be an integer, got {value!r}")
        if self.groups_per_step < 1:
            raise ConfigError("train.groups_per_step must be >= 1")
        if self.group_size < 2:
            raise ConfigError("train.group_size must be >= 2")
        if self.minibatches_per_step < 1:
            raise ConfigError("train.minibatches_per_step must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("train.total_steps must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("train.adam_beta1 and train.adam_beta2 must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("train.adam_eps must be > 0")
        if self.entropy_coeff < 0:
            raise ConfigError("train.entropy_coeff must be >= 0")
        if not 0 <= self.adv_reweight_alpha <= 1:
            raise ConfigError("train.adv_reweight_alpha must lie in [0, 1]")


@dataclass
class TrainerState:
    policy: PolicyParams
    first_moment: np.ndarray
    second_moment: np.ndarray
    rng: np.random.Generator
    step_count: int = 0
    adam_steps: int = 0

    @classmethod
    def initial(cls, task: TaskSpec, config: TrainConfig) -> "TrainerState":
        policy = PolicyParams.uniform(task.num_queries, task.seq_len, task.vocab_size)
        return cls(
            policy=policy,
            first_moment=np.zeros_like(policy.logits),
            second_moment=np.zeros_like(policy.logits),
            rng=np.random.default_rng(config.seed),
        )


@dataclass
class TokenBatch:
    """Flat per-token arrays; row ``k`` of the logit table is ``(query, pos, prev)``."""

    query: np.ndarray
    pos: np.ndarray
    prev: np.ndarray
    token: np.ndarray
    logp_old: np.ndarray
    advantage: np.ndarray

    def __len__(self) -> int:
        return self.token.size

    def subset(self, idx: np.ndarray) -> "TokenBatch":
        return TokenBatch(*(getattr(self, f)[idx] for f in ("query", "pos", "prev", "token", "logp_old", "advantage")))


@dataclass
class RolloutBatch:
    policy_version: int
    queries: np.ndarray  # (R,)
    tokens: np.ndarray  # (R, T)
    rewards: np.ndarray  # (R,)
    advantages: np.ndarray  # (R,)
    logp_old: np.ndarray  # (R, T)
    entropy_old: np.ndarray  # (R, T)
    group_queries: np.ndarray  # (B,)
    group_degenerate: np.ndarray  # (B,)
    vocab_size: int

    def tokens_flat(self) -> TokenBatch:
        R, T = self.tokens.shape
        return TokenBatch(
            query=np.repeat(self.queries, T),
            pos=np.tile(np.arange(T), R),
            prev=previous_tokens(self.tokens, self.vocab_size).ravel(),
            token=self.tokens.ravel(),
            logp_old=self.logp_old.ravel(),
            # sequence-level advantage broadcast to every token
            advantage=np.repeat(self.advantages, T),
        )


def token_log_probs(logits: np.ndarray, tb: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    rows = logits[tb.query, tb.pos, tb.prev]
    logp_rows = log_softmax(rows)
    return logp_rows[np.arange(len(tb)), tb.token], logp_rows


def collect_groups(state: TrainerState, task: TaskSpec, config: TrainConfig) -> RolloutBatch:
    """Sample ``G`` rollouts for each of ``B`` round-robin queries from the frozen policy."""
    B, G = config.groups_per_step, config.group_size
    start = state.step_count * B
    group_queries = [(start + b) % task.num_queries for b in range(B)]
    tokens = [sample_batch(state.policy, q, G, state.rng) for q in group_queries]
    return build_batch(state, task, group_queries, tokens)


def build_batch(state: TrainerState, task: TaskSpec, group_queries, group_tokens) -> RolloutBatch:
    """Score given rollout groups under the state's current (sampling) policy."""
    policy = state.policy
    rewards, advantages, degenerate = [], [], []
    for q, toks in zip(group_queries, group_tokens):
        r = verify_batch(task, int(q), toks)
        adv = group_advantages(r)
        rewards.append(r)
        advantages.append(adv.values)
        degenerate.append(adv.degenerate)

    sizes = [len(t) for t in group_tokens]
    R, T = sum(sizes), task.seq_len
    batch = RolloutBatch(
        policy_version=state.step_count,
        queries=np.repeat(np.asarray(group_queries, dtype=np.int64), sizes),
        tokens=np.concatenate([np.asarray(t, dtype=np.int64) for t in group_tokens]),
        rewards=np.concatenate(rewards).astype(np.float64),
        advantages=np.concatenate(advantages),
        logp_old=np.empty((R, T)),
        entropy_old=np.empty((R, T)),
        group_queries=np.asarray(group_queries, dtype=np.int64),
        group_degenerate=np.array(degenerate, dtype=bool),
        vocab_size=task.vocab_size,
    )
    tb = batch.tokens_flat()
    logp, _ = token_log_probs(policy.logits, tb)
    batch.logp_old[:] = logp.reshape(R, T)
    batch.entropy_old[:] = row_entropy(policy.logits[tb.query, tb.pos, tb.prev]).reshape(R, T)
    return batch


@dataclass
class MinibatchResult:
    objective: float
    grad: np.ndarray  # gradient of the objective (ascent direction)
    log_ratio: np.ndarray
    ratio: np.ndarray
    weight: np.ndarray  # frozen gate / branch activity per token
    adv_scale: np.ndarray  # frozen advantage-reweighting factor per token
    clipped: np.ndarray


def minibatch_gradient(logits: np.ndarray, tb: TokenBatch, config: TrainConfig) -> MinibatchResult:
    """Token-mean surrogate of one mini-batch and its analytic gradient.

    Gates, clip-branch selections and advantage reweighting factors are
    evaluated at the current logits and treated as constants.
    """
    n = len(tb)
    logp, logp_rows = token_log_probs(logits, tb)
    log_ratio = clamp_log_ratio(logp - tb.logp_old)
    ratio = np.exp(log_ratio)
    pi_old = np.exp(tb.logp_old)

    adv = tb.advantage
    if config.adv_reweight_alpha > 0:
        adv = reweight_advantage(adv, np.exp(logp), config.adv_reweight_alpha)
    adv_scale = np.where(tb.advantage != 0, adv / np.where(tb.advantage != 0, tb.advantage, 1.0), 1.0)

    terms = surrogate_terms(config.method, ratio, adv, pi_old, config.gate)

    row_grad = -np.exp(logp_rows)
    row_grad[np.arange(n), tb.token] += 1.0
    row_grad *= terms.coefficient[:, None] / n
    objective = math.fsum(terms.objective.tolist()) / n
    if config.entropy_coeff > 0:
        rows = logits[tb.query, tb.pos, tb.prev]
        row_grad += config.entropy_coeff * entropy_grad(rows) / n
        objective += config.entropy_coeff * math.fsum(row_entropy(rows).tolist()) / n

    grad = np.zeros_like(logits)
    np.add.at(grad, (tb.query, tb.pos, tb.prev), row_grad)
    return MinibatchResult(objective, grad, log_ratio, ratio, terms.weight, adv_scale, terms.clipped)


def adam_update(first_moment, second_moment, grad, step, *, lr, beta1=0.9, beta2=0.95, eps=1e-8):
    """Bias-corrected Adam step for minimizing a loss with gradient ``grad``.

    Updates the moment arrays in place and returns the parameter delta.
    ``step`` is the 1-based update count.
    """
    first_moment *= beta1
    first_moment += (1.0 - beta1) * grad
    second_moment *= beta2
    second_moment += (1.0 - beta2) * np.square(grad)
    m_hat = first_moment / (1.0 - beta1**step)
    v_hat = second_moment / (1.0 - beta2**step)
    return -lr * m_hat / (np.sqrt(v_hat) + eps)


def train_step(
    state: TrainerState,
    batch: RolloutBatch,
    config: TrainConfig,
    *,
    exact_expected_reward: Optional[float] = None,
) -> tuple[TrainerState, MetricsRecord]:
    if batch.policy_version != state.step_count:
        raise ContractError(
            f"batch collected at policy version {batch.policy_version}, state is at {state.step_count}"
        )
    if batch.vocab_size != state.policy.vocab_size or batch.tokens.shape[1] != state.policy.seq_len:
        raise ContractError("batch shape does not match the policy")

    tokens = batch.tokens_flat()
    order = state.rng.permutation(len(tokens))
    parts = np.array_split(order, config.minibatches_per_step)

    log_ratio = np.zeros(len(tokens))
    weight = np.ones(len(tokens))
    clipped = np.zeros(len(tokens), dtype=bool)
    grad_norms = []
    logits = state.policy.logits
    for idx in parts:
        if idx.size == 0:
            continue
        mb = minibatch_gradient(logits, tokens.subset(idx), config)
        log_ratio[idx] = mb.log_ratio
        weight[idx] = mb.weight
        clipped[idx] = mb.clipped
        grad_norms.append(float(np.linalg.norm(mb.grad)))
        state.adam_steps += 1
        delta = adam_update(
            state.first_moment,
            state.second_moment,
            -mb.grad,
            state.adam_steps,
            lr=config.learning_rate,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
        )
        logits += delta
        if not np.all(np.isfinite(logits)):
            raise DivergenceError(state.step_count, f"non-finite logits after update at step {state.step_count}")

    record = summarize_step(
        state.step_count,
        rewards=batch.rewards,
        degenerate_groups=batch.group_degenerate,
        token_entropy=batch.entropy_old,
        log_ratio=log_ratio,
        gate=weight,
        clipped=clipped,
        grad_norms=grad_norms,
        method=config.method,
        exact_expected_reward=exact_expected_reward,
    )
    state.step_count += 1
    return state, record


def run_training(
    task: TaskSpec, config: TrainConfig, *, oracle_every: int = 0, state: TrainerState | None = None
) -> Iterator[tuple[TrainerState, MetricsRecord]]:
    """Yield ``(state, record)`` after each of ``config.total_steps`` steps.

    With ``oracle_every > 0`` every ``oracle_every``-th record carries the
    exact mean expected reward of the sampling policy of that step.
    """
    from .oracle import mean_exact_expected_reward

    state = state or TrainerState.initial(task, config)
    for _ in range(config.total_steps):
        exact = None
        if oracle_every and state.step_count % oracle_every == 0:
            exact = mean_exact_expected_reward(state.policy, task)
        batch = collect_groups(state, task, config)
        state, record = train_step(state, batch, config, exact_expected_reward=exact)
        yield state, record
