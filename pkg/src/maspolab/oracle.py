"""Independent verification: exhaustive enumeration and finite differences.

Deliberately avoids the vectorized helpers in :mod:`maspolab.policy` so it
can check them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .policy import PolicyParams
from .tasks import MAX_ENUMERATION, CapacityError, TaskSpec, verify


@dataclass(frozen=True)
class EnumerationReport:
    expected_reward: float
    success_probability: float
    sequence_count: int


def _row_log_softmax(row) -> list[float]:
    m = max(row)
    lse = m + math.log(math.fsum(math.exp(z - m) for z in row))
    return [z - lse for z in row]


def exact_expected_reward(policy: PolicyParams, task: TaskSpec, query: int) -> EnumerationReport:
    """Enumerate every sequence in lexicographic order.

    The prefix log-probability is carried down a depth-first walk so each
    logit row is normalized once per visited prefix.
    """
    V, T = task.vocab_size, task.seq_len
    if V**T > MAX_ENUMERATION:
        raise CapacityError(f"{V ** T} sequences exceeds the enumeration limit {MAX_ENUMERATION}")
    logits = policy.logits[query]
    success_terms: list[float] = []
    count = 0
    prefix: list[int] = []

    def walk(t: int, prev: int, logp: float) -> None:
        nonlocal count
        if t == T:
            count += 1
            if verify(task, query, prefix) == 1:
                success_terms.append(math.exp(logp))
            return
        row = _row_log_softmax(logits[t, prev].tolist())
        for tok in range(V):
            prefix.append(tok)
            walk(t + 1, tok, logp + row[tok])
            prefix.pop()

    walk(0, V, 0.0)
    p = math.fsum(success_terms)
    # Rewards are +1 / -1, so E[r] = p - (1 - p).
    return EnumerationReport(expected_reward=2.0 * p - 1.0, success_probability=p, sequence_count=count)


def mean_exact_expected_reward(policy: PolicyParams, task: TaskSpec) -> float:
    return math.fsum(exact_expected_reward(policy, task, q).expected_reward for q in range(task.num_queries)) / task.num_queries


def finite_diff_grad(surrogate: Callable[[PolicyParams], float], params: PolicyParams, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``surrogate`` w.r.t. every logit."""
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-7, 1e-3], got {step}")
    base = params.logits
    grad = np.zeros_like(base)
    probe = params.copy()
    flat = probe.logits.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        f_plus = surrogate(probe)
        flat[j] = orig - step
        f_minus = surrogate(probe)
        flat[j] = orig
        grad.reshape(-1)[j] = (f_plus - f_minus) / (2.0 * step)
    return grad
