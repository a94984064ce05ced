"""Per-step training metrics.

Sums use :func:`math.fsum`, which is correctly rounded, so every field is
invariant to the order in which tokens or rollouts are presented.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .gating import GateMethod


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    mean_reward: float
    success_rate: float
    mean_entropy: float
    mean_ratio: float
    max_abs_log_ratio: float
    mean_gate: float
    zero_grad_fraction: float
    degenerate_group_fraction: float
    grad_norm: float
    exact_expected_reward: Optional[float] = None

    def as_row(self) -> list[str]:
        return [_fmt(v) for v in asdict(self).values()]

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "MetricsRecord":
        values = {}
        for f, raw in zip(fields(cls), row):
            if f.name == "step":
                values[f.name] = int(raw)
            else:
                values[f.name] = None if raw == "" else float(raw)
        return cls(**values)


COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def _mean(values) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    return math.fsum(values.tolist()) / values.size if values.size else 0.0


def summarize_step(
    step: int,
    *,
    rewards,
    degenerate_groups,
    token_entropy,
    log_ratio,
    gate,
    clipped,
    grad_norms,
    method: GateMethod | str,
    exact_expected_reward: Optional[float] = None,
) -> MetricsRecord:
    """Aggregate one training step.

    ``rewards`` are per rollout, ``degenerate_groups`` per group,
    ``token_entropy`` per sampled token (under the sampling policy) and
    ``log_ratio`` / ``gate`` / ``clipped`` per token at the time of its update.
    ``grad_norms`` holds one gradient norm per mini-batch and is averaged.
    """
    method = GateMethod.parse(method)
    rewards = np.asarray(rewards, dtype=np.float64)
    n_success = int(np.count_nonzero(rewards > 0))
    success_rate = n_success / rewards.size
    log_ratio = np.asarray(log_ratio, dtype=np.float64)
    clipped = np.asarray(clipped, dtype=bool)
    return MetricsRecord(
        step=int(step),
        mean_reward=_mean(rewards),
        success_rate=success_rate,
        mean_entropy=_mean(token_entropy),
        mean_ratio=_mean(np.exp(log_ratio)),
        max_abs_log_ratio=float(np.abs(log_ratio).max()) if log_ratio.size else 0.0,
        mean_gate=_mean(gate),
        zero_grad_fraction=(np.count_nonzero(clipped) / clipped.size) if method.is_clip and clipped.size else 0.0,
        degenerate_group_fraction=_mean(np.asarray(degenerate_groups, dtype=np.float64)),
        grad_norm=_mean(grad_norms),
        exact_expected_reward=exact_expected_reward,
    )
