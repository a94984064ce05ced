"""Group-relative advantages for binary {-1, +1} rewards."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gating import ConfigError, DomainError

DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class AdvantageVector:
    values: np.ndarray
    degenerate: bool


def _check_rewards(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise DomainError(f"a reward group needs at least 2 rewards, got {r.size}")
    if not np.all((r == 1.0) | (r == -1.0)):
        raise DomainError("rewards must be -1 or +1")
    return r


def group_advantages(rewards: Sequence[float]) -> AdvantageVector:
    """Standardize rewards within a group using population statistics.

    A zero-variance group gets all-zero advantages and ``degenerate=True``.
    """
    r = _check_rewards(rewards)
    mean = r.mean()
    std = r.std()  # ddof=0
    if std < DEGENERATE_STD:
        return AdvantageVector(np.zeros_like(r), True)
    return AdvantageVector((r - mean) / std, False)


def closed_form_advantages(n: int, x: int) -> tuple[float, float]:
    """Advantages of a correct and an incorrect rollout when ``x`` of ``n`` succeed."""
    if not 0 < x < n:
        raise DomainError(f"need 0 < x < n, got n={n}, x={x}")
    return math.sqrt((n - x) / x), -math.sqrt(x / (n - x))


def reweight_advantage(advantage, pi_theta, alpha_A: float):
    """Scale advantages by ``alpha_A * pi_theta + (1 - alpha_A)``."""
    if not 0.0 <= alpha_A <= 1.0:
        raise ConfigError(f"alpha_A must lie in [0, 1], got {alpha_A}")
    pi = np.asarray(pi_theta, dtype=np.float64)
    if np.any(~(pi > 0)) or np.any(pi > 1):
        raise DomainError("pi_theta must lie in (0, 1]")
    out = (alpha_A * pi + (1.0 - alpha_A)) * np.asarray(advantage, dtype=np.float64)
    return float(out) if out.ndim == 0 else out
