"""Gradient-weighting functions for trust-region policy updates.

Every function here is pure and accepts either scalars or numpy arrays
(broadcast together).  Scalar inputs give Python floats back.

Gate methods (``maspo``, ``sapo``, ``sapo_unilateral``) return a soft weight
``F`` in (0, 1] that multiplies ``ratio * advantage``.  The weight is a plain
value, so any gradient computed from it treats it as a constant.

Clip methods (``grpo``, ``clip_higher``, ``dac``) use the PPO-style
``min(ratio * A, clip(ratio, lo, hi) * A)`` surrogate.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

LOG_RATIO_CLAMP = 20.0
# Smallest positive normal double; soft gates never report exactly 0.
_GATE_FLOOR = np.finfo(np.float64).tiny


class GateMethod(str, enum.Enum):
    GRPO = "grpo"
    CLIP_HIGHER = "clip_higher"
    DAC = "dac"
    SAPO = "sapo"
    SAPO_UNILATERAL = "sapo_unilateral"
    MASPO = "maspo"

    @classmethod
    def parse(cls, value: "GateMethod | str") -> "GateMethod":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown gate method {value!r}; expected one of: {names}") from None

    @property
    def is_clip(self) -> bool:
        return self in (GateMethod.GRPO, GateMethod.CLIP_HIGHER, GateMethod.DAC)


class ConfigError(ValueError):
    """Invalid hyperparameter or method selection."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


@dataclass(frozen=True)
class GateParams:
    """Hyperparameters shared by all gating and clipping variants.

    Defaults follow the 7B MASPO configuration (sigma_base=1, alpha=0.3,
    beta=0.03), symmetric eps of 0.2 and SAPO temperatures 1.0 / 1.05.
    """

    sigma_base: float = 1.0
    alpha: float = 0.3
    beta_low: float = 0.03
    beta_high: float = 0.03
    eps_low: float = 0.2
    eps_high: float = 0.2
    tau_pos: float = 1.0
    tau_neg: float = 1.05
    sigma_cap: float = 10.0
    risk_floor: float = 0.1
    risk_cap: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not np.isfinite(value):
                raise ConfigError(f"gate.{name} must be a finite number, got {value!r}")
        if self.sigma_base <= 0:
            raise ConfigError("gate.sigma_base must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("gate.alpha must lie in [0, 1]")
        if self.beta_low < 0 or self.beta_high < 0:
            raise ConfigError("gate.beta_low and gate.beta_high must be >= 0")
        if self.eps_low < 0 or self.eps_high < 0:
            raise ConfigError("gate.eps_low and gate.eps_high must be >= 0")
        if self.tau_pos <= 0 or self.tau_neg <= 0:
            raise ConfigError("gate.tau_pos and gate.tau_neg must be > 0")
        if self.sigma_cap < self.sigma_base:
            raise ConfigError("gate.sigma_cap must be >= gate.sigma_base")
        if not 0 < self.risk_floor < 1 < self.risk_cap:
            raise ConfigError("gate risk window must satisfy 0 < risk_floor < 1 < risk_cap")


@dataclass(frozen=True)
class TokenStep:
    """Per-token inputs to a gate: ratio, advantage and old probability."""

    ratio: float
    advantage: float
    pi_old: float
    log_ratio: float

    def __post_init__(self):
        if not 0.0 < self.pi_old <= 1.0:
            raise DomainError(f"pi_old must lie in (0, 1], got {self.pi_old}")
        if not self.ratio > 0 or not np.isfinite(self.ratio):
            raise DomainError(f"ratio must be positive and finite, got {self.ratio}")
        if abs(self.ratio - np.exp(self.log_ratio)) > 1e-12 * self.ratio:
            raise DomainError("ratio and log_ratio disagree")

    @classmethod
    def from_log_ratio(cls, log_ratio: float, advantage: float, pi_old: float) -> "TokenStep":
        lr = clamp_log_ratio(log_ratio)
        return cls(ratio=float(np.exp(lr)), advantage=float(advantage), pi_old=float(pi_old), log_ratio=lr)

    @classmethod
    def from_ratio(cls, ratio: float, advantage: float, pi_old: float) -> "TokenStep":
        if not ratio > 0:
            raise DomainError(f"ratio must be positive, got {ratio}")
        return cls.from_log_ratio(float(np.log(ratio)), advantage, pi_old)


def clamp_log_ratio(log_ratio):
    return _out(np.clip(np.asarray(log_ratio, dtype=np.float64), -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))


def _out(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x) if x.ndim == 0 else x


def _check_pi(pi_old) -> np.ndarray:
    pi = np.asarray(pi_old, dtype=np.float64)
    if np.any(~(pi > 0)) or np.any(pi > 1):
        raise DomainError("pi_old must lie in (0, 1]")
    return pi


def _mass_width(pi: np.ndarray, params: GateParams) -> np.ndarray:
    return np.minimum(params.sigma_base / pi**params.alpha, params.sigma_cap)


def sigma_pos(pi_old, advantage, params: GateParams):
    """Gate width for positive-advantage tokens.

    ``min(sigma_base / pi_old**alpha, sigma_cap) * clip(1 + beta_high*A, risk_floor, risk_cap)``
    """
    pi = _check_pi(pi_old)
    adv = np.asarray(advantage, dtype=np.float64)
    risk = np.clip(1.0 + params.beta_high * adv, params.risk_floor, params.risk_cap)
    return _out(_mass_width(pi, params) * risk)


def sigma_neg(pi_old, advantage, params: GateParams):
    """Gate width for negative-advantage tokens.

    ``min(sigma_base / pi_old**alpha, sigma_cap) * clip(1 / (1 - beta_low*A), risk_floor, risk_cap)``
    """
    pi = _check_pi(pi_old)
    adv = np.asarray(advantage, dtype=np.float64)
    denom = 1.0 - params.beta_low * adv
    with np.errstate(divide="ignore"):
        # denom <= 0 only happens for A > 0, outside this branch's use; map it to the cap.
        inv = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), np.inf)
    risk = np.clip(inv, params.risk_floor, params.risk_cap)
    return _out(_mass_width(pi, params) * risk)


def destabilizing(ratio, advantage) -> np.ndarray:
    """Mask of tokens whose update pushes the ratio further from 1."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    return ((adv > 0) & (ratio > 1)) | ((adv < 0) & (ratio < 1))


def _maspo(ratio, adv, pi, params):
    width = np.where(adv > 0, sigma_pos(pi, adv, params), sigma_neg(pi, adv, params))
    soft = np.maximum(np.exp(-((ratio - 1.0) ** 2) / (2.0 * width**2)), _GATE_FLOOR)
    return np.where(destabilizing(ratio, adv), soft, 1.0)


def _sapo(ratio, adv, params, unilateral):
    tau = np.where(adv > 0, params.tau_pos, params.tau_neg)
    # 4 p (1 - p) with p = sigmoid(x) equals sech(x / 2)**2.
    half = 0.5 * tau * (ratio - 1.0)
    with np.errstate(over="ignore"):
        soft = np.maximum(1.0 / np.cosh(half) ** 2, _GATE_FLOOR)
    if unilateral:
        return np.where(destabilizing(ratio, adv), soft, 1.0)
    return soft


def maspo_gate(step_or_ratio, advantage=None, pi_old=None, params: GateParams | None = None):
    """Soft Gaussian gate with mass-adaptive, advantage-dependent width.

    Call either as ``maspo_gate(step, params)`` with a :class:`TokenStep` or
    as ``maspo_gate(ratio, advantage, pi_old, params)`` with arrays.
    """
    ratio, adv, pi, params = _unpack(step_or_ratio, advantage, pi_old, params)
    return _out(_maspo(ratio, adv, pi, params))


def sapo_gate(step_or_ratio, advantage=None, pi_old=None, params: GateParams | None = None, *, unilateral: bool = False):
    ratio, adv, _, params = _unpack(step_or_ratio, advantage, pi_old, params, need_pi=False)
    return _out(_sapo(ratio, adv, params, unilateral))


def _unpack(step_or_ratio, advantage, pi_old, params, need_pi=True):
    if isinstance(step_or_ratio, TokenStep):
        if params is None and isinstance(advantage, GateParams):
            params = advantage
        step = step_or_ratio
        return (np.float64(step.ratio), np.float64(step.advantage), np.float64(step.pi_old), params)
    if params is None:
        raise TypeError("params is required")
    ratio = np.asarray(step_or_ratio, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    pi = _check_pi(pi_old) if need_pi or pi_old is not None else None
    return ratio, adv, pi, params


def dac_bounds(pi_old, params: GateParams):
    """Probability-dependent (lower, upper) ratio bounds.

    Both bounds widen as ``pi_old`` shrinks; lower <= 1 <= upper always.
    """
    pi = _check_pi(pi_old)
    lower = 0.5 + 0.5 * np.sqrt(np.maximum(1.0 - 4.0 * params.eps_low / pi, 0.0))
    upper = 0.5 + 0.5 * np.sqrt(1.0 + 4.0 * params.eps_high / pi)
    return _out(lower), _out(upper)


def clip_bounds(method: GateMethod | str, pi_old, params: GateParams):
    method = GateMethod.parse(method)
    if method is GateMethod.GRPO:
        return 1.0 - params.eps_low, 1.0 + params.eps_low
    if method is GateMethod.CLIP_HIGHER:
        return 1.0 - params.eps_low, 1.0 + params.eps_high
    if method is GateMethod.DAC:
        return dac_bounds(pi_old, params)
    raise ConfigError(f"{method.value} is not a clip method")


@dataclass(frozen=True)
class SurrogateTerms:
    """Per-token output of :func:`surrogate_terms`.

    ``weight`` is the frozen multiplier on ``ratio * advantage`` (the soft
    gate for gate methods, 1/0 branch activity for clip methods) and
    ``clipped`` marks tokens whose hard-clip gradient vanishes.
    """

    objective: np.ndarray
    coefficient: np.ndarray
    weight: np.ndarray
    clipped: np.ndarray


def surrogate_terms(method: GateMethod | str, ratio, advantage, pi_old, params: GateParams) -> SurrogateTerms:
    method = GateMethod.parse(method)
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    pi = _check_pi(pi_old)
    ratio, adv, pi = np.broadcast_arrays(ratio, adv, pi)
    unclipped = ratio * adv

    if method.is_clip:
        lo, hi = clip_bounds(method, pi, params)
        objective = np.minimum(unclipped, np.clip(ratio, lo, hi) * adv)
        clipped = ((adv > 0) & (ratio > hi)) | ((adv < 0) & (ratio < lo))
        weight = np.where(clipped, 0.0, 1.0)
        coefficient = np.where(clipped, 0.0, unclipped)
        return SurrogateTerms(objective, coefficient, weight, clipped)

    if method is GateMethod.MASPO:
        weight = _maspo(ratio, adv, pi, params)
    else:
        weight = _sapo(ratio, adv, params, unilateral=method is GateMethod.SAPO_UNILATERAL)
    value = weight * unclipped
    return SurrogateTerms(value, value.copy(), weight, np.zeros(ratio.shape, dtype=bool))


def token_surrogate(method: GateMethod | str, step: TokenStep, params: GateParams) -> tuple[float, float]:
    """Per-token (objective, coefficient on grad log pi)."""
    terms = surrogate_terms(method, step.ratio, step.advantage, step.pi_old, params)
    return float(terms.objective), float(terms.coefficient)
