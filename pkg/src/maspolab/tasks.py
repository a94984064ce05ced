"""Synthetic tasks with verifiable binary rewards.

``copy``: reward +1 iff the sequence equals the query's target sequence.
Only one of ``V**T`` sequences succeeds, so successes are rare.

``modsum``: reward +1 iff ``sum(tokens) % V`` equals the query's residue.
A uniform policy already succeeds with probability ``1/V``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gating import ConfigError, DomainError
from .policy import PolicyParams, log_prob

MAX_ENUMERATION = 4096
TASK_KINDS = ("copy", "modsum")


class CapacityError(RuntimeError):
    """Instance too large for exhaustive enumeration."""


@dataclass
class TaskSpec:
    kind: str
    vocab_size: int
    seq_len: int
    num_queries: int
    targets: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        for name in ("vocab_size", "seq_len", "num_queries"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"task.{name} must be a positive integer, got {value!r}")
        if len(self.targets) != self.num_queries:
            raise ConfigError(f"task.targets needs {self.num_queries} entries, got {len(self.targets)}")
        V, T = self.vocab_size, self.seq_len
        if self.kind == "copy":
            self.targets = [[int(t) for t in tgt] for tgt in self.targets]
            for tgt in self.targets:
                if len(tgt) != T or any(not 0 <= t < V for t in tgt):
                    raise ConfigError(f"copy target {tgt} is not a length-{T} sequence over [0, {V})")
        else:
            self.targets = [int(r) for r in self.targets]
            if any(not 0 <= r < V for r in self.targets):
                raise ConfigError(f"modsum residues must lie in [0, {V})")

    @property
    def num_sequences(self) -> int:
        return self.vocab_size**self.seq_len

    @property
    def enumerable(self) -> bool:
        return self.num_sequences <= MAX_ENUMERATION


def make_task(kind: str, vocab_size: int, seq_len: int, num_queries: int, seed: int = 0) -> TaskSpec:
    rng = np.random.default_rng(seed)
    if kind == "copy":
        targets = rng.integers(0, vocab_size, size=(num_queries, seq_len)).tolist()
    elif kind == "modsum":
        targets = rng.integers(0, vocab_size, size=num_queries).tolist()
    else:
        raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {kind!r}")
    return TaskSpec(kind, vocab_size, seq_len, num_queries, targets)


def verify(spec: TaskSpec, query: int, tokens: Sequence[int]) -> int:
    if not 0 <= query < spec.num_queries:
        raise DomainError(f"query {query} out of range")
    toks = [int(t) for t in tokens]
    if len(toks) != spec.seq_len or any(not 0 <= t < spec.vocab_size for t in toks):
        raise DomainError(f"malformed sequence {tokens!r}")
    if spec.kind == "copy":
        return 1 if toks == spec.targets[query] else -1
    return 1 if sum(toks) % spec.vocab_size == spec.targets[query] else -1


def verify_batch(spec: TaskSpec, query: int, tokens: np.ndarray) -> np.ndarray:
    """Vectorized :func:`verify` over an ``(n, T)`` token array."""
    tokens = np.asarray(tokens)
    if spec.kind == "copy":
        ok = np.all(tokens == np.asarray(spec.targets[query]), axis=1)
    else:
        ok = tokens.sum(axis=1) % spec.vocab_size == spec.targets[query]
    return np.where(ok, 1, -1)


def success_probability(spec: TaskSpec, policy: PolicyParams, query: int) -> float:
    """Exact probability of reward +1, summed over all ``V**T`` sequences."""
    if not spec.enumerable:
        raise CapacityError(f"{spec.num_sequences} sequences exceeds the enumeration limit {MAX_ENUMERATION}")
    total = 0.0
    for seq in itertools.product(range(spec.vocab_size), repeat=spec.seq_len):
        if verify(spec, query, seq) == 1:
            total += np.exp(log_prob(policy, query, seq)[0])
    return float(total)
