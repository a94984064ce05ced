"""Tabular first-order-Markov softmax policy.

The logit table has shape ``(Q, T, V + 1, V)``: query, position, previous
token (index ``V`` is the start marker) and next token.  A sequence of ``T``
tokens for query ``q`` visits the rows ``logits[q, t, prev_t]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .gating import DomainError

_MAGIC = b"MASPOPOL"
_HEADER = struct.Struct("<8sqqq")


@dataclass
class PolicyParams:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 4:
            raise DomainError("logits must have shape (Q, T, V + 1, V)")
        q, t, vp1, v = self.logits.shape
        if vp1 != v + 1 or min(q, t, v) < 1:
            raise DomainError(f"inconsistent logit table shape {self.logits.shape}")

    @property
    def num_queries(self) -> int:
        return self.logits.shape[0]

    @property
    def seq_len(self) -> int:
        return self.logits.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[3]

    @property
    def num_params(self) -> int:
        return self.logits.size

    @classmethod
    def uniform(cls, num_queries: int, seq_len: int, vocab_size: int) -> "PolicyParams":
        return cls(np.zeros((num_queries, seq_len, vocab_size + 1, vocab_size)))

    @classmethod
    def random(cls, num_queries, seq_len, vocab_size, rng: np.random.Generator, scale=1.0) -> "PolicyParams":
        shape = (num_queries, seq_len, vocab_size + 1, vocab_size)
        return cls(scale * rng.standard_normal(shape))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.logits)))


def log_softmax(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(rows: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(rows))


def row_entropy(rows: np.ndarray) -> np.ndarray:
    logp = log_softmax(rows)
    return -(np.exp(logp) * logp).sum(axis=-1)


def entropy_grad(rows: np.ndarray) -> np.ndarray:
    """d H(softmax(z)) / dz = -p * (log p + H), row-wise."""
    logp = log_softmax(rows)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1, keepdims=True)
    return -p * (logp + h)


def validate_tokens(params: PolicyParams, query: int, tokens: Sequence[int]) -> np.ndarray:
    if not 0 <= int(query) < params.num_queries:
        raise DomainError(f"query {query} out of range [0, {params.num_queries})")
    toks = np.asarray(tokens)
    if toks.shape != (params.seq_len,) or not np.issubdtype(toks.dtype, np.integer):
        raise DomainError(f"expected {params.seq_len} integer tokens, got {tokens!r}")
    if np.any(toks < 0) or np.any(toks >= params.vocab_size):
        raise DomainError(f"token out of range [0, {params.vocab_size})")
    return toks.astype(np.int64)


def previous_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    """Conditioning token for every position (start marker at position 0)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    prev = np.empty_like(tokens)
    prev[..., 0] = vocab_size
    prev[..., 1:] = tokens[..., :-1]
    return prev


def visited_rows(params: PolicyParams, query: int, tokens: Sequence[int]) -> np.ndarray:
    toks = validate_tokens(params, query, tokens)
    prev = previous_tokens(toks, params.vocab_size)
    return params.logits[int(query), np.arange(params.seq_len), prev]


def log_prob(params: PolicyParams, query: int, tokens: Sequence[int]) -> tuple[float, np.ndarray]:
    """Total and per-token log-probability of a sequence."""
    toks = validate_tokens(params, query, tokens)
    logp = log_softmax(visited_rows(params, query, toks))
    per_token = logp[np.arange(params.seq_len), toks]
    return float(per_token.sum()), per_token


def sample_batch(params: PolicyParams, query: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` sequences autoregressively; returns an ``(n, T)`` int array."""
    if not 0 <= int(query) < params.num_queries:
        raise DomainError(f"query {query} out of range [0, {params.num_queries})")
    V = params.vocab_size
    out = np.empty((n, params.seq_len), dtype=np.int64)
    prev = np.full(n, V, dtype=np.int64)
    for t in range(params.seq_len):
        cdf = np.cumsum(softmax(params.logits[int(query), t, prev]), axis=-1)
        u = rng.random(n)
        tok = (u[:, None] >= cdf).sum(axis=-1)
        np.minimum(tok, V - 1, out=tok)
        out[:, t] = tok
        prev = tok
    return out


def sample(params: PolicyParams, query: int, rng: np.random.Generator) -> np.ndarray:
    return sample_batch(params, query, 1, rng)[0]


def entropy(params: PolicyParams, query: int, tokens: Sequence[int]) -> float:
    """Mean per-position entropy (nats) of the rows visited by ``tokens``."""
    return float(row_entropy(visited_rows(params, query, tokens)).mean())


@dataclass(frozen=True)
class RowGradient:
    """Gradient of one token's log-probability: nonzero only on one logit row."""

    index: tuple[int, int, int]
    values: np.ndarray


def grad_log_prob(params: PolicyParams, query: int, tokens: Sequence[int]) -> list[RowGradient]:
    """Per-token sparse gradients ``one_hot(token) - softmax(row)``."""
    toks = validate_tokens(params, query, tokens)
    prev = previous_tokens(toks, params.vocab_size)
    probs = softmax(visited_rows(params, query, toks))
    grads = []
    for t, (tok, p) in enumerate(zip(toks, probs)):
        g = -p
        g[tok] += 1.0
        grads.append(RowGradient((int(query), t, int(prev[t])), g))
    return grads


def densify(grads: Sequence[RowGradient], shape: tuple[int, ...], weights: Sequence[float] | None = None) -> np.ndarray:
    out = np.zeros(shape)
    for k, g in enumerate(grads):
        out[g.index] += g.values if weights is None else weights[k] * g.values
    return out


def save_policy(params: PolicyParams, path: str | Path) -> None:
    """Write the logit table as a header ``(Q, T, V)`` plus little-endian float64 data."""
    from .io import atomic_write_bytes

    q, t, v = params.num_queries, params.seq_len, params.vocab_size
    payload = _HEADER.pack(_MAGIC, q, t, v) + params.logits.astype("<f8").tobytes()
    atomic_write_bytes(Path(path), payload)


def load_policy(path: str | Path) -> PolicyParams:
    data = Path(path).read_bytes()
    magic, q, t, v = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a policy snapshot")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if flat.size != q * t * (v + 1) * v:
        raise ValueError(f"{path}: truncated policy snapshot")
    return PolicyParams(flat.reshape(q, t, v + 1, v).astype(np.float64))
