"""Vocabulary, sequence states, the scorer contract, and distribution utilities.

The chain state is a fixed-length sequence of token ids over a finite
vocabulary. A scorer assigns each position a raw score vector over the
vocabulary given the rest of the sequence; temperature enters exactly once,
in :func:`tempered_conditional`. Scores are natural-log units, pre-temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, runtime_checkable

import numpy as np

from .errors import DomainError, InputError

# Smallest positive normal double: probabilities are clamped here so no
# conditional ever carries an exact zero (irreducibility requires full support).
_TINY = float(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token inventory; token id ``i`` names ``tokens[i]``."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise InputError("vocabulary needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InputError("vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise InputError(f"unknown token {token!r}") from None

    @classmethod
    def generic(cls, size: int) -> "Vocabulary":
        """Anonymous vocabulary ``t0 .. t{size-1}`` for synthetic instances."""
        if size < 2:
            raise InputError("vocabulary needs at least 2 tokens")
        return cls(tuple(f"t{i}" for i in range(size)))


@dataclass(frozen=True)
class SeqState:
    """Immutable sequence of token ids plus the set of frozen positions.

    Frozen positions are excluded from updates; they belong to the state (not
    the kernel) so two coupled chains share them by construction.
    """

    ids: np.ndarray
    frozen: frozenset[int] = field(default=frozenset())

    def __post_init__(self):
        arr = np.asarray(self.ids, dtype=np.int64)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "ids", arr)
        object.__setattr__(self, "frozen", frozenset(int(i) for i in self.frozen))
        if arr.ndim != 1 or arr.size == 0:
            raise InputError("ids must be a non-empty 1-d sequence")
        if (arr < 0).any():
            raise InputError("token ids must be non-negative")
        if any(i < 0 or i >= arr.size for i in self.frozen):
            raise InputError("frozen positions out of range")
        if len(self.frozen) >= arr.size:
            raise InputError("at least one position must be non-frozen")

    @property
    def n(self) -> int:
        return int(self.ids.size)

    @property
    def free_sites(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if i not in self.frozen)

    def token(self, i: int) -> int:
        return int(self.ids[i])

    def with_token(self, i: int, a: int) -> "SeqState":
        if i < 0 or i >= self.n:
            raise InputError(f"position {i} out of range for length {self.n}")
        new = self.ids.copy()
        new[i] = a
        return SeqState(new, self.frozen)

    def key(self) -> bytes:
        """Hashable identity of the token content (frozen set excluded)."""
        return self.ids.tobytes()

    def same_ids(self, other: "SeqState") -> bool:
        return self.n == other.n and bool(np.array_equal(self.ids, other.ids))

    def validate_against(self, vocab_size: int) -> None:
        if int(self.ids.max()) >= vocab_size:
            raise InputError(f"token id {int(self.ids.max())} exceeds vocabulary size {vocab_size}")


@runtime_checkable
class ScorerContract(Protocol):
    """Local score backend.

    ``local_scores(state, i)`` returns the raw score vector over the
    vocabulary for position ``i`` given the rest of the sequence. It must be
    deterministic and must not depend on the token currently at ``i``
    (implementations substitute a mask sentinel or never read it).
    """

    @property
    def vocab_size(self) -> int: ...

    def local_scores(self, state: SeqState, i: int) -> np.ndarray: ...


def tempered_conditional(scores: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-scaled conditional: softmax of ``scores / tau``.

    Computed with max-shift stabilization; every entry is clamped to the
    smallest positive normal before renormalization so the output is strictly
    positive. Adding a constant to all scores leaves the result unchanged.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InputError("scores must be a non-empty 1-d vector")
    if not np.isfinite(s).all():
        raise InputError("scores must be finite")
    shifted = (s - s.max()) / tau
    w = np.exp(shifted)
    w = np.maximum(w, _TINY)
    return w / w.sum()


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance, half the L1 distance between distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError(f"length mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def hamming_distance(x: SeqState, y: SeqState) -> int:
    """Number of positions where the two sequences disagree."""
    if x.n != y.n:
        raise InputError(f"length mismatch: {x.n} vs {y.n}")
    return int(np.count_nonzero(x.ids != y.ids))


def normalized_hamming(x: SeqState, y: SeqState) -> float:
    """Hamming distance divided by the sequence length; lies in [0, 1]."""
    return hamming_distance(x, y) / x.n


DistanceFn = Callable[[SeqState, SeqState], float]


def random_state(n: int, vocab_size: int, rng: np.random.Generator,
                 frozen: Iterable[int] = ()) -> SeqState:
    """Uniform random state of length ``n`` over ``vocab_size`` tokens."""
    ids = rng.integers(0, vocab_size, size=n)
    return SeqState(ids, frozenset(frozen))
