"""Context-free scorers used as nulls and calibration targets."""

from __future__ import annotations

import numpy as np

from ..core import SeqState
from ..errors import InputError


class UniformScorer:
    """All scores zero: every conditional is uniform over the vocabulary."""

    def __init__(self, vocab_size: int, n: int | None = None):
        if vocab_size < 2:
            raise InputError("vocabulary needs at least 2 tokens")
        self._V = vocab_size
        self.n = n

    @property
    def vocab_size(self) -> int:
        return self._V

    def local_scores(self, state: SeqState, i: int) -> np.ndarray:
        return np.zeros(self._V)


class FixedConditionalScorer:
    """Same conditional at every position and context.

    At temperature 1 the conditional equals ``probs`` exactly, which makes
    token-count drift computable by hand (the 0.95-mass drift control).
    """

    def __init__(self, probs: np.ndarray):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise InputError("probs must be a 1-d vector with >= 2 entries")
        if (p <= 0).any() or abs(p.sum() - 1.0) > 1e-12:
            raise InputError("probs must be strictly positive and sum to 1")
        self._scores = np.log(p)
        self._V = p.size

    @property
    def vocab_size(self) -> int:
        return self._V

    def local_scores(self, state: SeqState, i: int) -> np.ndarray:
        return self._scores.copy()

    @classmethod
    def concentrated(cls, vocab_size: int, target: int, mass: float) -> "FixedConditionalScorer":
        """Put ``mass`` on ``target`` and split the rest evenly."""
        if not 0 < mass < 1:
            raise InputError("mass must lie in (0, 1)")
        p = np.full(vocab_size, (1.0 - mass) / (vocab_size - 1))
        p[target] = mass
        return cls(p)
