"""Controlled incompatibility: a compatible base plus a keyed random field.

The perturbation ``g_i(a; context)`` is a deterministic pseudorandom value in
[-1, 1] keyed by (seed, position, context), so experiments reproduce without
storing tables. Amplitude 0 reduces exactly to the base scorer; rectangle
incompatibility scales linearly with the amplitude because the base
contribution telescopes to zero.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..core import SeqState
from ..errors import InputError


class PerturbedScorer:
    def __init__(self, base, epsilon: float, seed: int = 0):
        if epsilon < 0:
            raise InputError(f"perturbation amplitude must be >= 0, got {epsilon}")
        self.base = base
        self.epsilon = float(epsilon)
        self.seed = int(seed)

    @property
    def vocab_size(self) -> int:
        return self.base.vocab_size

    @property
    def n(self) -> int:
        return self.base.n

    def _field(self, state: SeqState, i: int) -> np.ndarray:
        """Pseudorandom vector in [-1, 1]^V keyed by (seed, i, context)."""
        ctx = state.ids.copy()
        ctx[i] = -1  # the current token must not influence the key
        h = hashlib.blake2b(ctx.tobytes(), digest_size=16,
                            key=b"%d:%d" % (self.seed, i)).digest()
        key = np.frombuffer(h, dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        return gen.uniform(-1.0, 1.0, size=self.vocab_size)

    def local_scores(self, state: SeqState, i: int) -> np.ndarray:
        scores = np.asarray(self.base.local_scores(state, i), dtype=np.float64)
        if self.epsilon == 0.0:
            return scores
        return scores + self.epsilon * self._field(state, i)
