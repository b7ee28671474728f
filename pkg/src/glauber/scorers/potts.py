"""Pairwise-coupled Gibbs scorer: the exactly compatible control.

Energy of a configuration is ``E(x) = sum_{i<j} J[i][j][x_i][x_j] +
sum_i h[i][x_i]``. Local scores are the negated single-site energy terms, so
the tempered conditionals are exactly those of the Gibbs measure
``mu(x) ~ exp(-E(x)/tau)`` and every rectangle closes (delta = 0).
"""

from __future__ import annotations

import numpy as np

from ..core import SeqState
from ..errors import InputError


class PottsGibbsScorer:
    def __init__(self, couplings: np.ndarray, fields: np.ndarray):
        """``couplings``: (n, n, V, V) with J[j][i] == J[i][j].T and zero diagonal;
        ``fields``: (n, V)."""
        J = np.asarray(couplings, dtype=np.float64)
        h = np.asarray(fields, dtype=np.float64)
        if J.ndim != 4 or J.shape[0] != J.shape[1] or J.shape[2] != J.shape[3]:
            raise InputError(f"couplings must have shape (n, n, V, V), got {J.shape}")
        n, V = J.shape[0], J.shape[2]
        if h.shape != (n, V):
            raise InputError(f"fields must have shape ({n}, {V}), got {h.shape}")
        if not np.allclose(J, np.transpose(J, (1, 0, 3, 2)), atol=0.0):
            raise InputError("couplings must satisfy J[j][i] == J[i][j].T exactly")
        for i in range(n):
            if np.any(J[i, i] != 0.0):
                raise InputError("self-couplings J[i][i] must be zero")
        self._J = J
        self._h = h
        self._n = n
        self._V = V

    @property
    def n(self) -> int:
        return self._n

    @property
    def vocab_size(self) -> int:
        return self._V

    def local_scores(self, state: SeqState, i: int) -> np.ndarray:
        if i < 0 or i >= self._n:
            raise InputError(f"position {i} out of range for length {self._n}")
        ids = state.ids
        # scores[a] = -(h[i][a] + sum_{j != i} J[i][j][a][x_j]); the j == i term
        # vanishes because J[i][i] == 0, so the current token is never read.
        pair = self._J[i, np.arange(self._n), :, ids]  # (n, V)
        return -(self._h[i] + pair.sum(axis=0))

    def energy(self, ids: np.ndarray) -> float:
        """Total configuration energy (used for Gibbs-measure cross-checks)."""
        ids = np.asarray(ids, dtype=np.int64)
        e = float(self._h[np.arange(self._n), ids].sum())
        for i in range(self._n):
            for j in range(i + 1, self._n):
                e += float(self._J[i, j, ids[i], ids[j]])
        return e

    @classmethod
    def random_instance(cls, n: int, vocab_size: int, rng: np.random.Generator,
                        coupling_scale: float = 0.5, field_scale: float = 0.5) -> "PottsGibbsScorer":
        """Dense random instance with iid uniform couplings and fields."""
        V = vocab_size
        J = np.zeros((n, n, V, V))
        for i in range(n):
            for j in range(i + 1, n):
                block = rng.uniform(-coupling_scale, coupling_scale, size=(V, V))
                J[i, j] = block
                J[j, i] = block.T
        h = rng.uniform(-field_scale, field_scale, size=(n, V))
        return cls(J, h)

    @classmethod
    def aligned_chain(cls, n: int, vocab_size: int, beta: float,
                      field_scale: float = 0.0,
                      rng: np.random.Generator | None = None) -> "PottsGibbsScorer":
        """Nearest-neighbour ferromagnet: matching adjacent tokens lower the
        energy by ``beta``. Strong ``beta`` manufactures slow mixing."""
        V = vocab_size
        J = np.zeros((n, n, V, V))
        align = -beta * np.eye(V)
        for i in range(n - 1):
            J[i, i + 1] = align
            J[i + 1, i] = align.T
        if field_scale > 0.0:
            if rng is None:
                raise InputError("field_scale > 0 requires an rng")
            h = rng.uniform(-field_scale, field_scale, size=(n, V))
        else:
            h = np.zeros((n, V))
        return cls(J, h)

    @classmethod
    def decoupled(cls, n: int, vocab_size: int, fields: np.ndarray | None = None) -> "PottsGibbsScorer":
        """All couplings zero: sites evolve independently."""
        J = np.zeros((n, n, vocab_size, vocab_size))
        h = np.zeros((n, vocab_size)) if fields is None else np.asarray(fields, dtype=np.float64)
        return cls(J, h)
