"""Explicit score tables: the exact-oracle substrate for small instances.

The table stores one score vector per (position, context) where a context is
the sequence with position ``i`` removed, encoded as a mixed-radix integer.
Only feasible for ``V**n`` up to ~1e5.

File format (little-endian):
    bytes 0..3   magic ``GLTB``
    bytes 4..7   format version, uint32 (currently 1)
    bytes 8..11  vocabulary size V, uint32
    bytes 12..15 sequence length n, uint32
    bytes 16..   n * V**(n-1) * V float64 scores, C order, indexed
                 [position][context_index][token]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..core import SeqState
from ..errors import CapacityError, InputError

_MAGIC = b"GLTB"
_VERSION = 1
MAX_TABLE_STATES = 100_000


def context_index(ids: np.ndarray, i: int, vocab_size: int) -> int:
    """Mixed-radix code of the sequence with position ``i`` removed.

    Positions are read in ascending order; the first remaining position is
    the most significant digit.
    """
    code = 0
    for j in range(len(ids)):
        if j == i:
            continue
        code = code * vocab_size + int(ids[j])
    return code


class TabularScorer:
    def __init__(self, table: np.ndarray):
        """``table``: array of shape (n, V**(n-1), V)."""
        t = np.asarray(table, dtype=np.float64)
        if t.ndim != 3:
            raise InputError(f"table must be 3-d (n, V^(n-1), V), got shape {t.shape}")
        n, n_contexts, V = t.shape
        if V < 2 or n < 1:
            raise InputError("need V >= 2 and n >= 1")
        if n_contexts != V ** (n - 1):
            raise InputError(f"expected {V ** (n - 1)} contexts for n={n}, V={V}, got {n_contexts}")
        if V**n > MAX_TABLE_STATES:
            raise CapacityError(
                f"tabular scorer limited to {MAX_TABLE_STATES} states, requested {V**n}",
                limit=MAX_TABLE_STATES, requested=V**n)
        if not np.isfinite(t).all():
            raise InputError("table scores must be finite")
        self._table = t
        self._n = n
        self._V = V

    @property
    def n(self) -> int:
        return self._n

    @property
    def vocab_size(self) -> int:
        return self._V

    @property
    def table(self) -> np.ndarray:
        return self._table

    def local_scores(self, state: SeqState, i: int) -> np.ndarray:
        if i < 0 or i >= self._n:
            raise InputError(f"position {i} out of range for length {self._n}")
        idx = context_index(state.ids, i, self._V)
        return self._table[i, idx].copy()

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<III", _VERSION, self._V, self._n))
            f.write(self._table.astype("<f8", copy=False).tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "TabularScorer":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MAGIC:
                raise InputError(f"not a tabular score file (magic {magic!r})")
            version, V, n = struct.unpack("<III", f.read(12))
            if version != _VERSION:
                raise InputError(f"unsupported tabular format version {version}")
            count = n * V ** (n - 1) * V
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise InputError("tabular score file truncated")
            table = np.frombuffer(raw, dtype="<f8").reshape(n, V ** (n - 1), V)
        return cls(table.astype(np.float64))

    @classmethod
    def random_instance(cls, n: int, vocab_size: int, rng: np.random.Generator,
                        scale: float = 1.0) -> "TabularScorer":
        if vocab_size**n > MAX_TABLE_STATES:
            raise CapacityError(
                f"tabular scorer limited to {MAX_TABLE_STATES} states, requested {vocab_size**n}",
                limit=MAX_TABLE_STATES, requested=vocab_size**n)
        table = rng.uniform(-scale, scale, size=(n, vocab_size ** (n - 1), vocab_size))
        return cls(table)

    @classmethod
    def from_scorer(cls, scorer, n: int) -> "TabularScorer":
        """Tabulate any scorer exhaustively (independent-evaluation oracle)."""
        V = scorer.vocab_size
        if V**n > MAX_TABLE_STATES:
            raise CapacityError(
                f"tabulation limited to {MAX_TABLE_STATES} states, requested {V**n}",
                limit=MAX_TABLE_STATES, requested=V**n)
        table = np.empty((n, V ** (n - 1), V))
        ids = np.zeros(n, dtype=np.int64)
        for i in range(n):
            others = [j for j in range(n) if j != i]
            for code in range(V ** (n - 1)):
                rem = code
                for j in reversed(others):
                    ids[j] = rem % V
                    rem //= V
                ids[i] = 0  # must be irrelevant per the scorer contract
                table[i, code] = scorer.local_scores(SeqState(ids), i)
        return cls(table)
