import numpy as np

from glauber.core import SeqState
from glauber.rng import substream
from glauber.scorers import PottsGibbsScorer, TabularScorer


def brute_force_energy(J, h, ids):
    """Independent energy oracle: direct double loop over the raw arrays."""
    n = len(ids)
    e = 0.0
    for i in range(n):
        e += h[i][ids[i]]
        for j in range(i + 1, n):
            e += J[i][j][ids[i]][ids[j]]
    return e


def small_potts(n=3, vocab_size=2, seed=11, coupling=0.8, field=0.5):
    return PottsGibbsScorer.random_instance(
        n, vocab_size, substream(seed), coupling_scale=coupling, field_scale=field)


def small_tabular(n=3, vocab_size=3, seed=5, scale=1.5):
    return TabularScorer.random_instance(n, vocab_size, substream(seed), scale=scale)


def state(*ids, frozen=()):
    return SeqState(np.array(ids, dtype=np.int64), frozenset(frozen))
