"""Influence coefficients, oscillation bounds, and exact chain analysis.

The influence coefficient of site j on site i is the worst-case total
variation shift of i's tempered conditional when only j's token changes; its
row-sum maximum ``alpha`` drives the path-coupling contraction bound
``t_mix(eps) <= n / (1 - alpha) * (ln n + ln 1/eps)``. The score oscillation
is the temperature-free analogue bounding influence via ``Delta_ij / (4 tau)``.

For enumerable instances this module also builds the dense transition kernel,
its stationary distribution, exact mixing times, basin conductance, and the
reversibility defect.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import ScorerContract, SeqState, tempered_conditional, tv_distance
from .errors import CapacityError, DomainError, InputError
from .rng import substream

DEFAULT_CAPACITY = 4096

EXACT = "exact"
SAMPLED = "sampled-lower-bound"


@dataclass
class InfluenceMatrix:
    c: np.ndarray  # (n, n), zero diagonal
    mode: str
    tau: float
    mean_c: np.ndarray | None = None  # secondary statistic in sampled mode

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def alpha(self) -> float:
        """max_i sum_{j != i} c_ij; in sampled mode a certified lower bound."""
        return float(self.c.sum(axis=1).max())


@dataclass
class OscillationMatrix:
    delta: np.ndarray  # (n, n), zero diagonal
    mode: str

    @property
    def n(self) -> int:
        return self.delta.shape[0]

    @property
    def row_sum_max(self) -> float:
        return float(self.delta.sum(axis=1).max())


def _iter_pair_contexts(n: int, vocab_size: int, i: int, j: int):
    """Yield id arrays covering every assignment of positions other than i, j.

    The token at j is left at 0; the caller varies it. The token at i is
    irrelevant by the scorer contract.
    """
    others = [k for k in range(n) if k != i and k != j]
    ids = np.zeros(n, dtype=np.int64)
    for combo in itertools.product(range(vocab_size), repeat=len(others)):
        for k, v in zip(others, combo):
            ids[k] = v
        yield ids


def _pair_score_stack(scorer: ScorerContract, ids: np.ndarray, i: int, j: int) -> np.ndarray:
    """Score vectors at i for every choice of token at j: shape (V, V)."""
    V = scorer.vocab_size
    stack = np.empty((V, V))
    for b in range(V):
        ids[j] = b
        stack[b] = scorer.local_scores(SeqState(ids.copy()), i)
    return stack


def _check_exact_capacity(n: int, vocab_size: int, capacity: int) -> None:
    contexts = vocab_size ** (n - 1)
    if contexts > capacity:
        raise CapacityError(
            f"exact mode needs {contexts} contexts per site pair, capacity is {capacity}",
            limit=capacity, requested=contexts)


def influence_coefficients(scorer: ScorerContract, tau: float, mode: str = EXACT,
                           n: int | None = None, capacity: int = DEFAULT_CAPACITY,
                           base_states: Sequence[SeqState] | None = None,
                           context_sampler: Callable[[np.random.Generator], SeqState] | None = None,
                           samples: int = 0, k: int = 10, seed: int = 0) -> InfluenceMatrix:
    """Worst-case conditional TV shifts between all site pairs.

    Exact mode enumerates every context pair differing at one site and returns
    the true suprema. Sampled mode probes supplied contexts (plus optional
    sampler draws) with top-k single-token swaps; the result is a certified
    lower bound on each coefficient and on alpha.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    if mode == EXACT:
        n = n if n is not None else getattr(scorer, "n", None)
        if n is None:
            raise InputError("exact mode needs the sequence length")
        _check_exact_capacity(n, scorer.vocab_size, capacity)
        c = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                best = 0.0
                for ids in _iter_pair_contexts(n, scorer.vocab_size, i, j):
                    stack = _pair_score_stack(scorer, ids, i, j)
                    probs = np.array([tempered_conditional(s, tau) for s in stack])
                    diff = 0.5 * np.abs(probs[:, None, :] - probs[None, :, :]).sum(axis=2)
                    best = max(best, float(diff.max()))
                c[i, j] = best
        return InfluenceMatrix(c, EXACT, tau)
    if mode != SAMPLED:
        raise InputError(f"unknown mode {mode!r}")
    return _sampled_influence(scorer, tau, base_states or [], context_sampler,
                              samples, k, seed)


def _sampled_influence(scorer, tau, base_states, context_sampler, samples, k, seed):
    contexts = list(base_states)
    if context_sampler is not None:
        for t in range(samples):
            contexts.append(context_sampler(substream(seed, t)))
    if not contexts:
        raise InputError("sampled mode needs base states or a context sampler")
    n = contexts[0].n
    if any(s.n != n for s in contexts):
        raise InputError("all contexts must share the same length")
    from .incompatibility import top_k_replacements

    c = np.zeros((n, n))
    total = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=np.int64)
    for state in contexts:
        free = state.free_sites
        base_cond = {i: tempered_conditional(scorer.local_scores(state, i), tau)
                     for i in free}
        for j in free:
            for swap in top_k_replacements(scorer, state, j, k):
                swapped = state.with_token(j, swap)
                for i in free:
                    if i == j:
                        continue
                    moved = tempered_conditional(scorer.local_scores(swapped, i), tau)
                    tv = tv_distance(base_cond[i], moved)
                    c[i, j] = max(c[i, j], tv)
                    total[i, j] += tv
                    counts[i, j] += 1
    mean = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    return InfluenceMatrix(c, SAMPLED, tau, mean_c=mean)


def oscillation_matrix(scorer: ScorerContract, mode: str = EXACT,
                       n: int | None = None, capacity: int = DEFAULT_CAPACITY,
                       base_states: Sequence[SeqState] | None = None,
                       k: int = 10) -> OscillationMatrix:
    """Worst-case max-minus-min score shift at i induced by a swap at j.

    A pure score object: temperature never enters.
    """
    if mode == EXACT:
        n = n if n is not None else getattr(scorer, "n", None)
        if n is None:
            raise InputError("exact mode needs the sequence length")
        _check_exact_capacity(n, scorer.vocab_size, capacity)
        delta = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                best = 0.0
                for ids in _iter_pair_contexts(n, scorer.vocab_size, i, j):
                    stack = _pair_score_stack(scorer, ids, i, j)
                    d = stack[:, None, :] - stack[None, :, :]  # (V, V, V)
                    osc = d.max(axis=2) - d.min(axis=2)
                    best = max(best, float(osc.max()))
                delta[i, j] = best
        return OscillationMatrix(delta, EXACT)
    if mode != SAMPLED:
        raise InputError(f"unknown mode {mode!r}")
    if not base_states:
        raise InputError("sampled mode needs base states")
    from .incompatibility import top_k_replacements

    n = base_states[0].n
    delta = np.zeros((n, n))
    for state in base_states:
        free = state.free_sites
        base_scores = {i: np.asarray(scorer.local_scores(state, i), dtype=np.float64)
                       for i in free}
        for j in free:
            for swap in top_k_replacements(scorer, state, j, k):
                swapped = state.with_token(j, swap)
                for i in free:
                    if i == j:
                        continue
                    d = base_scores[i] - np.asarray(scorer.local_scores(swapped, i))
                    delta[i, j] = max(delta[i, j], float(d.max() - d.min()))
    return OscillationMatrix(delta, SAMPLED)


def mixing_upper_bound(n: int, alpha: float, eps: float) -> float | None:
    """Path-coupling mixing bound ``n/(1-alpha) (ln n + ln 1/eps)``.

    Returns None when ``alpha >= 1`` (the contraction condition fails and the
    bound does not apply).
    """
    if alpha < 0:
        raise InputError(f"alpha must be >= 0, got {alpha}")
    if not 0 < eps < 1:
        raise InputError(f"eps must lie in (0, 1), got {eps}")
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    if alpha >= 1:
        return None
    return n / (1.0 - alpha) * (np.log(n) + np.log(1.0 / eps))


@dataclass(frozen=True)
class EscapeBound:
    per_step: float         # |V| exp(-gap / tau): one-step escape probability
    conductance: float      # same value bounds the basin conductance
    t_mix_lower: float      # exp(gap / tau) / (4 |V|), valid when mu(B) <= 1/2


def escape_bound(vocab_size: int, gap: float, tau: float) -> EscapeBound:
    """Low-temperature escape and slow-mixing bounds from a margin ``gap``."""
    if gap <= 0:
        raise DomainError(f"margin must be positive, got {gap}")
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    per_step = vocab_size * float(np.exp(-gap / tau))
    t_lower = float(np.exp(gap / tau)) / (4.0 * vocab_size)
    return EscapeBound(per_step, per_step, t_lower)


# ---------------------------------------------------------------------------
# Exact chain analysis for enumerable instances
# ---------------------------------------------------------------------------

@dataclass
class ChainAnalysis:
    states: np.ndarray        # (S, n) token ids
    P: np.ndarray             # (S, S) row-stochastic kernel
    mu: np.ndarray            # stationary distribution
    residual: float           # || mu P - mu ||_1
    reversibility_defect: float
    t_mix: dict[float, int]
    tau: float
    free_sites: tuple[int, ...]
    _index: dict[bytes, int]

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def state_index(self, state: SeqState) -> int:
        try:
            return self._index[state.ids.tobytes()]
        except KeyError:
            raise InputError("state is not part of the enumerated space") from None

    def conductance(self, basin: Sequence[int] | np.ndarray) -> float:
        """Stationary escape flow out of the basin divided by its mass."""
        idx = np.asarray(basin, dtype=np.int64)
        if idx.size == 0:
            raise InputError("basin is empty")
        mass = float(self.mu[idx].sum())
        if mass <= 0:
            raise InputError("basin has zero stationary mass")
        inside = np.zeros(self.size, dtype=bool)
        inside[idx] = True
        flow = float((self.mu[idx, None] * self.P[np.ix_(idx, ~inside)]).sum())
        return flow / mass

    def expected_exit_steps(self, basin: Sequence[int] | np.ndarray) -> np.ndarray:
        """Expected steps to leave the basin from each basin state
        (fundamental-matrix linear solve)."""
        idx = np.asarray(basin, dtype=np.int64)
        if idx.size == 0:
            raise InputError("basin is empty")
        if idx.size == self.size:
            raise InputError("basin covers the whole space; exit is impossible")
        Q = self.P[np.ix_(idx, idx)]
        return np.linalg.solve(np.eye(idx.size) - Q, np.ones(idx.size))

    def to_json_obj(self, top_states: int = 10) -> dict:
        order = np.argsort(self.mu)[::-1][:top_states]
        return {
            "size": int(self.size),
            "tau": self.tau,
            "stationary_residual": self.residual,
            "reversibility_defect": self.reversibility_defect,
            "t_mix_table": {str(eps): int(t) for eps, t in self.t_mix.items()},
            "stationary_top_states": [
                {"ids": [int(t) for t in self.states[s]], "mu": float(self.mu[s])}
                for s in order
            ],
        }


def enumerate_states(n: int, vocab_size: int,
                     template: SeqState | None = None) -> tuple[np.ndarray, tuple[int, ...]]:
    """All states reachable from ``template`` by changing non-frozen sites.

    Without a template every position is free. Free sites are mixed-radix
    digits, first free site most significant.
    """
    if template is None:
        free = tuple(range(n))
        base = np.zeros(n, dtype=np.int64)
    else:
        if template.n != n:
            raise InputError(f"template length {template.n} != n {n}")
        free = template.free_sites
        base = template.ids.copy()
    m = len(free)
    S = vocab_size**m
    states = np.tile(base, (S, 1))
    combos = np.array(list(itertools.product(range(vocab_size), repeat=m)), dtype=np.int64)
    states[:, list(free)] = combos
    return states, free


def stationary_distribution(P: np.ndarray, method: str = "auto",
                            tol: float = 1e-12, max_iters: int = 200_000) -> np.ndarray:
    """Stationary row vector of a row-stochastic matrix.

    ``direct`` solves the singular linear system (robust to tiny spectral
    gaps); ``power`` iterates ``mu <- mu P`` to an L1 residual below ``tol``.
    ``auto`` tries power iteration and falls back to the direct solve when
    convergence stalls, so metastable kernels still get machine-precision
    answers.
    """
    S = P.shape[0]
    if method not in ("auto", "direct", "power"):
        raise InputError(f"unknown stationary method {method!r}")

    def _direct() -> np.ndarray:
        A = P.T - np.eye(S)
        A[-1, :] = 1.0
        rhs = np.zeros(S)
        rhs[-1] = 1.0
        mu = np.linalg.solve(A, rhs)
        mu = np.maximum(mu, 0.0)
        return mu / mu.sum()

    def _power(budget: int) -> tuple[np.ndarray, float]:
        mu = np.full(S, 1.0 / S)
        for _ in range(budget):
            nxt = mu @ P
            err = float(np.abs(nxt - mu).sum())
            mu = nxt
            if err <= tol:
                break
        return mu / mu.sum(), err

    if method == "direct":
        return _direct()
    if method == "power":
        mu, err = _power(max_iters)
        if err > tol:
            raise CapacityError(f"power iteration residual {err:.2e} above {tol:.0e} "
                                f"after {max_iters} iterations")
        return mu
    mu, err = _power(5_000)
    if err <= tol:
        return mu
    return _direct()


def _worst_tv(M: np.ndarray, mu: np.ndarray) -> float:
    return 0.5 * float(np.abs(M - mu).sum(axis=1).max())


def exact_mixing_times(P: np.ndarray, mu: np.ndarray, eps_grid: Sequence[float],
                       max_doublings: int = 40) -> dict[float, int]:
    """t_mix(eps) = min t with worst-start TV(P^t, mu) <= eps, for each eps.

    Dyadic powers of P locate an upper bracket, then bisection pins the
    minimum; worst-start TV is non-increasing in t so the search is valid.
    """
    for eps in eps_grid:
        if not 0 < eps < 1:
            raise InputError(f"eps must lie in (0, 1), got {eps}")
    min_eps = min(eps_grid)
    powers = [P]
    while _worst_tv(powers[-1], mu) > min_eps:
        if len(powers) > max_doublings:
            raise CapacityError(
                f"chain not mixed below eps={min_eps} within 2^{max_doublings} steps")
        powers.append(powers[-1] @ powers[-1])

    def tv_at(t: int) -> float:
        M = None
        for bit in range(t.bit_length()):
            if (t >> bit) & 1:
                M = powers[bit] if M is None else M @ powers[bit]
        return _worst_tv(M, mu)

    out: dict[float, int] = {}
    for eps in sorted(eps_grid, reverse=True):
        if _worst_tv(np.eye(P.shape[0]), mu) <= eps:
            out[eps] = 0
            continue
        hi = 1
        while tv_at(hi) > eps:
            hi *= 2
        lo = max(hi // 2, 1)
        while lo < hi:
            mid = (lo + hi) // 2
            if tv_at(mid) <= eps:
                hi = mid
            else:
                lo = mid + 1
        out[eps] = hi
    return out


def exact_chain_analysis(scorer: ScorerContract, n: int, tau: float,
                         eps_grid: Sequence[float] = (0.25, 0.1, 0.01),
                         capacity: int = DEFAULT_CAPACITY,
                         template: SeqState | None = None,
                         compute_tmix: bool = True,
                         stationary_method: str = "auto",
                         max_doublings: int = 40) -> ChainAnalysis:
    """Dense kernel, stationary law, mixing table, and reversibility defect."""
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    V = scorer.vocab_size
    states, free = enumerate_states(n, V, template)
    S = states.shape[0]
    if S > capacity:
        raise CapacityError(f"{S} states exceed capacity {capacity}",
                            limit=capacity, requested=S)
    m = len(free)
    frozen = frozenset(range(n)) - set(free)
    strides = {site: V ** (m - 1 - k) for k, site in enumerate(free)}
    P = np.zeros((S, S))
    for s_idx in range(S):
        state = SeqState(states[s_idx], frozen)
        for site in free:
            probs = tempered_conditional(scorer.local_scores(state, site), tau)
            old = state.token(site)
            codes = s_idx + (np.arange(V) - old) * strides[site]
            np.add.at(P, (s_idx, codes), probs / m)
    mu = stationary_distribution(P, method=stationary_method)
    residual = float(np.abs(mu @ P - mu).sum())
    flow = mu[:, None] * P
    defect = float(np.abs(flow - flow.T).max())
    t_mix = exact_mixing_times(P, mu, eps_grid, max_doublings) if compute_tmix else {}
    index = {states[s].tobytes(): s for s in range(S)}
    return ChainAnalysis(states, P, mu, residual, defect, t_mix, tau, free, index)


_MATRIX_MAGIC = b"GLMX"


def save_matrix(matrix: np.ndarray, path: str | Path) -> None:
    """Dense matrix dump in the same idiom as the tabular score format:
    magic, version, rows, cols (little-endian uint32), then float64 entries
    in C order."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"expected a 2-d matrix, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(_MATRIX_MAGIC)
        f.write(struct.pack("<III", 1, m.shape[0], m.shape[1]))
        f.write(m.astype("<f8", copy=False).tobytes(order="C"))


def load_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MATRIX_MAGIC:
            raise InputError(f"{path} is not a matrix dump")
        version, rows, cols = struct.unpack("<III", f.read(12))
        if version != 1:
            raise InputError(f"unsupported matrix format version {version}")
        raw = f.read(rows * cols * 8)
        if len(raw) != rows * cols * 8:
            raise InputError("matrix dump truncated")
        return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()


def write_analysis_json(analysis: ChainAnalysis, path: str | Path,
                        influence: InfluenceMatrix | None = None,
                        oscillation: OscillationMatrix | None = None) -> None:
    obj = analysis.to_json_obj()
    if influence is not None:
        obj["alpha"] = influence.alpha
        obj["c_matrix"] = influence.c.tolist()
        obj["influence_mode"] = influence.mode
    if oscillation is not None:
        obj["delta_matrix"] = oscillation.delta.tolist()
        obj["oscillation_mode"] = oscillation.mode
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
