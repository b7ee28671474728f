"""Basins, margin certificates, drift estimates, escape times, trap detection.

A basin is any decidable set of states. The margin machinery certifies the
uniform-local-margin condition on sampled boundary states: every exit-capable
site must hold its conditional argmax and beat every exit-causing replacement
by the required gap. Positive token-count drift at the basin boundary is the
complementary, submartingale-style certificate.

Trap detection thresholds are distance-specific: 0.25 is the calibrated
default for normalized Hamming drift (quiet on the uniform-scorer null);
0.12 is the preset for externally computed cosine embedding drift.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import DistanceFn, ScorerContract, SeqState, tempered_conditional
from .dynamics import GlauberKernel, glauber_step
from .errors import InputError
from .rng import substream

# ---------------------------------------------------------------------------
# Basin specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CountBasin:
    """States whose count of ``token`` over non-frozen sites is >= ceil(fraction * N)."""

    token: int
    fraction: float

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise InputError(f"fraction must lie in (0, 1], got {self.fraction}")

    def threshold(self, state: SeqState) -> int:
        return math.ceil(self.fraction * len(state.free_sites))

    def count(self, state: SeqState) -> int:
        return sum(1 for i in state.free_sites if state.token(i) == self.token)

    def contains(self, state: SeqState) -> bool:
        return self.count(state) >= self.threshold(state)

    def describe(self) -> str:
        return f"count(token={self.token}) >= ceil({self.fraction} * N)"


@dataclass(frozen=True)
class ExplicitBasin:
    """Finite enumeration of member states (enumerable instances only)."""

    keys: frozenset[bytes]

    @classmethod
    def from_states(cls, states: Sequence[SeqState]) -> "ExplicitBasin":
        return cls(frozenset(s.key() for s in states))

    def contains(self, state: SeqState) -> bool:
        return state.key() in self.keys

    def describe(self) -> str:
        return f"explicit set of {len(self.keys)} states"


@dataclass(frozen=True)
class PredicateBasin:
    fn: Callable[[SeqState], bool]
    name: str = "predicate"

    def contains(self, state: SeqState) -> bool:
        return bool(self.fn(state))

    def describe(self) -> str:
        return self.name


Basin = CountBasin | ExplicitBasin | PredicateBasin


def sample_boundary_states(basin: CountBasin, n: int, vocab_size: int, count: int,
                           rng: np.random.Generator,
                           frozen: frozenset[int] = frozenset()) -> list[SeqState]:
    """States with exactly the threshold number of target tokens, placed at
    uniformly random free positions; remaining free tokens drawn uniformly
    from the rest of the vocabulary."""
    free = [i for i in range(n) if i not in frozen]
    template = SeqState(np.zeros(n, dtype=np.int64), frozen)
    threshold = basin.threshold(template)
    if threshold > len(free):
        raise InputError("threshold exceeds the number of free sites")
    others = [a for a in range(vocab_size) if a != basin.token]
    out = []
    for _ in range(count):
        ids = np.zeros(n, dtype=np.int64)
        ids[free] = np.array(others)[rng.integers(len(others), size=len(free))]
        chosen = rng.choice(len(free), size=threshold, replace=False)
        ids[np.array(free)[chosen]] = basin.token
        out.append(SeqState(ids, frozen))
    return out


def basin_indices(states: np.ndarray, basin: Basin,
                  frozen: frozenset[int] = frozenset()) -> np.ndarray:
    """Indices of basin members within an enumerated state table."""
    hits = [s for s in range(states.shape[0])
            if basin.contains(SeqState(states[s], frozen))]
    return np.array(hits, dtype=np.int64)


# ---------------------------------------------------------------------------
# Margins
# ---------------------------------------------------------------------------


@dataclass
class MarginReport:
    """Per-position score gaps ``s_i(x_i) - max_{a != x_i} s_i(a)``."""

    positions: tuple[int, ...]
    gaps: np.ndarray
    argmax_tokens: np.ndarray
    mean_gap: float
    min_gap: float
    all_argmax: bool

    def to_json_obj(self) -> dict:
        return {
            "positions": list(self.positions),
            "gaps": [float(g) for g in self.gaps],
            "argmax_tokens": [int(t) for t in self.argmax_tokens],
            "mean_gap": self.mean_gap,
            "min_gap": self.min_gap,
            "all_argmax": self.all_argmax,
        }


def margin_report(scorer: ScorerContract, state: SeqState) -> MarginReport:
    """Exact gaps from one score vector per non-frozen position.

    ``all_argmax`` classifies the perfect-trap case (every token beats every
    alternative); a negative gap marks an approximate trap position.
    """
    positions = state.free_sites
    gaps = np.empty(len(positions))
    argmax_tokens = np.empty(len(positions), dtype=np.int64)
    for k, i in enumerate(positions):
        scores = np.asarray(scorer.local_scores(state, i), dtype=np.float64)
        current = state.token(i)
        rest = np.delete(scores, current)
        gaps[k] = float(scores[current] - rest.max())
        argmax_tokens[k] = int(scores.argmax())
    return MarginReport(
        positions=positions,
        gaps=gaps,
        argmax_tokens=argmax_tokens,
        mean_gap=float(gaps.mean()),
        min_gap=float(gaps.min()),
        all_argmax=bool((gaps > 0).all()),
    )


@dataclass
class ExitWitness:
    state: SeqState
    site: int
    token: int
    gap: float
    argmax_ok: bool


@dataclass
class MarginCertificate:
    passed: bool
    certified_gap: float | None     # min gap over checked exit moves
    required_gap: float
    checked_states: int
    checked_exits: int
    exhaustive: bool                # True only when the caller scanned all of B
    failures: list[ExitWitness]
    binding: ExitWitness | None     # the exit move achieving the certified gap
    all_token_min_gap: float | None  # secondary: min gap over *all* tokens

    @property
    def scope(self) -> str:
        return "exhaustive" if self.exhaustive else "certified on sample"

    def to_json_obj(self) -> dict:
        return {
            "passed": self.passed,
            "certified_gap": self.certified_gap,
            "required_gap": self.required_gap,
            "checked_states": self.checked_states,
            "checked_exits": self.checked_exits,
            "scope": self.scope,
            "all_token_min_gap": self.all_token_min_gap,
            "failure_count": len(self.failures),
        }


def check_margin_assumption(scorer: ScorerContract, basin: Basin,
                            boundary_samples: Sequence[SeqState],
                            required_gap: float,
                            exhaustive: bool = False) -> MarginCertificate:
    """Verify the uniform-local-margin condition on sampled basin states.

    For every sampled state and every site whose change can leave the basin,
    the current token must attain the conditional argmax and beat every
    exit-causing replacement by at least ``required_gap``. The certificate
    covers exactly the checked states; pass ``exhaustive=True`` only when the
    samples enumerate the whole basin.

    The theorem constrains exit-causing tokens only; the trap taxonomy also
    looks at gaps over all tokens, so the all-token minimum is reported as a
    secondary statistic.
    """
    if not boundary_samples:
        raise InputError("need at least one boundary sample")
    failures: list[ExitWitness] = []
    binding: ExitWitness | None = None
    certified: float | None = None
    all_token_min: float | None = None
    checked_exits = 0
    for x in boundary_samples:
        if not basin.contains(x):
            raise InputError("boundary sample lies outside the basin")
        for i in x.free_sites:
            scores = np.asarray(scorer.local_scores(x, i), dtype=np.float64)
            current = x.token(i)
            rest = np.delete(scores, current)
            gap_all = float(scores[current] - rest.max())
            all_token_min = gap_all if all_token_min is None else min(all_token_min, gap_all)
            exit_tokens = [a for a in range(scorer.vocab_size)
                           if a != current and not basin.contains(x.with_token(i, a))]
            if not exit_tokens:
                continue
            argmax_ok = bool(scores[current] >= scores.max())
            for a in exit_tokens:
                checked_exits += 1
                gap = float(scores[current] - scores[a])
                witness = ExitWitness(x, i, a, gap, argmax_ok)
                if certified is None or gap < certified:
                    certified = gap
                    binding = witness
                if not argmax_ok or gap < required_gap:
                    failures.append(witness)
    return MarginCertificate(
        passed=not failures and checked_exits > 0,
        certified_gap=certified,
        required_gap=required_gap,
        checked_states=len(boundary_samples),
        checked_exits=checked_exits,
        exhaustive=exhaustive,
        failures=failures,
        binding=binding,
        all_token_min_gap=all_token_min,
    )


# ---------------------------------------------------------------------------
# Drift
# ---------------------------------------------------------------------------


def drift_estimate(scorer: ScorerContract, x: SeqState, target: int, tau: float) -> float:
    """Expected one-step change of the target-token count, normalized by the
    number of non-frozen sites; lies in [-1, 1]."""
    free = x.free_sites
    gain = 0.0
    loss = 0.0
    for i in free:
        p_target = float(tempered_conditional(scorer.local_scores(x, i), tau)[target])
        if x.token(i) == target:
            loss += 1.0 - p_target
        else:
            gain += p_target
    return (gain - loss) / len(free)


@dataclass
class DriftReport:
    values: np.ndarray
    tau: float
    target: int
    fraction: float
    n: int

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    def to_json_obj(self) -> dict:
        return {
            "tau": self.tau,
            "target": self.target,
            "fraction": self.fraction,
            "n": self.n,
            "samples": len(self.values),
            "min": self.min,
            "median": self.median,
            "values": [float(v) for v in self.values],
        }


def boundary_drift_report(scorer: ScorerContract, basin: CountBasin, n: int,
                          samples: int, tau: float, seed: int = 0,
                          frozen: frozenset[int] = frozenset()) -> DriftReport:
    """Drift at freshly sampled boundary states of a count basin."""
    rng = substream(seed)
    states = sample_boundary_states(basin, n, scorer.vocab_size, samples, rng, frozen)
    values = np.array([drift_estimate(scorer, x, basin.token, tau) for x in states])
    return DriftReport(values, tau, basin.token, basin.fraction, n)


# ---------------------------------------------------------------------------
# Escape measurements
# ---------------------------------------------------------------------------


@dataclass
class EscapeSamples:
    steps: list[int | None]  # per seed; None on timeout
    budget: int

    @property
    def timeouts(self) -> int:
        return sum(1 for s in self.steps if s is None)

    @property
    def completed(self) -> list[int]:
        return [s for s in self.steps if s is not None]

    def mean(self) -> float:
        """Mean with timeouts censored at the budget (a lower bound)."""
        capped = [s if s is not None else self.budget for s in self.steps]
        return float(np.mean(capped))

    def quantiles(self, qs=(0.25, 0.5, 0.75)) -> dict[float, float]:
        capped = [s if s is not None else self.budget for s in self.steps]
        return {q: float(np.quantile(capped, q)) for q in qs}


def measure_escape_time(x0: SeqState, kernel: GlauberKernel, basin: Basin,
                        budget: int, seeds: Sequence[int]) -> EscapeSamples:
    """First step outside the basin for each seed, or timeout."""
    if not basin.contains(x0):
        raise InputError("starting state lies outside the basin")
    steps: list[int | None] = []
    for seed in seeds:
        rng = substream(seed)
        state = x0
        escaped = None
        for t in range(1, budget + 1):
            state = glauber_step(state, kernel, rng)
            if not basin.contains(state):
                escaped = t
                break
        steps.append(escaped)
    return EscapeSamples(steps, budget)


def one_step_escape_frequency(kernel: GlauberKernel, x: SeqState, basin: Basin,
                              trials: int, seed: int = 0) -> float:
    """Empirical one-step escape probability from ``x`` over ``trials`` draws.

    Site and token draws follow exactly the kernel's law; the per-site
    conditionals are precomputed once since the start state is fixed.
    """
    if not basin.contains(x):
        raise InputError("state lies outside the basin")
    free = x.free_sites
    V = kernel.scorer.vocab_size
    conds = np.stack([kernel.conditional(x, i) for i in free])  # (m, V)
    exits = np.zeros((len(free), V), dtype=bool)
    for k, i in enumerate(free):
        for a in range(V):
            if a != x.token(i):
                exits[k, a] = not basin.contains(x.with_token(i, a))
    rng = substream(seed)
    sites = rng.integers(len(free), size=trials)
    u = rng.random(trials)
    cum = np.cumsum(conds, axis=1)
    tokens = (u[:, None] > cum[sites]).sum(axis=1)
    tokens = np.minimum(tokens, V - 1)
    return float(exits[sites, tokens].mean())


# ---------------------------------------------------------------------------
# Trap detection
# ---------------------------------------------------------------------------


@dataclass
class TrapEvent:
    start: int
    end: int
    duration: int
    representative: SeqState
    margin: MarginReport | None
    window: int
    threshold: float
    distance_name: str


def detect_traps(states: Sequence[tuple[int, SeqState]], distance_fn: DistanceFn,
                 window: int, threshold: float,
                 scorer: ScorerContract | None = None,
                 distance_name: str = "normalized_hamming") -> list[TrapEvent]:
    """Flag maximal runs where the lag-``window`` drift stays below threshold.

    ``states`` must be uniformly spaced (e.g. a decoded trajectory recorded
    every fixed number of steps) and ``window`` a multiple of the spacing.
    A trap spans from ``window`` steps before the first flagged lag to the
    last flagged step; the representative is the modal state of the span, with
    its margin report attached when a scorer is supplied.
    """
    if len(states) < 2:
        raise InputError("need at least two records")
    spacing = states[1][0] - states[0][0]
    if spacing <= 0 or any(states[r + 1][0] - states[r][0] != spacing
                           for r in range(len(states) - 1)):
        raise InputError("records must be uniformly spaced in steps")
    if window % spacing != 0:
        raise InputError(f"window {window} must be a multiple of the record spacing {spacing}")
    lag = window // spacing
    if lag >= len(states):
        raise InputError("window larger than the recorded trajectory")

    flagged = [distance_fn(states[r][1], states[r - lag][1]) < threshold
               for r in range(lag, len(states))]
    # each flagged run [k1, k2] marks the trap span [k1 + lag - W, k2 + lag]
    # in steps; spans closer than the window describe the same trap and merge
    spans: list[list[int]] = []
    run_start: int | None = None
    for k, flag in enumerate([*flagged, False]):
        if flag and run_start is None:
            run_start = k
        elif not flag and run_start is not None:
            start_step = states[run_start + lag][0] - window
            end_step = states[k - 1 + lag][0]
            if spans and start_step <= spans[-1][1]:
                spans[-1][1] = end_step
            else:
                spans.append([start_step, end_step])
            run_start = None

    events: list[TrapEvent] = []
    for start_step, end_step in spans:
        span = [s for step, s in states if start_step <= step <= end_step]
        counts: dict[bytes, int] = {}
        rep = span[0]
        best = 0
        for s in span:
            c = counts.get(s.key(), 0) + 1
            counts[s.key()] = c
            if c > best:
                best, rep = c, s
        margin = margin_report(scorer, rep) if scorer is not None else None
        events.append(TrapEvent(start_step, end_step, end_step - start_step,
                                rep, margin, window, threshold, distance_name))
    return events


def write_traps_csv(events: Sequence[TrapEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["start", "end", "duration", "min_gap", "mean_gap", "all_argmax"])
        for e in events:
            if e.margin is None:
                writer.writerow([e.start, e.end, e.duration, "", "", ""])
            else:
                writer.writerow([e.start, e.end, e.duration,
                                 repr(e.margin.min_gap), repr(e.margin.mean_gap),
                                 int(e.margin.all_argmax)])
