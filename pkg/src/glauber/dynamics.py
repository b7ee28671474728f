"""Single-site resampling dynamics, couplings, and timing experiments.

One step picks a site uniformly among the non-frozen positions and resamples
its token from the tempered conditional given the rest of the sequence. The
coupled step updates the same site in both chains and draws the two tokens
from the maximal coupling of their conditionals, so the per-site disagreement
probability equals the total variation distance between them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import DistanceFn, ScorerContract, SeqState, tempered_conditional
from .errors import DomainError, InputError, TransportError
from .rng import sample_index, substream


@dataclass(frozen=True)
class GlauberKernel:
    scorer: ScorerContract
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise DomainError(f"temperature must be positive, got {self.tau}")

    def conditional(self, state: SeqState, i: int) -> np.ndarray:
        return tempered_conditional(self.scorer.local_scores(state, i), self.tau)


def glauber_step(state: SeqState, kernel: GlauberKernel, rng: np.random.Generator) -> SeqState:
    """One single-site update; at most one non-frozen position changes."""
    free = state.free_sites
    i = free[int(rng.integers(len(free)))]
    probs = kernel.conditional(state, i)
    return state.with_token(i, sample_index(rng, probs))


# ---------------------------------------------------------------------------
# Observers and trajectory records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observer:
    """Named observable evaluated at recording steps.

    The callable receives (step, state, start_state); distance observers
    simply ignore the step.
    """
    name: str
    fn: Callable[[int, SeqState, SeqState], float]


def distance_observer(name: str, distance_fn: DistanceFn) -> Observer:
    return Observer(name, lambda step, state, start: float(distance_fn(state, start)))


@dataclass
class TrajectoryRecord:
    step: int
    ids: np.ndarray | None  # keyframe
    delta: list[tuple[int, int]] | None  # (position, new id) vs previous record
    observables: dict[str, float] = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        obj: dict = {"step": self.step}
        if self.ids is not None:
            obj["ids"] = [int(t) for t in self.ids]
        else:
            obj["delta"] = [[int(p), int(a)] for p, a in self.delta]
        if self.observables:
            obj["obs"] = self.observables
        return obj


@dataclass
class RunResult:
    records: list[TrajectoryRecord]
    frozen: frozenset[int]
    completed: bool = True
    error: str | None = None

    def states(self) -> list[tuple[int, SeqState]]:
        """Decode delta-encoded records back to full states, exactly."""
        out: list[tuple[int, SeqState]] = []
        current: np.ndarray | None = None
        for rec in self.records:
            if rec.ids is not None:
                current = np.array(rec.ids, dtype=np.int64)
            else:
                if current is None:
                    raise InputError("delta record before any keyframe")
                current = current.copy()
                for pos, a in rec.delta:
                    current[pos] = a
            out.append((rec.step, SeqState(current, self.frozen)))
        return out


def run_chain(x0: SeqState, kernel: GlauberKernel, steps: int,
              observers: Sequence[Observer] = (), record_every: int = 1,
              seed: int = 0, keyframe_every: int = 64) -> RunResult:
    """Advance the chain ``steps`` updates, recording every ``record_every``.

    Deterministic given ``seed``. Step 0 and the final step are always
    recorded. Scorer transport failures abort the run and flag the result as
    partial instead of discarding the prefix.
    """
    if steps < 0:
        raise InputError("steps must be >= 0")
    if record_every < 1:
        raise InputError("record_every must be >= 1")
    rng = substream(seed)
    records: list[TrajectoryRecord] = []
    prev_recorded: SeqState | None = None

    def record(step: int, state: SeqState) -> None:
        nonlocal prev_recorded
        obs = {o.name: float(o.fn(step, state, x0)) for o in observers}
        if prev_recorded is None or len(records) % keyframe_every == 0:
            rec = TrajectoryRecord(step, state.ids.copy(), None, obs)
        else:
            changed = np.nonzero(prev_recorded.ids != state.ids)[0]
            rec = TrajectoryRecord(step, None,
                                   [(int(p), state.token(int(p))) for p in changed], obs)
        records.append(rec)
        prev_recorded = state

    state = x0
    record(0, state)
    for t in range(1, steps + 1):
        try:
            state = glauber_step(state, kernel, rng)
        except TransportError as exc:
            return RunResult(records, x0.frozen, completed=False, error=str(exc))
        if t % record_every == 0 or t == steps:
            record(t, state)
    return RunResult(records, x0.frozen)


def write_trajectory_ndjson(result: RunResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in result.records:
            f.write(json.dumps(rec.to_json_obj(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# Maximal coupling
# ---------------------------------------------------------------------------

def _check_coupled_pair(x: SeqState, y: SeqState) -> None:
    if x.n != y.n:
        raise InputError(f"length mismatch: {x.n} vs {y.n}")
    if x.frozen != y.frozen:
        raise InputError("coupled states must share the same frozen set")


def maximal_coupling_step(x: SeqState, y: SeqState, kernel: GlauberKernel,
                          rng_shared: np.random.Generator,
                          rng_x: np.random.Generator,
                          rng_y: np.random.Generator) -> tuple[SeqState, SeqState]:
    """One coupled update: same site in both chains, maximally coupled draws.

    With probability ``sum_a min(p_a, q_a)`` both chains receive the same
    token drawn from the normalized overlap; otherwise each draws from its
    normalized residual. Each chain's marginal law is its own kernel and the
    updated tokens disagree with probability exactly ``TV(p, q)``.
    """
    _check_coupled_pair(x, y)
    free = x.free_sites
    i = free[int(rng_shared.integers(len(free)))]
    p = kernel.conditional(x, i)
    q = kernel.conditional(y, i)
    overlap = np.minimum(p, q)
    w = float(overlap.sum())
    u = rng_shared.random()
    if u < w:
        a = b = sample_index(rng_shared, overlap / w)
    else:
        res_p = np.maximum(p - overlap, 0.0)
        res_q = np.maximum(q - overlap, 0.0)
        sp, sq = res_p.sum(), res_q.sum()
        if sp <= 0.0 or sq <= 0.0:
            # fp corner: w rounded below 1 for identical conditionals
            a = b = sample_index(rng_shared, overlap / w)
        else:
            a = sample_index(rng_x, res_p / sp)
            b = sample_index(rng_y, res_q / sq)
    return x.with_token(i, a), y.with_token(i, b)


@dataclass
class CouplingResult:
    meeting_step: int | None
    budget: int
    distance_trace: list[int] | None = None

    @property
    def timed_out(self) -> bool:
        return self.meeting_step is None


def coupling_meeting_time(x0: SeqState, y0: SeqState, kernel: GlauberKernel,
                          budget: int, seed: int = 0,
                          record_trace: bool = False) -> CouplingResult:
    """First step at which the coupled chains become identical.

    Streams: one shared stream drives site choice and the overlap decision;
    each chain owns a residual stream. Deterministic given ``seed``.
    """
    if budget < 1:
        raise InputError("budget must be >= 1")
    _check_coupled_pair(x0, y0)
    rng_shared = substream(seed, 0)
    rng_x = substream(seed, 1)
    rng_y = substream(seed, 2)
    x, y = x0, y0
    trace = [int(np.count_nonzero(x.ids != y.ids))] if record_trace else None
    if x.same_ids(y):
        return CouplingResult(0, budget, trace)
    for t in range(1, budget + 1):
        x, y = maximal_coupling_step(x, y, kernel, rng_shared, rng_x, rng_y)
        if record_trace:
            trace.append(int(np.count_nonzero(x.ids != y.ids)))
        if x.same_ids(y):
            return CouplingResult(t, budget, trace)
    return CouplingResult(None, budget, trace)


def hitting_time(x0: SeqState, kernel: GlauberKernel, distance_fn: DistanceFn,
                 threshold: float, budget: int, seed: int = 0) -> int | None:
    """Smallest ``t <= budget`` with ``distance_fn(x_t, x0) >= threshold``.

    Returns None on timeout. A non-positive threshold is already satisfied at
    the start and returns 0.
    """
    if budget < 0:
        raise InputError("budget must be >= 0")
    if threshold <= 0:
        return 0
    rng = substream(seed)
    state = x0
    for t in range(1, budget + 1):
        state = glauber_step(state, kernel, rng)
        if distance_fn(state, x0) >= threshold:
            return t
    return None


# ---------------------------------------------------------------------------
# Grid experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridCell:
    tau: float
    n: int
    seed: int
    steps: int | None  # meeting or hitting step
    budget: int

    @property
    def timed_out(self) -> bool:
        return self.steps is None


def coupling_grid(scorer_factory: Callable[[int], ScorerContract],
                  taus: Sequence[float], ns: Sequence[int], seeds_per_cell: int,
                  budget: int, master_seed: int = 0) -> list[GridCell]:
    """Meeting times for every (tau, n, seed) cell.

    Both chains start from independent uniform random states derived from the
    cell's substream; cells are independent and merge deterministically.
    """
    cells = []
    for n_idx, n in enumerate(ns):
        scorer = scorer_factory(n)
        for t_idx, tau in enumerate(taus):
            kernel = GlauberKernel(scorer, tau)
            for s in range(seeds_per_cell):
                init_rng = substream(master_seed, n_idx, t_idx, s, 0)
                x0 = SeqState(init_rng.integers(0, scorer.vocab_size, size=n))
                y0 = SeqState(init_rng.integers(0, scorer.vocab_size, size=n))
                cell_seed = int(substream(master_seed, n_idx, t_idx, s, 1).integers(2**63))
                res = coupling_meeting_time(x0, y0, kernel, budget, seed=cell_seed)
                cells.append(GridCell(tau, n, s, res.meeting_step, budget))
    return cells


def hitting_grid(scorer_factory: Callable[[int], ScorerContract],
                 taus: Sequence[float], ns: Sequence[int], seeds_per_cell: int,
                 threshold: float, budget: int, master_seed: int = 0,
                 distance_fn: DistanceFn | None = None) -> list[GridCell]:
    """Hitting times of ``distance >= threshold`` for every grid cell."""
    from .core import normalized_hamming
    dist = distance_fn or normalized_hamming
    cells = []
    for n_idx, n in enumerate(ns):
        scorer = scorer_factory(n)
        for t_idx, tau in enumerate(taus):
            kernel = GlauberKernel(scorer, tau)
            for s in range(seeds_per_cell):
                init_rng = substream(master_seed, n_idx, t_idx, s, 0)
                x0 = SeqState(init_rng.integers(0, scorer.vocab_size, size=n))
                cell_seed = int(substream(master_seed, n_idx, t_idx, s, 1).integers(2**63))
                step = hitting_time(x0, kernel, dist, threshold, budget, seed=cell_seed)
                cells.append(GridCell(tau, n, s, step, budget))
    return cells


def write_grid_csv(cells: Iterable[GridCell], path: str | Path,
                   step_column: str = "meeting_step") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["tau", "n", "seed", step_column, "timeout_flag"])
        for c in cells:
            writer.writerow([c.tau, c.n, c.seed,
                             "" if c.steps is None else c.steps,
                             int(c.timed_out)])


def grid_summary(cells: Sequence[GridCell]) -> list[dict]:
    """Per-(tau, n) medians and timeout fractions; timeouts count as budget."""
    groups: dict[tuple[float, int], list[GridCell]] = {}
    for c in cells:
        groups.setdefault((c.tau, c.n), []).append(c)
    rows = []
    for (tau, n), grp in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        capped = [c.steps if c.steps is not None else c.budget for c in grp]
        rows.append({
            "tau": tau,
            "n": n,
            "median_steps": float(np.median(capped)),
            "timeout_fraction": sum(c.timed_out for c in grp) / len(grp),
            "count": len(grp),
        })
    return rows
