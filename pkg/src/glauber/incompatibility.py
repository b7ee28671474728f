"""The rectangle test: path-dependence certificates for local conditionals.

Fix a state and two positions, swap each to a replacement token, and sum the
conditional log-ratios along the two update orders. Compatible conditionals
telescope to the same value either way; the difference ``delta`` is therefore
a certificate of incompatibility whenever it is nonzero.

Edge log-ratios are computed as raw score differences divided by the
temperature (the softmax normalizers cancel), which avoids probability
underflow and makes the exact ``delta(tau) = delta(1) / tau`` scaling hold.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .core import ScorerContract, SeqState, tempered_conditional
from .errors import InputError
from .rng import substream

# |delta| above this counts as a nonzero-incompatibility observation in the
# sign test; compatible scorers sit at least two decades below.
DELTA_TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Rectangle:
    state: SeqState
    i: int
    j: int
    token_i: int       # A  = x_i
    token_j: int       # B  = x_j
    new_token_i: int   # A' replacing A
    new_token_j: int   # B' replacing B
    edge_xy: float     # log p(A'|x_-i) - log p(A|x_-i)
    edge_yz: float     # log p(B'|y_-j) - log p(B|y_-j)
    edge_xw: float     # log p(B'|x_-j) - log p(B|x_-j)
    edge_wz: float     # log p(A'|w_-i) - log p(A|w_-i)
    delta: float
    tau: float


def rectangle_delta(scorer: ScorerContract, x: SeqState, i: int, j: int,
                    new_token_i: int, new_token_j: int, tau: float = 1.0) -> Rectangle:
    """Evaluate one rectangle: two sites, two replacements, four edges."""
    if i == j:
        raise InputError("rectangle positions must differ")
    for pos in (i, j):
        if pos < 0 or pos >= x.n:
            raise InputError(f"position {pos} out of range for length {x.n}")
        if pos in x.frozen:
            raise InputError(f"position {pos} is frozen")
    a, b = x.token(i), x.token(j)
    if new_token_i == a:
        raise InputError("replacement at i equals the current token")
    if new_token_j == b:
        raise InputError("replacement at j equals the current token")
    y = x.with_token(i, new_token_i)
    w = x.with_token(j, new_token_j)
    s_i_x = scorer.local_scores(x, i)
    s_j_y = scorer.local_scores(y, j)
    s_j_x = scorer.local_scores(x, j)
    s_i_w = scorer.local_scores(w, i)
    edge_xy = (float(s_i_x[new_token_i]) - float(s_i_x[a])) / tau
    edge_yz = (float(s_j_y[new_token_j]) - float(s_j_y[b])) / tau
    edge_xw = (float(s_j_x[new_token_j]) - float(s_j_x[b])) / tau
    edge_wz = (float(s_i_w[new_token_i]) - float(s_i_w[a])) / tau
    delta = (edge_xy + edge_yz) - (edge_xw + edge_wz)
    return Rectangle(x, i, j, a, b, new_token_i, new_token_j,
                     edge_xy, edge_yz, edge_xw, edge_wz, delta, tau)


def log_conditional(scorer: ScorerContract, state: SeqState, i: int,
                    token: int, tau: float = 1.0) -> float:
    probs = tempered_conditional(scorer.local_scores(state, i), tau)
    return float(np.log(probs[token]))


def token_influence(scorer: ScorerContract, x: SeqState, i: int, j: int,
                    tau: float = 1.0, swap_at_j: int | None = None,
                    swap_at_i: int | None = None) -> float:
    """Symmetrized log-probability influence between two positions.

    Influence of j on i is the absolute change of ``log p(x_i | x_-i)`` when
    the token at j is swapped; the result is the max of the two directions.
    Swaps default to the scorer's best-scoring replacement at that position.
    """
    if i == j:
        raise InputError("positions must differ")

    def one_direction(target: int, moved: int, swap: int | None) -> float:
        if swap is None:
            scores = scorer.local_scores(x, moved)
            order = np.argsort(scores)[::-1]
            swap = int(order[0]) if int(order[0]) != x.token(moved) else int(order[1])
        if swap == x.token(moved):
            raise InputError("swap token equals the current token")
        before = log_conditional(scorer, x, target, x.token(target), tau)
        after = log_conditional(scorer, x.with_token(moved, swap), target, x.token(target), tau)
        return abs(before - after)

    return max(one_direction(i, j, swap_at_j), one_direction(j, i, swap_at_i))


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------

@dataclass
class RectangleRecord:
    state_id: int
    rect: Rectangle
    influence: float | None = None


@dataclass
class CampaignSummary:
    mean_abs_delta: float
    median_abs_delta: float
    max_abs_delta: float
    p_value: float
    count: int
    k: int
    tau: float

    def to_json_obj(self) -> dict:
        return {
            "mean_abs_delta": self.mean_abs_delta,
            "median": self.median_abs_delta,
            "max": self.max_abs_delta,
            "p_value": self.p_value,
            "count": self.count,
            "k": self.k,
            "tau": self.tau,
        }


@dataclass
class RectangleCampaign:
    scorer_id: str
    records: list[RectangleRecord]
    k: int
    tau: float
    seed: int
    summary: CampaignSummary = field(init=False)

    def __post_init__(self):
        self.summary = summarize_records(self.records, self.k, self.tau)


def summarize_records(records: Sequence[RectangleRecord], k: int, tau: float) -> CampaignSummary:
    deltas = np.array([r.rect.delta for r in records])
    abs_deltas = np.abs(deltas)
    # Sign test of the certificate |delta| > 0: under a compatible null no
    # rectangle exceeds the tie tolerance, so exceedances are compared against
    # the fair-coin reference. A t-test would be misled by the heavy tail.
    nonzero = int((abs_deltas > DELTA_TIE_TOLERANCE).sum())
    p_value = float(stats.binomtest(nonzero, len(records), 0.5, alternative="greater").pvalue)
    return CampaignSummary(
        mean_abs_delta=float(abs_deltas.mean()),
        median_abs_delta=float(np.median(abs_deltas)),
        max_abs_delta=float(abs_deltas.max()),
        p_value=p_value,
        count=len(records),
        k=k,
        tau=tau,
    )


def top_k_replacements(scorer: ScorerContract, state: SeqState, pos: int, k: int,
                       exclude: Sequence[int] = ()) -> list[int]:
    """The scorer's k best-scoring tokens at ``pos``, minus the current token
    and any excluded ids (mask sentinels)."""
    scores = scorer.local_scores(state, pos)
    order = np.argsort(scores, kind="stable")[::-1][:k]
    banned = {state.token(pos), *exclude}
    return [int(t) for t in order if int(t) not in banned]


def run_rectangle_campaign(scorer: ScorerContract, states: Sequence[SeqState],
                           count: int, k: int, tau: float = 1.0, seed: int = 0,
                           exclude_ids: Sequence[int] = (),
                           compute_influence: bool = False,
                           scorer_id: str = "scorer") -> RectangleCampaign:
    """Sample ``count`` random rectangles with top-k replacement tokens.

    Rectangle ``r`` draws everything from the substream ``(seed, r)``, so
    campaigns parallelize over the rectangle index and stay reproducible.
    """
    if count < 1:
        raise InputError("count must be >= 1")
    if k < 2:
        raise InputError("k must be >= 2")
    if not states:
        raise InputError("need at least one state")
    for s in states:
        if len(s.free_sites) < 2:
            raise InputError("states need at least two non-frozen positions")
    records: list[RectangleRecord] = []
    for r in range(count):
        rng = substream(seed, r)
        state_id = int(rng.integers(len(states)))
        x = states[state_id]
        free = x.free_sites
        i, j = (free[int(t)] for t in rng.choice(len(free), size=2, replace=False))
        cand_i = top_k_replacements(scorer, x, i, k, exclude_ids)
        cand_j = top_k_replacements(scorer, x, j, k, exclude_ids)
        if not cand_i or not cand_j:
            raise InputError(f"no replacement candidates at sites ({i}, {j}) with k={k}")
        new_i = cand_i[int(rng.integers(len(cand_i)))]
        new_j = cand_j[int(rng.integers(len(cand_j)))]
        rect = rectangle_delta(scorer, x, i, j, new_i, new_j, tau)
        infl = None
        if compute_influence:
            infl = token_influence(scorer, x, i, j, tau, swap_at_j=new_j, swap_at_i=new_i)
        records.append(RectangleRecord(state_id, rect, infl))
    return RectangleCampaign(scorer_id, records, k, tau, seed)


def write_campaign_csv(campaign: RectangleCampaign, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        header = ["state_id", "i", "j", "A", "A_new", "B", "B_new",
                  "edge_xy", "edge_yz", "edge_xw", "edge_wz", "delta"]
        if any(r.influence is not None for r in campaign.records):
            header.append("influence")
        writer.writerow(header)
        for r in campaign.records:
            rect = r.rect
            row = [r.state_id, rect.i, rect.j, rect.token_i, rect.new_token_i,
                   rect.token_j, rect.new_token_j,
                   repr(rect.edge_xy), repr(rect.edge_yz), repr(rect.edge_xw),
                   repr(rect.edge_wz), repr(rect.delta)]
            if len(header) == 13:
                row.append("" if r.influence is None else repr(r.influence))
            writer.writerow(row)


def write_campaign_summary(campaign: RectangleCampaign, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(campaign.summary.to_json_obj(), f, indent=2, sort_keys=True)
        f.write("\n")


def rank_correlation(campaign: RectangleCampaign) -> float:
    """Spearman correlation between influence and |delta| over the records."""
    pairs = [(r.influence, abs(r.rect.delta)) for r in campaign.records
             if r.influence is not None]
    if len(pairs) < 3:
        raise InputError("need at least 3 influence-annotated records")
    infl, dabs = zip(*pairs)
    rho = stats.spearmanr(infl, dabs).statistic
    return float(rho) if not math.isnan(rho) else 0.0
