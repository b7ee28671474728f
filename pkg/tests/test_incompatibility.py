import json

import numpy as np
import pytest

from glauber.core import SeqState, tempered_conditional
from glauber.errors import InputError
from glauber.incompatibility import (
    rank_correlation,
    rectangle_delta,
    run_rectangle_campaign,
    token_influence,
    top_k_replacements,
    write_campaign_csv,
    write_campaign_summary,
)
from glauber.rng import substream
from glauber.scorers import PerturbedScorer, PottsGibbsScorer

from helpers import small_potts, small_tabular, state


def oracle_delta(scorer, x, i, j, new_i, new_j, tau):
    """Independent recomputation: all four conditionals by direct softmax over
    the full vocabulary, edges as log-probability ratios."""
    def logp(st, pos, token):
        probs = tempered_conditional(scorer.local_scores(st, pos), tau)
        return float(np.log(probs[token]))

    y = x.with_token(i, new_i)
    w = x.with_token(j, new_j)
    s_xy = logp(x, i, new_i) - logp(x, i, x.token(i))
    s_yz = logp(y, j, new_j) - logp(y, j, x.token(j))
    s_xw = logp(x, j, new_j) - logp(x, j, x.token(j))
    s_wz = logp(w, i, new_i) - logp(w, i, x.token(i))
    return (s_xy + s_yz) - (s_xw + s_wz)


class TestRectangleDelta:
    def test_potts_rectangles_close(self):
        scorer = small_potts(n=4, vocab_size=3, coupling=1.0)
        rng = substream(3)
        for _ in range(200):
            x = SeqState(rng.integers(0, 3, size=4))
            i, j = (int(v) for v in rng.choice(4, size=2, replace=False))
            new_i = (x.token(i) + 1) % 3
            new_j = (x.token(j) + 2) % 3
            rect = rectangle_delta(scorer, x, i, j, new_i, new_j, tau=1.0)
            assert abs(rect.delta) <= 1e-10

    def test_path_swap_negates_delta_exactly(self):
        scorer = PerturbedScorer(small_potts(n=4, vocab_size=3), 0.6, seed=1)
        rng = substream(4)
        for _ in range(100):
            x = SeqState(rng.integers(0, 3, size=4))
            i, j = (int(v) for v in rng.choice(4, size=2, replace=False))
            new_i = (x.token(i) + 1) % 3
            new_j = (x.token(j) + 1) % 3
            a = rectangle_delta(scorer, x, i, j, new_i, new_j, tau=1.0)
            b = rectangle_delta(scorer, x, j, i, new_j, new_i, tau=1.0)
            assert a.delta == -b.delta

    def test_delta_matches_brute_force_oracle(self):
        scorer = PerturbedScorer(small_potts(n=4, vocab_size=4), 0.5, seed=9)
        rng = substream(5)
        for _ in range(100):
            x = SeqState(rng.integers(0, 4, size=4))
            i, j = (int(v) for v in rng.choice(4, size=2, replace=False))
            new_i = (x.token(i) + int(rng.integers(1, 4))) % 4
            new_j = (x.token(j) + int(rng.integers(1, 4))) % 4
            tau = float(rng.uniform(0.3, 3.0))
            rect = rectangle_delta(scorer, x, i, j, new_i, new_j, tau)
            assert rect.delta == pytest.approx(
                oracle_delta(scorer, x, i, j, new_i, new_j, tau), abs=1e-10)

    def test_temperature_scaling_exact_at_binary_tau(self):
        scorer = PerturbedScorer(small_potts(n=3, vocab_size=3), 0.7, seed=2)
        x = state(0, 1, 2)
        base = rectangle_delta(scorer, x, 0, 2, 1, 0, tau=1.0)
        for tau in (0.5, 2.0, 4.0):
            scaled = rectangle_delta(scorer, x, 0, 2, 1, 0, tau=tau)
            assert scaled.delta == base.delta / tau

    def test_temperature_scaling_general_tau(self):
        scorer = PerturbedScorer(small_potts(n=3, vocab_size=3), 0.7, seed=2)
        x = state(2, 0, 1)
        base = rectangle_delta(scorer, x, 1, 2, 1, 0, tau=1.0)
        for tau in (0.3, 1.7, 9.1):
            scaled = rectangle_delta(scorer, x, 1, 2, 1, 0, tau=tau)
            assert scaled.delta == pytest.approx(base.delta / tau, rel=1e-12)

    def test_stored_edges_reassemble_delta(self):
        scorer = PerturbedScorer(small_potts(n=3, vocab_size=3), 0.4, seed=8)
        rect = rectangle_delta(scorer, state(0, 1, 2), 0, 1, 2, 0, tau=0.5)
        assert rect.delta == (rect.edge_xy + rect.edge_yz) - (rect.edge_xw + rect.edge_wz)

    def test_input_validation(self):
        scorer = small_potts(n=3, vocab_size=3)
        x = state(0, 1, 2, frozen=(2,))
        with pytest.raises(InputError):
            rectangle_delta(scorer, x, 1, 1, 0, 0)
        with pytest.raises(InputError):
            rectangle_delta(scorer, x, 0, 1, 0, 2)  # replacement equals current
        with pytest.raises(InputError):
            rectangle_delta(scorer, x, 0, 2, 1, 0)  # frozen position


class TestTokenInfluence:
    def test_decoupled_pair_has_zero_influence(self):
        scorer = PottsGibbsScorer.decoupled(3, 3)
        assert token_influence(scorer, state(0, 1, 2), 0, 2) == pytest.approx(0.0, abs=1e-12)

    def test_matches_two_point_oracle(self):
        scorer = PerturbedScorer(small_potts(n=4, vocab_size=3), 0.5, seed=4)
        x = state(0, 1, 2, 0)
        i, j, swap_j, swap_i = 1, 3, 2, 0
        val = token_influence(scorer, x, i, j, 1.0, swap_at_j=swap_j, swap_at_i=swap_i)

        def logp(st, pos):
            probs = tempered_conditional(scorer.local_scores(st, pos), 1.0)
            return float(np.log(probs[st.token(pos)]))

        fwd = abs(logp(x, i) - np.log(tempered_conditional(
            scorer.local_scores(x.with_token(j, swap_j), i), 1.0)[x.token(i)]))
        bwd = abs(logp(x, j) - np.log(tempered_conditional(
            scorer.local_scores(x.with_token(i, swap_i), j), 1.0)[x.token(j)]))
        assert val == pytest.approx(max(fwd, bwd), abs=1e-12)

    def test_influence_correlates_with_delta_on_perturbed_scorer(self):
        base = PottsGibbsScorer.decoupled(6, 6)
        scorer = PerturbedScorer(base, 0.8, seed=2)
        states = [SeqState(substream(9, t).integers(0, 6, size=6)) for t in range(12)]
        campaign = run_rectangle_campaign(scorer, states, count=600, k=6, tau=1.0,
                                          seed=3, compute_influence=True)
        assert rank_correlation(campaign) > 0.15


class TestTopK:
    def test_excludes_current_and_banned(self):
        scorer = small_tabular(n=3, vocab_size=4)
        x = state(1, 2, 3)
        got = top_k_replacements(scorer, x, 0, k=4, exclude=(0,))
        assert x.token(0) not in got
        assert 0 not in got
        assert len(got) >= 2

    def test_orders_by_score(self):
        scorer = small_tabular(n=3, vocab_size=4)
        x = state(1, 2, 3)
        scores = scorer.local_scores(x, 1)
        got = top_k_replacements(scorer, x, 1, k=4)
        vals = [scores[t] for t in got]
        assert vals == sorted(vals, reverse=True)


class TestCampaign:
    def test_compatible_control_mean_delta_tiny(self):
        scorer = small_potts(n=4, vocab_size=3, coupling=1.0)
        states = [SeqState(substream(6, t).integers(0, 3, size=4)) for t in range(5)]
        campaign = run_rectangle_campaign(scorer, states, count=100, k=3, seed=0)
        assert campaign.summary.mean_abs_delta <= 1e-10
        assert campaign.summary.p_value == pytest.approx(1.0)

    def test_perturbed_sweep_monotone_and_oracle_checked(self):
        base = small_potts(n=4, vocab_size=3)
        states = [SeqState(substream(7, t).integers(0, 3, size=4)) for t in range(5)]
        means = []
        for eps in (0.0, 0.1, 0.5, 1.0):
            scorer = PerturbedScorer(base, eps, seed=5)
            campaign = run_rectangle_campaign(scorer, states, count=150, k=3, seed=11)
            for record in campaign.records[:30]:
                rect = record.rect
                assert rect.delta == pytest.approx(
                    oracle_delta(scorer, rect.state, rect.i, rect.j,
                                 rect.new_token_i, rect.new_token_j, rect.tau),
                    abs=1e-10)
            means.append(campaign.summary.mean_abs_delta)
        assert all(a < b for a, b in zip(means, means[1:]))

    def test_incompatible_scorer_gets_tiny_p_value(self):
        scorer = PerturbedScorer(small_potts(n=4, vocab_size=3), 1.0, seed=5)
        states = [SeqState(substream(8, t).integers(0, 3, size=4)) for t in range(5)]
        campaign = run_rectangle_campaign(scorer, states, count=300, k=3, seed=1)
        assert campaign.summary.p_value < 1e-6

    def test_campaign_deterministic(self):
        scorer = PerturbedScorer(small_potts(n=4, vocab_size=3), 0.5, seed=5)
        states = [SeqState(substream(10, t).integers(0, 3, size=4)) for t in range(4)]
        a = run_rectangle_campaign(scorer, states, count=60, k=3, seed=42)
        b = run_rectangle_campaign(scorer, states, count=60, k=3, seed=42)
        assert [r.rect for r in a.records] == [r.rect for r in b.records]

    def test_exports(self, tmp_path):
        scorer = PerturbedScorer(small_potts(n=4, vocab_size=3), 0.5, seed=5)
        states = [SeqState(substream(10, t).integers(0, 3, size=4)) for t in range(4)]
        campaign = run_rectangle_campaign(scorer, states, count=20, k=3, seed=42,
                                          compute_influence=True)
        csv_path = tmp_path / "rects.csv"
        json_path = tmp_path / "summary.json"
        write_campaign_csv(campaign, csv_path)
        write_campaign_summary(campaign, json_path)
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 21
        assert lines[0].startswith("state_id,i,j,A,A_new,B,B_new")
        summary = json.loads(json_path.read_text())
        assert summary["count"] == 20
        assert set(summary) == {"mean_abs_delta", "median", "max", "p_value",
                                "count", "k", "tau"}

    def test_too_short_states_rejected(self):
        scorer = small_potts(n=2, vocab_size=3)
        x = state(0, 1, frozen=(0,))
        with pytest.raises(InputError):
            run_rectangle_campaign(scorer, [x], count=5, k=2)

    def test_summary_recomputable_from_records(self):
        scorer = PerturbedScorer(small_potts(n=4, vocab_size=3), 0.7, seed=5)
        states = [SeqState(substream(10, t).integers(0, 3, size=4)) for t in range(4)]
        campaign = run_rectangle_campaign(scorer, states, count=50, k=3, seed=2)
        abs_deltas = np.abs([r.rect.delta for r in campaign.records])
        assert campaign.summary.mean_abs_delta == pytest.approx(abs_deltas.mean())
        assert campaign.summary.median_abs_delta == pytest.approx(np.median(abs_deltas))
        assert campaign.summary.max_abs_delta == pytest.approx(abs_deltas.max())
