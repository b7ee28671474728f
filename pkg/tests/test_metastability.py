import numpy as np
import pytest
from scipy import stats

from glauber.core import SeqState, normalized_hamming
from glauber.dynamics import GlauberKernel, run_chain
from glauber.errors import InputError
from glauber.bounds import escape_bound, exact_chain_analysis
from glauber.metastability import (
    CountBasin,
    ExplicitBasin,
    PredicateBasin,
    basin_indices,
    boundary_drift_report,
    check_margin_assumption,
    detect_traps,
    drift_estimate,
    margin_report,
    measure_escape_time,
    one_step_escape_frequency,
    sample_boundary_states,
    write_traps_csv,
)
from glauber.rng import substream
from glauber.scorers import FixedConditionalScorer, TabularScorer, UniformScorer

from helpers import small_potts, state


def gap_scorer(n: int, vocab_size: int, gap: float, target: int = 0) -> TabularScorer:
    """Every context scores ``target`` exactly ``gap`` above all other tokens."""
    table = np.zeros((n, vocab_size ** (n - 1), vocab_size))
    table[:, :, target] = gap
    return TabularScorer(table)


def locked_context_scorer(n: int, vocab_size: int, gap: float) -> TabularScorer:
    """Token 0 preferred by ``gap`` only when every other site is 0; flat
    elsewhere. Builds one deep basin at the all-zeros state."""
    table = np.zeros((n, vocab_size ** (n - 1), vocab_size))
    for i in range(n):
        table[i, 0, 0] = gap  # context code 0 <=> all other sites zero
    return TabularScorer(table)


class TestBasins:
    def test_count_basin_membership(self):
        basin = CountBasin(token=0, fraction=0.5)
        assert basin.contains(state(0, 0, 1, 2))
        assert not basin.contains(state(0, 1, 1, 2))

    def test_count_basin_ignores_frozen_sites(self):
        basin = CountBasin(token=0, fraction=0.5)
        # 3 free sites, threshold 2; the frozen zero does not count
        assert not basin.contains(state(0, 1, 1, 0, frozen=(0,)))

    def test_fraction_validation(self):
        with pytest.raises(InputError):
            CountBasin(token=0, fraction=1.5)

    def test_explicit_basin(self):
        basin = ExplicitBasin.from_states([state(0, 1), state(1, 0)])
        assert basin.contains(state(0, 1))
        assert not basin.contains(state(1, 1))

    def test_boundary_sampler_places_exact_count(self):
        basin = CountBasin(token=2, fraction=0.9)
        rng = substream(4)
        for s in sample_boundary_states(basin, 20, 5, 50, rng):
            assert basin.count(s) == 18
            assert basin.contains(s)

    def test_boundary_sampler_rest_avoids_target(self):
        basin = CountBasin(token=0, fraction=0.5)
        rng = substream(5)
        for s in sample_boundary_states(basin, 10, 4, 50, rng):
            assert basin.count(s) == 5  # exactly the threshold, never more


class TestMarginReport:
    def test_engineered_gap(self):
        scorer = gap_scorer(4, 3, gap=2.5)
        rep = margin_report(scorer, state(0, 0, 0, 0))
        assert rep.all_argmax
        assert rep.min_gap == pytest.approx(2.5)
        assert rep.mean_gap == pytest.approx(2.5)
        assert (rep.argmax_tokens == 0).all()

    def test_non_argmax_position_goes_negative(self):
        scorer = gap_scorer(4, 3, gap=2.5)
        rep = margin_report(scorer, state(0, 1, 0, 0))
        assert not rep.all_argmax
        assert rep.min_gap == pytest.approx(-2.5)

    def test_gaps_match_direct_recomputation(self):
        scorer = small_potts(n=4, vocab_size=3)
        x = state(0, 2, 1, 0)
        rep = margin_report(scorer, x)
        for k, i in enumerate(rep.positions):
            scores = scorer.local_scores(x, i)
            others = [scores[a] for a in range(3) if a != x.token(i)]
            assert rep.gaps[k] == pytest.approx(scores[x.token(i)] - max(others), abs=1e-12)

    def test_frozen_positions_skipped(self):
        scorer = small_potts(n=4, vocab_size=3)
        rep = margin_report(scorer, state(0, 2, 1, 0, frozen=(1,)))
        assert rep.positions == (0, 2, 3)


class TestMarginCertificate:
    def test_engineered_exit_gap_certified(self):
        scorer = gap_scorer(5, 3, gap=2.0)
        basin = CountBasin(token=0, fraction=0.8)
        samples = sample_boundary_states(basin, 5, 3, 30, substream(7))
        cert = check_margin_assumption(scorer, basin, samples, required_gap=2.0)
        assert cert.passed
        assert cert.certified_gap == pytest.approx(2.0)
        assert cert.scope == "certified on sample"

    def test_certified_gap_matches_exhaustive_scan(self):
        # enumerable instance: the sampled certificate over *all* basin states
        # equals the brute-force minimum over every exit move
        scorer = small_potts(n=4, vocab_size=2, seed=3, coupling=1.5, field=0.4)
        basin = CountBasin(token=0, fraction=0.75)
        analysis = exact_chain_analysis(scorer, 4, 1.0, compute_tmix=False)
        members = [SeqState(analysis.states[s])
                   for s in basin_indices(analysis.states, basin)]
        exhaustive_min = None
        ok = True
        for x in members:
            for i in range(4):
                scores = scorer.local_scores(x, i)
                for a in range(2):
                    if a == x.token(i) or basin.contains(x.with_token(i, a)):
                        continue
                    gap = float(scores[x.token(i)] - scores[a])
                    exhaustive_min = gap if exhaustive_min is None else min(exhaustive_min, gap)
                    ok = ok and scores[x.token(i)] >= scores.max()
        cert = check_margin_assumption(scorer, basin, members, required_gap=-10,
                                       exhaustive=True)
        assert cert.certified_gap == pytest.approx(exhaustive_min, abs=1e-12)
        assert cert.scope == "exhaustive"

    def test_argmax_violation_fails_with_witness(self):
        # flip the preference at one site so the basin token is not argmax there
        n, V = 4, 3
        table = np.zeros((n, V ** (n - 1), V))
        table[:, :, 0] = 2.0
        table[2, :, 1] = 5.0  # site 2 prefers token 1
        scorer = TabularScorer(table)
        basin = CountBasin(token=0, fraction=1.0)
        x = state(0, 0, 0, 0)
        cert = check_margin_assumption(scorer, basin, [x], required_gap=0.5)
        assert not cert.passed
        assert any(w.site == 2 and not w.argmax_ok for w in cert.failures)

    def test_sample_outside_basin_rejected(self):
        scorer = gap_scorer(4, 3, gap=1.0)
        basin = CountBasin(token=0, fraction=1.0)
        with pytest.raises(InputError):
            check_margin_assumption(scorer, basin, [state(0, 1, 0, 0)], 1.0)

    def test_all_token_secondary_statistic(self):
        scorer = gap_scorer(4, 3, gap=2.0)
        basin = CountBasin(token=0, fraction=0.75)
        samples = sample_boundary_states(basin, 4, 3, 10, substream(9))
        cert = check_margin_assumption(scorer, basin, samples, required_gap=1.0)
        # non-target sites hold non-argmax tokens, so the all-token minimum is
        # negative even though every exit move is protected
        assert cert.all_token_min_gap == pytest.approx(-2.0)
        assert cert.passed


class TestDrift:
    def test_balance_point_is_zero(self):
        scorer = FixedConditionalScorer.concentrated(2, target=0, mass=0.9)
        basin = CountBasin(token=0, fraction=0.9)
        x = sample_boundary_states(basin, 20, 2, 1, substream(3))[0]
        assert drift_estimate(scorer, x, 0, tau=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_ninety_five_percent_mass_gives_005(self):
        scorer = FixedConditionalScorer.concentrated(2, target=0, mass=0.95)
        basin = CountBasin(token=0, fraction=0.9)
        for x in sample_boundary_states(basin, 20, 2, 20, substream(4)):
            assert drift_estimate(scorer, x, 0, tau=1.0) == pytest.approx(0.05, abs=1e-12)

    def test_zero_mass_gives_negative_site_fraction(self):
        p = np.array([1e-16, 0.5, 0.5 - 1e-16])
        scorer = FixedConditionalScorer(p)
        x = state(0, 0, 0, 0, 1)  # 4 of 5 sites hold the target
        assert drift_estimate(scorer, x, 0, tau=1.0) == pytest.approx(-0.8, abs=1e-12)

    def test_bounded(self):
        scorer = small_potts(n=5, vocab_size=3)
        rng = substream(6)
        for _ in range(50):
            x = SeqState(rng.integers(0, 3, size=5))
            d = drift_estimate(scorer, x, 0, tau=0.7)
            assert -1.0 <= d <= 1.0

    def test_boundary_report(self):
        scorer = FixedConditionalScorer.concentrated(2, target=0, mass=0.95)
        basin = CountBasin(token=0, fraction=0.9)
        rep = boundary_drift_report(scorer, basin, 20, samples=50, tau=1.0, seed=1)
        assert rep.min == pytest.approx(0.05, abs=1e-12)
        assert rep.median == pytest.approx(0.05, abs=1e-12)


class TestEscape:
    def test_whole_space_basin_never_escapes(self):
        basin = PredicateBasin(lambda s: True, "everything")
        kernel = GlauberKernel(UniformScorer(3), 1.0)
        samples = measure_escape_time(state(0, 1, 2), kernel, basin, budget=50,
                                      seeds=range(10))
        assert samples.timeouts == 10
        assert samples.completed == []

    def test_outside_start_rejected(self):
        basin = CountBasin(token=0, fraction=1.0)
        kernel = GlauberKernel(UniformScorer(3), 1.0)
        with pytest.raises(InputError):
            measure_escape_time(state(0, 1, 0), kernel, basin, 10, seeds=[0])

    def test_mean_escape_matches_absorbing_chain_oracle(self):
        scorer = gap_scorer(5, 2, gap=1.5)
        basin = CountBasin(token=0, fraction=0.8)
        tau = 0.8
        kernel = GlauberKernel(scorer, tau)
        analysis = exact_chain_analysis(scorer, 5, tau, compute_tmix=False)
        idx = basin_indices(analysis.states, basin)
        x0 = state(0, 0, 0, 0, 0)
        exact = analysis.expected_exit_steps(idx)[
            list(idx).index(analysis.state_index(x0))]
        measured = measure_escape_time(x0, kernel, basin, budget=50_000,
                                       seeds=range(500))
        assert measured.timeouts == 0
        assert np.mean(measured.completed) == pytest.approx(exact, rel=0.10)

    def test_one_step_escape_below_margin_bound(self):
        scorer = gap_scorer(5, 3, gap=2.0)
        basin = CountBasin(token=0, fraction=0.8)
        tau = 0.5
        kernel = GlauberKernel(scorer, tau)
        x = sample_boundary_states(basin, 5, 3, 1, substream(8))[0]
        cert = check_margin_assumption(scorer, basin, [x], required_gap=2.0)
        assert cert.passed
        trials = 100_000
        freq = one_step_escape_frequency(kernel, x, basin, trials, seed=3)
        bound = escape_bound(3, cert.certified_gap, tau).per_step
        sigma = np.sqrt(bound * (1 - min(bound, 1.0)) / trials) if bound < 1 else 0.0
        assert freq <= bound + 3 * sigma + 1e-12

    def test_conductance_below_margin_bound(self):
        scorer = gap_scorer(4, 2, gap=2.0)
        basin = CountBasin(token=0, fraction=0.75)
        tau = 0.5
        analysis = exact_chain_analysis(scorer, 4, tau, compute_tmix=False)
        idx = basin_indices(analysis.states, basin)
        members = [SeqState(analysis.states[s]) for s in idx]
        cert = check_margin_assumption(scorer, basin, members, required_gap=2.0,
                                       exhaustive=True)
        assert cert.passed
        phi = analysis.conductance(idx)
        assert phi <= escape_bound(2, cert.certified_gap, tau).per_step + 1e-12

    def test_escape_time_increases_as_temperature_drops(self):
        scorer = gap_scorer(6, 2, gap=2.0)
        basin = CountBasin(token=0, fraction=0.8)
        x0 = SeqState(np.zeros(6, dtype=np.int64))
        means = []
        inverse_taus = [1.0, 1.5, 2.0, 2.5]
        for inv in inverse_taus:
            kernel = GlauberKernel(scorer, 1.0 / inv)
            samples = measure_escape_time(x0, kernel, basin, budget=200_000,
                                          seeds=range(120))
            assert samples.timeouts == 0
            means.append(np.mean(samples.completed))
        assert all(a < b for a, b in zip(means, means[1:]))
        fit = stats.linregress(inverse_taus, np.log(means))
        assert fit.slope > 0
        assert fit.rvalue**2 >= 0.95


class TestTraps:
    def test_constant_trajectory_single_full_trap(self):
        x = state(0, 1, 2)
        records = [(t, x) for t in range(0, 500)]
        events = detect_traps(records, normalized_hamming, window=100, threshold=0.1)
        assert len(events) == 1
        assert events[0].start == 0
        assert events[0].end == 499
        assert events[0].duration == 499

    def test_uniform_scorer_has_no_traps(self):
        kernel = GlauberKernel(UniformScorer(30), 1.0)
        x0 = SeqState(substream(2).integers(0, 30, size=20))
        result = run_chain(x0, kernel, 10_000, record_every=1, seed=7)
        events = detect_traps(result.states(), normalized_hamming,
                              window=300, threshold=0.12)
        assert events == []

    def test_engineered_basin_duration_matches_membership_oracle(self):
        scorer = locked_context_scorer(5, 6, gap=8.0)
        kernel = GlauberKernel(scorer, 1.0)
        x0 = SeqState(np.zeros(5, dtype=np.int64))
        window = 150
        for seed in (12, 5, 99):
            result = run_chain(x0, kernel, 8000, record_every=1, seed=seed)
            states = result.states()
            # oracle: longest run of consecutive steps at the locked state
            runs, start = [], None
            for t, s in states:
                inside = s.key() == x0.key()
                if inside and start is None:
                    start = t
                if not inside and start is not None:
                    runs.append((start, t - 1))
                    start = None
            if start is not None:
                runs.append((start, states[-1][0]))
            top_run = max(runs, key=lambda r: r[1] - r[0])
            events = detect_traps(states, normalized_hamming, window, 0.3,
                                  scorer=scorer)
            top_event = max(events, key=lambda e: e.duration)
            assert abs(top_event.duration - (top_run[1] - top_run[0])) <= window
            assert top_event.representative.same_ids(x0)
            assert top_event.margin is not None and top_event.margin.all_argmax

    def test_window_larger_than_trajectory_rejected(self):
        records = [(t, state(0, 1)) for t in range(5)]
        with pytest.raises(InputError):
            detect_traps(records, normalized_hamming, window=10, threshold=0.1)

    def test_non_uniform_spacing_rejected(self):
        records = [(0, state(0, 1)), (1, state(0, 1)), (5, state(0, 1))]
        with pytest.raises(InputError):
            detect_traps(records, normalized_hamming, window=1, threshold=0.1)

    def test_csv_export(self, tmp_path):
        scorer = locked_context_scorer(5, 6, gap=8.0)
        kernel = GlauberKernel(scorer, 1.0)
        x0 = SeqState(np.zeros(5, dtype=np.int64))
        result = run_chain(x0, kernel, 2000, record_every=1, seed=12)
        events = detect_traps(result.states(), normalized_hamming, 150, 0.3,
                              scorer=scorer)
        path = tmp_path / "traps.csv"
        write_traps_csv(events, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "start,end,duration,min_gap,mean_gap,all_argmax"
        assert len(lines) == 1 + len(events)
