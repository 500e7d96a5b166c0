"""Variance posterior, next-stage risk scoring, and the four selectors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fuselab.basis import PolynomialMap
from fuselab.data_model import EstimateState, InterventionCatalog, identity_weights
from fuselab.design import (
    DesignPosterior,
    Hyperparams,
    SelectionDecision,
    load_decision_log,
    next_stage_risk,
    posterior_moments,
    posterior_update,
    sample_variances,
    save_decision_log,
    select_dopt,
    select_random,
    select_thompson,
    select_ucb,
)
from fuselab.errors import (
    DomainError,
    MaskedVarianceError,
    ParseError,
    ValidationError,
)
from fuselab.fusion import fit_bias


def make_state(tau_obs, tau_rct, var, counts, dr_cov=None, seed=0):
    tau_obs = np.asarray(tau_obs, dtype=float)
    counts = np.asarray(counts, dtype=np.int64)
    j = tau_obs.shape[0]
    if dr_cov is None:
        m = np.random.default_rng(seed).standard_normal((j, j))
        dr_cov = m @ m.T / j + np.eye(j) * 0.1
    selected = frozenset(int(i) for i in np.flatnonzero(counts))
    return EstimateState(
        tau_obs=tau_obs,
        dr_cov=dr_cov,
        tau_rct=np.asarray(tau_rct, dtype=float),
        rct_mask=counts > 0,
        rct_var=np.asarray(var, dtype=float),
        r_counts=counts,
        selected_history=(selected,),
    )


def catalog_1d(values, degree=1):
    attrs = np.asarray(values, dtype=float)[:, None]
    return InterventionCatalog(attrs, PolynomialMap(n_dim=1, degree=degree))


# two interventions whose feature rows are invertible, so the bias fit
# interpolates (hat matrix = identity) and risks reduce to hand arithmetic
def two_arm_fixture():
    state = make_state(
        tau_obs=[2.0, -1.0],
        tau_rct=[1.0, 1.0],
        var=[0.8, 0.6],
        counts=[2, 3],
    )
    catalog = catalog_1d([-1.0, 2.0])
    weights = identity_weights(2)
    bias = fit_bias(state, catalog)
    return state, bias, catalog, weights


class TestHyperparams:
    def test_validation(self):
        with pytest.raises(DomainError):
            Hyperparams(alpha=1.0)
        with pytest.raises(DomainError):
            Hyperparams(prior_shape=0.0)
        with pytest.raises(DomainError):
            Hyperparams(prior_rate=-1.0)
        with pytest.raises(DomainError):
            Hyperparams(ucb_multiplier=-0.5)


class TestPosterior:
    def test_update_hand_case(self):
        # shape = 10 + 1000*10 = 10010, rate = 0.05 + 1/0.5 = 2.05
        state = make_state([0.0, 0.0], [1.0, 0.0], [0.5, 0.0], [1000, 0])
        post = posterior_update(state, Hyperparams(alpha=10.0))
        assert post.shape.tolist() == [10010.0, 10.0]
        assert np.allclose(post.rate, [2.05, 0.05])
        assert post.n_interventions == 2

    def test_update_rejects_zero_variance(self):
        with pytest.warns(UserWarning):
            state = make_state([0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [5, 0])
        with pytest.raises(DomainError, match=r"\[0\]"):
            posterior_update(state, Hyperparams())

    def test_moments_hand_case(self):
        # scale ~ Gamma(6, 2), variance | scale ~ InvGamma(3, scale):
        # mean = 6/(2*2) = 1.5, var = 6*7/(4*4*1) + 6/(4*4) = 3
        post = DesignPosterior(shape=np.array([6.0]), rate=np.array([2.0]))
        mean, sd = posterior_moments(post, Hyperparams(alpha=3.0))
        assert mean[0] == pytest.approx(1.5)
        assert sd[0] == pytest.approx(np.sqrt(3.0))

    def test_moments_require_second_moment(self):
        post = DesignPosterior(shape=np.array([6.0]), rate=np.array([2.0]))
        with pytest.raises(DomainError):
            posterior_moments(post, Hyperparams(alpha=2.0))

    def test_moments_match_monte_carlo(self):
        j = 60_000
        post = DesignPosterior(shape=np.full(j, 6.0), rate=np.full(j, 2.0))
        hyper = Hyperparams(alpha=5.0)
        draws = sample_variances(post, hyper, np.random.default_rng(11))
        mean, sd = posterior_moments(post, hyper)
        assert draws.mean() == pytest.approx(mean[0], rel=0.02)
        assert draws.std() == pytest.approx(sd[0], rel=0.03)

    def test_sampling_replay(self):
        post = DesignPosterior(shape=np.array([6.0, 10.0]), rate=np.array([2.0, 0.05]))
        hyper = Hyperparams(alpha=5.0)
        got = sample_variances(post, hyper, np.random.default_rng(3))
        rng = np.random.default_rng(3)
        beta = rng.gamma(post.shape, 1.0 / post.rate)
        want = beta / rng.gamma(5.0, 1.0, size=2)
        assert np.array_equal(got, want)
        assert (got > 0).all()

    def test_never_randomized_keeps_prior_and_wider_spread(self):
        state = make_state([0.0, 0.0], [1.0, 0.0], [0.5, 0.0], [400, 0])
        hyper = Hyperparams()
        post = posterior_update(state, hyper)
        assert post.shape[1] == hyper.prior_shape
        assert post.rate[1] == hyper.prior_rate
        mean, sd = posterior_moments(post, hyper)
        assert sd[1] / mean[1] > sd[0] / mean[0]


class TestNextStageRisk:
    def test_two_arm_hand_values(self):
        state, bias, catalog, weights = two_arm_fixture()
        assert np.allclose(bias.hat_matrix, np.eye(2), atol=1e-12)
        sampled = np.array([4.0, 9.0])
        # k=0, l_next=5: var_next = [4/7, 9/3], c0 = (4/7 + 3)/2
        # identity hat: risk = c0*(1 - 2 lam) + lam^2 * b'Db, b = [1, -2]
        c0 = (4.0 / 7.0 + 3.0) / 2.0
        quad = (1.0 + 4.0) / 2.0
        for lam in (0.0, 0.2, 0.7):
            got = next_stage_risk(state, bias, catalog, weights, sampled, 0, 5, lam)
            assert got == pytest.approx(c0 * (1 - 2 * lam) + lam * lam * quad, rel=1e-12)

    def test_prefers_the_larger_variance_reduction(self):
        state, bias, catalog, weights = two_arm_fixture()
        sampled = np.array([4.0, 9.0])
        r0 = next_stage_risk(state, bias, catalog, weights, sampled, 0, 5, 0.2)
        r1 = next_stage_risk(state, bias, catalog, weights, sampled, 1, 5, 0.2)
        # k=1: c0 = (4/2 + 9/8)/2 = 1.5625 < 25/14, so it wins
        assert r1 == pytest.approx(1.5625 * 0.6 + 0.04 * 2.5, rel=1e-12)
        assert r1 < r0

    def test_more_records_help_only_below_half(self):
        state, bias, catalog, weights = two_arm_fixture()
        sampled = np.array([4.0, 9.0])

        def risk(l_next, lam):
            return next_stage_risk(state, bias, catalog, weights, sampled, 0, l_next, lam)

        assert risk(10, 0.2) < risk(5, 0.2) < risk(1, 0.2)
        # above one half the retained-variance term flips sign
        assert risk(10, 0.7) > risk(5, 0.7) > risk(1, 0.7)

    def test_augmented_support_matches_first_principles(self):
        rng = np.random.default_rng(4)
        state = make_state(
            tau_obs=[2.0, -1.0, 0.5],
            tau_rct=[1.0, 1.0, 0.0],
            var=[0.8, 0.6, 0.0],
            counts=[2, 3, 0],
            seed=4,
        )
        catalog = catalog_1d([-1.0, 2.0, 0.5])
        weights = identity_weights(3)
        bias = fit_bias(state, catalog)
        sampled = rng.uniform(1.0, 5.0, size=3)
        lam, l_next = 0.3, 7
        got = next_stage_risk(state, bias, catalog, weights, sampled, 2, l_next, lam)

        phi = catalog.features
        hat = phi @ np.linalg.pinv(phi)  # support grows to all three rows
        var_next = np.diag(sampled / np.array([2.0, 3.0, float(l_next)]))
        gamma = state.dr_cov
        resid = np.eye(3) - hat
        sigma = resid @ gamma @ resid.T + hat @ var_next @ hat.T
        d = weights.matrix
        coef = np.linalg.lstsq(phi[:2], (state.tau_obs - state.tau_rct)[:2], rcond=None)[0]
        b = phi @ coef
        c0 = np.trace(d @ sigma)
        lin = np.trace(d @ gamma @ resid.T) - c0
        want = c0 + lam * lam * float(b @ d @ b) + 2 * lam * lin
        assert got == pytest.approx(want, rel=1e-10)

    def test_unplanned_empty_arm_rejected(self):
        state, bias, catalog, weights = (
            make_state([0.0] * 3, [1.0, 1.0, 0.0], [0.5, 0.5, 0.0], [2, 2, 0]),
            None,
            catalog_1d([-1.0, 2.0, 0.5]),
            identity_weights(3),
        )
        bias = fit_bias(state, catalog)
        sampled = np.ones(3)
        with pytest.raises(MaskedVarianceError):
            next_stage_risk(state, bias, catalog, weights, sampled, 2, 0, 0.2)

    def test_argument_validation(self):
        state, bias, catalog, weights = two_arm_fixture()
        sampled = np.ones(2)
        with pytest.raises(ValidationError):
            next_stage_risk(state, bias, catalog, weights, sampled, 2, 5, 0.2)
        with pytest.raises(ValidationError):
            next_stage_risk(state, bias, catalog, weights, sampled, 0, -1, 0.2)
        with pytest.raises(ValidationError):
            next_stage_risk(state, bias, catalog, weights, sampled, 0, 5, 1.5)


class TestDecision:
    def test_chosen_must_be_smallest(self):
        SelectionDecision("random", 0, (1, 2), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValidationError):
            SelectionDecision("random", 0, (2, 1), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValidationError):
            SelectionDecision("random", 0, (1, 1), np.array([1.0, 0.0, 0.0]))


class TestThompson:
    def test_deterministic_in_seed_and_replayable(self):
        state, bias, catalog, weights = two_arm_fixture()
        hyper = Hyperparams()
        args = (state, bias, catalog, weights, hyper, 1, 5, 0.2)
        d1 = select_thompson(*args, seed=42, round_index=3)
        d2 = select_thompson(*args, seed=42, round_index=3)
        assert d1.chosen == d2.chosen
        assert np.array_equal(d1.scores, d2.scores)
        assert (d1.method, d1.seed, d1.round_index) == ("thompson", 42, 3)

        post = posterior_update(state, hyper)
        sampled = sample_variances(post, hyper, np.random.default_rng(42))
        want = [
            next_stage_risk(state, bias, catalog, weights, sampled, k, 5, 0.2)
            for k in range(2)
        ]
        assert np.allclose(d1.scores, want, rtol=1e-14)

    def test_seed_changes_draws(self):
        state, bias, catalog, weights = two_arm_fixture()
        args = (state, bias, catalog, weights, Hyperparams(), 1, 5, 0.2)
        a = select_thompson(*args, seed=0)
        b = select_thompson(*args, seed=1)
        assert not np.array_equal(a.scores, b.scores)


class TestUcb:
    def test_matches_optimistic_plugin(self):
        state, bias, catalog, weights = two_arm_fixture()
        hyper = Hyperparams(ucb_multiplier=1.5)
        got = select_ucb(state, bias, catalog, weights, hyper, 1, 5, 0.2, seed=7)
        post = posterior_update(state, hyper)
        mean, sd = posterior_moments(post, hyper)
        optimistic = mean + 1.5 * sd
        want = [
            next_stage_risk(state, bias, catalog, weights, optimistic, k, 5, 0.2)
            for k in range(2)
        ]
        assert np.allclose(got.scores, want, rtol=1e-14)
        assert got.method == "ucb"

    def test_ignores_seed(self):
        state, bias, catalog, weights = two_arm_fixture()
        args = (state, bias, catalog, weights, Hyperparams(), 1, 5, 0.2)
        assert np.array_equal(
            select_ucb(*args, seed=0).scores, select_ucb(*args, seed=99).scores
        )

    def test_zero_multiplier_uses_the_mean(self):
        state, bias, catalog, weights = two_arm_fixture()
        hyper = Hyperparams(ucb_multiplier=0.0)
        got = select_ucb(state, bias, catalog, weights, hyper, 1, 5, 0.2, seed=0)
        post = posterior_update(state, hyper)
        mean, _ = posterior_moments(post, hyper)
        want = [
            next_stage_risk(state, bias, catalog, weights, mean, k, 5, 0.2)
            for k in range(2)
        ]
        assert np.allclose(got.scores, want, rtol=1e-14)


class TestRandomSelector:
    def test_marginals_are_uniform(self):
        counts = np.zeros(6)
        for seed in range(3000):
            counts[select_random(6, 1, seed).chosen[0]] += 1
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_without_replacement_prefers_unseen(self):
        d = select_random(
            4, 2, 17, history=[frozenset({0}), frozenset({1})], without_replacement=True
        )
        assert set(d.chosen) == {2, 3}

    def test_without_replacement_degrades_to_uniform(self):
        history = [frozenset(range(4))]
        for seed in (0, 1, 2, 3):
            full = select_random(4, 2, seed, history=history, without_replacement=True)
            base = select_random(4, 2, seed)
            assert full.chosen == base.chosen

    @given(
        j=st.integers(2, 12),
        seed=st.integers(0, 2**31),
        data=st.data(),
    )
    @settings(max_examples=40, deadline=None)
    def test_random_selection_properties(self, j, seed, data):
        n = data.draw(st.integers(1, j))
        done = frozenset(data.draw(st.sets(st.integers(0, j - 1), max_size=j - n)))
        d = select_random(j, n, seed, history=[done], without_replacement=True)
        assert len(set(d.chosen)) == n
        assert all(0 <= c < j for c in d.chosen)
        assert d.chosen == tuple(np.argsort(d.scores, kind="stable")[:n])
        if j - len(done) >= n:
            assert not set(d.chosen) & done


class TestDopt:
    def test_largest_feature_row_first(self):
        d = select_dopt(catalog_1d([0.5, -3.0, 1.0]), 1, 0)
        assert d.chosen == (1,)

    def test_new_direction_beats_duplicate(self):
        # after [1, 1], the orthogonal [1, -1] gains ~2/ridge, the copy ~1
        d = select_dopt(catalog_1d([1.0, 1.0, -1.0]), 1, 0, history=[frozenset({0})])
        assert d.chosen == (2,)

    def test_score_layout(self):
        d = select_dopt(
            catalog_1d([0.0, 1.0, 2.0, 3.0]), 2, 0, history=[frozenset({3})]
        )
        assert [d.scores[j] for j in d.chosen] == [0.0, 1.0]
        assert d.scores[3] == 3.0  # already randomized sorts last
        assert sorted(d.scores.tolist()) == [0.0, 1.0, 2.0, 3.0]

    def test_post_coverage_equals_random(self):
        catalog = catalog_1d([0.0, 1.0, 2.0, 3.0, 4.0])
        history = [frozenset(range(5))]
        for seed in range(25):
            d = select_dopt(catalog, 2, seed, history=history)
            r = select_random(5, 2, seed)
            assert d.chosen == r.chosen


class TestDecisionLog:
    def roundtrip(self, tmp_path, decisions):
        path = tmp_path / "decisions.csv"
        save_decision_log(decisions, str(path))
        return path, load_decision_log(str(path))

    def test_round_trip(self, tmp_path):
        decisions = [select_random(5, 2, seed, round_index=m) for m, seed in enumerate([3, 9], 1)]
        path, back = self.roundtrip(tmp_path, decisions)
        for d, b in zip(decisions, back):
            assert (d.method, d.seed, d.chosen, d.round_index) == (
                b.method, b.seed, b.chosen, b.round_index,
            )
            assert np.array_equal(d.scores, b.scores)
        first = path.read_bytes()
        save_decision_log(back, str(path))
        assert path.read_bytes() == first

    def test_one_based_indices_on_disk(self, tmp_path):
        path, _ = self.roundtrip(tmp_path, [select_random(3, 2, 0, round_index=1)])
        row = path.read_text().splitlines()[1].split(",")
        assert set(row[3].split(";")) <= {"1", "2", "3"}

    def test_parse_errors(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("nope\n")
        with pytest.raises(ParseError):
            load_decision_log(str(bad))
        bad.write_text("round,method,seed,chosen_indices,score_1\n1,random,0,1\n")
        with pytest.raises(ParseError) as err:
            load_decision_log(str(bad))
        assert err.value.row == 2
