"""Tests for posterior predictive curves and residuals."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from actimets.errors import DataError
from actimets.ingest import RISK_FACTORS
from actimets.predict import (
    CRITERIA,
    LOW_IS_BAD,
    PredictiveCurve,
    Thresholds,
    default_grid,
    elevated_criteria,
    posterior_predictive_draw,
    prob_R_or_more,
    prob_high,
    raw_scale,
    standardized_residuals,
)
from actimets.rfm import RfmPosterior, compute_gamma0, eval_mean
from actimets.simgen import default_mixture, default_rfm_truth
from actimets.statskernel import make_rng


def fixture_posterior(n_draws=1, jitter=0.0, seed=0, h=2):
    """Posterior pinned at the published point estimates, optionally jittered."""
    rng = make_rng(seed)
    curves, linear = default_rfm_truth()
    weights, intercepts, covariances = default_mixture()
    if h == 1:
        weights = np.array([1.0])
        intercepts = intercepts[:1]
        covariances = covariances[:1]

    def jittered(base, scale):
        return base + jitter * scale * rng.standard_normal((n_draws,) + np.shape(base))

    drop = jittered(curves.drop, 0.05 * np.abs(curves.drop))
    rate = jittered(curves.rate, 0.05 * curves.rate)
    inflection = jittered(curves.inflection, 0.05 * curves.inflection)
    slope = jittered(linear.slope, 0.2)
    w = np.tile(weights, (n_draws, 1))
    lam = jittered(intercepts, 0.5)
    cov = np.tile(covariances, (n_draws, 1, 1, 1))
    post = RfmPosterior(
        factor_names=RISK_FACTORS,
        drop=drop,
        rate=np.maximum(rate, 0.05),
        inflection=inflection,
        slope=slope,
        weights=w,
        intercepts=lam,
        covariances=cov,
        labels=np.zeros((n_draws, 4), dtype=np.int16),
        t_index=np.zeros(n_draws, dtype=np.int64),
        chain=np.zeros(n_draws, dtype=np.int8),
        gamma0=compute_gamma0(lam, w),
        rhat=np.array([]),
        rhat_names=(),
        acceptance={},
        seed=seed,
        relabeled=True,
    )
    return post


class TestThresholds:
    def test_default_cutoffs(self):
        t = Thresholds()
        assert_allclose(t.cutoffs("male"), [102, 110, 150, 130, 85, 160, 40])
        assert_allclose(t.cutoffs("female"), [88, 110, 150, 130, 85, 160, 50])
        model = t.model_cutoffs("male")
        assert_allclose(model[1], np.log(110))
        assert_allclose(model[2], np.log(150))
        assert_allclose(model[[0, 3, 4, 5, 6]], [102, 130, 85, 160, 40])

    def test_direction_flags(self):
        assert LOW_IS_BAD.tolist() == [False] * 6 + [True]
        assert RISK_FACTORS[6] == "hdl"

    def test_validation(self):
        with pytest.raises(DataError):
            Thresholds(glucose=-1.0)
        with pytest.raises(DataError):
            Thresholds().cutoffs("other")


class TestPredictiveCurve:
    def test_band_must_contain_estimate(self):
        g = np.arange(3.0)
        with pytest.raises(DataError):
            PredictiveCurve("x", g, np.full(3, 0.5), np.full(3, 0.6), np.full(3, 0.7))
        with pytest.raises(DataError):
            PredictiveCurve("x", g, np.full(3, 1.5), np.full(3, 0.1), np.full(3, 2.0))
        ok = PredictiveCurve("x", g, np.full(3, 0.5), np.full(3, 0.4), np.full(3, 0.6))
        assert ok.grid.dtype == float


class TestPosteriorPredictiveDraw:
    def test_vanishing_noise_is_deterministic(self):
        post = fixture_posterior(h=1)
        post.covariances[:] = 1e-18 * np.eye(7)
        rng = make_rng(1)
        t = 30.0
        draw = posterior_predictive_draw(t, post, 0, rng)
        expected = post.intercepts[0, 0] + eval_mean(
            t**0.25, post.curve_at(0), post.linear_at(0)
        )
        assert_allclose(draw, expected, atol=1e-7)

    def test_mean_matches_overall_intercept_identity(self):
        post = fixture_posterior()
        rng = make_rng(2)
        t = 25.0
        draws = posterior_predictive_draw(t, post, 0, rng, size=100_000)
        expected = post.gamma0[0] + eval_mean(t**0.25, post.curve_at(0), post.linear_at(0))
        sd = draws.std(axis=0)
        mcse = sd / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - expected) < 5 * mcse)

    def test_covariance_matches_mixture_moments(self):
        post = fixture_posterior()
        rng = make_rng(3)
        draws = posterior_predictive_draw(40.0, post, 0, rng, size=200_000)
        w = post.weights[0]
        dev = post.intercepts[0] - post.gamma0[0]
        expected = np.einsum("h,hij->ij", w, post.covariances[0]) + np.einsum(
            "h,hi,hj->ij", w, dev, dev
        )
        got = np.cov(draws.T)
        scale = np.sqrt(np.outer(np.diag(expected), np.diag(expected)))
        assert np.all(np.abs(got - expected) / scale < 0.03)

    def test_raw_scale_exponentiates_log_factors(self):
        values = np.zeros(7)
        values[1] = np.log(110.0)
        values[2] = np.log(150.0)
        raw = raw_scale(values)
        assert_allclose(raw[[1, 2]], [110.0, 150.0])
        assert_allclose(raw[[0, 3, 4, 5, 6]], 0.0)

    def test_errors(self):
        post = fixture_posterior()
        rng = make_rng(4)
        with pytest.raises(DataError):
            posterior_predictive_draw(-1.0, post, 0, rng)
        with pytest.raises(DataError):
            posterior_predictive_draw(10.0, post, 5, rng)


class TestElevatedCriteria:
    def test_blood_pressure_counts_once(self):
        values = np.tile([90.0, 4.0, 4.5, 140.0, 95.0, 100.0, 60.0], (1, 1))
        crit = elevated_criteria(values, "male")
        assert crit.shape == (1, 6)
        assert crit[0].tolist() == [False, False, False, True, False, False]
        # Either pressure alone marks the same single criterion.
        values[0, 3] = 120.0
        assert elevated_criteria(values, "male")[0, 3]
        values[0, 4] = 80.0
        assert not elevated_criteria(values, "male")[0, 3]

    def test_sex_flip_changes_only_waist_and_hdl(self):
        rng = make_rng(5)
        values = np.c_[
            rng.uniform(80, 110, 50),
            rng.uniform(4.4, 4.9, 50),
            rng.uniform(4.3, 5.4, 50),
            rng.uniform(110, 150, 50),
            rng.uniform(70, 95, 50),
            rng.uniform(100, 180, 50),
            rng.uniform(35, 55, 50),
        ]
        male = elevated_criteria(values, "male")
        female = elevated_criteria(values, "female")
        fixed = [CRITERIA.index(c) for c in ("glucose", "triglycerides", "blood_pressure", "high_ldl")]
        assert np.array_equal(male[:, fixed], female[:, fixed])
        assert not np.array_equal(male[:, 0], female[:, 0])
        assert not np.array_equal(male[:, 4], female[:, 4])

    def test_log_scale_thresholding(self):
        values = np.zeros((2, 7))
        values[:, 6] = 60.0
        values[0, 1] = np.log(111.0)
        values[1, 1] = np.log(109.0)
        crit = elevated_criteria(values, "male")
        assert crit[0, 1] and not crit[1, 1]


class TestProbHigh:
    def test_matches_simulation_oracle(self):
        post = fixture_posterior(n_draws=3, jitter=1.0, seed=7)
        grid = np.array([15.0])
        for rf in ("waist", "glucose", "hdl"):
            curve = prob_high(rf, grid, post, sex="male")
            j = RISK_FACTORS.index(rf)
            cutoff = Thresholds().model_cutoffs("male")[j]
            rng = make_rng(8)
            sims = []
            for l in range(post.n_draws):
                draws = posterior_predictive_draw(15.0, post, l, rng, size=60_000)
                if LOW_IS_BAD[j]:
                    sims.append((draws[:, j] < cutoff).mean())
                else:
                    sims.append((draws[:, j] > cutoff).mean())
            assert_allclose(curve.estimate[0], np.mean(sims), atol=0.01)

    def test_threshold_at_infinity_vanishes(self):
        post = fixture_posterior(n_draws=2, jitter=0.5)
        huge = Thresholds(
            waist_male=1e9, waist_female=1e9, glucose=1e9, triglycerides=1e9,
            sbp=1e9, dbp=1e9, ldl=1e9,
        )
        for rf in ("waist", "glucose", "sbp"):
            curve = prob_high(rf, default_grid(), post, thresholds=huge)
            assert np.all(curve.estimate < 1e-8)

    def test_monotone_decline_for_curve_factors(self):
        post = fixture_posterior()
        for rf in ("sbp", "glucose", "waist"):
            curve = prob_high(rf, default_grid(), post)
            assert curve.estimate[0] > curve.estimate[-1]
            assert np.all(np.diff(curve.estimate) <= 1e-12)

    def test_sex_flip_only_moves_sex_specific_factors(self):
        post = fixture_posterior(n_draws=2, jitter=0.3)
        grid = np.array([0.0, 30.0])
        for rf in ("glucose", "sbp", "ldl"):
            male = prob_high(rf, grid, post, sex="male")
            female = prob_high(rf, grid, post, sex="female")
            assert_allclose(male.estimate, female.estimate, rtol=1e-12)
        for rf in ("waist", "hdl"):
            male = prob_high(rf, grid, post, sex="male")
            female = prob_high(rf, grid, post, sex="female")
            assert not np.allclose(male.estimate, female.estimate)

    def test_mixed_sex_interpolates(self):
        post = fixture_posterior()
        grid = np.array([10.0])
        male = prob_high("waist", grid, post, sex="male").estimate[0]
        female = prob_high("waist", grid, post, sex="female").estimate[0]
        mixed = prob_high("waist", grid, post, sex="mixed", female_fraction=0.25).estimate[0]
        assert_allclose(mixed, 0.75 * male + 0.25 * female, rtol=1e-12)

    def test_band_contains_estimate_and_mc_error_shrinks(self):
        # The band endpoints are Monte Carlo estimates over posterior draws;
        # their replicate-to-replicate spread should drop as draws grow.
        spreads = {}
        for n_draws in (30, 480):
            uppers = []
            for rep in range(12):
                post = fixture_posterior(n_draws=n_draws, jitter=1.0, seed=100 + rep)
                curve = prob_high("waist", np.array([20.0]), post)
                assert curve.lower[0] <= curve.estimate[0] <= curve.upper[0]
                uppers.append(curve.upper[0])
            spreads[n_draws] = np.std(uppers)
        assert spreads[480] < spreads[30]

    def test_empty_posterior_and_bad_inputs(self):
        post = fixture_posterior()
        empty = fixture_posterior(n_draws=1)
        for field in ("drop", "rate", "inflection", "slope", "weights", "intercepts",
                      "covariances", "labels", "t_index", "chain", "gamma0"):
            setattr(empty, field, getattr(empty, field)[:0])
        with pytest.raises(DataError, match="no draws"):
            prob_high("waist", default_grid(), empty)
        with pytest.raises(DataError):
            prob_high("unknown", default_grid(), post)
        with pytest.raises(DataError):
            prob_high("waist", np.array([-5.0]), post)
        with pytest.raises(DataError):
            prob_high("waist", default_grid(), post, sex="mixed", female_fraction=1.5)


class TestProbROrMore:
    def test_curves_are_nested_in_R(self):
        post = fixture_posterior(n_draws=4, jitter=0.5, seed=11)
        curves = prob_R_or_more(default_grid()[::10], post, n_sim=150, rng=make_rng(12))
        assert len(curves) == 6
        assert [c.name for c in curves] == [f"R>={r}" for r in range(1, 7)]
        for a, b in zip(curves, curves[1:]):
            assert np.all(a.estimate >= b.estimate - 1e-12)

    def test_blood_pressure_criterion_counts_once(self):
        # Both pressures forced far beyond their cutoffs, everything else
        # pinned at healthy levels: exactly one criterion fires.
        post = fixture_posterior(h=1)
        post.intercepts[:] = [80.0, 4.0, 4.3, 200.0, 150.0, 100.0, 70.0]
        post.covariances[:] = 1e-6 * np.eye(7)
        post.drop[:] = 1e-9
        post.slope[:] = 0.0
        post.gamma0 = compute_gamma0(post.intercepts, post.weights)
        grid = np.array([0.0, 30.0])
        curves = prob_R_or_more(grid, post, n_sim=100, rng=make_rng(13))
        assert_allclose(curves[0].estimate, 1.0)
        assert_allclose(curves[1].estimate, 0.0)

    def test_unreachable_thresholds_zero_out(self):
        post = fixture_posterior(n_draws=2, jitter=0.3)
        unreachable = Thresholds(
            waist_male=1e9, waist_female=1e9, glucose=1e9, triglycerides=1e9,
            sbp=1e9, dbp=1e9, ldl=1e9, hdl_male=1e-9, hdl_female=1e-9,
        )
        curves = prob_R_or_more(
            np.array([0.0, 60.0]), post, thresholds=unreachable, n_sim=200, rng=make_rng(14)
        )
        assert np.all(curves[0].estimate < 1e-4)

    def test_matches_per_draw_simulation_oracle(self):
        post = fixture_posterior(seed=15)
        grid = np.array([60.0])
        curves = prob_R_or_more(grid, post, sex="male", n_sim=4000, rng=make_rng(16))
        rng = make_rng(17)
        draws = posterior_predictive_draw(60.0, post, 0, rng, size=40_000)
        counts = elevated_criteria(draws, "male").sum(axis=1)
        for r in (1, 2, 3):
            direct = (counts >= r).mean()
            assert abs(curves[r - 1].estimate[0] - direct) < 0.02


class TestStandardizedResiduals:
    def make_selfconsistent(self, n=800, seed=18):
        post = fixture_posterior(seed=seed)
        rng = make_rng(seed + 1)
        t = rng.uniform(0.0, 50.0, n)
        x = t**0.25
        means = eval_mean(x, post.curve_at(0), post.linear_at(0))
        comp = (rng.random(n) < post.weights[0, 1]).astype(int)
        chol = np.linalg.cholesky(post.covariances[0])
        noise = np.einsum("sij,sj->si", chol[comp], rng.standard_normal((n, 7)))
        y = post.intercepts[0, comp] + means + noise
        return post, y, t[None, :]

    def test_self_consistency_moments(self):
        post, y, t_pool = self.make_selfconsistent()
        r = standardized_residuals(y, t_pool, post)
        n = y.shape[0]
        assert r.shape == (n, 7)
        assert np.all(np.abs(r.mean(axis=0)) < 4 / np.sqrt(n))
        # Mixture kurtosis inflates the variance-of-variance a little.
        assert np.all(np.abs(r.var(axis=0) - 1) < 0.2)

    def test_no_trend_against_exposure(self):
        post, y, t_pool = self.make_selfconsistent(seed=19)
        r = standardized_residuals(y, t_pool, post)
        x = t_pool[0] ** 0.25
        for j in range(7):
            corr = np.corrcoef(x, r[:, j])[0, 1]
            assert abs(corr) < 0.12

    def test_exact_mean_gives_zero(self):
        post = fixture_posterior()
        n = 3
        t_pool = np.full((1, n), 16.0)
        x = t_pool[0] ** 0.25
        means = eval_mean(x, post.curve_at(0), post.linear_at(0))
        y = post.gamma0[0] + means
        r = standardized_residuals(y, t_pool, post)
        assert_allclose(r, 0.0, atol=1e-12)

    def test_nonpositive_variance_rejected(self):
        post = fixture_posterior(h=1)
        post.covariances[:] = 0.0
        n = 2
        y = np.zeros((n, 7))
        with pytest.raises(DataError, match="variance"):
            standardized_residuals(y, np.full((1, n), 10.0), post)

    def test_misalignment_rejected(self):
        post = fixture_posterior()
        with pytest.raises(DataError):
            standardized_residuals(np.zeros((4, 7)), np.full((1, 3), 5.0), post)
        with pytest.raises(DataError):
            standardized_residuals(np.zeros((4, 6)), np.full((1, 4), 5.0), post)


class TestPaperScaleAnchors:
    def test_waist_and_union_probabilities_at_sixty_minutes(self):
        # Reported-scale sanity on the pinned fixture: roughly half the
        # population exceeds the waist cutoff at high activity, and having
        # at least one elevated factor stays commonplace.
        post = fixture_posterior()
        grid = np.array([60.0])
        waist = prob_high("waist", grid, post).estimate[0]
        assert 0.30 < waist < 0.60
        union = prob_R_or_more(grid, post, n_sim=4000, rng=make_rng(20))[0].estimate[0]
        assert 0.55 < union < 0.85
