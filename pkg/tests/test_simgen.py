"""Tests for the synthetic cohort generator."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from actimets.errors import DataError
from actimets.ingest import build_cohorts, design_matrix
from actimets.mem import RandomEffects, build_mem_data, usual_mvpa
from actimets.simgen import (
    SimConfig,
    default_mixture,
    simulate_cohort,
    true_usual_mvpa,
)


class TestConfig:
    def test_defaults_fill_in(self):
        config = SimConfig(n=10)
        assert config.curves is not None
        assert config.mixture_weights.shape == (2,)
        assert_allclose(config.mixture_weights.sum(), 1.0)

    def test_gamma0_matches_published_scale(self):
        config = SimConfig(n=5)
        assert_allclose(
            config.gamma0(),
            [101.09, 4.71, 4.77, 137.17, 64.81, 128.81, 62.87],
            rtol=1e-12,
        )

    def test_bad_weights_rejected(self):
        weights, intercepts, covariances = default_mixture()
        with pytest.raises(DataError):
            SimConfig(
                n=5,
                mixture_weights=np.array([0.7, 0.7]),
                mixture_intercepts=intercepts,
                mixture_covariances=covariances,
            )

    def test_nonpositive_n_rejected(self):
        with pytest.raises(DataError):
            SimConfig(n=0)


class TestSimulateCohort:
    def test_shapes_and_consistency(self):
        cohort = simulate_cohort(SimConfig(n=40, seed=1))
        assert len(cohort.participants) == 40
        assert len(cohort.days) == 40 * 7
        assert len(cohort.adjusted) == 40 * 7
        assert len(cohort.panels) == 40
        ids = [p.participant_id for p in cohort.participants]
        assert len(set(ids)) == 40
        for record in cohort.adjusted:
            assert record.w1 == record.w**4
        truth = cohort.truth
        assert truth.t.shape == (40,)
        assert np.all(truth.t >= 0)
        assert np.all((truth.pi > 0) & (truth.pi < 1))
        assert truth.labels.min() >= 0
        assert truth.labels.max() < 2

    def test_feeds_the_model_builders(self):
        cohort = simulate_cohort(SimConfig(n=25, seed=6))
        cohorts = build_cohorts(cohort.days, cohort.panels)
        assert cohorts.mem_ids == tuple(sorted(cohort.participant_ids))
        assert cohorts.rfm_ids == cohorts.mem_ids
        data = build_mem_data(
            cohort.adjusted,
            cohort.participants,
            cohort.variance_function,
            cohorts.mem_ids,
        )
        ages = np.array([p.age for p in sorted(cohort.participants, key=lambda p: p.participant_id)])
        assert_allclose(data.xi_sq, cohort.variance_function(ages))
        # Positive amounts appear exactly on participation days by construction.
        assert np.all((data.amounts > 0) == (data.participation > 0))

    def test_deterministic_under_seed(self):
        a = simulate_cohort(SimConfig(n=15, seed=42))
        b = simulate_cohort(SimConfig(n=15, seed=42))
        assert_allclose(a.truth.t, b.truth.t)
        assert_allclose(a.truth.b1, b.truth.b1)
        assert [d.mvpa_minutes for d in a.days] == [d.mvpa_minutes for d in b.days]
        assert_allclose(
            [p.waist_cm for p in a.panels], [p.waist_cm for p in b.panels]
        )
        c = simulate_cohort(SimConfig(n=15, seed=43))
        assert not np.allclose(a.truth.t, c.truth.t)

    def test_degenerate_noise_gives_exact_means(self):
        from actimets.mem import MemParams

        config = SimConfig(
            n=12,
            seed=3,
            variance_delta=np.zeros(4),
            variance_floor=0.0,
            mem=MemParams(
                alpha=np.array([0.8, 0, 0, 0, 0, 0, 0, 0.0]),
                beta=np.array([2.2, 0, 0, 0, 0, 0, 0, 0.0]),
                phi=np.array([0.0, 0.0]),
                sigma_b=np.array([0.5, 0.2]),
                rho_b=0.0,
            ),
        )
        cohort = simulate_cohort(config)
        z = design_matrix(cohort.participants)
        mu = z @ config.mem.beta + cohort.truth.b2
        by_id = {p.participant_id: mu[k] for k, p in enumerate(cohort.participants)}
        for record in cohort.adjusted:
            if record.w > 0:
                assert_allclose(record.w, by_id[record.participant_id], rtol=1e-12)

    def test_certain_participation_has_no_zero_days(self):
        from actimets.mem import MemParams

        config = SimConfig(
            n=30,
            seed=9,
            mem=MemParams(
                alpha=np.array([40.0, 0, 0, 0, 0, 0, 0, 0.0]),
                beta=np.array([2.2, 0, 0, 0, 0, 0, 0, 0.0]),
                phi=np.array([0.3, 0.3]),
                sigma_b=np.array([0.3, 0.2]),
                rho_b=0.0,
            ),
        )
        cohort = simulate_cohort(config)
        assert all(record.w > 0 for record in cohort.adjusted)

    def test_lag_one_autocorrelation_matches_phi(self):
        from actimets.mem import MemParams

        phi = 0.35
        config = SimConfig(
            n=2000,
            seed=17,
            age_range=(20.0, 60.0),
            variance_delta=np.array([0.4, 0.0, 0.0, 0.0]),
            mem=MemParams(
                alpha=np.array([40.0, 0, 0, 0, 0, 0, 0, 0.0]),
                beta=np.array([2.3, -0.4, 0, 0, 0, 0, 0, 0.0]),
                phi=np.array([phi, phi]),
                sigma_b=np.array([0.3, 0.3]),
                rho_b=0.0,
            ),
        )
        cohort = simulate_cohort(config)
        z = design_matrix(cohort.participants)
        mu = z @ config.mem.beta + cohort.truth.b2
        by_id = {p.participant_id: k for k, p in enumerate(cohort.participants)}
        resid = np.empty((config.n, 7))
        for record in cohort.adjusted:
            k = by_id[record.participant_id]
            resid[k, record.day_index - 1] = record.w - mu[k]
        pairs_x = resid[:, :-1].ravel()
        pairs_y = resid[:, 1:].ravel()
        estimate = np.corrcoef(pairs_x, pairs_y)[0, 1]
        assert abs(estimate - phi) < 0.04


class TestTrueUsualMvpa:
    def make_params(self, beta0):
        from actimets.mem import MemParams

        return MemParams(
            alpha=np.zeros(8),
            beta=np.array([beta0, 0, 0, 0, 0, 0, 0, 0.0]),
            phi=np.array([0.0, 0.0]),
            sigma_b=np.array([1.0, 1.0]),
            rho_b=0.0,
        )

    def test_no_noise_reduces_to_fourth_power(self):
        params = self.make_params(2.0)
        effects = RandomEffects(b1=np.array([0.0]), b2=np.array([0.0]))
        z = np.array([[1.0, 0, 0, 0, 0, 0, 0, 0]])
        assert_allclose(true_usual_mvpa(params, effects, z, np.array([0.0])), [0.5 * 16.0])

    def test_exact_gaussian_fourth_moment(self):
        params = self.make_params(1.0)
        effects = RandomEffects(b1=np.array([800.0]), b2=np.array([0.0]))
        z = np.array([[1.0, 0, 0, 0, 0, 0, 0, 0]])
        got = true_usual_mvpa(params, effects, z, np.array([0.25]))
        assert_allclose(got, [2.6875])

    def test_zero_participation_gives_zero(self):
        params = self.make_params(2.0)
        effects = RandomEffects(b1=np.array([-800.0]), b2=np.array([0.0]))
        z = np.array([[1.0, 0, 0, 0, 0, 0, 0, 0]])
        assert_allclose(true_usual_mvpa(params, effects, z, np.array([0.5])), [0.0])

    def test_taylor_bias_identity(self):
        rng = np.random.default_rng(3)
        from actimets.mem import MemParams

        params = MemParams(
            alpha=rng.normal(0, 0.3, 8),
            beta=np.array([2.0, *rng.normal(0, 0.2, 7)]),
            phi=np.array([0.2, 0.4]),
            sigma_b=np.array([0.6, 0.3]),
            rho_b=0.1,
        )
        n = 50
        z = np.column_stack([np.ones(n), rng.normal(0, 0.4, (n, 7))])
        effects = RandomEffects(b1=rng.normal(0, 0.5, n), b2=rng.normal(0, 0.3, n))
        xi_sq = rng.uniform(0.1, 0.8, n)
        exact = true_usual_mvpa(params, effects, z, xi_sq)
        approx = usual_mvpa(params, effects, z, xi_sq)
        from scipy.special import expit

        pi = expit(z @ params.alpha + effects.b1)
        assert_allclose(exact - approx, pi * 3.0 * xi_sq**2, rtol=1e-10)


class TestPanelMoments:
    def test_covariance_matches_mixture_moments(self):
        config = SimConfig(n=4000, seed=23)
        cohort = simulate_cohort(config)
        from actimets.rfm import eval_mean

        x = cohort.truth.t**0.25
        means = eval_mean(x, config.curves, config.linear)
        y = np.stack([panel.model_values() for panel in cohort.panels])
        centered = y - means
        sample_cov = np.cov(centered.T)
        weights = config.mixture_weights
        intercepts = config.mixture_intercepts
        gamma0 = config.gamma0()
        expected = np.zeros((7, 7))
        for h in range(2):
            dev = intercepts[h] - gamma0
            expected += weights[h] * (config.mixture_covariances[h] + np.outer(dev, dev))
        assert np.all(np.abs(sample_cov - expected) < 0.12 * np.outer(
            np.sqrt(np.diag(expected)), np.sqrt(np.diag(expected))
        ))
        assert_allclose(centered.mean(axis=0), gamma0, rtol=0.02)
