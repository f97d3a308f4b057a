"""Tests for the two-part activity measurement model."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import stats
from scipy.special import expit

from actimets.errors import DataError, DiagnosticError
from actimets.ingest import Participant
from actimets.mem import (
    MemData,
    MemModel,
    MemParams,
    MemSettings,
    RandomEffects,
    ar1_covariance,
    build_mem_data,
    mem_log_posterior,
    posterior_of_t,
    sample_mem,
    usual_mvpa,
)
from actimets.preprocess import AdjustedActivity, VarianceFunction
from actimets.statskernel import make_rng


def random_mem_data(rng, n=12):
    """Random cohort with mixed participation patterns, both age classes."""
    z = np.column_stack([np.ones(n), rng.normal(0.0, 0.5, (n, 7))])
    participation = (rng.random((n, 7)) < 0.65).astype(np.int8)
    # Keep one all-positive and one all-zero pattern in the mix.
    participation[0] = 1
    if n > 1:
        participation[1] = 0
    amounts = np.where(participation, rng.uniform(0.5, 3.5, (n, 7)), 0.0)
    return MemData(
        participant_ids=tuple(f"p{k:03d}" for k in range(n)),
        z=z,
        participation=participation,
        amounts=amounts,
        xi_sq=rng.uniform(0.2, 0.9, n),
        age_group=(rng.random(n) < 0.4).astype(np.int8),
    )


def simple_params(rng=None, phi=(0.2, 0.4)):
    rng = rng or make_rng(5)
    return MemParams(
        alpha=rng.normal(0.0, 0.3, 8),
        beta=np.array([2.0, *rng.normal(0.0, 0.2, 7)]),
        phi=np.asarray(phi, dtype=float),
        sigma_b=np.array([0.6, 0.3]),
        rho_b=0.25,
    )


class TestAr1Covariance:
    def test_gap_pattern(self):
        cov = ar1_covariance(1.0, 0.5, np.array([1, 2, 5]))
        expected = np.array(
            [
                [1.0, 0.5, 0.0625],
                [0.5, 1.0, 0.125],
                [0.0625, 0.125, 1.0],
            ]
        )
        assert_allclose(cov, expected)

    def test_zero_phi_is_diagonal(self):
        cov = ar1_covariance(2.5, 0.0, np.array([0, 3, 4, 6]))
        assert_allclose(cov, 2.5 * np.eye(4))

    def test_single_day(self):
        assert_allclose(ar1_covariance(0.7, -0.3, np.array([4])), [[0.7]])

    def test_rejects_bad_inputs(self):
        with pytest.raises(DataError):
            ar1_covariance(1.0, 1.0, np.array([1, 2]))
        with pytest.raises(DataError):
            ar1_covariance(0.0, 0.5, np.array([1, 2]))
        with pytest.raises(DataError):
            ar1_covariance(1.0, 0.5, np.array([2, 2]))

    @given(
        phi=st.floats(-0.99, 0.99),
        xi_sq=st.floats(0.01, 10.0),
        pattern=st.lists(st.booleans(), min_size=7, max_size=7).filter(any),
    )
    @settings(max_examples=60, deadline=None)
    def test_always_choleskyable(self, phi, xi_sq, pattern):
        days = np.flatnonzero(pattern)
        cov = ar1_covariance(xi_sq, phi, days)
        np.linalg.cholesky(cov)  # raises if not positive definite


class TestAmountLoglik:
    def test_matches_dense_multivariate_normal(self):
        rng = make_rng(11)
        for _ in range(15):
            data = random_mem_data(rng)
            model = MemModel(data)
            phi = rng.uniform(-0.9, 0.9, 2)
            mu = rng.normal(1.8, 0.5, data.n)
            got = model.amount_loglik(mu, phi)
            for i in range(data.n):
                days = np.flatnonzero(data.participation[i])
                if days.size == 0:
                    expected = 0.0
                else:
                    cov = ar1_covariance(data.xi_sq[i], phi[data.age_group[i]], days)
                    expected = stats.multivariate_normal.logpdf(
                        data.amounts[i, days], mean=np.full(days.size, mu[i]), cov=cov
                    )
                assert_allclose(got[i], expected, rtol=1e-10, atol=1e-12)

    def test_class_split_sums_to_total(self):
        rng = make_rng(12)
        data = random_mem_data(rng, n=20)
        model = MemModel(data)
        phi = np.array([0.3, -0.5])
        mu = rng.normal(2.0, 0.4, data.n)
        total = model.amount_loglik(mu, phi).sum()
        split = model.amount_loglik_class(mu, phi[0], 0) + model.amount_loglik_class(
            mu, phi[1], 1
        )
        assert_allclose(split, total, rtol=1e-12)

    def test_participation_loglik_binomial(self):
        rng = make_rng(13)
        data = random_mem_data(rng, n=8)
        model = MemModel(data)
        alpha = rng.normal(0.0, 0.3, 8)
        b1 = rng.normal(0.0, 0.5, 8)
        got = model.participation_loglik(alpha, b1)
        eta = data.z @ alpha + b1
        p = expit(eta)
        for i in range(8):
            expected = sum(
                stats.bernoulli.logpmf(data.participation[i, j], p[i]) for j in range(7)
            )
            assert_allclose(got[i], expected, rtol=1e-10)


class TestBetaFullConditional:
    def test_matches_dense_weighted_least_squares(self):
        rng = make_rng(21)
        data = random_mem_data(rng, n=15)
        model = MemModel(data)
        phi = np.array([0.45, -0.2])
        b2 = rng.normal(0.0, 0.3, data.n)
        mean, chol = model.beta_full_conditional(b2, phi)

        precision = np.eye(8) / 1000.0
        rhs = np.zeros(8)
        for i in range(data.n):
            days = np.flatnonzero(data.participation[i])
            if days.size == 0:
                continue
            cov = ar1_covariance(data.xi_sq[i], phi[data.age_group[i]], days)
            cov_inv = np.linalg.inv(cov)
            ones = np.ones(days.size)
            scale = ones @ cov_inv @ ones
            shift = ones @ cov_inv @ (data.amounts[i, days] - b2[i])
            precision += scale * np.outer(data.z[i], data.z[i])
            rhs += shift * data.z[i]
        assert_allclose(chol @ chol.T, precision, rtol=1e-9)
        assert_allclose(mean, np.linalg.solve(precision, rhs), rtol=1e-9)


class TestMemLogPosterior:
    def test_single_participant_closed_form(self):
        z = np.array([[1.0, 0.5, 1.0, 2.7, 0.0, 1.0, 0.0, 0.0]])
        participation = np.array([[1, 0, 1, 0, 0, 0, 1]], dtype=np.int8)
        amounts = np.array([[1.9, 0, 2.4, 0, 0, 0, 1.6]])
        data = MemData(
            participant_ids=("p1",),
            z=z,
            participation=participation,
            amounts=amounts,
            xi_sq=np.array([0.5]),
            age_group=np.array([1], dtype=np.int8),
        )
        params = MemParams(
            alpha=np.array([0.4, -0.8, 0.2, -0.1, 0.0, 0.3, 0.0, 0.1]),
            beta=np.array([2.1, -0.5, 0.1, -0.05, 0.0, 0.2, 0.0, 0.0]),
            phi=np.array([0.2, 0.4]),
            sigma_b=np.array([0.6, 0.3]),
            rho_b=0.25,
        )
        effects = RandomEffects(b1=np.array([0.3]), b2=np.array([-0.1]))

        scale = math.sqrt(1000.0)
        eta = float(z[0] @ params.alpha) + 0.3
        mu = float(z[0] @ params.beta) - 0.1
        cov = 0.5 * 0.4 ** np.abs(np.subtract.outer([0, 2, 6], [0, 2, 6]))
        expected = (
            stats.norm.logpdf(params.alpha, 0, scale).sum()
            + stats.norm.logpdf(params.beta, 0, scale).sum()
            + 2 * math.log(0.5)
            + stats.halfcauchy.logpdf(0.6)
            + stats.halfcauchy.logpdf(0.3)
            + math.log(0.5)
            + 3 * eta
            - 7 * np.logaddexp(0, eta)
            + stats.multivariate_normal.logpdf([1.9, 2.4, 1.6], np.full(3, mu), cov)
            + stats.multivariate_normal.logpdf(
                [0.3, -0.1], np.zeros(2), params.sigma_b_matrix()
            )
        )
        assert_allclose(mem_log_posterior(params, effects, data), expected, rtol=1e-12)

    def test_participant_order_invariance(self):
        rng = make_rng(31)
        data = random_mem_data(rng, n=10)
        params = simple_params(rng)
        effects = RandomEffects(b1=rng.normal(0, 0.4, 10), b2=rng.normal(0, 0.3, 10))
        base = mem_log_posterior(params, effects, data)
        perm = rng.permutation(10)
        shuffled = MemData(
            participant_ids=tuple(data.participant_ids[k] for k in perm),
            z=data.z[perm],
            participation=data.participation[perm],
            amounts=data.amounts[perm],
            xi_sq=data.xi_sq[perm],
            age_group=data.age_group[perm],
        )
        shuffled_effects = RandomEffects(b1=effects.b1[perm], b2=effects.b2[perm])
        assert_allclose(mem_log_posterior(params, shuffled_effects, shuffled), base, rtol=1e-12)

    def test_out_of_support_is_minus_inf(self):
        rng = make_rng(32)
        data = random_mem_data(rng, n=4)
        params = simple_params(rng)
        effects = RandomEffects(b1=np.zeros(4), b2=np.zeros(4))
        object.__setattr__(params, "phi", np.array([1.5, 0.2]))
        assert mem_log_posterior(params, effects, data) == -np.inf


class TestUsualMvpa:
    def test_no_noise_example(self):
        params = MemParams(
            alpha=np.zeros(8),
            beta=np.array([2.0, 0, 0, 0, 0, 0, 0, 0.0]),
            phi=np.array([0.0, 0.0]),
            sigma_b=np.array([1.0, 1.0]),
            rho_b=0.0,
        )
        effects = RandomEffects(b1=np.array([0.0]), b2=np.array([0.0]))
        z = np.array([[1.0, 0, 0, 0, 0, 0, 0, 0]])
        # pi = 1/2 and the amount term is 2^4 = 16.
        assert_allclose(usual_mvpa(params, effects, z, np.array([1e-300])), [8.0])

    def test_taylor_value_and_bias(self):
        params = MemParams(
            alpha=np.zeros(8),
            beta=np.array([1.0, 0, 0, 0, 0, 0, 0, 0.0]),
            phi=np.array([0.0, 0.0]),
            sigma_b=np.array([1.0, 1.0]),
            rho_b=0.0,
        )
        effects = RandomEffects(b1=np.array([800.0]), b2=np.array([0.0]))
        z = np.array([[1.0, 0, 0, 0, 0, 0, 0, 0]])
        xi_sq = np.array([0.25])
        approx = usual_mvpa(params, effects, z, xi_sq)
        assert_allclose(approx, [2.5])
        exact = 1.0 + 6 * 0.25 + 3 * 0.25**2
        assert_allclose(exact - approx[0], 3 * 0.25**2)
        assert_allclose(exact, 2.6875)

    def test_monotone_in_participation_effect(self):
        rng = make_rng(41)
        params = simple_params(rng)
        z = np.column_stack([np.ones(5), rng.normal(0, 0.3, (5, 7))])
        xi = np.full(5, 0.3)
        b2 = rng.normal(0, 0.2, 5)
        lo = usual_mvpa(params, RandomEffects(b1=np.full(5, -0.5), b2=b2), z, xi)
        hi = usual_mvpa(params, RandomEffects(b1=np.full(5, 0.5), b2=b2), z, xi)
        assert np.all(hi > lo)

    @given(
        mu=st.floats(0.1, 4.0),
        bump=st.floats(0.01, 1.0),
        xi_sq=st.floats(0.0, 2.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_positive_mean(self, mu, bump, xi_sq):
        params = MemParams(
            alpha=np.zeros(8),
            beta=np.zeros(8),
            phi=np.array([0.0, 0.0]),
            sigma_b=np.array([1.0, 1.0]),
            rho_b=0.0,
        )
        z = np.zeros((1, 8))
        lo = usual_mvpa(params, RandomEffects(b1=[0.0], b2=[mu]), z, xi_sq)
        hi = usual_mvpa(params, RandomEffects(b1=[0.0], b2=[mu + bump]), z, xi_sq)
        assert hi[0] > lo[0]


class TestBuildMemData:
    def make_inputs(self):
        participants = [
            Participant("a1", age=70.0, sex="male", race="white", education="hs_diploma", bmi=26.0),
            Participant("a2", age=40.0, sex="female", race="black", education="some_college", bmi=31.0),
        ]
        adjusted = []
        for pid, base in (("a1", 1.5), ("a2", 0.0)):
            for d in range(1, 8):
                w1 = (base + 0.1 * d) ** 4 if base > 0 or d % 2 else 0.0
                adjusted.append(
                    AdjustedActivity(participant_id=pid, day_index=d, w1=w1, w=w1**0.25)
                )
        vf = VarianceFunction(delta=np.array([0.4, 0.0, 0.0, 0.0]))
        return adjusted, participants, vf

    def test_basic_assembly(self):
        adjusted, participants, vf = self.make_inputs()
        data = build_mem_data(adjusted, participants, vf, ["a2", "a1"])
        assert data.participant_ids == ("a1", "a2")
        assert data.age_group.tolist() == [1, 0]
        assert_allclose(data.xi_sq, [0.4, 0.4])
        assert data.participation[0].sum() == 7
        assert data.participation[1].tolist() == [1, 0, 1, 0, 1, 0, 1]
        # Row order follows the sorted ids and the design uses the default encoding.
        assert_allclose(data.z[0][:4], [1.0, 0.70, 0.0, 2.6])
        assert_allclose(data.z[1][:4], [1.0, 0.40, 1.0, 3.1])

    def test_missing_day_rejected(self):
        adjusted, participants, vf = self.make_inputs()
        with pytest.raises(DataError, match="lacks all 7"):
            build_mem_data(adjusted[:-1], participants, vf, ["a1", "a2"])

    def test_duplicate_day_rejected(self):
        adjusted, participants, vf = self.make_inputs()
        adjusted.append(AdjustedActivity(participant_id="a1", day_index=3, w1=1.0, w=1.0))
        with pytest.raises(DataError, match="duplicate"):
            build_mem_data(adjusted, participants, vf, ["a1", "a2"])

    def test_missing_demographics_rejected(self):
        adjusted, participants, vf = self.make_inputs()
        with pytest.raises(DataError, match="missing demographics"):
            build_mem_data(adjusted, participants[:1], vf, ["a1", "a2"])


class TestSampler:
    def small_cohort(self, n=50, seed=3):
        from actimets.simgen import SimConfig, simulate_cohort

        cohort = simulate_cohort(SimConfig(n=n, seed=seed))
        return build_mem_data(
            cohort.adjusted,
            cohort.participants,
            cohort.variance_function,
            cohort.participant_ids,
        ), cohort

    def test_smoke_shapes_and_determinism(self):
        data, _ = self.small_cohort()
        settings_ = MemSettings(
            chains=2, iterations=120, burn_in=60, seed=9, enforce_rhat=False
        )
        post = sample_mem(data, settings_)
        assert post.alpha.shape == (2, 60, 8)
        assert post.beta.shape == (2, 60, 8)
        assert post.phi.shape == (2, 60, 2)
        assert post.t.shape == (2, 60, data.n)
        assert np.all(post.t >= 0)
        assert np.all(np.isfinite(post.parameter_matrix()))
        assert np.all(np.abs(post.phi) < 1)
        assert np.all(post.sigma_b > 0)
        for rate in post.acceptance.values():
            assert 0.0 <= rate <= 1.0
        pool = posterior_of_t(post)
        assert pool.shape == (120, data.n)

        again = sample_mem(data, settings_)
        assert_allclose(again.t, post.t)
        other = sample_mem(data, MemSettings(chains=2, iterations=120, burn_in=60, seed=10, enforce_rhat=False))
        assert not np.allclose(other.alpha, post.alpha)

    def test_unconverged_run_raises(self):
        data, _ = self.small_cohort(n=30, seed=4)
        settings_ = MemSettings(chains=2, iterations=40, burn_in=15, seed=1)
        with pytest.raises(DiagnosticError, match="split Rhat above"):
            sample_mem(data, settings_)

    def test_recovers_truth_loosely(self):
        data, cohort = self.small_cohort(n=300, seed=8)
        settings_ = MemSettings(
            chains=2, iterations=900, burn_in=450, seed=2, enforce_rhat=False
        )
        post = sample_mem(data, settings_)
        truth = cohort.config.mem
        alpha_mean = post.pooled("alpha").mean(axis=0)
        beta_mean = post.pooled("beta").mean(axis=0)
        assert abs(alpha_mean[0] - truth.alpha[0]) < 0.8
        assert abs(beta_mean[0] - truth.beta[0]) < 0.3
        phi_mean = post.pooled("phi").mean(axis=0)
        assert np.all(np.abs(phi_mean - truth.phi) < 0.3)
        # Seven days per person cap how well any estimator can rank the
        # latent usual activity; the Bayes-optimal oracle below sits near
        # 0.76 correlation with truth at this design, so only a loose
        # floor is asserted here.
        t_mean = posterior_of_t(post).mean(axis=0)
        corr = np.corrcoef(t_mean, cohort.truth.t)[0, 1]
        assert corr > 0.6

    def test_t_matches_grid_integration_oracle(self):
        # With the population parameters fixed at truth, the per-person
        # posterior of (b1, b2) is two-dimensional and integrable on a
        # grid.  The sampler's usual-activity means (which also average
        # over parameter uncertainty) should track that oracle closely.
        data, cohort = self.small_cohort(n=80, seed=14)
        truth = cohort.config.mem
        sig = truth.sigma_b_matrix()
        g1 = np.linspace(-3.5 * truth.sigma_b[0], 3.5 * truth.sigma_b[0], 61)
        g2 = np.linspace(-3.5 * truth.sigma_b[1], 3.5 * truth.sigma_b[1], 61)
        grid1, grid2 = np.meshgrid(g1, g2, indexing="ij")
        prior = stats.multivariate_normal(np.zeros(2), sig).pdf(np.dstack([grid1, grid2]))
        oracle = np.zeros(data.n)
        for i in range(data.n):
            zi = data.z[i]
            k = data.participation[i].sum()
            pi_grid = expit(zi @ truth.alpha + grid1)
            like = pi_grid**k * (1 - pi_grid) ** (7 - k)
            days = np.flatnonzero(data.participation[i])
            if days.size:
                cov = ar1_covariance(data.xi_sq[i], truth.phi[data.age_group[i]], days)
                cov_inv = np.linalg.inv(cov)
                resid = data.amounts[i, days][None, None, :] - (zi @ truth.beta + grid2)[..., None]
                quad = np.einsum("...i,ij,...j->...", resid, cov_inv, resid)
                like = like * np.exp(-0.5 * quad)
            post_grid = like * prior
            post_grid /= post_grid.sum()
            mu = zi @ truth.beta + grid2
            t_grid = pi_grid * (mu**4 + 6 * data.xi_sq[i] * mu**2)
            oracle[i] = (post_grid * t_grid).sum()

        post = sample_mem(
            data,
            MemSettings(chains=2, iterations=1200, burn_in=600, seed=2, enforce_rhat=False),
        )
        t_mean = posterior_of_t(post).mean(axis=0)
        corr = np.corrcoef(t_mean, oracle)[0, 1]
        assert corr > 0.96
        assert np.abs(t_mean - oracle).mean() < 0.25 * oracle.mean()
