"""Two-part measurement error model for repeated daily activity.

Participation indicators are Bernoulli with a per-person logistic
probability; the positive fourth-root amounts are jointly Gaussian with a
person-level intercept shift and within-person correlation decaying as
phi^lag over the gap between positive days; the two person effects
(b1, b2) are bivariate normal.  The measurement error variance xi^2(age)
is a frozen plug-in from preprocessing and is never resampled.

The sampler is blocked Metropolis-within-Gibbs: an adaptive 8-d walk for
the participation coefficients, an exact conjugate draw for the amount
coefficients, scalar walks for the two lag-one correlations, a 3-d walk
for the random-effect scales and correlation, and a vectorized joint 2-d
walk per participant for (b1, b2).  The amount likelihood uses the Markov
factorization of the lag-decaying covariance (each positive day conditions
only on the previous positive day), so a full evaluation is a handful of
vector operations regardless of cohort size.

Usual activity per draw follows the fourth-moment approximation
t_i = pi_i * (mu_i^4 + 6 xi_i^2 mu_i^2); the omitted 3 xi^4 term is the
documented approximation bias (see `usual_mvpa`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError, DiagnosticError
from .statskernel import (
    LOG_2PI,
    AdaptSettings,
    ChainState,
    adaptive_rw_metropolis,
    chain_rngs,
    gelman_rubin,
    half_cauchy_logpdf,
    normal_logpdf,
    ols,
)

__all__ = [
    "AGE_GROUP_CUTOFF",
    "MemData",
    "MemModel",
    "MemParams",
    "MemPosterior",
    "MemSettings",
    "RandomEffects",
    "ar1_covariance",
    "build_mem_data",
    "mem_log_posterior",
    "posterior_of_t",
    "sample_mem",
    "usual_mvpa",
]

AGE_GROUP_CUTOFF = 65.0
N_DAYS = 7
COEF_PRIOR_VAR = 1000.0


@dataclass(frozen=True)
class MemParams:
    """Population-level parameters.

    Attributes
    ----------
    alpha : ndarray, shape (8,)
        Participation logit coefficients.
    beta : ndarray, shape (8,)
        Positive-amount mean coefficients (fourth-root scale).
    phi : ndarray, shape (2,)
        Lag-one correlations, one per age class (under 65, 65 and over).
    sigma_b : ndarray, shape (2,)
        Random-effect standard deviations.
    rho_b : float
        Random-effect correlation.
    """

    alpha: np.ndarray
    beta: np.ndarray
    phi: np.ndarray
    sigma_b: np.ndarray
    rho_b: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))
        object.__setattr__(self, "sigma_b", np.asarray(self.sigma_b, dtype=float))
        if np.any(np.abs(self.phi) >= 1):
            raise DataError(f"lag-one correlations must lie in (-1, 1), got {self.phi}")
        if np.any(self.sigma_b <= 0) or abs(self.rho_b) >= 1:
            raise DataError("random-effect covariance is not positive definite")

    def sigma_b_matrix(self):
        s1, s2 = self.sigma_b
        off = self.rho_b * s1 * s2
        return np.array([[s1 * s1, off], [off, s2 * s2]])


@dataclass(frozen=True)
class RandomEffects:
    """Per-participant effects: b1 shifts participation, b2 shifts amount."""

    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b1", np.asarray(self.b1, dtype=float))
        object.__setattr__(self, "b2", np.asarray(self.b2, dtype=float))
        if self.b1.shape != self.b2.shape:
            raise DataError("b1 and b2 must align")
        if not (np.all(np.isfinite(self.b1)) and np.all(np.isfinite(self.b2))):
            raise DataError("random effects must be finite")


@dataclass(frozen=True)
class MemData:
    """Model-ready arrays for the activity cohort.

    ``participation`` marks positive days; ``amounts`` holds the fourth-root
    amounts with zeros on nonparticipation days; ``xi_sq`` is the plug-in
    measurement error variance per participant.
    """

    participant_ids: tuple
    z: np.ndarray
    participation: np.ndarray
    amounts: np.ndarray
    xi_sq: np.ndarray
    age_group: np.ndarray
    z_names: tuple = (
        "intercept",
        "age",
        "female",
        "bmi",
        "race_other_hispanic",
        "race_white",
        "race_black",
        "race_other",
    )

    def __post_init__(self):
        n = len(self.participant_ids)
        if self.z.shape != (n, 8):
            raise DataError(f"design must be (n, 8), got {self.z.shape}")
        for name, arr, shape in (
            ("participation", self.participation, (n, N_DAYS)),
            ("amounts", self.amounts, (n, N_DAYS)),
            ("xi_sq", self.xi_sq, (n,)),
            ("age_group", self.age_group, (n,)),
        ):
            if arr.shape != shape:
                raise DataError(f"{name} must have shape {shape}, got {arr.shape}")
        if np.any(self.xi_sq <= 0):
            raise DataError("xi_sq must be positive")
        if np.any((self.amounts > 0) != (self.participation > 0)):
            raise DataError("amounts must be positive exactly on participation days")
        if len(self.z_names) != 8:
            raise DataError("z_names must label the 8 design columns")

    @property
    def n(self):
        return len(self.participant_ids)


def build_mem_data(adjusted, participants, variance_function, cohort_ids, z_builder=None):
    """Assemble `MemData` for the given cohort ids.

    Parameters
    ----------
    adjusted : list of AdjustedActivity
        Weekend-adjusted days; each cohort member needs all seven.
    participants : list of Participant
    variance_function : VarianceFunction
        Frozen plug-in evaluated at each participant's age.
    cohort_ids : iterable of str
        Typically `Cohorts.mem_ids`.
    z_builder : callable, optional
        Custom covariate builder forwarded to `design_matrix`.
    """
    from .ingest import design_matrix

    ids = tuple(sorted(cohort_ids))
    index = {pid: k for k, pid in enumerate(ids)}
    by_pid = {pid: {} for pid in ids}
    for a in adjusted:
        if a.participant_id in by_pid:
            if a.day_index in by_pid[a.participant_id]:
                raise DataError(f"duplicate adjusted day {a.day_index} for {a.participant_id}")
            by_pid[a.participant_id][a.day_index] = a.w
    amounts = np.zeros((len(ids), N_DAYS))
    for pid, days in by_pid.items():
        if sorted(days) != list(range(1, N_DAYS + 1)):
            raise DataError(f"cohort member {pid} lacks all {N_DAYS} adjusted days")
        amounts[index[pid]] = [days[d] for d in range(1, N_DAYS + 1)]
    by_participant = {p.participant_id: p for p in participants}
    missing = [pid for pid in ids if pid not in by_participant]
    if missing:
        raise DataError(f"missing demographics for cohort members: {missing[:5]}")
    cohort = [by_participant[pid] for pid in ids]
    kwargs = {} if z_builder is None else {"builder": z_builder}
    z = design_matrix(cohort, **kwargs)
    ages = np.array([p.age for p in cohort])
    return MemData(
        participant_ids=ids,
        z=z,
        participation=(amounts > 0).astype(np.int8),
        amounts=amounts,
        xi_sq=np.asarray(variance_function(ages), dtype=float),
        age_group=(ages >= AGE_GROUP_CUTOFF).astype(np.int8),
    )


def ar1_covariance(xi_sq, phi, observed_days):
    """Dense covariance of one participant's positive-day amounts.

    Entry (k, l) is ``xi_sq * phi ** |c_k - c_l|`` for the strictly
    increasing positive-day indices ``c``.
    """
    if not -1 < phi < 1:
        raise DataError(f"phi must lie in (-1, 1), got {phi}")
    if xi_sq <= 0:
        raise DataError(f"xi_sq must be positive, got {xi_sq}")
    days = np.asarray(observed_days, dtype=float)
    if days.ndim != 1:
        raise DataError("observed_days must be a 1-d index set")
    if days.size and np.any(np.diff(days) <= 0):
        raise DataError(f"observed_days must be strictly increasing, got {observed_days}")
    lags = np.abs(days[:, None] - days[None, :])
    return xi_sq * phi**lags


class MemModel:
    """Vectorized likelihood machinery over a fixed `MemData`.

    Positive observations are flattened into parallel arrays with a pointer
    to each observation's predecessor within its participant, so both the
    amount likelihood and the conjugate update for the amount coefficients
    reduce to elementwise work plus `bincount`.
    """

    def __init__(self, data):
        self.data = data
        n = data.n
        self.k_pos = data.participation.sum(axis=1).astype(float)
        rows, cols = np.nonzero(data.participation)
        # rows is sorted by participant, columns ascending within each: the
        # natural order of np.nonzero on a 2-d array.
        self.obs_i = rows
        self.obs_day = cols.astype(np.int64)
        self.obs_w = data.amounts[rows, cols]
        first = np.r_[True, rows[1:] != rows[:-1]] if rows.size else np.array([], dtype=bool)
        self.obs_first = first
        prev = np.arange(rows.size) - 1
        prev[first] = np.flatnonzero(first)  # self-pointer; masked out of the formulas
        self.obs_prev = prev
        gaps = np.zeros(rows.size, dtype=np.int64)
        if rows.size:
            gaps[~first] = self.obs_day[~first] - self.obs_day[prev[~first]]
        self.obs_gap = gaps
        self.obs_xi = data.xi_sq[rows]
        self.obs_age = data.age_group[rows]
        self.class_obs = [np.flatnonzero(self.obs_age == g) for g in (0, 1)]

    def participation_loglik(self, alpha, b1):
        """Per-participant Bernoulli log likelihood of the positive-day counts."""
        eta = self.data.z @ alpha + b1
        return self.k_pos * eta - N_DAYS * np.logaddexp(0.0, eta)

    def _innovations(self, mu, phi_pair, idx=None):
        resid = self.obs_w - mu[self.obs_i]
        if idx is None:
            first, gap, xi = self.obs_first, self.obs_gap, self.obs_xi
            phi_obs = np.asarray(phi_pair)[self.obs_age]
            prev_resid = resid[self.obs_prev]
        else:
            first, gap, xi = self.obs_first[idx], self.obs_gap[idx], self.obs_xi[idx]
            phi_obs = np.asarray(phi_pair)[self.obs_age[idx]]
            prev_resid = resid[self.obs_prev[idx]]
            resid = resid[idx]
        decay = np.where(first, 0.0, phi_obs**gap)
        e = resid - decay * prev_resid
        v = xi * np.where(first, 1.0, 1.0 - decay**2)
        return e, v

    def amount_loglik(self, mu, phi_pair):
        """Per-participant Gaussian log likelihood of the positive amounts.

        ``mu`` is the per-person mean ``z @ beta + b2``.  Uses the Markov
        factorization: each positive day conditions on the previous one
        with mean decayed by phi^gap and variance xi^2 (1 - phi^(2 gap)).
        """
        e, v = self._innovations(mu, phi_pair)
        ll = -0.5 * (LOG_2PI + np.log(v) + e * e / v)
        return np.bincount(self.obs_i, weights=ll, minlength=self.data.n)

    def amount_loglik_class(self, mu, phi_g, age_class):
        """Summed amount log likelihood of one age class at correlation phi_g."""
        idx = self.class_obs[age_class]
        pair = np.array([phi_g, phi_g])
        e, v = self._innovations(mu, pair, idx=idx)
        return float(np.sum(-0.5 * (LOG_2PI + np.log(v) + e * e / v)))

    def effects_prior_loglik(self, b1, b2, sigma_b, rho):
        """Per-participant bivariate normal log density of (b1, b2)."""
        s1, s2 = sigma_b
        c = 1.0 - rho * rho
        z1 = b1 / s1
        z2 = b2 / s2
        quad = (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / c
        return -math.log(2.0 * math.pi * s1 * s2) - 0.5 * math.log(c) - 0.5 * quad

    def beta_full_conditional(self, b2, phi_pair):
        """Precision Cholesky and mean of the amount-coefficient conditional.

        The Markov factorization makes each innovation linear in the person
        mean: e_k = u_k - mu_i a_k with a_k = 1 - phi^gap, so the
        conditional is a weighted least-squares update.
        """
        w_shift = self.obs_w - b2[self.obs_i]
        phi_obs = np.asarray(phi_pair)[self.obs_age]
        decay = np.where(self.obs_first, 0.0, phi_obs**self.obs_gap)
        a = 1.0 - decay
        u = w_shift - decay * w_shift[self.obs_prev]
        v = self.obs_xi * np.where(self.obs_first, 1.0, 1.0 - decay**2)
        s_person = np.bincount(self.obs_i, weights=a * a / v, minlength=self.data.n)
        c_person = np.bincount(self.obs_i, weights=a * u / v, minlength=self.data.n)
        precision = self.data.z.T @ (self.data.z * s_person[:, None]) + np.eye(8) / COEF_PRIOR_VAR
        rhs = self.data.z.T @ c_person
        chol = np.linalg.cholesky(precision)
        tmp = np.linalg.solve(chol, rhs)
        mean = np.linalg.solve(chol.T, tmp)
        return mean, chol


def _param_prior_loglik(params):
    lp = float(np.sum(normal_logpdf(params.alpha, 0.0, math.sqrt(COEF_PRIOR_VAR))))
    lp += float(np.sum(normal_logpdf(params.beta, 0.0, math.sqrt(COEF_PRIOR_VAR))))
    if np.any(np.abs(params.phi) >= 1):
        return -np.inf
    lp += 2.0 * math.log(0.5)  # uniform(-1, 1) per age class
    lp += float(half_cauchy_logpdf(params.sigma_b[0]))
    lp += float(half_cauchy_logpdf(params.sigma_b[1]))
    if abs(params.rho_b) >= 1:
        return -np.inf
    lp += math.log(0.5)  # LKJ(1) in two dimensions is uniform on the correlation
    return lp


def mem_log_posterior(params, effects, data):
    """Joint log posterior of parameters and effects given the data.

    Sums the participation and amount likelihoods, the bivariate normal
    density of the random effects, and the parameter priors (wide normals
    for the coefficient vectors, uniform lag-one correlations, half-Cauchy
    scales, uniform effect correlation).
    """
    lp = _param_prior_loglik(params)
    if not np.isfinite(lp):
        return lp
    model = MemModel(data)
    mu = data.z @ params.beta + effects.b2
    lp += float(np.sum(model.participation_loglik(params.alpha, effects.b1)))
    lp += float(np.sum(model.amount_loglik(mu, params.phi)))
    lp += float(
        np.sum(model.effects_prior_loglik(effects.b1, effects.b2, params.sigma_b, params.rho_b))
    )
    return lp


def usual_mvpa(params, effects, z, xi_sq):
    """Usual daily activity under the fourth-moment approximation.

    t = expit(z alpha + b1) * (mu^4 + 6 xi^2 mu^2) with mu = z beta + b2.
    Relative to the exact Gaussian fourth moment this omits 3 xi^4, so the
    estimator sits below the exact value by pi * 3 xi^4.

    Parameters
    ----------
    params : MemParams
    effects : RandomEffects
    z : ndarray, shape (n, 8) or (8,)
    xi_sq : ndarray or float

    Returns
    -------
    ndarray or float
        Nonnegative usual minutes per day.
    """
    z = np.asarray(z, dtype=float)
    pi = expit(z @ params.alpha + effects.b1)
    mu = z @ params.beta + effects.b2
    amount = mu**4 + 6.0 * np.asarray(xi_sq) * mu**2
    return pi * np.maximum(amount, 0.0)


@dataclass(frozen=True)
class MemSettings:
    """Sampler settings; defaults follow the population-scale run shape."""

    chains: int = 8
    iterations: int = 2000
    burn_in: int = 1000
    seed: int = 0
    rhat_threshold: float = 1.1
    enforce_rhat: bool = True
    keep_effects: bool = True
    refresh_every: int = 500

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise DataError("burn_in must be smaller than iterations")
        if self.chains < 1:
            raise DataError("need at least one chain")


@dataclass
class MemPosterior:
    """Retained draws, per-draw usual activity, and diagnostics."""

    participant_ids: tuple
    parameter_names: tuple
    alpha: np.ndarray
    beta: np.ndarray
    phi: np.ndarray
    sigma_b: np.ndarray
    rho_b: np.ndarray
    t: np.ndarray
    b1: np.ndarray | None
    b2: np.ndarray | None
    rhat: np.ndarray
    acceptance: dict
    seed: int

    @property
    def n_chains(self):
        return self.alpha.shape[0]

    @property
    def n_kept(self):
        return self.alpha.shape[1]

    def parameter_matrix(self):
        """Stack the population parameters as (chains, kept, 21)."""
        return np.concatenate(
            [
                self.alpha,
                self.beta,
                self.phi,
                self.sigma_b,
                self.rho_b[..., None],
            ],
            axis=2,
        )

    def pooled(self, which):
        """Pool a draw array over chains: (chains, kept, ...) -> (chains*kept, ...)."""
        arr = getattr(self, which)
        return arr.reshape(-1, *arr.shape[2:])


def _chol2(sigma_b, rho):
    """Lower Cholesky factor of the 2x2 effects covariance."""
    s1, s2 = float(sigma_b[0]), float(sigma_b[1])
    return np.array([[s1, 0.0], [rho * s2, s2 * math.sqrt(1.0 - rho * rho)]])


def _initial_values(model, data, rng):
    rate = float(np.clip(model.k_pos.mean() / N_DAYS, 0.05, 0.95))
    alpha = np.zeros(8)
    alpha[0] = math.log(rate / (1.0 - rate))
    alpha += rng.normal(0.0, 0.1, 8)
    if model.obs_i.size >= 16:
        beta = ols(data.z[model.obs_i], model.obs_w)
    else:
        beta = np.zeros(8)
        beta[0] = float(model.obs_w.mean()) if model.obs_i.size else 1.0
    beta = beta + rng.normal(0.0, 0.1, 8)
    phi = np.clip(0.2 + rng.normal(0.0, 0.1, 2), -0.8, 0.8)
    sigma = np.abs(np.array([0.5, 0.3]) + rng.normal(0.0, 0.05, 2)) + 0.05
    rho = float(np.clip(rng.normal(0.0, 0.1), -0.8, 0.8))
    b = rng.normal(0.0, 0.1, (model.data.n, 2))
    return alpha, beta, phi, sigma, rho, b


def _run_chain(model, settings, rng):
    data = model.data
    n = data.n
    kept = settings.iterations - settings.burn_in
    alpha, beta, phi, sigma, rho, b = _initial_values(model, data, rng)

    adapt = AdaptSettings(
        burn_in=settings.burn_in, initial_scale=0.01, refresh_every=settings.refresh_every
    )

    def alpha_target(a):
        lp = float(np.sum(model.participation_loglik(a, b[:, 0])))
        return lp + float(np.sum(normal_logpdf(a, 0.0, math.sqrt(COEF_PRIOR_VAR))))

    def phi_target(g):
        def target(x):
            val = float(x[0])
            if not -1 < val < 1:
                return -np.inf
            mu = data.z @ beta + b[:, 1]
            return model.amount_loglik_class(mu, val, g) + math.log(0.5)

        return target

    def sigma_prior(s1, s2):
        return float(half_cauchy_logpdf(s1)) + float(half_cauchy_logpdf(s2)) + math.log(0.5)

    def sigma_target(v):
        s1, s2, r = float(v[0]), float(v[1]), float(v[2])
        if s1 <= 0 or s2 <= 0 or not -1 < r < 1:
            return -np.inf
        lp = float(np.sum(model.effects_prior_loglik(b[:, 0], b[:, 1], (s1, s2), r)))
        return lp + sigma_prior(s1, s2)

    # Whitened effects for the non-centered companion move; rewritten each
    # sweep before the move runs.
    u_white = np.zeros((2, n))

    def nc_target(v):
        s1, s2, r = float(v[0]), float(v[1]), float(v[2])
        if s1 <= 0 or s2 <= 0 or not -1 < r < 1:
            return -np.inf
        cand = (_chol2((s1, s2), r) @ u_white).T
        lp = float(np.sum(model.participation_loglik(alpha, cand[:, 0])))
        lp += float(np.sum(model.amount_loglik(data.z @ beta + cand[:, 1], phi)))
        return lp + sigma_prior(s1, s2)

    alpha_state = ChainState.initial(alpha, alpha_target, adapt)
    phi_states = [ChainState.initial(np.array([phi[g]]), phi_target(g), adapt) for g in (0, 1)]
    sigma_state = ChainState.initial(np.array([*sigma, rho]), sigma_target, adapt)
    nc_state = ChainState.initial(np.array([*sigma, rho]), sigma_target, adapt)

    zz = data.z.T @ data.z
    b_prop_chol = math.sqrt(0.01) * np.eye(2)
    b_mult = 1.0
    b_mean = np.zeros((n, 2))
    b_m2 = np.zeros((n, 2, 2))
    b_count = 0
    b_accept_total = 0.0
    b_window = []

    out = {
        "alpha": np.empty((kept, 8)),
        "beta": np.empty((kept, 8)),
        "phi": np.empty((kept, 2)),
        "sigma_b": np.empty((kept, 2)),
        "rho_b": np.empty(kept),
        "t": np.empty((kept, n)),
    }
    if settings.keep_effects:
        out["b1"] = np.empty((kept, n))
        out["b2"] = np.empty((kept, n))

    adapt_start = adapt.start_fraction * settings.burn_in
    for it in range(settings.iterations):
        # Participation coefficients: refresh the cached conditional first,
        # since b moved since the last step.
        alpha_state.logp = alpha_target(alpha_state.x)
        adaptive_rw_metropolis(alpha_target, alpha_state, adapt, rng)
        alpha = alpha_state.x

        # Interweave: redraw alpha with each participant's total
        # participation effect z_i alpha + b1_i held fixed.  The
        # likelihood is invariant, and conditional on b2 everything is
        # Gaussian in alpha, so the (alpha, mean of b1) ridge is crossed
        # in one exact draw.
        cond_var = float(sigma[0] ** 2 * (1.0 - rho * rho))
        cond_mean = rho * float(sigma[0] / sigma[1]) * b[:, 1]
        eta = data.z @ alpha + b[:, 0]
        prec = zz / cond_var + np.eye(8) / COEF_PRIOR_VAR
        prec_chol_a = np.linalg.cholesky(prec)
        mean_a = np.linalg.solve(prec, data.z.T @ (eta - cond_mean) / cond_var)
        alpha = mean_a + np.linalg.solve(prec_chol_a.T, rng.standard_normal(8))
        b[:, 0] = eta - data.z @ alpha
        alpha_state.x = alpha

        # Amount coefficients: exact conjugate draw.
        mean, prec_chol = model.beta_full_conditional(b[:, 1], phi)
        beta = mean + np.linalg.solve(prec_chol.T, rng.standard_normal(8))

        for g in (0, 1):
            target = phi_target(g)
            phi_states[g].logp = target(phi_states[g].x)
            adaptive_rw_metropolis(target, phi_states[g], adapt, rng)
            phi[g] = phi_states[g].x[0]

        sigma_state.logp = sigma_target(sigma_state.x)
        adaptive_rw_metropolis(sigma_target, sigma_state, adapt, rng)
        sigma = sigma_state.x[:2].copy()
        rho = float(sigma_state.x[2])

        # Non-centered companion move: rescale every effect together with
        # the covariance so the chain can cross the (sigma_b, b) funnel.
        # Holding the whitened effects fixed cancels the N(0, Sigma_b)
        # term against the Jacobian of b = L u, leaving only the data
        # log likelihood and the (sigma, rho) prior.
        u_white = np.linalg.solve(_chol2(sigma, rho), b.T)
        nc_state.x = np.array([*sigma, rho])
        nc_state.logp = nc_target(nc_state.x)
        if adaptive_rw_metropolis(nc_target, nc_state, adapt, rng):
            sigma = nc_state.x[:2].copy()
            rho = float(nc_state.x[2])
            b = (_chol2(sigma, rho) @ u_white).T
            sigma_state.x = nc_state.x.copy()

        # Joint per-participant walk on (b1, b2) with a shared proposal.
        prop = b + rng.standard_normal((n, 2)) @ b_prop_chol.T
        mu_cur = data.z @ beta + b[:, 1]
        mu_prop = data.z @ beta + prop[:, 1]
        delta = (
            model.participation_loglik(alpha, prop[:, 0])
            - model.participation_loglik(alpha, b[:, 0])
            + model.amount_loglik(mu_prop, phi)
            - model.amount_loglik(mu_cur, phi)
            + model.effects_prior_loglik(prop[:, 0], prop[:, 1], sigma, rho)
            - model.effects_prior_loglik(b[:, 0], b[:, 1], sigma, rho)
        )
        accept = np.log(rng.random(n)) < delta
        b[accept] = prop[accept]
        rate = float(accept.mean())
        b_accept_total += rate
        b_window.append(rate)

        if it < settings.burn_in:
            if it >= adapt_start:
                b_count += 1
                d0 = b - b_mean
                b_mean += d0 / b_count
                b_m2 += d0[:, :, None] * (b - b_mean)[:, None, :]
                if b_count > 10 and (it + 1) % settings.refresh_every == 0:
                    window_rate = float(np.mean(b_window[-settings.refresh_every :]))
                    if window_rate < 0.02:
                        b_mult *= 0.5
                    elif window_rate > 0.8:
                        b_mult *= 2.0
                    avg_cov = b_m2.mean(axis=0) / (b_count - 1)
                    cov = b_mult * (2.4**2 / 2.0) * avg_cov + 1e-9 * np.eye(2)
                    b_prop_chol = np.linalg.cholesky(cov)
        else:
            k = it - settings.burn_in
            out["alpha"][k] = alpha
            out["beta"][k] = beta
            out["phi"][k] = phi
            out["sigma_b"][k] = sigma
            out["rho_b"][k] = rho
            params = MemParams(alpha=alpha, beta=beta, phi=phi.copy(), sigma_b=sigma, rho_b=rho)
            effects = RandomEffects(b1=b[:, 0], b2=b[:, 1])
            out["t"][k] = usual_mvpa(params, effects, data.z, data.xi_sq)
            if settings.keep_effects:
                out["b1"][k] = b[:, 0]
                out["b2"][k] = b[:, 1]

    out["acceptance"] = {
        "alpha": alpha_state.acceptance_rate,
        "phi_under65": phi_states[0].acceptance_rate,
        "phi_65plus": phi_states[1].acceptance_rate,
        "sigma_b": sigma_state.acceptance_rate,
        "sigma_b_nc": nc_state.acceptance_rate,
        "effects": b_accept_total / settings.iterations,
    }
    return out


def _parameter_names(data):
    names = [f"alpha.{c}" for c in data.z_names]
    names += [f"beta.{c}" for c in data.z_names]
    names += ["phi.under65", "phi.65plus", "sigma_b1", "sigma_b2", "rho_b"]
    return tuple(names)


def sample_mem(data, settings=None):
    """Run the blocked sampler and gate the result on convergence.

    Parameters
    ----------
    data : MemData
    settings : MemSettings, optional

    Returns
    -------
    MemPosterior

    Raises
    ------
    DiagnosticError
        If the split potential scale reduction factor of any population
        parameter exceeds the threshold (single-chain runs split the one
        chain in half instead).
    """
    settings = settings or MemSettings()
    model = MemModel(data)
    chains = []
    for rng in chain_rngs(settings.seed, settings.chains):
        chains.append(_run_chain(model, settings, rng))

    def stack(key):
        return np.stack([c[key] for c in chains])

    posterior = MemPosterior(
        participant_ids=data.participant_ids,
        parameter_names=_parameter_names(data),
        alpha=stack("alpha"),
        beta=stack("beta"),
        phi=stack("phi"),
        sigma_b=stack("sigma_b"),
        rho_b=stack("rho_b"),
        t=stack("t"),
        b1=stack("b1") if settings.keep_effects else None,
        b2=stack("b2") if settings.keep_effects else None,
        rhat=np.array([]),
        acceptance={k: float(np.mean([c["acceptance"][k] for c in chains])) for k in chains[0]["acceptance"]},
        seed=settings.seed,
    )
    traces = posterior.parameter_matrix()
    if settings.chains == 1:
        half = traces.shape[1] // 2
        traces = np.stack([traces[0, :half], traces[0, half : 2 * half]])
    if traces.shape[1] >= 10:
        posterior.rhat = gelman_rubin(traces)
    else:
        posterior.rhat = np.full(len(posterior.parameter_names), np.nan)
    if settings.enforce_rhat and traces.shape[1] >= 10:
        bad = np.flatnonzero(posterior.rhat > settings.rhat_threshold)
        if bad.size:
            worst = ", ".join(
                f"{posterior.parameter_names[i]}={posterior.rhat[i]:.3f}" for i in bad
            )
            raise DiagnosticError(
                f"split Rhat above {settings.rhat_threshold} for: {worst}"
            )
    return posterior


def posterior_of_t(posterior):
    """Pool the per-draw usual-activity vectors across chains.

    Returns
    -------
    ndarray, shape (chains * kept, n)
        One usual-activity vector per retained draw; the pool the
        risk-factor stage samples from.
    """
    return posterior.pooled("t")
