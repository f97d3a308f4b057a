"""Nonlinear seemingly unrelated regression with mixture-of-normals errors.

Seven risk factors share one latent exposure: usual daily activity enters
on the fourth-root scale, four factors (waist, log-glucose,
log-triglycerides, systolic pressure) through a centered sigmoid drop and
three (diastolic pressure, LDL, HDL) linearly.  Errors follow a finite
mixture of multivariate normals with component intercepts, so the overall
intercept is the weight-averaged component intercept.

Each sampler iteration first draws one usual-activity vector uniformly
from the stage-1 posterior pool and treats it as known for that sweep;
the pool therefore propagates the stage-1 uncertainty into every
parameter's posterior.  Sweeps update component labels, weights,
intercepts, and covariances by conjugate draws, then the curve and slope
parameters by per-factor adaptive random-walk Metropolis blocks.

Component labels are only identified up to permutation; draws are
relabeled by the decision-theoretic method that iteratively permutes each
draw's classification matrix toward the running average (minimizing their
Kullback-Leibler divergence) before any component-specific summary is
read.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, logsumexp

from .errors import DataError, DiagnosticError
from .ingest import RISK_FACTORS
from .statskernel import (
    AdaptSettings,
    ChainState,
    Spd,
    adaptive_rw_metropolis,
    chain_rngs,
    gelman_rubin,
    mvn_logpdf,
    normal_logpdf,
    sample_categorical_logits,
    sample_dirichlet,
    sample_inverse_wishart,
    sample_mvn,
)

__all__ = [
    "CurveParams",
    "LinearParams",
    "LINEAR_INDICES",
    "MixtureParams",
    "NONLINEAR_INDICES",
    "RfmPosterior",
    "RfmPriors",
    "RfmSettings",
    "compute_dic",
    "compute_gamma0",
    "default_priors",
    "eval_mean",
    "metropolis_gamma",
    "relabel",
    "run_two_stage",
    "sample_lambda",
    "sample_p",
    "sample_sigma_m",
    "sample_zeta",
    "sigmoid_curve",
]

N_FACTORS = 7
NONLINEAR_INDICES = (0, 1, 2, 3)
LINEAR_INDICES = (4, 5, 6)


@dataclass(frozen=True)
class CurveParams:
    """Sigmoid parameters for the four nonlinear factors.

    Attributes
    ----------
    drop : ndarray, shape (4,)
        Total effect magnitude (the ceiling-to-floor distance).
    rate : ndarray, shape (4,)
        Positive steepness.
    inflection : ndarray, shape (4,)
        Location of maximal marginal benefit, fourth-root-minutes scale.
    """

    drop: np.ndarray
    rate: np.ndarray
    inflection: np.ndarray

    def __post_init__(self):
        for name in ("drop", "rate", "inflection"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
            if getattr(self, name).shape != (4,):
                raise DataError(f"{name} must have shape (4,)")
        if np.any(self.rate <= 0):
            raise DataError(f"rate must be positive, got {self.rate}")


@dataclass(frozen=True)
class LinearParams:
    """Slopes for the three linear factors (DBP, LDL, HDL)."""

    slope: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "slope", np.asarray(self.slope, dtype=float))
        if self.slope.shape != (3,):
            raise DataError("slope must have shape (3,)")


@dataclass
class MixtureParams:
    """Mixture state: weights, component intercepts/covariances, labels."""

    weights: np.ndarray
    intercepts: np.ndarray
    covariances: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.intercepts = np.asarray(self.intercepts, dtype=float)
        self.covariances = np.asarray(self.covariances, dtype=float)
        self.labels = np.asarray(self.labels)
        h = self.weights.shape[0]
        if not math.isclose(float(self.weights.sum()), 1.0, rel_tol=0, abs_tol=1e-8):
            raise DataError("mixture weights must sum to 1")
        if self.intercepts.shape != (h, N_FACTORS):
            raise DataError("intercepts must be (H, 7)")
        if self.covariances.shape != (h, N_FACTORS, N_FACTORS):
            raise DataError("covariances must be (H, 7, 7)")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= h):
            raise DataError("labels out of range")

    @property
    def h(self):
        return self.weights.shape[0]


def sigmoid_curve(x, level, drop, rate, inflection):
    """Dose-response sigmoid: level - drop * expit(rate * (x - inflection)).

    The value at the inflection point is level - drop / 2, and the curve is
    point-symmetric about it: f(B + x) + f(B - x) = 2 * level - drop.
    """
    return level - drop * expit(rate * (np.asarray(x, dtype=float) - inflection))


def eval_mean(x, curves, linear):
    """Centered mean contributions m(x; gamma) for each risk factor.

    Nonlinear factors contribute -drop * expit(rate * (x - inflection)),
    with the level carried by the mixture intercepts; linear factors
    contribute slope * x.

    Parameters
    ----------
    x : array_like
        Usual activity on the fourth-root-minutes scale; scalar or (n,).
    curves : CurveParams
    linear : LinearParams

    Returns
    -------
    ndarray, shape (n, 7) (or (7,) for scalar input)
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty((x.size, N_FACTORS))
    out[:, :4] = -curves.drop * expit(curves.rate * (x[:, None] - curves.inflection))
    out[:, 4:] = linear.slope * x[:, None]
    return out[0] if single else out


@dataclass(frozen=True)
class RfmPriors:
    """Prior constants for the risk-factor stage.

    Component intercepts are independent normals per factor; the four
    sigmoid triples have informative normal priors; slopes are diffuse;
    covariances are inverse-Wishart; weights Dirichlet.
    """

    intercept_mean: np.ndarray
    intercept_sd: np.ndarray
    curve_mean: np.ndarray
    curve_sd: np.ndarray
    slope_sd: float = 100.0
    sigma_df: float = 8.0
    sigma_scale: np.ndarray | None = None
    weight_concentration: float = 1.0

    def scale_matrix(self):
        return np.eye(N_FACTORS) if self.sigma_scale is None else np.asarray(self.sigma_scale)


def default_priors():
    """Default prior constants (elicited-scale values for each factor)."""
    return RfmPriors(
        intercept_mean=np.array([98.0, 4.7, 4.73, 130.0, 0.0, 0.0, 0.0]),
        intercept_sd=np.array([17.0, 0.1, 0.6, 7.0, 100.0, 100.0, 100.0]),
        # Rows: waist, log-glucose, log-triglycerides, SBP; columns: drop,
        # rate, inflection.
        curve_mean=np.array(
            [
                [7.0, 3.0, 2.11],
                [0.16, 3.6, 1.4],
                [0.12, 4.88, 2.11],
                [18.0, 3.0, 1.3],
            ]
        ),
        curve_sd=np.array(
            [
                [8.0, 1.5, 0.4],
                [0.08, 0.7, 1.0],
                [0.4, 2.0, 0.4],
                [5.0, 1.0, 1.0],
            ]
        ),
    )


def sample_zeta(y, means, mixture, rng):
    """Draw component labels from their categorical full conditional.

    Parameters
    ----------
    y : ndarray, shape (n, 7)
        Observations on the model scale.
    means : ndarray, shape (n, 7)
        Centered mean contributions m(x; gamma) per observation.
    mixture : MixtureParams
    rng : numpy.random.Generator

    Returns
    -------
    ndarray of int, shape (n,)
    """
    resid = y - means
    logits = np.empty((y.shape[0], mixture.h))
    with np.errstate(divide="ignore"):
        logw = np.log(mixture.weights)
    for h in range(mixture.h):
        logits[:, h] = logw[h] + mvn_logpdf(resid, mixture.intercepts[h], mixture.covariances[h])
    try:
        return sample_categorical_logits(logits, rng)
    except ValueError as err:
        raise DataError(f"degenerate mixture: {err}") from None


def sample_p(labels, h, rng, concentration=1.0):
    """Dirichlet draw of the weights given label counts."""
    counts = np.bincount(labels, minlength=h)
    return sample_dirichlet(concentration + counts, rng)


def sample_lambda(resid, covariance, prior_mean, prior_sd, rng):
    """Conjugate normal draw of one component intercept.

    Parameters
    ----------
    resid : ndarray, shape (n_h, 7)
        Rows of y - m(x; gamma) for the observations in this component;
        an empty array draws from the prior.
    covariance : ndarray, shape (7, 7)
        Current component covariance.
    prior_mean, prior_sd : ndarray, shape (7,)
    rng : numpy.random.Generator
    """
    prior_prec = np.diag(1.0 / np.asarray(prior_sd) ** 2)
    n_h = resid.shape[0]
    if n_h == 0:
        return np.asarray(prior_mean) + np.asarray(prior_sd) * rng.standard_normal(N_FACTORS)
    spd = Spd.from_matrix(np.asarray(covariance))
    prec = prior_prec + n_h * spd.solve(np.eye(N_FACTORS))
    post_cov = np.linalg.inv(prec)
    post_cov = 0.5 * (post_cov + post_cov.T)
    post_mean = post_cov @ (prior_prec @ np.asarray(prior_mean) + spd.solve(resid.sum(axis=0)))
    return sample_mvn(post_mean, post_cov, rng)


def sample_sigma_m(resid, rng, prior_df=8.0, prior_scale=None):
    """Inverse-Wishart draw of one component covariance.

    ``resid`` holds y - lambda_h - m(x; gamma) rows for the component's
    observations; empty input draws from the prior.
    """
    scale = np.eye(N_FACTORS) if prior_scale is None else np.asarray(prior_scale)
    resid = np.asarray(resid, dtype=float).reshape(-1, N_FACTORS)
    return sample_inverse_wishart(prior_df + resid.shape[0], scale + resid.T @ resid, rng)


class _GammaContext:
    """Per-sweep machinery for the curve/slope Metropolis blocks.

    Holds the residual matrix, the per-observation precision rows
    G_i = Sigma_{zeta_i}^{-1} r_i, and the per-label precision diagonals,
    so that changing one factor's mean column costs O(n): the quadratic
    form moves by sum(2 d G_j + d^2 P_jj).
    """

    def __init__(self, x, y, mixture, curves, linear):
        self.x = x
        self.y = y
        self.labels = mixture.labels
        self.m = eval_mean(x, curves, linear) if y.shape[0] else np.zeros((0, N_FACTORS))
        self.resid = y - mixture.intercepts[self.labels] - self.m
        h = mixture.h
        self.precisions = np.stack([np.linalg.inv(mixture.covariances[k]) for k in range(h)])
        self.g = np.empty_like(self.resid)
        for k in range(h):
            idx = np.flatnonzero(self.labels == k)
            if idx.size:
                self.g[idx] = self.resid[idx] @ self.precisions[k]
        self.pjj = self.precisions[self.labels][:, np.arange(N_FACTORS), np.arange(N_FACTORS)]

    def delta_loglik(self, j, new_col):
        d = self.m[:, j] - new_col
        return -0.5 * float(np.sum(2.0 * d * self.g[:, j] + d * d * self.pjj[:, j]))

    def commit(self, j, new_col):
        d = self.m[:, j] - new_col
        self.resid[:, j] += d
        self.g += d[:, None] * self.precisions[self.labels, j, :]
        self.m[:, j] = new_col


def _curve_column(x, v):
    return -v[0] * expit(v[1] * (x - v[2]))


def metropolis_gamma(x, y, mixture, curves, linear, states, priors, adapt, rng):
    """One adaptive Metropolis pass over the seven curve/slope blocks.

    The four nonlinear factors move as (drop, rate, inflection) triples and
    the three slopes as scalars, each against the mixture likelihood plus
    its prior.  Proposals with a nonpositive rate are rejected (prior
    support).  ``states`` carries the adaptive proposal state per block and
    is mutated in place.

    Returns
    -------
    (CurveParams, LinearParams)
    """
    ctx = _GammaContext(x, y, mixture, curves, linear)
    drop, rate, inflection = curves.drop.copy(), curves.rate.copy(), curves.inflection.copy()
    slope = linear.slope.copy()
    cell = {}

    for j in NONLINEAR_INDICES:

        def target(v, j=j):
            if v[1] <= 0:
                return -np.inf
            col = _curve_column(ctx.x, v)
            cell["col"] = col
            lp = float(np.sum(normal_logpdf(v, priors.curve_mean[j], priors.curve_sd[j])))
            return lp + ctx.delta_loglik(j, col)

        state = states[j]
        state.logp = float(
            np.sum(normal_logpdf(state.x, priors.curve_mean[j], priors.curve_sd[j]))
        )
        if adaptive_rw_metropolis(target, state, adapt, rng):
            ctx.commit(j, cell["col"])
            drop[j], rate[j], inflection[j] = state.x

    for k, j in enumerate(LINEAR_INDICES):

        def target(v, j=j):
            col = v[0] * ctx.x
            cell["col"] = col
            lp = float(normal_logpdf(v[0], 0.0, priors.slope_sd))
            return lp + ctx.delta_loglik(j, col)

        state = states[j]
        state.logp = float(normal_logpdf(state.x[0], 0.0, priors.slope_sd))
        if adaptive_rw_metropolis(target, state, adapt, rng):
            ctx.commit(j, cell["col"])
            slope[k] = state.x[0]

    return (
        CurveParams(drop=drop, rate=rate, inflection=inflection),
        LinearParams(slope=slope),
    )


@dataclass(frozen=True)
class RfmSettings:
    """Sampler settings; population-scale defaults, overridable everywhere."""

    h: int = 5
    chains: int = 3
    iterations: int = 1_000_000
    burn_in: int = 10_000
    thin: int = 5
    seed: int = 0
    rhat_threshold: float = 1.1
    enforce_rhat: bool = True
    refresh_every: int = 500

    def __post_init__(self):
        if self.h < 1:
            raise DataError("mixture needs at least one component")
        if self.burn_in >= self.iterations:
            raise DataError("burn_in must be smaller than iterations")
        if self.thin < 1:
            raise DataError("thin must be at least 1")


@dataclass
class RfmPosterior:
    """Thinned, relabeled draws from the risk-factor stage."""

    factor_names: tuple
    drop: np.ndarray
    rate: np.ndarray
    inflection: np.ndarray
    slope: np.ndarray
    weights: np.ndarray
    intercepts: np.ndarray
    covariances: np.ndarray
    labels: np.ndarray
    t_index: np.ndarray
    chain: np.ndarray
    gamma0: np.ndarray
    rhat: np.ndarray
    rhat_names: tuple
    acceptance: dict
    seed: int
    relabeled: bool = False
    dic: float | None = None

    @property
    def n_draws(self):
        return self.drop.shape[0]

    @property
    def h(self):
        return self.weights.shape[1]

    def curve_at(self, l):
        return CurveParams(drop=self.drop[l], rate=self.rate[l], inflection=self.inflection[l])

    def linear_at(self, l):
        return LinearParams(slope=self.slope[l])


def compute_gamma0(intercepts, weights):
    """Overall intercept per draw: the weight-averaged component intercept.

    Accepts (L, H, 7) intercepts with (L, H) weights, or single-draw
    (H, 7) with (H,).
    """
    intercepts = np.asarray(intercepts, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if intercepts.ndim == 2:
        return weights @ intercepts
    return np.einsum("lh,lhf->lf", weights, intercepts)


def _gamma_block_states(curves, linear, priors):
    """Fresh adaptive states, one per factor block, scaled to the priors."""
    states = []
    for j in NONLINEAR_INDICES:
        x0 = np.array([curves.drop[j], curves.rate[j], curves.inflection[j]])
        chol = np.diag(np.maximum(0.05 * priors.curve_sd[j], 1e-3))
        states.append(ChainState(x=x0, logp=0.0, proposal=Spd(chol)))
    for k in range(3):
        states.append(
            ChainState(x=np.array([linear.slope[k]]), logp=0.0, proposal=Spd(np.array([[0.1]])))
        )
    return states


def _initial_rfm_state(y, x_bar, priors, h, rng):
    n = y.shape[0]
    curve0 = priors.curve_mean + 0.1 * priors.curve_sd * rng.standard_normal((4, 3))
    curves = CurveParams(
        drop=curve0[:, 0],
        rate=np.maximum(curve0[:, 1], 0.1),
        inflection=curve0[:, 2],
    )
    linear = LinearParams(slope=0.1 * rng.standard_normal(3))
    center = y.mean(axis=0) if n else priors.intercept_mean
    spread = y.std(axis=0) if n else np.ones(N_FACTORS)
    reg = np.diag(np.maximum((0.05 * spread) ** 2, 1e-4))
    if n >= max(2 * h, 8):
        # Classify the curve-adjusted residuals first: anchoring components
        # at cluster means with within-cluster covariances keeps moderately
        # separated components from collapsing into one inflated Gaussian,
        # which a flat start cannot escape.
        resid0 = y - eval_mean(x_bar, curves, linear)
        centers, assign = kmeans2(resid0, h, minit="++", seed=rng)
        intercepts = np.atleast_2d(centers)
        pooled = np.atleast_2d(np.cov(resid0.T)) + reg
        covariances = np.empty((h, N_FACTORS, N_FACTORS))
        for k in range(h):
            members = resid0[assign == k]
            if members.shape[0] > 2 * N_FACTORS:
                covariances[k] = np.cov(members.T) + reg
            else:
                covariances[k] = pooled
        counts = np.bincount(assign, minlength=h)
        weights = (counts + 1.0) / (n + h)
        labels = assign.astype(np.int64)
    else:
        intercepts = np.tile(center, (h, 1)) + 0.2 * spread * rng.standard_normal((h, N_FACTORS))
        cov0 = np.diag(np.maximum((0.75 * spread) ** 2, 1e-4))
        covariances = np.stack([cov0 * (1.0 + 0.1 * abs(rng.standard_normal())) for _ in range(h)])
        weights = np.full(h, 1.0 / h)
        labels = rng.integers(0, h, n)
    mixture = MixtureParams(
        weights=weights,
        intercepts=intercepts,
        covariances=covariances,
        labels=labels,
    )
    return curves, linear, mixture


def _run_rfm_chain(x_pool, y, settings, priors, rng):
    n = y.shape[0]
    h = settings.h
    kept = (settings.iterations - settings.burn_in) // settings.thin
    curves, linear, mixture = _initial_rfm_state(y, x_pool.mean(axis=0), priors, h, rng)
    states = _gamma_block_states(curves, linear, priors)
    adapt = AdaptSettings(burn_in=settings.burn_in, refresh_every=settings.refresh_every)

    out = {
        "drop": np.empty((kept, 4)),
        "rate": np.empty((kept, 4)),
        "inflection": np.empty((kept, 4)),
        "slope": np.empty((kept, 3)),
        "weights": np.empty((kept, h)),
        "intercepts": np.empty((kept, h, N_FACTORS)),
        "covariances": np.empty((kept, h, N_FACTORS, N_FACTORS)),
        "labels": np.empty((kept, n), dtype=np.int16),
        "t_index": np.empty(kept, dtype=np.int64),
    }
    stored = 0
    scale0 = priors.scale_matrix()
    for it in range(settings.iterations):
        t_idx = int(rng.integers(x_pool.shape[0]))
        x = x_pool[t_idx]
        means = eval_mean(x, curves, linear)

        mixture.labels = sample_zeta(y, means, mixture, rng)
        mixture.weights = sample_p(
            mixture.labels, h, rng, concentration=priors.weight_concentration
        )
        resid0 = y - means
        for k in range(h):
            idx = np.flatnonzero(mixture.labels == k)
            mixture.intercepts[k] = sample_lambda(
                resid0[idx],
                mixture.covariances[k],
                priors.intercept_mean,
                priors.intercept_sd,
                rng,
            )
            mixture.covariances[k] = sample_sigma_m(
                resid0[idx] - mixture.intercepts[k],
                rng,
                prior_df=priors.sigma_df,
                prior_scale=scale0,
            )

        curves, linear = metropolis_gamma(
            x, y, mixture, curves, linear, states, priors, adapt, rng
        )

        if it >= settings.burn_in and (it - settings.burn_in) % settings.thin == 0 and stored < kept:
            out["drop"][stored] = curves.drop
            out["rate"][stored] = curves.rate
            out["inflection"][stored] = curves.inflection
            out["slope"][stored] = linear.slope
            out["weights"][stored] = mixture.weights
            out["intercepts"][stored] = mixture.intercepts
            out["covariances"][stored] = mixture.covariances
            out["labels"][stored] = mixture.labels
            out["t_index"][stored] = t_idx
            stored += 1

    out["acceptance"] = {
        "curves": float(np.mean([states[j].acceptance_rate for j in NONLINEAR_INDICES])),
        "slopes": float(np.mean([states[j].acceptance_rate for j in LINEAR_INDICES])),
    }
    return out


def run_two_stage(t_pool, y, settings=None, priors=None):
    """Run the second stage against a pool of usual-activity draws.

    Parameters
    ----------
    t_pool : ndarray, shape (pool, n)
        Usual activity draws in minutes (one row per stage-1 draw); a
        single row reduces to fixed-exposure inference.
    y : ndarray, shape (n, 7)
        Risk factors on the model scale, canonical factor order.
    settings : RfmSettings, optional
    priors : RfmPriors, optional

    Returns
    -------
    RfmPosterior
        Thinned draws, relabeled, with the overall intercept per draw.

    Raises
    ------
    DiagnosticError
        If any label-invariant parameter's split Rhat exceeds the
        threshold (curves, slopes, overall intercepts).  Component-indexed
        parameters are reported but not gated, since label switching makes
        their raw traces incomparable across chains.
    """
    settings = settings or RfmSettings()
    priors = priors or default_priors()
    t_pool = np.asarray(t_pool, dtype=float)
    y = np.asarray(y, dtype=float)
    if t_pool.ndim != 2 or t_pool.shape[0] < 1:
        raise DataError("t_pool must be a nonempty (pool, n) matrix")
    if np.any(t_pool < 0) or not np.all(np.isfinite(t_pool)):
        raise DataError("t_pool must be finite and nonnegative")
    if y.ndim != 2 or y.shape[1] != N_FACTORS:
        raise DataError("y must be (n, 7)")
    if t_pool.shape[1] != y.shape[0]:
        raise DataError(
            f"cohort misalignment: t pool has {t_pool.shape[1]} participants, "
            f"panel has {y.shape[0]}"
        )
    x_pool = t_pool**0.25

    chains = []
    for rng in chain_rngs(settings.seed, settings.chains):
        chains.append(_run_rfm_chain(x_pool, y, settings, priors, rng))

    def stack(key):
        return np.concatenate([c[key] for c in chains], axis=0)

    kept = chains[0]["drop"].shape[0]
    posterior = RfmPosterior(
        factor_names=RISK_FACTORS,
        drop=stack("drop"),
        rate=stack("rate"),
        inflection=stack("inflection"),
        slope=stack("slope"),
        weights=stack("weights"),
        intercepts=stack("intercepts"),
        covariances=stack("covariances"),
        labels=stack("labels"),
        t_index=stack("t_index"),
        chain=np.repeat(np.arange(settings.chains, dtype=np.int8), kept),
        gamma0=np.empty((settings.chains * kept, N_FACTORS)),
        rhat=np.array([]),
        rhat_names=(),
        acceptance={
            k: float(np.mean([c["acceptance"][k] for c in chains]))
            for k in chains[0]["acceptance"]
        },
        seed=settings.seed,
    )
    relabel(posterior, y, x_pool)
    posterior.gamma0 = compute_gamma0(posterior.intercepts, posterior.weights)

    invariant = np.concatenate(
        [posterior.drop, posterior.rate, posterior.inflection, posterior.slope, posterior.gamma0],
        axis=1,
    )
    names = (
        [f"drop.{RISK_FACTORS[j]}" for j in NONLINEAR_INDICES]
        + [f"rate.{RISK_FACTORS[j]}" for j in NONLINEAR_INDICES]
        + [f"inflection.{RISK_FACTORS[j]}" for j in NONLINEAR_INDICES]
        + [f"slope.{RISK_FACTORS[j]}" for j in LINEAR_INDICES]
        + [f"gamma0.{f}" for f in RISK_FACTORS]
    )
    posterior.rhat_names = tuple(names)
    if settings.chains >= 2:
        traces = invariant.reshape(settings.chains, kept, -1)
    else:
        half = kept // 2
        traces = np.stack([invariant[:half], invariant[half : 2 * half]])
    if traces.shape[1] >= 10:
        posterior.rhat = gelman_rubin(traces)
    else:
        posterior.rhat = np.full(len(names), np.nan)
    if settings.enforce_rhat and settings.chains >= 2 and traces.shape[1] >= 10:
        bad = np.flatnonzero(posterior.rhat > settings.rhat_threshold)
        if bad.size:
            worst = ", ".join(f"{names[i]}={posterior.rhat[i]:.3f}" for i in bad)
            raise DiagnosticError(f"split Rhat above {settings.rhat_threshold} for: {worst}")
    return posterior


def _classification_matrix(posterior, y, x_pool, l):
    """Posterior membership probabilities (n, H) for one retained draw."""
    means = eval_mean(x_pool[posterior.t_index[l]], posterior.curve_at(l), posterior.linear_at(l))
    resid = y - means
    logits = np.empty((y.shape[0], posterior.h))
    with np.errstate(divide="ignore"):
        logw = np.log(posterior.weights[l])
    for h in range(posterior.h):
        logits[:, h] = logw[h] + mvn_logpdf(
            resid, posterior.intercepts[l, h], posterior.covariances[l, h]
        )
    logits -= logsumexp(logits, axis=1, keepdims=True)
    return np.exp(logits)


def relabel(posterior, y, x_pool, max_iter=20):
    """Permute component draws toward a common labeling (in place).

    Iterates two passes: average the permuted classification matrices,
    then re-pick each draw's permutation by linear assignment against the
    log of that average (the Kullback-Leibler-optimal choice).
    Classification matrices are recomputed from parameters per draw, so
    memory stays linear in the cohort.  Applies the final permutations to
    weights, intercepts, covariances, and labels, and returns them.
    """
    h = posterior.h
    n_draws = posterior.n_draws
    if h == 1:
        posterior.relabeled = True
        return np.zeros((n_draws, 1), dtype=np.int64)
    perms = np.tile(np.arange(h), (n_draws, 1))
    converged = False
    for _ in range(max_iter):
        avg = np.zeros((y.shape[0], h))
        for l in range(n_draws):
            avg += _classification_matrix(posterior, y, x_pool, l)[:, perms[l]]
        avg /= n_draws
        changed = 0
        for l in range(n_draws):
            probs = _classification_matrix(posterior, y, x_pool, l)
            log_probs = np.log(np.clip(probs, 1e-300, None))
            cost = -(avg.T @ log_probs)
            _, assignment = linear_sum_assignment(cost)
            if not np.array_equal(assignment, perms[l]):
                changed += 1
                perms[l] = assignment
        if changed == 0:
            converged = True
            break
    if not converged:
        warnings.warn("relabeling did not converge; using the best permutations found")
    identity = np.arange(h)
    for l in range(n_draws):
        perm = perms[l]
        if np.array_equal(perm, identity):
            continue
        posterior.weights[l] = posterior.weights[l][perm]
        posterior.intercepts[l] = posterior.intercepts[l][perm]
        posterior.covariances[l] = posterior.covariances[l][perm]
        inverse = np.argsort(perm)
        posterior.labels[l] = inverse[posterior.labels[l]].astype(posterior.labels.dtype)
    posterior.relabeled = True
    return perms


def compute_dic(posterior, y, x_pool):
    """Deviance information criterion with component labels marginalized.

    The mean deviance averages the observed-data mixture log likelihood
    over the retained draws (each at its own usual-activity draw); the
    plug-in deviance evaluates at the posterior means of all parameters
    with each participant's usual activity fixed at its posterior mean
    over the same draws.  Stores and returns Dbar + pD.
    """
    n_draws = posterior.n_draws
    deviances = np.empty(n_draws)
    for l in range(n_draws):
        deviances[l] = -2.0 * _mixture_loglik(
            y,
            x_pool[posterior.t_index[l]],
            posterior.curve_at(l),
            posterior.linear_at(l),
            posterior.weights[l],
            posterior.intercepts[l],
            posterior.covariances[l],
        )
    d_bar = float(deviances.mean())
    curves = CurveParams(
        drop=posterior.drop.mean(axis=0),
        rate=posterior.rate.mean(axis=0),
        inflection=posterior.inflection.mean(axis=0),
    )
    linear = LinearParams(slope=posterior.slope.mean(axis=0))
    x_bar = ((x_pool[posterior.t_index] ** 4).mean(axis=0)) ** 0.25
    d_hat = -2.0 * _mixture_loglik(
        y,
        x_bar,
        curves,
        linear,
        posterior.weights.mean(axis=0),
        posterior.intercepts.mean(axis=0),
        posterior.covariances.mean(axis=0),
    )
    p_d = d_bar - float(d_hat)
    posterior.dic = d_bar + p_d
    return posterior.dic


def _mixture_loglik(y, x, curves, linear, weights, intercepts, covariances):
    means = eval_mean(x, curves, linear)
    resid = y - means
    h = weights.shape[0]
    logits = np.empty((y.shape[0], h))
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    for k in range(h):
        logits[:, k] = logw[k] + mvn_logpdf(resid, intercepts[k], covariances[k])
    return float(np.sum(logsumexp(logits, axis=1)))
