"""Synthetic cohorts drawn from the exact generative model.

Produces day-level activity, weekend-adjusted amounts, and risk factor
panels with every latent quantity recorded, so calibration studies can
assert at any level: population parameters, per-person effects, mixture
labels, and the exact usual activity (computed with the full Gaussian
fourth moment, including the 3 xi^4 term that the estimator omits).

Positive-day amounts come from a stationary lag-one autoregression
simulated over all seven days and observed only on participation days;
marginalizing a stationary AR(1) onto a subset of days reproduces the
phi^gap covariance exactly.  Sequences that land nonpositive on a
participation day are redrawn (about 1e-3 of sequences at the default
scales), as are risk factor rows that land nonpositive on the raw scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DataError
from .ingest import (
    EDUCATION_LEVELS,
    RACE_LEVELS,
    DayActivity,
    Participant,
    RiskFactorPanel,
    design_matrix,
)
from .mem import MemParams, RandomEffects
from .preprocess import AdjustedActivity, VarianceFunction
from .rfm import CurveParams, LinearParams, compute_gamma0, eval_mean
from .statskernel import make_rng

__all__ = [
    "SimConfig",
    "SimTruth",
    "SimulatedCohort",
    "default_mem_params",
    "default_mixture",
    "default_rfm_truth",
    "simulate_cohort",
    "true_usual_mvpa",
]

N_DAYS = 7


def default_mem_params():
    """Measurement-model truth at realistic activity scales.

    Fourth-root amounts center near 1.8 (about 10 minutes a day) with
    participation probabilities mostly between 0.35 and 0.8, so the
    implied usual-activity spread straddles the default inflection
    points.
    """
    return MemParams(
        alpha=np.array([1.2, -1.2, -0.3, -0.15, 0.1, 0.25, 0.1, -0.2]),
        beta=np.array([2.4, -0.9, -0.2, -0.1, 0.05, 0.12, 0.08, -0.05]),
        phi=np.array([0.35, 0.45]),
        sigma_b=np.array([0.8, 0.35]),
        rho_b=0.3,
    )


def default_rfm_truth():
    """Published-scale curve and slope truth for the risk-factor stage."""
    curves = CurveParams(
        drop=np.array([11.36, 0.14, 0.25, 19.22]),
        rate=np.array([1.64, 2.56, 3.68, 3.02]),
        inflection=np.array([2.31, 1.27, 2.54, 1.44]),
    )
    linear = LinearParams(slope=np.array([2.63, -5.91, -3.32]))
    return curves, linear


def _correlation_block():
    """Residual correlation shared by both components.

    Positive association among the six high-is-bad columns and a negative
    association between HDL and the rest, so elevated factors cluster the
    way metabolic risk does.
    """
    corr = np.full((7, 7), 0.2)
    corr[6, :] = corr[:, 6] = -0.15
    np.fill_diagonal(corr, 1.0)
    return corr


def default_mixture(weights=(0.65, 0.35)):
    """Two-component mixture truth: a healthy majority and an elevated tail.

    Component intercepts are chosen so their weighted average reproduces
    the published overall intercepts; spreads sit at survey-like scales.
    """
    weights = np.asarray(weights, dtype=float)
    gamma0 = np.array([101.09, 4.71, 4.77, 137.17, 64.81, 128.81, 62.87])
    elevation = np.array([14.0, 0.18, 0.5, 14.0, 6.0, 15.0, -10.0])
    intercepts = np.stack(
        [gamma0 - weights[1] * elevation, gamma0 + weights[0] * elevation]
    )
    sds = np.array(
        [
            [14.0, 0.13, 0.49, 14.0, 9.7, 32.0, 11.9],
            [15.1, 0.24, 0.59, 17.3, 11.9, 34.6, 13.0],
        ]
    )
    corr = _correlation_block()
    covariances = np.stack([np.outer(s, s) * corr for s in sds])
    return weights, intercepts, covariances


@dataclass(frozen=True)
class SimConfig:
    """Cohort size, seed, and the full generative truth.

    Any field left at None is filled from the published-scale defaults.
    """

    n: int = 500
    seed: int = 0
    mem: MemParams = field(default_factory=default_mem_params)
    variance_delta: np.ndarray | None = None
    curves: CurveParams | None = None
    linear: LinearParams | None = None
    mixture_weights: np.ndarray | None = None
    mixture_intercepts: np.ndarray | None = None
    mixture_covariances: np.ndarray | None = None
    age_range: tuple = (18.0, 85.0)
    female_prob: float = 0.5
    bmi_mean: float = 27.7
    bmi_sd: float = 5.0
    bmi_min: float = 16.0
    race_probs: tuple = (0.09, 0.10, 0.42, 0.24, 0.15)
    wear_minutes: int = 960
    variance_floor: float = 1e-4

    def __post_init__(self):
        if self.n < 1:
            raise DataError("need at least one participant")
        if self.variance_delta is None:
            object.__setattr__(self, "variance_delta", np.array([0.62, -0.006, 2e-5, 0.0]))
        if self.curves is None or self.linear is None:
            curves, linear = default_rfm_truth()
            object.__setattr__(self, "curves", self.curves or curves)
            object.__setattr__(self, "linear", self.linear or linear)
        if self.mixture_weights is None:
            weights, intercepts, covariances = default_mixture()
            object.__setattr__(self, "mixture_weights", weights)
            object.__setattr__(self, "mixture_intercepts", intercepts)
            object.__setattr__(self, "mixture_covariances", covariances)
        weights = np.asarray(self.mixture_weights, dtype=float)
        if not np.isclose(weights.sum(), 1.0):
            raise DataError("mixture weights must sum to 1")
        h = weights.shape[0]
        if np.asarray(self.mixture_intercepts).shape != (h, 7):
            raise DataError("mixture intercepts must be (H, 7)")
        if np.asarray(self.mixture_covariances).shape != (h, 7, 7):
            raise DataError("mixture covariances must be (H, 7, 7)")
        if len(self.race_probs) != len(RACE_LEVELS) or not np.isclose(sum(self.race_probs), 1.0):
            raise DataError("race_probs must cover the race levels and sum to 1")

    def variance_function(self):
        return VarianceFunction(
            delta=np.asarray(self.variance_delta, dtype=float), floor=self.variance_floor
        )

    def gamma0(self):
        """Overall intercepts implied by the mixture truth."""
        return compute_gamma0(self.mixture_intercepts, self.mixture_weights)


@dataclass(frozen=True)
class SimTruth:
    """Every latent quantity behind one simulated cohort."""

    participant_ids: tuple
    b1: np.ndarray
    b2: np.ndarray
    pi: np.ndarray
    mu: np.ndarray
    xi_sq: np.ndarray
    t: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class SimulatedCohort:
    """Simulated records in the same shapes the ingest stage produces."""

    config: SimConfig
    participants: list
    days: list
    adjusted: list
    panels: list
    variance_function: VarianceFunction
    truth: SimTruth

    @property
    def participant_ids(self):
        return self.truth.participant_ids


def true_usual_mvpa(params, effects, z, xi_sq):
    """Exact usual daily activity, including the full fourth moment.

    t = expit(z alpha + b1) * (mu^4 + 6 xi^2 mu^2 + 3 xi^4) with
    mu = z beta + b2; the estimator's fourth-moment approximation omits
    the final term, so (approximate - exact) = -pi * 3 xi^4.
    """
    z = np.asarray(z, dtype=float)
    xi_sq = np.asarray(xi_sq, dtype=float)
    pi = expit(z @ params.alpha + effects.b1)
    mu = z @ params.beta + effects.b2
    return pi * (mu**4 + 6.0 * xi_sq * mu**2 + 3.0 * xi_sq**2)


def _simulate_participants(config, rng):
    low, high = config.age_range
    ages = rng.uniform(low, high, config.n)
    female = rng.random(config.n) < config.female_prob
    bmi = np.maximum(rng.normal(config.bmi_mean, config.bmi_sd, config.n), config.bmi_min)
    races = rng.choice(len(RACE_LEVELS), size=config.n, p=np.asarray(config.race_probs))
    education = rng.integers(0, len(EDUCATION_LEVELS), config.n)
    width = max(4, len(str(config.n)))
    participants = [
        Participant(
            participant_id=f"sim-{k + 1:0{width}d}",
            age=float(ages[k]),
            sex="female" if female[k] else "male",
            race=RACE_LEVELS[races[k]],
            education=EDUCATION_LEVELS[education[k]],
            bmi=float(bmi[k]),
        )
        for k in range(config.n)
    ]
    return participants


def _stationary_ar1(mu, phi, xi_sq, rng):
    """One 7-day stationary AR(1) path around ``mu`` with variance ``xi_sq``."""
    path = np.empty(N_DAYS)
    sd = np.sqrt(xi_sq)
    path[0] = rng.normal(0.0, sd)
    innov_sd = sd * np.sqrt(1.0 - phi * phi)
    for j in range(1, N_DAYS):
        path[j] = phi * path[j - 1] + rng.normal(0.0, innov_sd)
    return mu + path


def simulate_cohort(config=None, rng=None):
    """Draw one cohort from the generative model.

    Parameters
    ----------
    config : SimConfig, optional
    rng : numpy.random.Generator, optional
        Defaults to a fresh stream seeded by ``config.seed``.

    Returns
    -------
    SimulatedCohort
        Participants, minute-free day activities, exact adjusted amounts,
        risk factor panels, the frozen variance plug-in, and the truth.
    """
    config = config or SimConfig()
    rng = rng or make_rng(config.seed)
    params = config.mem
    participants = _simulate_participants(config, rng)
    z = design_matrix(participants)
    ages = np.array([p.age for p in participants])
    variance_function = config.variance_function()
    xi_sq = variance_function(ages)
    age_group = (ages >= 65.0).astype(int)

    chol_b = np.linalg.cholesky(params.sigma_b_matrix())
    b = rng.standard_normal((config.n, 2)) @ chol_b.T
    eta = z @ params.alpha + b[:, 0]
    pi = expit(eta)
    mu = z @ params.beta + b[:, 1]

    days = []
    adjusted = []
    for i, p in enumerate(participants):
        participating = rng.random(N_DAYS) < pi[i]
        phi = params.phi[age_group[i]]
        for _ in range(100):
            w_path = _stationary_ar1(mu[i], phi, xi_sq[i], rng)
            if np.all(w_path[participating] > 0):
                break
        else:
            w_path = np.maximum(w_path, 0.05)
        for j in range(N_DAYS):
            w = float(w_path[j]) if participating[j] else 0.0
            w1 = w**4
            days.append(
                DayActivity(
                    participant_id=p.participant_id,
                    day_index=j + 1,
                    day_of_week=j + 1,
                    wear_minutes=config.wear_minutes,
                    mvpa_minutes=min(w1, float(config.wear_minutes)),
                )
            )
            adjusted.append(
                AdjustedActivity(participant_id=p.participant_id, day_index=j + 1, w1=w1, w=w)
            )

    effects = RandomEffects(b1=b[:, 0], b2=b[:, 1])
    t = true_usual_mvpa(params, effects, z, xi_sq)
    x = t**0.25
    means = eval_mean(x, config.curves, config.linear)
    weights = np.asarray(config.mixture_weights, dtype=float)
    intercepts = np.asarray(config.mixture_intercepts, dtype=float)
    chols = [np.linalg.cholesky(c) for c in np.asarray(config.mixture_covariances, dtype=float)]
    labels = rng.choice(weights.size, size=config.n, p=weights)

    panels = []
    for i, p in enumerate(participants):
        h = labels[i]
        loc = intercepts[h] + means[i]
        for _ in range(100):
            y_model = loc + chols[h] @ rng.standard_normal(7)
            raw = y_model.copy()
            raw[1] = np.exp(raw[1])
            raw[2] = np.exp(raw[2])
            if np.all(raw > 0):
                break
        else:
            raw = np.maximum(raw, 1e-3)
        panels.append(
            RiskFactorPanel(
                participant_id=p.participant_id,
                waist_cm=float(raw[0]),
                glucose_mgdl=float(raw[1]),
                triglycerides_mgdl=float(raw[2]),
                sbp_mmhg=float(raw[3]),
                dbp_mmhg=float(raw[4]),
                ldl_mgdl=float(raw[5]),
                hdl_mgdl=float(raw[6]),
                survey_weight=1.0,
            )
        )

    truth = SimTruth(
        participant_ids=tuple(p.participant_id for p in participants),
        b1=b[:, 0].copy(),
        b2=b[:, 1].copy(),
        pi=pi,
        mu=mu,
        xi_sq=np.asarray(xi_sq, dtype=float),
        t=t,
        labels=labels.astype(np.int16),
    )
    return SimulatedCohort(
        config=config,
        participants=participants,
        days=days,
        adjusted=adjusted,
        panels=panels,
        variance_function=variance_function,
        truth=truth,
    )
