"""Posterior predictive curves and residual diagnostics.

Exceedance probabilities are computed per posterior draw, so the reported
bands reflect parameter uncertainty; the elevated-count curves additionally
average over predictive noise within each draw.  Model-scale values keep
glucose and triglycerides on the log scale, so thresholds are transformed
rather than the draws.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import stats
from scipy.special import expit

from .errors import DataError
from .ingest import LOG_SCALE_INDICES, RISK_FACTORS
from .rfm import RfmPosterior, eval_mean
from .statskernel import make_rng

CRITERIA = (
    "waist",
    "glucose",
    "triglycerides",
    "blood_pressure",
    "low_hdl",
    "high_ldl",
)

# Direction per risk factor: True where a low value is the adverse one.
LOW_IS_BAD = np.array([False, False, False, False, False, False, True])


@dataclass(frozen=True)
class Thresholds:
    """Clinical cutoffs defining an elevated level for each risk factor.

    All cutoffs are on the raw measurement scale.  Waist and HDL cutoffs
    are sex-specific; HDL is adverse below its cutoff, every other factor
    above.

    Attributes
    ----------
    waist_male, waist_female : float
        Waist circumference cutoffs in cm.
    glucose : float
        Fasting glucose cutoff in mg/dL.
    triglycerides : float
        Triglyceride cutoff in mg/dL.
    sbp, dbp : float
        Systolic and diastolic blood pressure cutoffs in mm Hg.
    hdl_male, hdl_female : float
        HDL cholesterol cutoffs in mg/dL (low is adverse).
    ldl : float
        LDL cholesterol cutoff in mg/dL.
    """

    waist_male: float = 102.0
    waist_female: float = 88.0
    glucose: float = 110.0
    triglycerides: float = 150.0
    sbp: float = 130.0
    dbp: float = 85.0
    hdl_male: float = 40.0
    hdl_female: float = 50.0
    ldl: float = 160.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DataError(f"threshold {name} must be positive, got {value}")

    def cutoffs(self, sex: str) -> np.ndarray:
        """Raw-scale cutoff per risk factor, ordered like RISK_FACTORS."""
        if sex == "male":
            waist, hdl = self.waist_male, self.hdl_male
        elif sex == "female":
            waist, hdl = self.waist_female, self.hdl_female
        else:
            raise DataError(f"unknown sex {sex!r}")
        return np.array(
            [waist, self.glucose, self.triglycerides, self.sbp, self.dbp, self.ldl, hdl]
        )

    def model_cutoffs(self, sex: str) -> np.ndarray:
        """Cutoffs on the model scale (log applied to log-scale factors)."""
        out = self.cutoffs(sex)
        out[list(LOG_SCALE_INDICES)] = np.log(out[list(LOG_SCALE_INDICES)])
        return out


@dataclass(frozen=True)
class PredictiveCurve:
    """Pointwise probability curve over a grid of daily activity minutes.

    Attributes
    ----------
    name : str
        Risk factor name or elevated-count label.
    grid : ndarray
        Daily activity minutes, shape (g,).
    estimate : ndarray
        Posterior mean probability at each grid point.
    lower, upper : ndarray
        Pointwise credible band; always contains the estimate.
    """

    name: str
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        arrays = {}
        for field in ("grid", "estimate", "lower", "upper"):
            arr = np.asarray(getattr(self, field), dtype=float)
            if arr.ndim != 1 or arr.shape != np.shape(self.grid):
                raise DataError(f"curve field {field} must be 1-d and grid-aligned")
            arrays[field] = arr
            object.__setattr__(self, field, arr)
        probs = np.c_[arrays["estimate"], arrays["lower"], arrays["upper"]]
        if np.any(probs < -1e-12) or np.any(probs > 1 + 1e-12):
            raise DataError("curve probabilities must lie in [0, 1]")
        if np.any(arrays["lower"] > arrays["estimate"] + 1e-12) or np.any(
            arrays["upper"] < arrays["estimate"] - 1e-12
        ):
            raise DataError("credible band must contain the point estimate")


def default_grid() -> np.ndarray:
    """Daily activity grid matching the reported range: 0 to 60 minutes."""
    return np.arange(0.0, 61.0)


def raw_scale(values: np.ndarray) -> np.ndarray:
    """Convert model-scale risk factor values to the raw measurement scale."""
    out = np.array(values, dtype=float)
    out[..., list(LOG_SCALE_INDICES)] = np.exp(out[..., list(LOG_SCALE_INDICES)])
    return out


def _check_posterior(posterior: RfmPosterior):
    if posterior.n_draws == 0:
        raise DataError("posterior holds no draws")


def _sample_components(weights, n, rng):
    # Inverse-CDF sampling; clip guards the cumsum's floating point edge.
    cum = np.cumsum(weights)
    return np.minimum(np.searchsorted(cum, rng.random(n), side="right"), len(cum) - 1)


def posterior_predictive_draw(
    t_minutes: float,
    posterior: RfmPosterior,
    draw: int,
    rng: np.random.Generator,
    size: Optional[int] = None,
):
    """Sample model-scale risk factor vectors at a usual activity level.

    A mixture component is drawn from the posterior draw's weights, then a
    7-vector from that component's normal around the nonlinear mean.  Values
    stay on the model scale; apply ``raw_scale`` before comparing against
    raw thresholds.

    Parameters
    ----------
    t_minutes : float
        Usual daily activity in minutes.
    posterior : RfmPosterior
        Relabeled posterior.
    draw : int
        Index of the posterior draw to condition on.
    rng : numpy.random.Generator
        Source of randomness.
    size : int, optional
        Number of vectors; None returns a single 7-vector.

    Returns
    -------
    ndarray
        Shape (7,) when size is None, else (size, 7).
    """
    _check_posterior(posterior)
    if not 0 <= draw < posterior.n_draws:
        raise DataError(f"draw index {draw} out of range")
    if not np.isfinite(t_minutes) or t_minutes < 0:
        raise DataError(f"activity minutes must be nonnegative, got {t_minutes}")
    n = 1 if size is None else int(size)
    m = eval_mean(float(t_minutes) ** 0.25, posterior.curve_at(draw), posterior.linear_at(draw))
    comp = _sample_components(posterior.weights[draw], n, rng)
    chol = np.linalg.cholesky(posterior.covariances[draw])
    noise = np.einsum("sij,sj->si", chol[comp], rng.standard_normal((n, 7)))
    out = posterior.intercepts[draw, comp] + m + noise
    return out[0] if size is None else out


def elevated_criteria(values, sex, thresholds: Optional[Thresholds] = None) -> np.ndarray:
    """Evaluate the six elevated-level criteria on model-scale values.

    Blood pressure counts once: either pressure beyond its cutoff marks the
    criterion.  The column order follows CRITERIA.

    Parameters
    ----------
    values : ndarray
        Model-scale risk factors, shape (..., 7).
    sex : str or ndarray
        "male" or "female", scalar or one value per leading row.
    thresholds : Thresholds, optional

    Returns
    -------
    ndarray
        Boolean array of shape (..., 6).
    """
    thresholds = thresholds or Thresholds()
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != len(RISK_FACTORS):
        raise DataError("expected 7 risk factor columns")
    female = np.asarray(sex) == "female"
    male_cuts = thresholds.model_cutoffs("male")
    female_cuts = thresholds.model_cutoffs("female")
    cuts = np.where(female[..., None], female_cuts, male_cuts)
    out = np.empty(values.shape[:-1] + (6,), dtype=bool)
    out[..., 0] = values[..., 0] > cuts[..., 0]
    out[..., 1] = values[..., 1] > cuts[..., 1]
    out[..., 2] = values[..., 2] > cuts[..., 2]
    out[..., 3] = (values[..., 3] > cuts[..., 3]) | (values[..., 4] > cuts[..., 4])
    out[..., 4] = values[..., 6] < cuts[..., 6]
    out[..., 5] = values[..., 5] > cuts[..., 5]
    return out


def _curve_matrix(posterior: RfmPosterior, j: int, x: np.ndarray) -> np.ndarray:
    # Mean contribution of factor j at each (draw, grid) pair.
    if j < 4:
        drop = posterior.drop[:, j : j + 1]
        rate = posterior.rate[:, j : j + 1]
        inflection = posterior.inflection[:, j : j + 1]
        return -drop * expit(rate * (x[None, :] - inflection))
    return posterior.slope[:, j - 4 : j - 3] * x[None, :]


def _exceedance_matrix(posterior, j, x, cutoff, low_is_bad) -> np.ndarray:
    curve = _curve_matrix(posterior, j, x)
    total = np.zeros_like(curve)
    for h in range(posterior.h):
        mean = posterior.intercepts[:, h, j][:, None] + curve
        sd = np.sqrt(posterior.covariances[:, h, j, j])[:, None]
        z = (cutoff - mean) / sd
        tail = stats.norm.cdf(z) if low_is_bad else stats.norm.sf(z)
        total += posterior.weights[:, h][:, None] * tail
    return total


def _sex_shares(sex: str, female_fraction: float):
    if sex == "mixed":
        if not 0 <= female_fraction <= 1:
            raise DataError("female_fraction must lie in [0, 1]")
        return (("male", 1.0 - female_fraction), ("female", female_fraction))
    if sex in ("male", "female"):
        return ((sex, 1.0),)
    raise DataError(f"unknown sex {sex!r}")


def _band(probs: np.ndarray, level: float):
    # Pointwise quantile band over posterior draws, widened to keep the
    # mean inside when draws are few or skewed.
    alpha = 1.0 - level
    estimate = probs.mean(axis=0)
    lower, upper = np.quantile(probs, [alpha / 2, 1 - alpha / 2], axis=0)
    return estimate, np.minimum(lower, estimate), np.maximum(upper, estimate)


def prob_high(
    rf: str,
    grid,
    posterior: RfmPosterior,
    sex: str = "mixed",
    female_fraction: float = 0.5,
    thresholds: Optional[Thresholds] = None,
    level: float = 0.95,
) -> PredictiveCurve:
    """Probability of an elevated level for one risk factor along a grid.

    The exceedance probability is closed-form for each posterior draw:
    a weighted normal tail across mixture components.  The band is the
    pointwise posterior quantile interval.

    Parameters
    ----------
    rf : str
        Risk factor name from RISK_FACTORS.
    grid : array_like
        Daily activity minutes, nonnegative.
    posterior : RfmPosterior
    sex : str
        "male", "female", or "mixed" (population mix of the two).
    female_fraction : float
        Female share under "mixed".
    thresholds : Thresholds, optional
    level : float
        Credible band coverage.

    Returns
    -------
    PredictiveCurve
    """
    _check_posterior(posterior)
    if rf not in RISK_FACTORS:
        raise DataError(f"unknown risk factor {rf!r}")
    j = RISK_FACTORS.index(rf)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(~np.isfinite(grid)) or np.any(grid < 0):
        raise DataError("grid must be 1-d, finite, and nonnegative")
    thresholds = thresholds or Thresholds()
    x = grid**0.25
    probs = np.zeros((posterior.n_draws, grid.size))
    for sex_label, share in _sex_shares(sex, female_fraction):
        cutoff = thresholds.model_cutoffs(sex_label)[j]
        probs += share * _exceedance_matrix(posterior, j, x, cutoff, LOW_IS_BAD[j])
    estimate, lower, upper = _band(probs, level)
    return PredictiveCurve(name=rf, grid=grid, estimate=estimate, lower=lower, upper=upper)


def prob_R_or_more(
    grid,
    posterior: RfmPosterior,
    sex: str = "mixed",
    female_fraction: float = 0.5,
    thresholds: Optional[Thresholds] = None,
    n_sim: int = 200,
    level: float = 0.95,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[PredictiveCurve, ...]:
    """Probability of at least R elevated criteria, for R = 1..6.

    Within each posterior draw, predictive vectors are simulated once and
    reused across the grid (common random numbers), so the six returned
    curves are nested pointwise by construction.

    Parameters
    ----------
    grid : array_like
        Daily activity minutes.
    posterior : RfmPosterior
    sex : str
        "male", "female", or "mixed"; under "mixed" each simulated
        individual's sex is drawn with the given female fraction.
    female_fraction : float
    thresholds : Thresholds, optional
    n_sim : int
        Predictive simulations per posterior draw.
    level : float
        Credible band coverage.
    rng : numpy.random.Generator, optional

    Returns
    -------
    tuple of PredictiveCurve
        Curves named "R>=1" through "R>=6".
    """
    _check_posterior(posterior)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(~np.isfinite(grid)) or np.any(grid < 0):
        raise DataError("grid must be 1-d, finite, and nonnegative")
    if n_sim < 1:
        raise DataError("n_sim must be positive")
    shares = _sex_shares(sex, female_fraction)
    thresholds = thresholds or Thresholds()
    rng = make_rng(0) if rng is None else rng
    x = grid**0.25
    chol = np.linalg.cholesky(posterior.covariances)
    probs = np.zeros((6, posterior.n_draws, grid.size))
    for l in range(posterior.n_draws):
        comp = _sample_components(posterior.weights[l], n_sim, rng)
        noise = np.einsum("sij,sj->si", chol[l, comp], rng.standard_normal((n_sim, 7)))
        base = posterior.intercepts[l, comp] + noise
        if len(shares) == 1:
            sexes = shares[0][0]
        else:
            sexes = np.where(rng.random(n_sim) < female_fraction, "female", "male")
        means = eval_mean(x, posterior.curve_at(l), posterior.linear_at(l))
        values = means[:, None, :] + base[None, :, :]
        counts = elevated_criteria(values, sexes, thresholds).sum(axis=-1)
        for r in range(1, 7):
            probs[r - 1, l] = (counts >= r).mean(axis=1)
    curves = []
    for r in range(1, 7):
        estimate, lower, upper = _band(probs[r - 1], level)
        curves.append(
            PredictiveCurve(
                name=f"R>={r}", grid=grid, estimate=estimate, lower=lower, upper=upper
            )
        )
    return tuple(curves)


def standardized_residuals(y, t_pool, posterior: RfmPosterior) -> np.ndarray:
    """Standardize observed panels against their predictive moments.

    The predictive mean and variance are component-marginalized within each
    posterior draw (the variance picks up the between-component spread of
    the intercepts) and then averaged over draws, each draw evaluated at
    its own retained exposure vector.

    Parameters
    ----------
    y : ndarray
        Model-scale risk factor panels, shape (n, 7).
    t_pool : ndarray
        Pool of usual activity vectors, shape (pool, n).
    posterior : RfmPosterior

    Returns
    -------
    ndarray
        Standardized residuals, shape (n, 7).
    """
    _check_posterior(posterior)
    y = np.asarray(y, dtype=float)
    t_pool = np.asarray(t_pool, dtype=float)
    if y.ndim != 2 or y.shape[1] != len(RISK_FACTORS):
        raise DataError("y must have shape (n, 7)")
    if t_pool.ndim != 2 or t_pool.shape[1] != y.shape[0]:
        raise DataError("exposure pool misalignment with panels")
    if posterior.t_index.max() >= t_pool.shape[0]:
        raise DataError("posterior references exposures beyond the pool")
    x_pool = t_pool**0.25
    n = y.shape[0]
    mean_sum = np.zeros((n, 7))
    var_sum = np.zeros(7)
    for l in range(posterior.n_draws):
        x = x_pool[posterior.t_index[l]]
        m = eval_mean(x, posterior.curve_at(l), posterior.linear_at(l))
        mean_sum += posterior.gamma0[l] + m
        dev = posterior.intercepts[l] - posterior.gamma0[l]
        diag = np.diagonal(posterior.covariances[l], axis1=1, axis2=2)
        var_sum += posterior.weights[l] @ (diag + dev**2)
    mean = mean_sum / posterior.n_draws
    var = var_sum / posterior.n_draws
    if np.any(var <= 0):
        raise DataError("nonpositive predictive variance")
    return (y - mean) / np.sqrt(var)
