"""Pre-model adjustments of the daily activity series and risk panels.

Order of operations: the weekend ratio adjustment rescales each day toward
the overall mean, the fourth root symmetrizes the positive amounts, survey
weights are traded for an equal-weight sample through the weighted ECDF,
and a preliminary mixed model with lag-one within-person correlation
supplies squared residuals for the age-cubic measurement error variance,
which is frozen as a plug-in for the activity model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.linalg import solve_triangular

from .errors import DataError
from .statskernel import ols

__all__ = [
    "AdjustedActivity",
    "Ar1Fit",
    "ResidualRecord",
    "VarianceFunction",
    "WeekendModel",
    "adjust_survey_weights",
    "adjust_weekend",
    "adjust_weekend_all",
    "fit_preliminary_ar1",
    "fit_variance_function",
    "fit_weekend_model",
]

SATURDAY = 6
SUNDAY = 7


@dataclass(frozen=True)
class WeekendModel:
    """OLS fit of daily MVPA minutes on Saturday and Sunday indicators."""

    psi0: float
    psi1: float
    psi2: float
    sigma_kappa_sq: float
    grand_mean: float

    def __post_init__(self):
        if not self.grand_mean > 0:
            raise DataError(f"grand mean activity must be positive, got {self.grand_mean}")

    def predicted(self, day_of_week):
        return (
            self.psi0
            + self.psi1 * (day_of_week == SATURDAY)
            + self.psi2 * (day_of_week == SUNDAY)
        )


@dataclass(frozen=True)
class AdjustedActivity:
    """Weekend-adjusted minutes ``w1`` and their fourth root ``w``."""

    participant_id: str
    day_index: int
    w1: float
    w: float

    def __post_init__(self):
        if self.w1 < 0:
            raise DataError(f"adjusted minutes must be non-negative, got {self.w1}")
        if not math.isclose(self.w, self.w1**0.25, rel_tol=1e-9, abs_tol=1e-12):
            raise DataError("w must equal w1 ** 0.25")


@dataclass(frozen=True)
class VarianceFunction:
    """Age-cubic residual variance, floored to stay positive.

    The coefficient vector is a frozen plug-in after fitting; downstream
    stages never refit it.
    """

    delta: np.ndarray
    floor: float = 1e-4

    def __call__(self, ages):
        ages = np.asarray(ages, dtype=float)
        design = np.stack([np.ones_like(ages), ages, ages**2, ages**3], axis=-1)
        return np.maximum(design @ self.delta, self.floor)


@dataclass(frozen=True)
class ResidualRecord:
    """One conditional residual from the preliminary mixed model."""

    participant_id: str
    day_index: int
    residual: float


@dataclass(frozen=True)
class Ar1Fit:
    """Preliminary mixed-model fit on the positive fourth-root amounts."""

    coefficients: np.ndarray
    phi: float
    person_var: float
    noise_var: float
    log_likelihood: float
    residuals: tuple


def fit_weekend_model(days):
    """Fit daily minutes on Saturday/Sunday indicators by least squares.

    Parameters
    ----------
    days : list of DayActivity

    Returns
    -------
    WeekendModel

    Raises
    ------
    DataError
        If fewer than three day-of-week classes (weekday, Saturday, Sunday)
        are present, the design is singular.
    """
    if not days:
        raise DataError("no days supplied")
    w0 = np.array([d.mvpa_minutes for d in days], dtype=float)
    dow = np.array([d.day_of_week for d in days])
    sat = (dow == SATURDAY).astype(float)
    sun = (dow == SUNDAY).astype(float)
    classes = {(int(s), int(u)) for s, u in zip(sat, sun)}
    if len(classes) < 3:
        raise DataError(
            "weekend design is singular: need weekday, Saturday, and Sunday "
            f"observations, got classes {sorted(classes)}"
        )
    x = np.column_stack([np.ones_like(w0), sat, sun])
    coef = ols(x, w0)
    resid = w0 - x @ coef
    dof = max(len(w0) - 3, 1)
    grand_mean = float(w0.mean())
    return WeekendModel(
        psi0=float(coef[0]),
        psi1=float(coef[1]),
        psi2=float(coef[2]),
        sigma_kappa_sq=float(resid @ resid / dof),
        grand_mean=grand_mean,
    )


def adjust_weekend(day, model):
    """Ratio-adjust one day toward the overall mean.

    Returns ``w1 = (grand_mean / predicted) * minutes``; zeros stay zero,
    and a nonpositive predicted mean is an error naming the day.
    """
    pred = model.predicted(day.day_of_week)
    if pred <= 0:
        raise DataError(
            f"predicted mean activity is not positive ({pred:.4g}) for participant "
            f"{day.participant_id} day {day.day_index}; ratio adjustment undefined"
        )
    w1 = model.grand_mean / pred * day.mvpa_minutes
    return AdjustedActivity(
        participant_id=day.participant_id,
        day_index=day.day_index,
        w1=w1,
        w=w1**0.25,
    )


def adjust_weekend_all(days, model):
    """Apply `adjust_weekend` to every day."""
    return [adjust_weekend(d, model) for d in days]


def adjust_survey_weights(values, weights):
    """Replace unequal-probability values by equal-weight ECDF quantiles.

    The weighted ECDF is inverted at the mid-rank levels (s - 0.5)/n using
    the generalized inverse (smallest observed value whose cumulative
    weight reaches the level), so the output lives on the original support.
    Ties are broken by input order.

    Parameters
    ----------
    values : array_like
        Finite positive raw measurements.
    weights : array_like
        Positive survey weights; any uniform rescaling gives the same output.

    Returns
    -------
    ndarray
        Adjusted values aligned with the input order.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.shape != weights.shape or values.ndim != 1:
        raise DataError("values and weights must be 1-d arrays of equal length")
    if values.size == 0:
        raise DataError("empty input")
    if not np.all(np.isfinite(values) & (values > 0)):
        raise DataError("values must be finite and positive")
    if not np.all(np.isfinite(weights) & (weights > 0)):
        raise DataError("weights must be finite and positive")
    n = values.size
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    cum /= cum[-1]
    levels = (np.arange(1, n + 1) - 0.5) / n
    picks = np.minimum(np.searchsorted(cum, levels, side="left"), n - 1)
    out = np.empty(n)
    out[order] = values[order][picks]
    return out


def _positive_series(adjusted):
    by_pid = {}
    for a in adjusted:
        if a.w1 > 0:
            by_pid.setdefault(a.participant_id, []).append(a)
    for pid, rows in by_pid.items():
        rows.sort(key=lambda a: a.day_index)
        days = [a.day_index for a in rows]
        if len(set(days)) != len(days):
            raise DataError(f"duplicate day_index for participant {pid}")
    return by_pid


def fit_preliminary_ar1(adjusted, covariates, max_iter=200):
    """Fit the preliminary mixed model to the positive fourth-root amounts.

    The model has fixed covariate effects, a person-level intercept, and
    within-person noise whose correlation decays as phi^lag in the gap
    between positive days.  Maximum likelihood over (phi, person variance,
    noise variance) with the fixed effects profiled out by GLS; the
    returned residuals subtract both the fixed effects and the empirical
    best predictor of each person's intercept.

    Parameters
    ----------
    adjusted : list of AdjustedActivity
        Only rows with positive amounts are used.
    covariates : mapping participant_id -> length-8 covariate vector
    max_iter : int
        Optimizer iteration cap.

    Returns
    -------
    Ar1Fit
    """
    by_pid = _positive_series(adjusted)
    if not by_pid:
        raise DataError("no positive activity amounts to fit")
    missing = sorted(set(by_pid) - set(covariates))
    if missing:
        raise DataError(f"missing covariates for participants: {missing[:5]}")

    # Group by the positive-day pattern; the covariance depends only on it.
    groups = {}
    for pid, rows in sorted(by_pid.items()):
        pattern = tuple(a.day_index for a in rows)
        g = groups.setdefault(pattern, {"pids": [], "w": [], "z": []})
        g["pids"].append(pid)
        g["w"].append([a.w for a in rows])
        g["z"].append(np.asarray(covariates[pid], dtype=float))
    packs = []
    for pattern, g in sorted(groups.items()):
        c = np.asarray(pattern, dtype=float)
        packs.append(
            {
                "pattern": pattern,
                "lags": np.abs(c[:, None] - c[None, :]),
                "w": np.asarray(g["w"], dtype=float),
                "z": np.asarray(g["z"], dtype=float),
                "pids": g["pids"],
            }
        )
    p = packs[0]["z"].shape[1]
    n_obs = sum(pk["w"].size for pk in packs)

    def decompose(theta):
        phi = math.tanh(theta[0])
        person_var = math.exp(2.0 * theta[1])
        noise_var = math.exp(2.0 * theta[2])
        return phi, person_var, noise_var

    def profile(theta):
        """GLS coefficients and profiled log-likelihood pieces for theta."""
        phi, person_var, noise_var = decompose(theta)
        gram = np.zeros((p, p))
        rhs = np.zeros(p)
        logdet = 0.0
        wvw = 0.0
        per_group = []
        for pk in packs:
            m = pk["lags"].shape[0]
            cov = person_var + noise_var * phi ** pk["lags"]
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                return None
            v_ones = solve_triangular(chol, np.ones(m), lower=True)
            v_ones = solve_triangular(chol.T, v_ones, lower=False)
            s0 = float(v_ones.sum())
            q = pk["w"] @ v_ones
            gram += s0 * pk["z"].T @ pk["z"]
            rhs += pk["z"].T @ q
            y = solve_triangular(chol, pk["w"].T, lower=True)
            wvw += float(np.sum(y * y))
            logdet += pk["w"].shape[0] * 2.0 * float(np.sum(np.log(np.diag(chol))))
            per_group.append((chol, v_ones))
        try:
            coef = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            return None
        quad = wvw - float(coef @ rhs)
        loglik = -0.5 * (n_obs * math.log(2.0 * math.pi) + logdet + quad)
        return coef, loglik, per_group

    def negloglik(theta):
        result = profile(theta)
        if result is None:
            return 1e12
        return -result[1]

    w_all = np.concatenate([pk["w"].ravel() for pk in packs])
    total_var = max(float(w_all.var()), 1e-6)
    x0 = np.array(
        [0.0, 0.5 * math.log(0.3 * total_var), 0.5 * math.log(0.7 * total_var)]
    )
    bounds = [(-2.65, 2.65), (-7.0, 4.0), (-7.0, 4.0)]
    opt = optimize.minimize(
        negloglik, x0, method="L-BFGS-B", bounds=bounds, options={"maxiter": max_iter}
    )
    if not opt.success and opt.fun >= 1e11:
        raise DataError(
            f"preliminary mixed-model fit failed: {opt.message} "
            f"(iterations {opt.nit}, objective {opt.fun:.6g})"
        )

    phi, person_var, noise_var = decompose(opt.x)
    coef, loglik, per_group = profile(opt.x)
    residuals = []
    for pk, (chol, v_ones) in zip(packs, per_group):
        fitted = pk["z"] @ coef
        centered = pk["w"] - fitted[:, None]
        # Person-intercept predictor: person_var * 1' V^{-1} (w - X coef).
        blup = person_var * (centered @ v_ones)
        resid = centered - blup[:, None]
        for row, pid in enumerate(pk["pids"]):
            for col, day in enumerate(pk["pattern"]):
                residuals.append(ResidualRecord(pid, int(day), float(resid[row, col])))
    residuals.sort(key=lambda r: (r.participant_id, r.day_index))
    return Ar1Fit(
        coefficients=coef,
        phi=phi,
        person_var=person_var,
        noise_var=noise_var,
        log_likelihood=loglik,
        residuals=tuple(residuals),
    )


def fit_variance_function(residuals, ages, floor=1e-4):
    """Least squares of squared residuals on (1, age, age^2, age^3).

    Parameters
    ----------
    residuals : array_like
        Conditional residuals from `fit_preliminary_ar1`, one per
        observation.
    ages : array_like
        Age for each residual's participant, aligned with ``residuals``.
    floor : float
        Evaluation floor keeping the plug-in variance positive.

    Returns
    -------
    VarianceFunction
    """
    residuals = np.asarray(residuals, dtype=float)
    ages = np.asarray(ages, dtype=float)
    if residuals.shape != ages.shape:
        raise DataError("residuals and ages must align")
    if np.unique(ages).size < 4:
        raise DataError("need at least 4 distinct ages to fit a cubic")
    design = np.column_stack([np.ones_like(ages), ages, ages**2, ages**3])
    delta = ols(design, residuals**2)
    return VarianceFunction(delta=delta, floor=floor)
