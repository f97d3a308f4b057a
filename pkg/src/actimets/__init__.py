"""Two-stage Bayesian pipeline linking usual daily activity to metabolic
syndrome risk factors.

Stage 1 fits a two-part measurement error model to repeated accelerometer
days and turns its posterior into draws of each person's usual activity.
Stage 2 feeds those draws, one per iteration, into a nonlinear seemingly
unrelated regression with mixture-of-normals errors across seven risk
factors, so the risk-factor fit carries the full stage-1 uncertainty.

The top level re-exports the main workflow entry points; the per-stage
modules (`ingest`, `preprocess`, `mem`, `rfm`, `predict`, `simgen`,
`fileio`, `statskernel`) carry the full API.
"""

from .errors import ActimetsError, ConfigError, DataError, DiagnosticError
from .ingest import RISK_FACTORS, build_cohorts, derive_day_activities
from .mem import MemSettings, build_mem_data, posterior_of_t, sample_mem, usual_mvpa
from .predict import Thresholds, posterior_predictive_draw, prob_R_or_more, prob_high
from .preprocess import (
    adjust_survey_weights,
    fit_preliminary_ar1,
    fit_variance_function,
    fit_weekend_model,
)
from .rfm import RfmSettings, compute_dic, relabel, run_two_stage
from .simgen import SimConfig, simulate_cohort
from .statskernel import make_rng

__version__ = "0.1.0"

__all__ = [
    "ActimetsError",
    "ConfigError",
    "DataError",
    "DiagnosticError",
    "MemSettings",
    "RISK_FACTORS",
    "RfmSettings",
    "SimConfig",
    "Thresholds",
    "__version__",
    "adjust_survey_weights",
    "build_cohorts",
    "build_mem_data",
    "compute_dic",
    "derive_day_activities",
    "fit_preliminary_ar1",
    "fit_variance_function",
    "fit_weekend_model",
    "make_rng",
    "posterior_of_t",
    "posterior_predictive_draw",
    "prob_R_or_more",
    "prob_high",
    "relabel",
    "run_two_stage",
    "sample_mem",
    "simulate_cohort",
    "usual_mvpa",
]
