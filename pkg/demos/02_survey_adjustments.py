"""The three fixed pre-model adjustments.

Shows the weekend correction that removes day-of-week shifts in daily
activity, the rank-quantile transform that converts unequal survey
weights into an equal-weight sample, and the age-cubic variance function
that is fit once and then frozen for the measurement error model.
"""

import numpy as np

from actimets.ingest import build_cohorts, default_covariates
from actimets.preprocess import (
    adjust_survey_weights,
    adjust_weekend_all,
    fit_preliminary_ar1,
    fit_variance_function,
    fit_weekend_model,
)
from actimets.simgen import SimConfig, simulate_cohort
from actimets.statskernel import make_rng


def main():
    cohort = simulate_cohort(SimConfig(n=150, seed=21))
    cohorts = build_cohorts(cohort.days, cohort.panels)
    mem_ids = set(cohorts.mem_ids)
    days = [d for d in cohort.days if d.participant_id in mem_ids]

    # 1. Weekend correction: fit MVPA on Saturday/Sunday indicators, then
    # shift each day to the all-week mean so weekday mix stops mattering.
    model = fit_weekend_model(days)
    print("weekend model (minutes of daily activity)")
    print(f"  weekday level {model.psi0:7.2f}")
    print(f"  Saturday shift {model.psi1:+6.2f}")
    print(f"  Sunday shift   {model.psi2:+6.2f}")
    adjusted = adjust_weekend_all(days, model)
    raw_mean = np.mean([d.mvpa_minutes for d in days])
    adj_mean = np.mean([a.w1 for a in adjusted])
    print(f"  mean before {raw_mean:.2f} -> after {adj_mean:.2f} (grand mean preserved)")

    # 2. Survey-weight adjustment: heavily weighted values pull the
    # equal-weight quantiles toward themselves; equal weights change nothing.
    rng = make_rng(4)
    values = np.sort(rng.lognormal(4.0, 0.5, 8).round(1))
    weights = np.ones(8)
    weights[-1] = 6.0  # one person stands for six
    print("\nsurvey-weight adjustment")
    print(f"  values          {values}")
    print(f"  unequal weights {adjust_survey_weights(values, weights)}")
    print(f"  equal weights   {adjust_survey_weights(values, np.ones(8))} (identity)")

    # 3. Variance function: residuals from the preliminary mixed model give
    # an age-cubic measurement variance, frozen before the Bayesian fit.
    by_pid = {p.participant_id: p for p in cohort.participants}
    covariates = {pid: default_covariates(by_pid[pid]) for pid in cohorts.mem_ids}
    fit = fit_preliminary_ar1(adjusted, covariates)
    residuals = np.array([r.residual for r in fit.residuals])
    ages = np.array([by_pid[r.participant_id].age for r in fit.residuals])
    vf = fit_variance_function(residuals, ages)
    print("\nage-cubic variance function (fourth-root scale)")
    for age in (25.0, 45.0, 65.0, 80.0):
        print(f"  age {age:4.0f}: xi^2 = {float(vf(age)):.4f}")


if __name__ == "__main__":
    main()
