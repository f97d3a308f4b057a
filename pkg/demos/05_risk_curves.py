"""Turning a fitted posterior into population risk curves.

Builds a single-draw posterior pinned at the package's published-scale
point estimates and evaluates the two headline outputs: the probability
that each risk factor is elevated as daily activity grows, and the
probability of carrying at least R elevated criteria.  Both are what the
pipeline's predict stage writes to disk.
"""

import numpy as np

from actimets.predict import prob_R_or_more, prob_high
from actimets.rfm import RISK_FACTORS, RfmPosterior, compute_gamma0
from actimets.simgen import default_mixture, default_rfm_truth
from actimets.statskernel import make_rng


def point_estimate_posterior():
    """One-draw posterior at the default survey-scale estimates."""
    curves, linear = default_rfm_truth()
    weights, intercepts, covariances = default_mixture()
    return RfmPosterior(
        factor_names=RISK_FACTORS,
        drop=curves.drop[None],
        rate=curves.rate[None],
        inflection=curves.inflection[None],
        slope=linear.slope[None],
        weights=weights[None],
        intercepts=intercepts[None],
        covariances=covariances[None],
        labels=np.zeros((1, 4), dtype=np.int16),
        t_index=np.zeros(1, dtype=np.int64),
        chain=np.zeros(1, dtype=np.int8),
        gamma0=compute_gamma0(intercepts[None], weights[None]),
        rhat=np.array([]),
        rhat_names=(),
        acceptance={},
        seed=0,
        relabeled=True,
    )


def main():
    post = point_estimate_posterior()
    grid = np.array([0.0, 15.0, 30.0, 45.0, 60.0])

    print("probability each risk factor is elevated, by usual daily minutes")
    print(f"{'factor':<16}" + "".join(f"{int(g):>8}" for g in grid))
    for name in RISK_FACTORS:
        curve = prob_high(name, grid, post)
        row = "".join(f"{p:>8.3f}" for p in curve.estimate)
        print(f"{name:<16}{row}")

    curves = prob_R_or_more(grid, post, n_sim=20000, rng=make_rng(0))
    print("\nprobability of at least R elevated criteria")
    print(f"{'count':<16}" + "".join(f"{int(g):>8}" for g in grid))
    for curve in curves[:4]:
        row = "".join(f"{p:>8.3f}" for p in curve.estimate)
        print(f"{curve.name:<16}{row}")

    one = curves[0].estimate
    print(f"\ngoing from sedentary to 60 active minutes moves P(any elevated) "
          f"from {one[0]:.2f} to {one[-1]:.2f}")


if __name__ == "__main__":
    main()
