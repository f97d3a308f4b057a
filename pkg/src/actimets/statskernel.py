"""Numerical primitives shared by the posterior samplers.

Dense SPD helpers, random draws for the handful of distributions the models
need, log-density evaluators, split-chain convergence diagnostics,
batch-means Monte Carlo errors, and an adaptive random-walk Metropolis
driver.  Random streams use the counter-based Philox bit generator so that
independent per-chain substreams are reproducible from a single root seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "AdaptSettings",
    "ChainState",
    "Spd",
    "adaptive_rw_metropolis",
    "chain_rngs",
    "gelman_rubin",
    "half_cauchy_logpdf",
    "make_rng",
    "mcse_batch_means",
    "mvn_logpdf",
    "normal_logpdf",
    "ols",
    "sample_categorical_logits",
    "sample_dirichlet",
    "sample_half_cauchy",
    "sample_inverse_wishart",
    "sample_lkj_corr",
    "sample_mvn",
]

LOG_2PI = math.log(2.0 * math.pi)


def make_rng(seed):
    """Generator backed by the counter-based Philox bit generator.

    Parameters
    ----------
    seed : int or numpy.random.SeedSequence
        Root entropy.

    Returns
    -------
    numpy.random.Generator
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def chain_rngs(seed, n_chains):
    """Spawn ``n_chains`` independent generators from one root seed.

    Each chain gets its own Philox substream, so adding or dropping chains
    never perturbs the streams of the others.
    """
    root = np.random.SeedSequence(seed)
    return [make_rng(s) for s in root.spawn(n_chains)]


@dataclass(frozen=True)
class Spd:
    """Symmetric positive definite matrix held as its lower Cholesky factor.

    Attributes
    ----------
    chol : ndarray, shape (d, d)
        Lower-triangular factor with strictly positive diagonal.
    """

    chol: np.ndarray

    def __post_init__(self):
        diag = np.diag(self.chol)
        if diag.size and not np.all(diag > 0):
            raise ValueError("Cholesky factor must have a positive diagonal")

    @classmethod
    def from_matrix(cls, a):
        """Factor a dense SPD matrix; raises ``ValueError`` if not SPD."""
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if not np.allclose(a, a.T, rtol=1e-8, atol=1e-12):
            raise ValueError("matrix is not symmetric")
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError as err:
            raise ValueError("matrix is not positive definite") from err
        return cls(chol)

    @property
    def dim(self):
        return self.chol.shape[0]

    def matrix(self):
        """Reassemble the dense matrix ``L @ L.T``."""
        return self.chol @ self.chol.T

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def solve(self, b):
        """Solve ``A x = b`` using the stored factor."""
        return cho_solve((self.chol, True), np.asarray(b, dtype=float))


def _as_spd(cov):
    return cov if isinstance(cov, Spd) else Spd.from_matrix(cov)


def sample_mvn(mean, cov, rng, size=None):
    """Draw from a multivariate normal via the Cholesky factor.

    Parameters
    ----------
    mean : array_like, shape (d,)
    cov : array_like or Spd
    rng : numpy.random.Generator
    size : int, optional
        Number of draws; ``None`` returns a single (d,) vector.
    """
    mean = np.asarray(mean, dtype=float)
    spd = _as_spd(cov)
    if size is None:
        return mean + spd.chol @ rng.standard_normal(spd.dim)
    z = rng.standard_normal((size, spd.dim))
    return mean + z @ spd.chol.T


def mvn_logpdf(x, mean, cov):
    """Multivariate normal log density.

    ``x`` may be a single (d,) point or an (n, d) batch; returns a scalar or
    an (n,) vector accordingly.
    """
    spd = _as_spd(cov)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    resid = np.atleast_2d(x) - np.asarray(mean, dtype=float)
    y = solve_triangular(spd.chol, resid.T, lower=True)
    quad = np.einsum("ij,ij->j", y, y)
    out = -0.5 * (spd.dim * LOG_2PI + spd.logdet() + quad)
    return float(out[0]) if single else out


def normal_logpdf(x, mean, sd):
    """Elementwise univariate normal log density."""
    x = np.asarray(x, dtype=float)
    z = (x - mean) / sd
    return -0.5 * (LOG_2PI + z * z) - np.log(sd)


def half_cauchy_logpdf(x, scale=1.0):
    """Log density of a half-Cauchy on [0, inf); -inf below zero."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(
            x >= 0,
            math.log(2.0 / math.pi) - math.log(scale) - np.log1p((x / scale) ** 2),
            -np.inf,
        )
    return out if out.ndim else float(out)


def sample_half_cauchy(scale, rng, size=None):
    """Draw from a half-Cauchy with the given scale."""
    return scale * np.abs(rng.standard_cauchy(size))


def sample_inverse_wishart(df, scale, rng, size=None):
    """Draw from an inverse-Wishart via the Bartlett decomposition.

    Parameters
    ----------
    df : float
        Degrees of freedom; must exceed ``d - 1``.
    scale : array_like or Spd
        Scale matrix Psi; for ``df > d + 1`` the mean is ``Psi / (df - d - 1)``.
    rng : numpy.random.Generator
    size : int, optional

    Returns
    -------
    ndarray, shape (d, d) or (size, d, d)
    """
    spd = _as_spd(scale)
    d = spd.dim
    if df <= d - 1:
        raise ValueError(f"df must exceed d - 1 = {d - 1}, got {df}")
    n = 1 if size is None else int(size)
    # Bartlett factor A of a Wishart(df, I) draw: lower triangle standard
    # normal, diagonal sqrt chi-square with decreasing dof.
    a = np.zeros((n, d, d))
    rows, cols = np.tril_indices(d, -1)
    if rows.size:
        a[:, rows, cols] = rng.standard_normal((n, rows.size))
    idx = np.arange(d)
    a[:, idx, idx] = np.sqrt(rng.chisquare(df - idx, size=(n, d)))
    # (A A')^{-1} conjugated by chol(Psi): solve A X = L' so the draw is X' X.
    x = np.linalg.solve(a, np.broadcast_to(spd.chol.T, (n, d, d)))
    draws = np.einsum("nji,njk->nik", x, x)
    return draws[0] if size is None else draws


def sample_dirichlet(alpha, rng, size=None):
    """Dirichlet draw; concentrations must be strictly positive."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("Dirichlet concentrations must be positive")
    return rng.dirichlet(alpha, size=size)


def sample_categorical_logits(logits, rng):
    """Row-wise categorical draws from unnormalized log weights.

    Uses the Gumbel-max trick, so no normalization pass is needed.

    Parameters
    ----------
    logits : array_like, shape (n, k)
    rng : numpy.random.Generator

    Returns
    -------
    ndarray of int, shape (n,)
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    if np.any(np.isnan(logits)):
        raise ValueError("NaN log weight")
    finite_any = np.max(logits, axis=1) > -np.inf
    if not np.all(finite_any):
        raise ValueError("a row has all log weights at -inf")
    g = rng.gumbel(size=logits.shape)
    return np.argmax(logits + g, axis=1)


def sample_lkj_corr(dim, rng, eta=1.0):
    """Draw a correlation matrix from the LKJ distribution (onion method).

    ``eta = 1`` is uniform over correlation matrices; for ``dim = 2`` the
    single correlation is then uniform on (-1, 1).
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if dim == 1:
        return np.ones((1, 1))
    beta = eta + (dim - 2) / 2.0
    u = rng.beta(beta, beta)
    rho = 2.0 * u - 1.0
    corr = np.array([[1.0, rho], [rho, 1.0]])
    for k in range(2, dim):
        beta -= 0.5
        y = rng.beta(k / 2.0, beta)
        u = rng.standard_normal(k)
        u /= np.linalg.norm(u)
        w = math.sqrt(y) * u
        q = np.linalg.cholesky(corr) @ w
        corr = np.block([[corr, q[:, None]], [q[None, :], np.ones((1, 1))]])
    return corr


def ols(x, y):
    """Least-squares coefficients of ``y`` on the columns of ``x``."""
    coef, *_ = np.linalg.lstsq(np.asarray(x, dtype=float), np.asarray(y, dtype=float), rcond=None)
    return coef


def gelman_rubin(chains):
    """Split-chain potential scale reduction factors.

    Each chain is split in half, so ``c`` chains of length ``n`` enter as
    ``2c`` sequences of length ``n // 2``; within-sequence and
    between-sequence variances combine in the usual pooled-variance estimate.
    Values are floored at 1 (the estimator can dip a hair below on i.i.d.
    input, which carries no diagnostic content).

    Parameters
    ----------
    chains : sequence of ndarray or ndarray, shape (c, n) or (c, n, p)
        At least two chains of equal length (>= 10 retained draws).

    Returns
    -------
    ndarray, shape (p,)
        One factor per parameter column (scalar traces give shape (1,)).
    """
    if isinstance(chains, (list, tuple)):
        shapes = {np.asarray(c).shape for c in chains}
        if len(shapes) != 1:
            raise ValueError(f"chains have unequal shapes: {sorted(shapes)}")
        chains = np.stack([np.asarray(c, dtype=float) for c in chains])
    else:
        chains = np.asarray(chains, dtype=float)
    if chains.ndim == 2:
        chains = chains[..., None]
    if chains.ndim != 3:
        raise ValueError("expected (chains, iterations) or (chains, iterations, params)")
    c, n, _ = chains.shape
    if c < 2:
        raise ValueError("need at least two chains")
    if n < 10:
        raise ValueError("need at least 10 retained draws per chain")
    half = n // 2
    splits = np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)
    means = splits.mean(axis=1)
    within = splits.var(axis=1, ddof=1).mean(axis=0)
    between_over_n = means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * within + between_over_n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / within)
    # Constant chains: 0/0 means perfect agreement, x/0 means disagreement.
    rhat = np.where(within == 0, np.where(between_over_n == 0, 1.0, np.inf), rhat)
    return np.maximum(rhat, 1.0)


def mcse_batch_means(draws, n_batches=20):
    """Monte Carlo standard error of the mean by batch means.

    Parameters
    ----------
    draws : ndarray, shape (n,) or (n, p)
    n_batches : int
        Number of equal batches; a remainder at the end is dropped.

    Returns
    -------
    ndarray
        Standard error per column (scalar input gives a 0-d array).
    """
    draws = np.asarray(draws, dtype=float)
    n = draws.shape[0]
    if n < 2 * n_batches:
        raise ValueError(f"need at least {2 * n_batches} draws for {n_batches} batches")
    width = n // n_batches
    trimmed = draws[: width * n_batches]
    batches = trimmed.reshape(n_batches, width, *draws.shape[1:])
    batch_means = batches.mean(axis=1)
    return batch_means.std(axis=0, ddof=1) / math.sqrt(n_batches)


@dataclass
class AdaptSettings:
    """Schedule for burn-in proposal adaptation.

    The proposal starts at ``initial_scale * I``; once ``start_fraction`` of
    the burn-in has passed, the empirical covariance of the chain history is
    rescaled by ``2.4^2 / d`` and installed every ``refresh_every`` steps.
    After ``burn_in`` steps the proposal freezes, preserving detailed
    balance for the retained draws.
    """

    burn_in: int
    initial_scale: float = 0.1
    start_fraction: float = 0.2
    refresh_every: int = 500
    jitter: float = 1e-9


@dataclass
class ChainState:
    """Mutable state of one random-walk Metropolis block."""

    x: np.ndarray
    logp: float
    proposal: Spd
    steps: int = 0
    accepted: int = 0
    nan_rejects: int = 0
    frozen: bool = False
    scale_mult: float = 1.0
    _count: int = 0
    _mean: np.ndarray | None = None
    _m2: np.ndarray | None = None
    _window_steps: int = 0
    _window_accepts: int = 0

    @classmethod
    def initial(cls, x, log_target, settings):
        """Fresh state at ``x``; raises if the target is not finite there."""
        x = np.array(x, dtype=float, copy=True)
        logp = float(log_target(x))
        if not np.isfinite(logp):
            raise ValueError(f"log target not finite at the initial point: {logp}")
        chol = math.sqrt(settings.initial_scale) * np.eye(x.size)
        return cls(x=x, logp=logp, proposal=Spd(chol))

    @property
    def acceptance_rate(self):
        return self.accepted / self.steps if self.steps else 0.0

    def _update_moments(self, x):
        if self._mean is None:
            self._mean = np.zeros_like(x)
            self._m2 = np.zeros((x.size, x.size))
        self._count += 1
        delta = x - self._mean
        self._mean += delta / self._count
        self._m2 += np.outer(delta, x - self._mean)

    def empirical_cov(self):
        if self._count < 2:
            return None
        return self._m2 / (self._count - 1)


def adaptive_rw_metropolis(log_target, state, settings, rng):
    """One adaptive random-walk Metropolis step.

    ``state.logp`` must equal ``log_target(state.x)`` on entry; callers
    embedding this block in a Gibbs sweep refresh it whenever conditioning
    variables have moved.  A NaN at the proposal rejects the move and is
    counted on ``state.nan_rejects``.  During burn-in the proposal follows
    the ``AdaptSettings`` schedule with an acceptance-rate backoff (halve
    the scale below 2% acceptance in the last window, double above 80%);
    after burn-in the proposal is frozen.

    Returns
    -------
    bool
        Whether the proposal was accepted.
    """
    d = state.x.size
    z = rng.standard_normal(d)
    u = rng.random()
    prop = state.x + state.proposal.chol @ z
    lp = float(log_target(prop))
    accepted = False
    if math.isnan(lp):
        state.nan_rejects += 1
    elif lp - state.logp > math.log(u):
        state.x = prop
        state.logp = lp
        accepted = True
        state.accepted += 1
    state.steps += 1
    state._window_steps += 1
    state._window_accepts += int(accepted)

    if not state.frozen:
        if state.steps >= settings.burn_in:
            state.frozen = True
        else:
            adapt_start = settings.start_fraction * settings.burn_in
            if state.steps >= adapt_start:
                state._update_moments(state.x)
                if state.steps % settings.refresh_every == 0 and state._count >= max(2 * d, 10):
                    cov = state.empirical_cov()
                    rate = state._window_accepts / state._window_steps
                    if rate < 0.02:
                        state.scale_mult *= 0.5
                    elif rate > 0.8:
                        state.scale_mult *= 2.0
                    state._window_steps = 0
                    state._window_accepts = 0
                    scale = state.scale_mult * 2.4**2 / d
                    floor = settings.jitter * max(float(np.max(np.diag(cov))), 1.0)
                    try:
                        state.proposal = Spd.from_matrix(scale * cov + floor * np.eye(d))
                    except ValueError:
                        pass  # keep the previous proposal if the history is degenerate
    return accepted
