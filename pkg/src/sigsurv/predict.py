"""Posterior predictive survival curves with credible bands.

Each posterior draw samples phi from its Gamma factor and theta from
the (possibly low-rank) Gaussian factor, evaluates the linearized
hazard on the requested time grid, integrates it cumulatively by
trapezoid from t = 0, and exponentiates the negative. Bands are
equal-tailed pointwise quantiles across draws.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .hazard import BaselinePrior, baseline_factor
from .metrics import SurvivalCurves
from .net import MlpModel, forward_batch, jacobian_batch
from .numkit import RngStream, sigmoid

__all__ = [
    "PosteriorSurvival",
    "credible_band",
    "sample_survival",
    "mean_survival_matrix",
]


@dataclass(frozen=True)
class PosteriorSurvival:
    """Sampled curves (draws x times) on `times` (original units) with
    pointwise mean, median, and equal-tailed (lo, hi) band at `level`.
    `flagged_extrapolation` marks grids that extend beyond the training
    horizon."""

    times: np.ndarray
    curves: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    level: float
    flagged_extrapolation: bool

    @property
    def n_draws(self) -> int:
        return self.curves.shape[0]


def credible_band(samples: np.ndarray, level: float):
    """Equal-tailed pointwise quantile band over draws (rows). `level`
    must lie strictly inside (0, 1); at least 20 draws required."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if not 0.0 < level < 1.0:
        raise InputError("level must be strictly between 0 and 1")
    if samples.shape[0] < 20:
        raise InputError("need at least 20 draws for a quantile band")
    a = 1.0 - level
    lo = np.quantile(samples, a / 2.0, axis=0)
    hi = np.quantile(samples, 1.0 - a / 2.0, axis=0)
    return lo, hi


def _prep_times(times, t_max: float):
    """Validate the prediction grid, convert to normalized units, and
    prepend t = 0 when absent so cumulative integration starts at the
    origin. Returns (times, tq, prepend_zero, flagged)."""
    times = np.asarray(times, dtype=float).ravel()
    if times.size < 1 or np.any(np.diff(times) <= 0) or times[0] < 0:
        raise InputError("times must be nonnegative and strictly increasing")
    t_norm = times / float(t_max)
    flagged = bool(np.any(t_norm > 1.0 + 1e-12))
    if flagged:
        warnings.warn(
            "prediction grid extends beyond the training horizon; "
            "curves there are extrapolations",
            RuntimeWarning,
            stacklevel=2,
        )
    prepend_zero = t_norm[0] > 0.0
    tq = np.concatenate([[0.0], t_norm]) if prepend_zero else t_norm
    return times, tq, prepend_zero, flagged


def _draw_posterior(post, theta_map: np.ndarray, rng: RngStream,
                    n_draws: int):
    """Draw (phi, theta) jointly from the variational factors. phi is
    drawn before theta so the draw stream layout is stable for a given
    seed."""
    alpha, beta = float(post.alpha_tilde), float(post.beta_tilde)
    phi_draws = rng.gen.gamma(alpha, 1.0 / beta, size=n_draws)
    z = rng.gen.standard_normal((theta_map.size, n_draws))
    theta_draws = post.mu_tilde[:, None] + post.sigma.sqrt_matvec(z)  # (m, S)
    return phi_draws, theta_draws


def _curves_for_subject(
    model, prior, theta_map, tq, prepend_zero, x,
    phi_draws, theta_draws,
) -> np.ndarray:
    """Survival curves (draws x times) for one subject under the given
    posterior draws: linearized hazard on the grid, cumulative
    trapezoid, exponentiate-negate."""
    X_rep = np.tile(x, (tq.size, 1))
    base = baseline_factor(model, prior, tq, X_rep)          # (Tq,)
    g_map = forward_batch(model, tq, X_rep, theta_map)       # (Tq,)
    J = jacobian_batch(model, tq, X_rep, theta_map)          # (Tq, m)

    g_lin = g_map[:, None] + J @ (theta_draws - theta_map[:, None])  # (Tq, S)
    lam = phi_draws[None, :] * base[:, None] * sigmoid(g_lin)
    dt = np.diff(tq)
    cum = np.zeros_like(lam)
    if tq.size > 1:
        cum[1:, :] = np.cumsum(
            0.5 * (lam[1:, :] + lam[:-1, :]) * dt[:, None], axis=0
        )
    surv = np.exp(-cum)
    if prepend_zero:
        surv = surv[1:, :]
    return surv.T  # (S, T)


def _posterior_from_curves(times, curves, level: float,
                           flagged: bool) -> PosteriorSurvival:
    n_draws = curves.shape[0]
    lo, hi = credible_band(curves, level) if n_draws >= 20 else (
        curves.min(axis=0), curves.max(axis=0)
    )
    return PosteriorSurvival(
        times=times,
        curves=curves,
        mean=curves.mean(axis=0),
        median=np.quantile(curves, 0.5, axis=0),
        lo=lo,
        hi=hi,
        level=level,
        flagged_extrapolation=flagged,
    )


def sample_survival(
    post,
    model: MlpModel,
    prior: BaselinePrior,
    theta_map: np.ndarray,
    t_max: float,
    x,
    times,
    rng: RngStream,
    n_draws: int = 200,
    level: float = 0.9,
) -> PosteriorSurvival:
    """Posterior survival curves for one subject at `times` (original
    units). `post` carries the variational parameters (alpha_tilde,
    beta_tilde, mu_tilde, sigma); `theta_map` is the linearization
    point."""
    if n_draws < 2:
        raise InputError("n_draws must be >= 2")
    theta_map = np.asarray(theta_map, dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    times, tq, prepend_zero, flagged = _prep_times(times, t_max)
    phi_draws, theta_draws = _draw_posterior(post, theta_map, rng, n_draws)
    curves = _curves_for_subject(
        model, prior, theta_map, tq, prepend_zero, x, phi_draws, theta_draws
    )
    return _posterior_from_curves(times, curves, level, flagged)


def mean_survival_matrix(
    post,
    model: MlpModel,
    prior: BaselinePrior,
    theta_map: np.ndarray,
    t_max: float,
    X,
    times,
    rng: RngStream,
    n_draws: int = 200,
    level: float = 0.9,
):
    """Posterior-mean survival curves for every row of X under one
    shared set of posterior draws (common random numbers across
    subjects, so between-subject curve differences reflect covariates
    rather than Monte-Carlo noise). Returns (SurvivalCurves of the
    means, list of per-subject PosteriorSurvival)."""
    if n_draws < 2:
        raise InputError("n_draws must be >= 2")
    theta_map = np.asarray(theta_map, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    times, tq, prepend_zero, flagged = _prep_times(times, t_max)
    phi_draws, theta_draws = _draw_posterior(post, theta_map, rng, n_draws)
    per_subject = []
    means = []
    for i in range(X.shape[0]):
        sub_curves = _curves_for_subject(
            model, prior, theta_map, tq, prepend_zero, X[i],
            phi_draws, theta_draws,
        )
        ps = _posterior_from_curves(times, sub_curves, level, flagged)
        per_subject.append(ps)
        means.append(ps.mean)
    curves = SurvivalCurves(times=np.asarray(times, dtype=float),
                            values=np.vstack(means))
    return curves, per_subject
