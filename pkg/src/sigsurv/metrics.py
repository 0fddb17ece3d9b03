"""Survival model evaluation: time-dependent (Antolini) concordance,
IPCW Brier score and its integrated form, and the Kaplan-Meier
censoring-survival estimator those weights require.

Survival estimates are passed as values on a shared increasing time
grid; evaluation between nodes is linear interpolation, clamped at the
grid endpoints.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InputError, NumericalError

__all__ = [
    "SurvivalCurves",
    "KmCensorCurve",
    "km_censor",
    "c_index",
    "ipcw_brier",
    "ipcw_ibs",
]


@dataclass(frozen=True)
class SurvivalCurves:
    """Per-subject survival estimates: values (N, T) on a shared strictly
    increasing time grid (original units)."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if times.size < 2 or np.any(np.diff(times) <= 0):
            raise InputError("time grid must be strictly increasing with >= 2 nodes")
        if values.shape[1] != times.size:
            raise InputError("values must be (n_subjects, n_times)")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def at(self, ts) -> np.ndarray:
        """Linear interpolation at query times, clamped to the end
        values outside the grid. Returns (N, len(ts))."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        t = self.times
        idx = np.clip(np.searchsorted(t, ts, side="right") - 1, 0, t.size - 2)
        t0, t1 = t[idx], t[idx + 1]
        w = np.clip((ts - t0) / (t1 - t0), 0.0, 1.0)
        v0 = self.values[:, idx]
        v1 = self.values[:, idx + 1]
        return v0 + w[None, :] * (v1 - v0)


@dataclass(frozen=True)
class KmCensorCurve:
    """Product-limit estimate of the censoring survival function
    (the "events" are censorings, 1 - delta). Right-continuous steps:
    C(t) = prod_{u_j <= t} (1 - d_j / n_j); C(0) = 1."""

    times: np.ndarray  # sorted unique observed times
    surv: np.ndarray   # value of C just after each time

    def eval(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        idx = np.searchsorted(self.times, ts, side="right") - 1
        out = np.where(idx >= 0, self.surv[np.maximum(idx, 0)], 1.0)
        return out

    def eval_left(self, ts) -> np.ndarray:
        """Left limit C(t-): steps at t itself excluded."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        idx = np.searchsorted(self.times, ts, side="left") - 1
        return np.where(idx >= 0, self.surv[np.maximum(idx, 0)], 1.0)


def km_censor(dataset: Dataset) -> KmCensorCurve:
    y = dataset.y
    cens = 1 - dataset.delta
    times = np.unique(y)
    # at risk just before u_j; censorings exactly at u_j
    n_at_risk = np.array([(y >= u).sum() for u in times], dtype=float)
    d_cens = np.array([cens[y == u].sum() for u in times], dtype=float)
    factors = 1.0 - d_cens / n_at_risk
    return KmCensorCurve(times=times, surv=np.cumprod(factors))


def c_index(curves: SurvivalCurves, dataset: Dataset) -> float:
    """Time-dependent concordance: over comparable pairs (i, j) with
    delta_i = 1 and y_i < y_j, a pair scores 1 when
    S_i(y_i) < S_j(y_i), 1/2 on ties. Raises when no pair is
    comparable."""
    if curves.n != dataset.n:
        raise InputError("curve count does not match dataset size")
    y, delta = dataset.y, dataset.delta
    A = curves.at(y)          # A[j, i] = S_j(y_i)
    own = np.diag(A)          # S_i(y_i)
    s_j_at_yi = A.T           # (i, j)
    comparable = (delta[:, None] == 1) & (y[:, None] < y[None, :])
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise InputError("no comparable pairs (need an event before another time)")
    conc = (own[:, None] < s_j_at_yi).astype(float)
    ties = (own[:, None] == s_j_at_yi).astype(float)
    score = float((comparable * (conc + 0.5 * ties)).sum())
    return score / n_pairs


def ipcw_brier(
    curves: SurvivalCurves, dataset: Dataset, t: float, censor: KmCensorCurve
) -> float:
    """Inverse-probability-of-censoring-weighted Brier score at time t:
    (1/N) sum_i [ S_i(t)^2 1{y_i <= t, delta_i = 1} / C(y_i-)
                + (1 - S_i(t))^2 1{y_i > t} / C(t) ].
    Event weights use the left limit C(y_i-) so a subject's own
    censoring step cannot enter its weight."""
    if curves.n != dataset.n:
        raise InputError("curve count does not match dataset size")
    y, delta = dataset.y, dataset.delta
    s_t = curves.at([float(t)])[:, 0]
    past_event = (y <= t) & (delta == 1)
    still_at_risk = y > t

    c_left = censor.eval_left(y)
    c_t = float(censor.eval([float(t)])[0])
    if np.any(past_event & (c_left <= 0.0)):
        raise NumericalError(f"censor survival is zero at an event time <= t={t}")
    if still_at_risk.any() and c_t <= 0.0:
        raise NumericalError(f"censor survival is zero at t={t}")

    term1 = np.zeros(dataset.n)
    np.divide(s_t**2, c_left, out=term1, where=past_event)
    term1[~past_event] = 0.0
    term2 = np.where(still_at_risk, (1.0 - s_t) ** 2 / max(c_t, 1e-300), 0.0)
    return float((term1 + term2).mean())


def ipcw_ibs(
    curves: SurvivalCurves, dataset: Dataset, time_grid, censor: KmCensorCurve
) -> float:
    """Trapezoid integral of the IPCW Brier score over the grid,
    normalized by the integrated span. Nodes where the censor curve
    hits zero are skipped with a warning; at least two usable nodes are
    required."""
    time_grid = np.asarray(time_grid, dtype=float).ravel()
    if time_grid.size < 2 or np.any(np.diff(time_grid) <= 0):
        raise InputError("time_grid must be strictly increasing with >= 2 nodes")
    vals: list[float] = []
    kept: list[float] = []
    for t in time_grid:
        try:
            vals.append(ipcw_brier(curves, dataset, float(t), censor))
            kept.append(float(t))
        except NumericalError:
            warnings.warn(
                f"skipping t={t:g}: censor weight undefined (C=0)",
                RuntimeWarning,
                stacklevel=2,
            )
    if len(kept) < 2:
        raise NumericalError("fewer than two usable Brier nodes on the grid")
    kept_arr = np.asarray(kept)
    return float(np.trapezoid(np.asarray(vals), kept_arr) / (kept_arr[-1] - kept_arr[0]))
