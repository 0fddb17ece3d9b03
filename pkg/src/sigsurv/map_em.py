"""MAP estimation by expectation-maximization in the augmented model.

The E-step refreshes the latent Polya-Gamma moments at event times and
the thinned-process rates/moments at quadrature nodes from the current
(theta, phi); the M-step maximizes the resulting Q-function over
(theta, log phi) with the in-house L-BFGS. Network evaluations here are
exact (no linearization) — the linearized machinery starts only in the
variational stage that consumes this module's MAP estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, NumericalError
from .hazard import HazardContext, _tiled_inputs, log_posterior
from .net import forward_batch, grad_weighted_sum
from .numkit import RngStream, pg_mean, sigmoid
from .optim import OptimResult, minimize_lbfgs

__all__ = ["EmState", "EmResult", "em_latent_update", "q_function", "q_grad",
           "em_m_step", "run_em"]


@dataclass(frozen=True)
class EmState:
    """Current parameters plus the latent moments computed from them.

    Latent fields are None until the first em_latent_update. a_coef is
    the coefficient of log phi in Q: alpha0 - 1 + sum_i delta_i
    + sum_{ik} v_ik lam_grid_ik.
    """

    theta: np.ndarray
    phi: float
    c_event: np.ndarray | None = None   # (N,) delta_i |g(y_i; theta)|
    e_omega: np.ndarray | None = None   # (N,) pg_mean(1, c_event)
    lam_grid: np.ndarray | None = None  # (N, K) thinned rates at nodes
    tau_grid: np.ndarray | None = None  # (N, K) pg_mean(1, |g|) at nodes
    a_coef: float | None = None

    def require_latents(self):
        if self.lam_grid is None:
            raise InputError("latent updates have not been run on this state")


@dataclass
class EmResult:
    """q_trace holds the per-iteration maximized Q values (entropy
    constant dropped, so monotonicity across iterations is not
    guaranteed — the latent entropy drifts); objective_trace holds the
    log posterior under the shared quadrature, which full EM iterations
    can never decrease. Convergence is judged on q_trace."""

    theta_map: np.ndarray
    phi_map: float
    q_trace: np.ndarray
    objective_trace: np.ndarray
    records: list[dict]
    converged: bool
    n_iter: int
    message: str


def em_latent_update(ctx: HazardContext, state: EmState) -> EmState:
    """E-step. c = delta |g(y_i)| drives the event PG means; the
    thinned-process rate at node t_k is
    (t^(rho-1)/Z) * phi * sigmoid(|g|) * exp(-(g + |g|)/2)
    (the stable form of lambda0 * sigmoid(-g)), with PG means at |g|."""
    ds, grid = ctx.dataset, ctx.grid
    theta, phi = state.theta, state.phi
    if not np.all(np.isfinite(theta)) or not np.isfinite(phi) or phi <= 0:
        raise InputError("state parameters must be finite with phi > 0")

    g_event = forward_batch(ctx.model, ds.y_norm, ds.X, theta)
    c_event = ds.delta * np.abs(g_event)
    e_omega = pg_mean(1.0, c_event)

    T_tile, X_rep = _tiled_inputs(ds, grid)
    g_grid = forward_batch(ctx.model, T_tile, X_rep, theta).reshape(ds.n, grid.n_nodes)
    ag = np.abs(g_grid)
    lam_grid = ctx.base_grid * phi * sigmoid(ag) * np.exp(-0.5 * (g_grid + ag))
    tau_grid = pg_mean(1.0, ag)

    a_coef = (
        ctx.prior.alpha0 - 1.0 + float(ds.delta.sum())
        + float((grid.weights * lam_grid).sum())
    )
    return replace(
        state, c_event=c_event, e_omega=e_omega,
        lam_grid=lam_grid, tau_grid=tau_grid, a_coef=a_coef,
    )


def _theta_terms(ctx: HazardContext, state: EmState, theta):
    """g evaluations shared by Q and its gradient; returns
    (g_event (N,), g_grid (N,K), vlam (N,K))."""
    ds, grid = ctx.dataset, ctx.grid
    g_event = forward_batch(ctx.model, ds.y_norm, ds.X, theta)
    T_tile, X_rep = _tiled_inputs(ds, grid)
    g_grid = forward_batch(ctx.model, T_tile, X_rep, theta).reshape(ds.n, grid.n_nodes)
    vlam = grid.weights * state.lam_grid
    return g_event, g_grid, vlam


def q_function(ctx: HazardContext, state: EmState, theta, phi: float) -> float:
    """Q(theta, phi | state latents), up to the additive constant the
    entropy terms contribute (dropped, so values compare within a run
    only)."""
    state.require_latents()
    if phi <= 0:
        raise InputError("phi must be positive")
    ds = ctx.dataset
    g_event, g_grid, vlam = _theta_terms(ctx, state, theta)

    event = float(
        (ds.delta * (0.5 * g_event - 0.5 * state.e_omega * g_event**2)).sum()
    )
    grid_term = -float((vlam * (0.5 * g_grid + 0.5 * state.tau_grid * g_grid**2)).sum())
    prior_theta = -0.5 * float(theta @ theta)
    phi_term = state.a_coef * float(np.log(phi)) - ctx.phi_rate * phi

    total = event + grid_term + prior_theta + phi_term
    if not np.isfinite(total):
        parts = {
            "event": event, "grid": grid_term,
            "theta-prior": prior_theta, "phi": phi_term,
        }
        bad = [k for k, v in parts.items() if not np.isfinite(v)]
        raise NumericalError(f"Q-function non-finite in term(s): {bad}")
    return total


def q_grad(ctx: HazardContext, state: EmState, theta, phi: float) -> np.ndarray:
    """Gradient of Q w.r.t. (theta, log phi), length m + 1."""
    state.require_latents()
    ds, grid = ctx.dataset, ctx.grid
    g_event, g_grid, vlam = _theta_terms(ctx, state, theta)

    w_event = ds.delta * (0.5 - state.e_omega * g_event)
    w_grid = -vlam * (0.5 + state.tau_grid * g_grid)
    T_all = np.concatenate([ds.y_norm, np.tile(grid.nodes, ds.n)])
    X_all = np.vstack([ds.X, np.repeat(ds.X, grid.n_nodes, axis=0)])
    w_all = np.concatenate([w_event, w_grid.ravel()])
    d_theta = grad_weighted_sum(ctx.model, T_all, X_all, theta, w_all) - theta
    d_logphi = state.a_coef - ctx.phi_rate * phi
    return np.concatenate([d_theta, [d_logphi]])


def em_m_step(
    ctx: HazardContext,
    state: EmState,
    max_iter: int = 100,
    gtol: float = 1e-6,
) -> tuple[EmState, float, OptimResult]:
    """Maximize Q over (theta, log phi) from the state's current point.
    Returns (state with new parameters, Q at the new point, optimizer
    diagnostics). Latent fields are kept (they describe the sweep that
    produced this Q)."""
    state.require_latents()
    if state.a_coef is None or state.a_coef <= 0:
        raise NumericalError(
            "log-phi coefficient in Q is nonpositive; Q is unbounded as phi -> 0"
        )

    def neg_q(z):
        theta, u = z[:-1], float(z[-1])
        phi = float(np.exp(u))
        f = -q_function(ctx, state, theta, phi)
        g = -q_grad(ctx, state, theta, phi)
        return f, g

    z0 = np.concatenate([state.theta, [np.log(state.phi)]])
    res = minimize_lbfgs(neg_q, z0, memory=10, max_iter=max_iter, gtol=gtol)
    theta_new = res.x[:-1]
    phi_new = float(np.exp(res.x[-1]))
    new_state = replace(state, theta=theta_new, phi=phi_new)
    return new_state, -res.f, res


def run_em(
    ctx: HazardContext,
    rng: RngStream,
    init_scale: float = 0.1,
    tol: float = 1e-6,
    max_iter: int = 500,
    m_step_iters: int = 100,
    m_step_gtol: float = 1e-6,
) -> EmResult:
    """Full EM loop to the MAP estimate.

    theta starts at a small seeded N(0, init_scale^2 I) draw (exact
    zeros are a stationary set for ReLU networks: every parameter
    gradient except the output bias vanishes there and stays zero, so
    init_scale = 0 — which reproduces that literal start — trains an
    intercept-only model); phi starts at its prior mean alpha0/beta0.
    Converges when |dQ|/|Q| < tol on two consecutive iterations; the
    returned flag reports convergence vs. iteration cap. The result
    carries the maximized-Q trace and the log-posterior trace (the
    latter is the quantity EM iterations provably never decrease).
    """
    if init_scale < 0:
        raise InputError("init_scale must be >= 0")
    theta0 = (
        ctx.model.random_theta(rng, scale=init_scale)
        if init_scale > 0
        else ctx.model.zero_theta()
    )
    phi0 = ctx.prior.alpha0 / ctx.prior.beta0
    state = EmState(theta=theta0, phi=phi0)

    q_trace: list[float] = []
    objective_trace: list[float] = []
    records: list[dict] = []
    hits = 0
    converged = False
    message = "iteration cap reached"
    it = 0
    for it in range(max_iter):
        state = em_latent_update(ctx, state)
        q_before = q_function(ctx, state, state.theta, state.phi)
        state, q_val, _ = em_m_step(ctx, state, max_iter=m_step_iters,
                                    gtol=m_step_gtol)
        q_trace.append(q_val)
        objective_trace.append(log_posterior(ctx, state.phi, state.theta))
        records.append(
            {
                "iteration": it,
                "q": q_val,
                "q_before_m_step": q_before,
                "objective": objective_trace[-1],
                "phi": state.phi,
                "theta_norm": float(np.linalg.norm(state.theta)),
            }
        )
        if len(q_trace) >= 2:
            rel = abs(q_trace[-1] - q_trace[-2]) / (abs(q_trace[-2]) + 1e-12)
            hits = hits + 1 if rel < tol else 0
            if hits >= 2:
                converged = True
                message = "relative Q change below tolerance twice"
                break
    return EmResult(
        theta_map=state.theta,
        phi_map=state.phi,
        q_trace=np.asarray(q_trace),
        objective_trace=np.asarray(objective_trace),
        records=records,
        converged=converged,
        n_iter=it + 1,
        message=message,
    )
