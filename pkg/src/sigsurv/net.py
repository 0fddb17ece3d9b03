"""Feedforward network g(t, x; theta): forward pass, reverse-mode
Jacobian w.r.t. the flat parameter vector, and local linearization.

Parameter layout (fixed, documented): for each layer in order, the
weight matrix W (fan_out x fan_in) flattened row-major, followed by the
bias vector b (fan_out). All layers concatenated give the flat theta of
length m = sum(fan_in*fan_out + fan_out).

Hidden activations are rectified-linear with subgradient 0 at the kink
(relu'(0) = 0). The time input t is concatenated raw with the covariates,
so the network input dimension is p + 1.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MlpModel",
    "forward",
    "forward_batch",
    "jacobian",
    "jacobian_batch",
    "grad_weighted_sum",
    "unflatten",
    "flatten",
    "params_to_doc",
    "params_from_doc",
    "LinearizedModel",
    "linearize",
]


@dataclass(frozen=True)
class MlpModel:
    """Architecture metadata: layer sizes (input p+1, hidden..., output 1).

    The model holds no parameters; theta is always passed explicitly.
    """

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least input and output layers")
        if any(s < 1 for s in sizes):
            raise ValueError("layer sizes must be >= 1")
        if sizes[-1] != 1:
            raise ValueError("output layer must be scalar")

    @classmethod
    def default(cls, p: int) -> "MlpModel":
        """Two hidden layers of 16 rectified-linear units on input (t, x)."""
        return cls(layer_sizes=(p + 1, 16, 16, 1))

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def zero_theta(self) -> np.ndarray:
        return np.zeros(self.n_params)

    def random_theta(self, rng, scale: float = 0.1) -> np.ndarray:
        """Seeded N(0, scale^2) initialization of the full flat vector."""
        return scale * rng.gen.standard_normal(self.n_params)


def _layer_slices(model: MlpModel):
    """Yield (W_slice, b_slice, fan_in, fan_out) per layer in layout order."""
    pos = 0
    s = model.layer_sizes
    for i in range(len(s) - 1):
        fi, fo = s[i], s[i + 1]
        w = slice(pos, pos + fi * fo)
        pos += fi * fo
        b = slice(pos, pos + fo)
        pos += fo
        yield w, b, fi, fo


def unflatten(model: MlpModel, theta):
    """Flat theta -> list of (W, b) per layer (views where possible)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.n_params,):
        raise ValueError(
            f"theta has shape {theta.shape}, expected ({model.n_params},)"
        )
    out = []
    for w, b, fi, fo in _layer_slices(model):
        out.append((theta[w].reshape(fo, fi), theta[b]))
    return out


def flatten(params) -> np.ndarray:
    """List of (W, b) -> flat theta in the documented layout."""
    chunks = []
    for W, b in params:
        chunks.append(np.asarray(W, dtype=float).ravel())
        chunks.append(np.asarray(b, dtype=float).ravel())
    return np.concatenate(chunks)


def _as_batch(model: MlpModel, T, X):
    T = np.asarray(T, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = np.broadcast_to(X, (T.shape[0], X.shape[0]))
    if X.shape[0] != T.shape[0]:
        raise ValueError("T and X row counts differ")
    Z = np.column_stack([T, X])
    if Z.shape[1] != model.input_dim:
        raise ValueError(
            f"input dim {Z.shape[1]} != model input dim {model.input_dim}"
        )
    return Z


def forward_batch(model: MlpModel, T, X, theta) -> np.ndarray:
    """g(t_j, x_j; theta) for all rows: T (n,), X (n, p) -> (n,)."""
    Z = _as_batch(model, T, X)
    layers = unflatten(model, theta)
    h = Z
    for W, b in layers[:-1]:
        h = np.maximum(h @ W.T + b, 0.0)
    W, b = layers[-1]
    return (h @ W.T + b)[:, 0]


def forward(model: MlpModel, t, x, theta) -> float:
    """Scalar network output at a single (t, x)."""
    return float(forward_batch(model, [t], np.asarray(x)[None, :], theta)[0])


def _forward_trace(model: MlpModel, Z, layers):
    """Forward pass keeping layer inputs and rectifier masks for backprop."""
    acts = [Z]
    masks = []
    h = Z
    for W, b in layers[:-1]:
        pre = h @ W.T + b
        mask = pre > 0.0  # subgradient 0 at the kink
        h = np.where(mask, pre, 0.0)
        acts.append(h)
        masks.append(mask)
    W, b = layers[-1]
    out = (h @ W.T + b)[:, 0]
    return out, acts, masks


def jacobian_batch(model: MlpModel, T, X, theta) -> np.ndarray:
    """Per-row gradient of the scalar output w.r.t. theta: (n, m)."""
    Z = _as_batch(model, T, X)
    layers = unflatten(model, theta)
    _, acts, masks = _forward_trace(model, Z, layers)

    n = Z.shape[0]
    J = np.empty((n, model.n_params))
    # S: (n, fan_out) sensitivity of the output to each pre-activation.
    S = np.ones((n, 1))
    slices = list(_layer_slices(model))
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        w_sl, b_sl, fi, fo = slices[li]
        A = acts[li]
        J[:, w_sl] = (S[:, :, None] * A[:, None, :]).reshape(n, fo * fi)
        J[:, b_sl] = S
        if li > 0:
            S = (S @ W) * masks[li - 1]
    return J


def jacobian(model: MlpModel, t, x, theta) -> np.ndarray:
    """Gradient of g(t, x; theta) w.r.t. theta at a single point: (m,)."""
    return jacobian_batch(model, [t], np.asarray(x)[None, :], theta)[0]


def grad_weighted_sum(model: MlpModel, T, X, theta, w) -> np.ndarray:
    """Gradient of sum_j w_j * g(t_j, x_j; theta) w.r.t. theta: (m,).

    One reverse pass with seed w; avoids materializing the (n, m)
    Jacobian, which matters inside the M-step's inner optimizer loop.
    """
    Z = _as_batch(model, T, X)
    w = np.asarray(w, dtype=float).ravel()
    if w.shape[0] != Z.shape[0]:
        raise ValueError("weight vector length mismatch")
    layers = unflatten(model, theta)
    _, acts, masks = _forward_trace(model, Z, layers)

    grad = np.empty(model.n_params)
    S = w[:, None]
    slices = list(_layer_slices(model))
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        w_sl, b_sl, fi, fo = slices[li]
        A = acts[li]
        grad[w_sl] = (S.T @ A).ravel()
        grad[b_sl] = S.sum(axis=0)
        if li > 0:
            S = (S @ W) * masks[li - 1]
    return grad


def params_to_doc(model: MlpModel, theta) -> dict:
    """Serialize a flat parameter vector with its layer-size header.

    Payload is the raw little-endian float64 buffer, base64-encoded.
    """
    theta = np.ascontiguousarray(np.asarray(theta, dtype="<f8"))
    if theta.shape != (model.n_params,):
        raise ValueError("theta length does not match the architecture")
    return {
        "layer_sizes": list(model.layer_sizes),
        "dtype": "<f8",
        "theta_b64": base64.b64encode(theta.tobytes()).decode("ascii"),
    }


def params_from_doc(doc: dict):
    """Inverse of params_to_doc: returns (MlpModel, theta)."""
    model = MlpModel(layer_sizes=tuple(doc["layer_sizes"]))
    raw = base64.b64decode(doc["theta_b64"])
    theta = np.frombuffer(raw, dtype=doc.get("dtype", "<f8")).astype(float)
    if theta.shape != (model.n_params,):
        raise ValueError("serialized theta length does not match header")
    return model, theta


@dataclass
class LinearizedModel:
    """First-order expansion of the network around theta_ref.

    g_lin(t, x; theta) = g(t, x; theta_ref) + J(t, x)^T (theta - theta_ref)

    Caches g and J at every grid node for every training subject
    (covering all t_k <= y_i) and at each (y_i, x_i).
    """

    model: MlpModel
    theta_ref: np.ndarray
    g_grid: np.ndarray  # (N, K)
    J_grid: np.ndarray  # (N, K, m)
    g_event: np.ndarray  # (N,)
    J_event: np.ndarray  # (N, m)

    @property
    def n_params(self) -> int:
        return self.model.n_params

    def g_lin_grid(self, theta) -> np.ndarray:
        """(N, K) linearized values at the cached grid points."""
        d = np.asarray(theta, dtype=float) - self.theta_ref
        return self.g_grid + self.J_grid @ d

    def g_lin_event(self, theta) -> np.ndarray:
        """(N,) linearized values at the cached (y_i, x_i) points."""
        d = np.asarray(theta, dtype=float) - self.theta_ref
        return self.g_event + self.J_event @ d

    def eval_fresh(self, T, X):
        """(g_ref, J) at arbitrary points, computed from the network."""
        g = forward_batch(self.model, T, X, self.theta_ref)
        J = jacobian_batch(self.model, T, X, self.theta_ref)
        return g, J

    def g_lin_at(self, t, x, theta) -> float:
        """Linearized value at a single arbitrary (t, x)."""
        g, J = self.eval_fresh([t], np.asarray(x, dtype=float)[None, :])
        d = np.asarray(theta, dtype=float) - self.theta_ref
        return float(g[0] + J[0] @ d)


def linearize(model: MlpModel, theta_map, grid, dataset) -> LinearizedModel:
    """Build the expansion around theta_map with caches on the grid.

    `grid` is a QuadratureGrid over the dataset's (normalized) times;
    `dataset` supplies covariates X and times y (normalized).
    """
    theta_map = np.asarray(theta_map, dtype=float)
    if not np.all(np.isfinite(theta_map)):
        raise ValueError("theta_map must be finite")
    X = dataset.X
    y = dataset.y_norm
    N = X.shape[0]
    K = grid.n_nodes

    T_all = np.tile(grid.nodes, N)
    X_all = np.repeat(X, K, axis=0)
    g_grid = forward_batch(model, T_all, X_all, theta_map).reshape(N, K)
    J_grid = jacobian_batch(model, T_all, X_all, theta_map).reshape(
        N, K, model.n_params
    )
    g_event = forward_batch(model, y, X, theta_map)
    J_event = jacobian_batch(model, y, X, theta_map)
    return LinearizedModel(
        model=model,
        theta_ref=theta_map.copy(),
        g_grid=g_grid,
        J_grid=J_grid,
        g_event=g_event,
        J_event=J_event,
    )
