"""Shared fixtures: one small end-to-end fit reused by the model-layer
test modules, plus a factory for tiny contexts."""

from types import SimpleNamespace

import pytest

from sigsurv.cavi import run_cavi
from sigsurv.data import Dataset, gen_synthetic, standardize
from sigsurv.hazard import BaselinePrior, build_context
from sigsurv.map_em import run_em
from sigsurv.net import MlpModel, linearize
from sigsurv.numkit import RngStream

ROOT_SEED = 20260814


@pytest.fixture()
def root():
    """Fresh root stream per test; derive children, never share gen."""
    return RngStream.from_seed(ROOT_SEED)


@pytest.fixture(scope="session")
def small_fit():
    """Complete N=25 synthetic fit (EM + CAVI), benchmark conventions."""
    root = RngStream.from_seed(ROOT_SEED)
    raw = gen_synthetic(25, root.child(25))
    X_std, stats = standardize(raw.X)
    ds = Dataset(X=X_std, y=raw.y, delta=raw.delta)
    model = MlpModel((ds.p + 1, 16, 16, 1))
    prior = BaselinePrior()
    ctx = build_context(model, prior, ds, n_nodes=64)
    em = run_em(ctx, root.child(26))
    lin = linearize(model, em.theta_map, ctx.grid, ds)
    cavi = run_cavi(ctx, lin, em.theta_map, em.phi_map)
    return SimpleNamespace(
        raw=raw, stats=stats, ds=ds, model=model, prior=prior, ctx=ctx,
        em=em, lin=lin, cavi=cavi,
    )


@pytest.fixture()
def make_ctx():
    """Factory for small synthetic contexts: make_ctx(n, key, layers, ...)."""

    def _make(n, key, layers=None, n_nodes=16, rho=1.0, alpha0=1.0,
              beta0=1.0):
        root = RngStream.from_seed(ROOT_SEED)
        raw = gen_synthetic(n, root.child(key))
        X_std, stats = standardize(raw.X)
        ds = Dataset(X=X_std, y=raw.y, delta=raw.delta)
        model = MlpModel(layers if layers is not None else (ds.p + 1, 16, 16, 1))
        prior = BaselinePrior(alpha0=alpha0, beta0=beta0, rho=rho)
        ctx = build_context(model, prior, ds, n_nodes=n_nodes)
        return SimpleNamespace(raw=raw, stats=stats, ds=ds, model=model,
                               prior=prior, ctx=ctx, root=root)

    return _make
