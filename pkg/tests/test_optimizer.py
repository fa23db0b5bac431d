import numpy as np
import pytest

from pdilearn.core import HyperParams, IntervalRule
from pdilearn.errors import DimensionMismatch
from pdilearn.kernel import gram
from pdilearn.loss import LossContext, objective_q_parts
from pdilearn.nuisance import fit_nuisance
from pdilearn.optimizer import (
    convex_subproblem,
    dc_fit,
    dc_fit_constant_width,
    init_constant_width,
    init_internal_division,
)
from pdilearn.pipeline import indirect_bounds
from pdilearn.simulation import DgpParams, generate_dataset, rng_for


@pytest.fixture(scope="module")
def problem():
    ds = generate_dataset(DgpParams(n=100), rng_for(17, 0))
    nuis = fit_nuisance(ds)
    ctx = LossContext(ds, nuis, 0.7, 1e-3)
    K = gram(ds.x, 1.0)
    ell, u, _ = indirect_bounds(nuis.dose_prob, ds.x, 0.7)
    return ds, ctx, K, ell, u


def test_init_extremes(problem):
    ds, _, K, ell, u = problem
    flat = init_internal_division(ell, u, 0.0, K, ds.x, 1.0)
    assert np.all(flat.beta_L == 0) and np.all(flat.beta_U == 0)
    assert flat.beta_L0 == pytest.approx(ell.mean(), abs=1e-15)
    full = init_internal_division(ell, u, 1.0, K, ds.x, 1.0)
    fl, fu = full.evaluate(ds.x)
    assert np.max(np.abs(fl - ell)) < 1e-6
    assert np.max(np.abs(fu - u)) < 1e-6 + max(0.0, float(np.max(fl - fu)))
    const = init_internal_division(np.full(ds.n, 0.2), np.full(ds.n, 0.6), 0.7, K, ds.x, 1.0)
    assert np.all(const.beta_L == 0) and np.all(const.beta_U == 0)
    with pytest.raises(DimensionMismatch):
        init_internal_division(ell[:5], u[:5], 0.5, K)


def test_quadratic_subproblem_matches_closed_form(problem):
    _, ctx, K, _, _ = problem
    n = ctx.n
    rng = np.random.default_rng(0)
    g = np.zeros(2 * n + 2)
    g[1:n + 1], g[n + 2:] = rng.normal(size=(2, n))
    for lam in (1.0, 2.0 ** 10):
        theta, _ = convex_subproblem(ctx, K, lam, 0.0, g, np.zeros(2 * n + 2), max_iter=20000, tol=1e-12,
                                     losses=False)
        for block in (slice(1, n + 1), slice(n + 2, None)):
            resid = 2 * lam * K.entries @ theta[block] - g[block]
            assert np.linalg.norm(resid) <= 1e-4 * np.linalg.norm(g[block])


def test_heavy_ridge_shrinks(problem):
    ds, ctx, K, ell, u = problem
    start_rule = init_internal_division(ell, u, 1.0, K, ds.x, 1.0)
    start = np.concatenate([[start_rule.beta_L0], start_rule.beta_L, [start_rule.beta_U0], start_rule.beta_U])
    theta, _ = convex_subproblem(ctx, K, 2.0 ** 10, 0.0, np.zeros_like(start), start, max_iter=300)
    n = ctx.n
    assert np.linalg.norm(theta[1:n + 1]) <= np.linalg.norm(start[1:n + 1])
    assert np.linalg.norm(theta[n + 2:]) <= np.linalg.norm(start[n + 2:])


def _qplus(ctx, K, theta, lam, kappa):
    n = ctx.n
    return objective_q_parts(ctx, K, theta[0], theta[1:n + 1], theta[n + 1], theta[n + 2:], lam, kappa)[0]


def test_restart_never_increases(problem):
    ds, ctx, K, ell, u = problem
    r = init_internal_division(ell, u, 0.5, K, ds.x, 1.0)
    start = np.concatenate([[r.beta_L0], r.beta_L, [r.beta_U0], r.beta_U])
    zero = np.zeros_like(start)
    t1, _ = convex_subproblem(ctx, K, 1.0, 0.0, zero, start, max_iter=200)
    t2, _ = convex_subproblem(ctx, K, 1.0, 0.0, zero, t1, max_iter=200)
    assert _qplus(ctx, K, t1, 1.0, 0.0) <= _qplus(ctx, K, start, 1.0, 0.0)
    assert _qplus(ctx, K, t2, 1.0, 0.0) <= _qplus(ctx, K, t1, 1.0, 0.0)


def test_dc_trace_monotone_and_refit_at_fixed_point(problem):
    ds, ctx, K, ell, u = problem
    hp = HyperParams(gamma=1.0, lam=1.0, kappa=1024.0, p_init=0.5, max_sub_iter=300)
    rule, trace = dc_fit(ctx, K, hp, init_internal_division(ell, u, 0.5, K, ds.x, 1.0))
    assert trace.is_monotone(1e-9)
    assert trace.iterations <= hp.max_dc_iter
    assert trace.objective[-1] <= trace.objective[0]
    again, trace2 = dc_fit(ctx, K, hp.with_(max_sub_iter=50), rule)
    # the second run starts at a (numerical) fixed point
    assert trace2.objective[-1] <= trace2.objective[0] + 1e-9
    assert trace2.objective[0] == pytest.approx(trace.objective[-1], abs=1e-9)


def test_huge_ridge_gives_near_constant_rule(problem):
    ds, ctx, K, ell, u = problem
    hp = HyperParams(gamma=1.0, lam=2.0 ** 20, p_init=1.0, max_sub_iter=300)
    rule, _ = dc_fit(ctx, K, hp, init_internal_division(ell, u, 1.0, K, ds.x, 1.0))
    fl, _ = rule.evaluate(ds.x)
    assert np.max(np.abs(fl - np.median(fl))) < 0.05


def test_constant_width_fit(problem):
    ds, ctx, K, ell, u = problem
    hp = HyperParams(gamma=1.0, lam=1.0, p_init=0.5, max_sub_iter=200)
    init = init_constant_width(ell, u, 0.5, K, ds.x, 1.0)
    rule, trace = dc_fit_constant_width(ctx, K, hp, init)
    fl, fu = rule.evaluate(np.random.default_rng(1).normal(size=(30, ds.d)))
    assert np.allclose(fu - fl, rule.width, rtol=0, atol=1e-12)
    assert trace.is_monotone(1e-9)
    neg = IntervalRule(init.beta_L0, init.beta_L, init.beta_L0 - 0.3, init.beta_L.copy(), ds.x, 1.0, width=None)
    rule_neg, _ = dc_fit_constant_width(ctx, K, hp.with_(max_dc_iter=1, max_sub_iter=1), neg)
    assert rule_neg.width >= 0.0
