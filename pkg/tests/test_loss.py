import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdilearn.errors import InvalidInterval, MonotonicityViolated, NonpositiveEpsilon
from pdilearn.kernel import gram
from pdilearn.loss import LossContext, objective_q, objective_q_parts, phi_eps, phi_parts, psi_eps, psi_parts
from pdilearn.nuisance import fit_nuisance
from pdilearn.simulation import DgpParams, generate_dataset, rng_for

from conftest import nuisance_const, one_row


def test_psi_values():
    assert psi_eps(0.3, 0.5, 0.7, 0.2) == 1.0
    assert math.isclose(psi_eps(0.3, 0.2, 0.7, 0.2), 0.5, rel_tol=1e-12)
    assert math.isclose(psi_eps(0.3, 0.85, 0.7, 0.2), 0.25, rel_tol=1e-12)
    assert psi_eps(0.3, 0.05, 0.7, 0.2) == 0.0
    with pytest.raises(InvalidInterval):
        psi_eps(0.7, 0.5, 0.3, 0.2)
    with pytest.raises(NonpositiveEpsilon):
        psi_eps(0.3, 0.5, 0.7, 0.0)


def test_phi_values():
    assert phi_eps(0.2, 0.6, 0.2) == 1.0
    assert math.isclose(phi_eps(0.7, 0.6, 0.2), 0.5, rel_tol=1e-12)
    assert phi_eps(0.9, 0.6, 0.2) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 2), st.floats(0, 1), st.floats(-1, 2), st.floats(1e-3, 0.5))
def test_ramp_parts_difference(ell, width, t, eps):
    u = ell + width
    plus, minus = psi_parts(ell, t, u, eps)
    assert abs(plus - minus - psi_eps(ell, t, u, eps)) < 1e-9
    p2, m2 = phi_parts(u + eps * t, u, eps)
    assert abs(p2 - m2 - phi_eps(u + eps * t, u, eps)) < 1e-9


def test_indicator_loss_examples():
    ctx = LossContext(one_row(0.8, 0.3), nuisance_const(0.5, 1.0), 0.7, 1e-3, c_loss=3.0)
    assert ctx.loss_indicator(0.6, 0.4)[0] == 3.0
    ctx_out = LossContext(one_row(0.8, 0.9), nuisance_const(0.5, 1.0), 0.7, 1e-3, c_loss=3.0)
    assert math.isclose(ctx_out.loss_indicator(0.2, 0.6)[0], 0.08, abs_tol=1e-12)
    ctx_in = LossContext(one_row(0.8, 0.3), nuisance_const(0.6, 0.5), 0.7, 1e-3, c_loss=3.0)
    assert math.isclose(ctx_in.loss_indicator(0.2, 0.6)[0], -0.76, abs_tol=1e-12)


def test_ipw_examples():
    ctx = LossContext(one_row(0.8, 0.9), nuisance_const(0.5, 0.5), 0.7, 1e-3, c_loss=3.0)
    assert math.isclose(ctx.loss_ipw(0.2, 0.6)[0], 0.6, rel_tol=1e-12)
    assert ctx.loss_ipw(0.2, 0.95)[0] == 0.0
    with pytest.raises(MonotonicityViolated):
        ctx.loss_aipw(0.6, 0.2)


def test_aipw_offset_does_not_depend_on_interval():
    ds = generate_dataset(DgpParams(n=50), rng_for(2, 0))
    ctx = LossContext(ds, fit_nuisance(ds), 0.7, 1e-3)
    d1 = ctx.loss_aipw(0.1, 0.5) - ctx.loss_indicator(0.1, 0.5)
    d2 = ctx.loss_aipw(0.3, 0.95) - ctx.loss_indicator(0.3, 0.95)
    assert np.max(np.abs(d1 - d2)) < 1e-10


@pytest.fixture(scope="module")
def sim_ctx():
    ds = generate_dataset(DgpParams(n=400), rng_for(9, 0))
    return LossContext(ds, fit_nuisance(ds), 0.7, 1e-2)


def test_surrogate_matches_indicator_deep_inside(sim_ctx):
    eps = sim_ctx.epsilon
    a = sim_ctx.a
    ell = np.clip(a - 0.1, None, a - 2 * eps)
    u = a + 0.05
    assert np.array_equal(sim_ctx.loss_surrogate(ell, u), sim_ctx.loss_indicator(ell, u))


def test_surrogate_continuity_at_the_seams(sim_ctx):
    ell = np.linspace(0.05, 0.95, sim_ctx.n)
    at = sim_ctx.loss_surrogate(ell, ell)
    just_over = sim_ctx.loss_surrogate(ell + 1e-12, ell)
    assert np.max(np.abs(at - just_over)) < 1e-6
    far = sim_ctx.loss_surrogate(ell + sim_ctx.epsilon, ell)
    assert np.allclose(far, sim_ctx.c_loss, rtol=0, atol=1e-9)


def test_parts_identity_and_convexity(sim_ctx):
    rng = np.random.default_rng(4)
    ell = rng.uniform(0, 1, sim_ctx.n)
    width = rng.uniform(0, 0.5, sim_ctx.n)
    mono = sim_ctx.surrogate_parts(ell, ell + width)
    assert np.max(np.abs(mono.value - sim_ctx.loss_surrogate(ell, ell + width))) < 1e-6
    inv = sim_ctx.surrogate_parts(ell + sim_ctx.epsilon + width + 1e-3, ell)
    assert np.max(np.abs(inv.value - sim_ctx.c_loss)) < 1e-6
    l2, u2 = rng.uniform(0, 1, (2, sim_ctx.n))
    l1, u1 = rng.uniform(0, 1, (2, sim_ctx.n))
    p1, p2 = sim_ctx.surrogate_parts(l1, u1), sim_ctx.surrogate_parts(l2, u2)
    pm = sim_ctx.surrogate_parts((l1 + l2) / 2, (u1 + u2) / 2)
    for name in ("plus", "minus"):
        gap = getattr(pm, name) - 0.5 * (getattr(p1, name) + getattr(p2, name))
        assert gap.max() <= 1e-8


def test_parts_gradients_are_subgradients(sim_ctx):
    rng = np.random.default_rng(5)
    l1, u1 = rng.uniform(0, 1, (2, sim_ctx.n))
    l2 = l1 + rng.normal(scale=0.02, size=sim_ctx.n)
    u2 = u1 + rng.normal(scale=0.02, size=sim_ctx.n)
    p1, p2 = sim_ctx.surrogate_parts(l1, u1), sim_ctx.surrogate_parts(l2, u2)
    for f, gl, gu in (("plus", "plus_dl", "plus_du"), ("minus", "minus_dl", "minus_du")):
        lin = getattr(p1, f) + getattr(p1, gl) * (l2 - l1) + getattr(p1, gu) * (u2 - u1)
        assert np.all(lin <= getattr(p2, f) + 1e-9 * (1 + np.abs(getattr(p2, f))))


def test_objective_examples(sim_ctx):
    rng = np.random.default_rng(6)
    n = 60
    sub = sim_ctx.subset(np.arange(n))
    K = gram(sub.ds.x, 1.0)
    zero = np.zeros(n)
    q0 = objective_q(sub, K, 0.2, zero, 0.6, zero, 1.0, 5.0)
    assert math.isclose(q0, float(np.mean(sub.loss_surrogate(0.2, 0.6))), rel_tol=1e-14)
    bl, bu = rng.normal(scale=0.05, size=(2, n))
    q = objective_q(sub, K, 0.2, bl, 0.6, bu, 1.0, 5.0)
    qp, qm = objective_q_parts(sub, K, 0.2, bl, 0.6, bu, 1.0, 5.0)
    assert abs(qp - qm - q) < 1e-6
    q2 = objective_q(sub, K, 0.2, bl, 0.6, bu, 2.0, 5.0)
    pen = bl @ K.entries @ bl + bu @ K.entries @ bu
    assert math.isclose(q2 - q, pen, rel_tol=1e-9)
