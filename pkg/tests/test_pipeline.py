import math

import numpy as np
import pytest

from pdilearn import pipeline
from pdilearn.core import HyperParams, IntervalRule
from pdilearn.errors import TooFewRows
from pdilearn.pipeline import (
    AggregateRule,
    FitCache,
    cross_fit,
    cross_validate,
    fit_estimator,
    fold_indices,
    indirect_pdi,
    study_grid,
    postprocess,
)
from pdilearn.nuisance import fit_nuisance
from pdilearn.simulation import DgpParams, generate_dataset, rng_for


class Curve:
    def __init__(self, f):
        self.f = f

    def mu(self, a, x):
        return self.f(np.asarray(a, dtype=float))


def test_indirect_quadratic_curve():
    ell, u, ok = indirect_pdi(Curve(lambda a: 0.9 - (a - 0.5) ** 2), [0.0], 0.7, 0.005)
    assert ok
    assert abs(ell - (0.5 - math.sqrt(0.2))) <= 0.005
    assert abs(u - (0.5 + math.sqrt(0.2))) <= 0.005


def test_indirect_flat_curves():
    assert indirect_pdi(Curve(lambda a: np.full_like(a, 0.8)), [0.0], 0.7) == (0.0, 1.0, True)
    ell, u, ok = indirect_pdi(Curve(lambda a: np.full_like(a, 0.6)), [0.0], 0.7)
    assert not ok and ell == u


def test_postprocess_examples():
    assert postprocess(-0.1, 0.5) == (0.0, 0.5, False)
    ell, u, fb = postprocess(0.7, 0.4)
    assert fb and math.isclose(ell, 0.55) and math.isclose(u, 0.55)
    assert postprocess(0.2, 0.6) == (0.2, 0.6, False)
    e, v, f = postprocess(np.array([1.4, 0.3]), np.array([1.2, -0.2]))
    assert np.all((0 <= e) & (e <= v) & (v <= 1)) and f.tolist() == [False, True]


def test_fold_partition():
    parts = fold_indices(103, 10, 4)
    sizes = [p.size for p in parts]
    assert max(sizes) - min(sizes) <= 1
    assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(103))
    with pytest.raises(TooFewRows):
        fold_indices(5, 10, 0)


@pytest.fixture(scope="module")
def small():
    ds = generate_dataset(DgpParams(n=80), rng_for(21, 0))
    return ds, fit_nuisance(ds)


def test_single_candidate_is_returned(small):
    ds, nuis = small
    hp = HyperParams(lam=3.0)
    best, _ = cross_validate(FitCache(ds, nuis, 0.7), [hp], 5, 0)
    assert best is hp


def test_planted_dominance(small, monkeypatch):
    ds, nuis = small
    cache = FitCache(ds, nuis, 0.7)
    seen = []

    def fake_fit(cache_, hp, rows, cw):
        seen.append(hp.lam)
        return None, None

    def fake_loss(cache_, hp, rule, train, test):
        # lambda = 32 is better on every fold by a margin that depends on the fold
        return (0.1 if hp.lam == 32.0 else 0.5) + 0.01 * test[0]

    monkeypatch.setattr(pipeline, "_fit_rows", fake_fit)
    monkeypatch.setattr(pipeline, "heldout_loss", fake_loss)
    grid = [HyperParams(lam=1.0), HyperParams(lam=32.0), HyperParams(lam=4.0)]
    best, table = cross_validate(cache, grid, 4, 0)
    assert best.lam == 32.0
    assert len(seen) == 12 and len(table) == 3


def test_real_cross_validation_small_grid(small):
    ds, nuis = small
    grid = [HyperParams(lam=lam, max_sub_iter=60) for lam in (1.0, 32.0)]
    est = fit_estimator("D-Joint", ds, grid, 0.7, 3, 0, nuis)
    assert est.hyper in [g.with_(alpha=0.7) for g in grid]
    ell, u, fb, invalid = est.predict(ds.x)
    assert np.all((0 <= ell) & (ell <= u) & (u <= 1))
    with pytest.raises(ValueError):
        fit_estimator("Ind-RF", ds, grid, 0.7, 3, 0, nuis)


def test_cross_fit_average(small):
    ds, _ = small
    with pytest.raises(TooFewRows):
        cross_fit(ds, 1, [HyperParams()], 0.7)
    est = cross_fit(ds, 2, [HyperParams(max_sub_iter=40, max_dc_iter=3)], 0.7, seed=1, cv_folds=2)
    probe = np.random.default_rng(0).normal(size=(25, ds.d))
    parts = [r.evaluate(probe) for r in est.rule.rules]
    ell, u = est.rule.evaluate(probe)
    assert np.max(np.abs(ell - np.mean([p[0] for p in parts], axis=0))) < 1e-12
    assert np.max(np.abs(u - np.mean([p[1] for p in parts], axis=0))) < 1e-12


def test_identical_members_aggregate_to_themselves():
    anchors = np.array([[0.0], [1.0]])
    r = IntervalRule(0.1, np.array([0.2, -0.1]), 0.7, np.array([0.0, 0.3]), anchors, 0.8)
    agg = AggregateRule((r, r, r))
    x = np.linspace(-1, 2, 7).reshape(-1, 1)
    a, b = agg.evaluate(x)
    e, f = r.evaluate(x)
    assert np.max(np.abs(a - e)) < 1e-15 and np.max(np.abs(b - f)) < 1e-15


def test_grid_size():
    grid = study_grid()
    assert len(grid) == 48
    assert {g.gamma for g in grid} == {2 ** -3, 2 ** -1.5, 1.0}
    assert {g.kappa for g in grid} == {0.0, 1024.0}
