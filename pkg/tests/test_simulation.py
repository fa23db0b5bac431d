import math

import numpy as np
import pytest
from scipy.stats import norm

from pdilearn.errors import NoInterval
from pdilearn.experiment import TABLE_COLUMNS, ExperimentConfig, run_experiment
from pdilearn.core import HyperParams
from pdilearn.simulation import (
    DgpParams,
    generate_dataset,
    knots,
    nu,
    oracle_bounds,
    oracle_level,
    oracle_pdi,
    rng_for,
    sample_covariates,
)


def test_same_seed_same_data():
    a = generate_dataset(DgpParams(n=50, seed=3))
    b = generate_dataset(DgpParams(n=50, seed=3))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and np.array_equal(a.a, b.a)


def test_indicator_is_threshold_exceedance():
    ds = generate_dataset(DgpParams(n=500, seed=8))
    assert np.array_equal(ds.r, (ds.y >= 0.75).astype(int))


def test_moments_at_large_n():
    rng = rng_for(99)
    n = 100_000
    x = sample_covariates(rng, n)
    raw = x.sum(axis=1) / 15 + 0.2 + 0.1 * rng.standard_normal(n)
    se = raw.std() / math.sqrt(n)
    assert abs(raw.mean() - (0.2 + 3.5 / 15)) < 3 * se
    for cols, mean, var in (((0, 1, 2, 3), 0.5, 1 / 12), ((4, 5, 6), 0.0, 1.0), ((7, 8, 9), 0.5, 0.25)):
        block = x[:, cols]
        assert np.all(np.abs(block.mean(axis=0) - mean) < 4 * math.sqrt(var / n))
        assert np.all(np.abs(block.var(axis=0) - var) < 4 * math.sqrt(2 * var * var / n) + 4 * var / math.sqrt(n))


def test_outcome_residuals():
    ds = generate_dataset(DgpParams(n=100_000, seed=4))
    resid = ds.y - nu(ds.a, ds.x)
    assert abs(resid.mean()) < 4 * 0.25 / math.sqrt(ds.n)
    assert abs(resid.std() - 0.25) < 4 * 0.25 / math.sqrt(2 * ds.n)


def test_plateau_at_zero_covariates():
    assert nu(0.2, np.zeros(10)) == pytest.approx(1.1, abs=1e-15)
    m1, m2, _, _ = knots(np.zeros(10))
    assert m1[0] == m2[0] == pytest.approx(0.2)


def test_oracle_examples():
    tau = oracle_level(0.7, 0.25)
    assert tau == pytest.approx(0.8811003, abs=1e-6)
    ell, u = oracle_pdi(np.zeros(10), 0.7, 0.25)
    assert ell == pytest.approx(0.2 - (1.1 - tau) / 2.5, abs=1e-12)
    assert ell == pytest.approx(0.11244, abs=1e-5)
    assert u == pytest.approx(0.63780, abs=1e-5)
    x = np.zeros(10)
    x[6], x[9] = -1.5, 0.0
    assert oracle_pdi(x, 0.7, 0.25)[1] == 1.0
    with pytest.raises(NoInterval):
        oracle_pdi(np.zeros(10), 0.99, 0.25)


def test_oracle_against_fine_grid_at_zero():
    grid = np.linspace(0, 1, 10001)
    prob = norm.cdf((nu(grid, np.zeros((grid.size, 10))) - 0.75) / 0.25)
    inside = grid[prob >= 0.7]
    ell, u = oracle_pdi(np.zeros(10), 0.7, 0.25)
    assert abs(inside[0] - ell) <= 1e-4 and abs(inside[-1] - u) <= 1e-4


def test_zero_replicates_gives_empty_table():
    rows, records = run_experiment(ExperimentConfig(replicates=0))
    assert rows == [] and records == []
    assert TABLE_COLUMNS[2:] == ("Invalid PDI", "MAE", "MSE", "Accuracy", "F1 Score", "MCC", "Recall",
                                 "Precision", "Cohen's kappa")


def test_single_replicate_is_reproducible():
    cfg = ExperimentConfig(replicates=1, n_train=60, n_test=40, folds=2, seed=5,
                           grid=(HyperParams(max_sub_iter=30, max_dc_iter=3),))
    first, _ = run_experiment(cfg)
    second, _ = run_experiment(cfg)
    assert first == second
    assert [r["Estimator"] for r in first] == ["D-Joint", "D-CW", "Ind-Para"]
    assert first[0]["Invalid PDI"] == 0.0
