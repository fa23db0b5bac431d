"""Monte Carlo runner for the synthetic study: fit every estimator, score it, average."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import HyperParams
from .errors import NoInterval
from .metrics import (
    classification_metrics,
    contingency,
    interval_errors,
    invalid_proportion,
)
from .nuisance import fit_nuisance
from .pipeline import DEFAULT_GRID_STEP, ESTIMATORS, fit_estimator, study_grid
from .simulation import DgpParams, generate_dataset, oracle_bounds, rng_for

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("Invalid PDI", "MAE", "MSE", "Accuracy", "F1 Score", "MCC", "Recall", "Precision",
                  "Cohen's kappa")
KEY_COLUMNS = ("alpha", "Estimator")
TABLE_COLUMNS = KEY_COLUMNS + METRIC_COLUMNS


@dataclass(frozen=True)
class ExperimentConfig:
    alphas: tuple = (0.7,)
    estimators: tuple = ESTIMATORS
    replicates: int = 20
    n_train: int = 500
    n_test: int = 500
    seed: int = 0
    sd_a: float = 0.1
    sd_y: float = 0.25
    folds: int = 10
    grid: tuple = field(default_factory=lambda: tuple(study_grid()))
    grid_step: float = DEFAULT_GRID_STEP
    workers: int = 1

    def __post_init__(self):
        if self.replicates < 0:
            raise ValueError("replicates must be non-negative")
        if not self.alphas:
            raise ValueError("need at least one alpha")
        for a in self.alphas:
            if not 0.0 < a < 1.0:
                raise ValueError(f"alpha {a} outside (0,1)")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        if not self.estimators:
            raise ValueError("need at least one estimator")
        if not self.grid:
            raise ValueError("hyperparameter grid is empty")
        if self.workers < 1:
            raise ValueError("workers must be positive")


@dataclass
class ReplicateRecord:
    replicate: int
    alpha: float
    estimator: str
    values: dict  # metric column -> float or None
    hyper: Optional[HyperParams] = None


def score(est, test, alpha: float, sd_y: float) -> dict:
    """Metric row of one fitted estimator on a labelled test set."""
    ell_raw, u_raw, invalid = est.predict_raw(test.x)
    ell, u, _, _ = est.predict(test.x)
    out = {"Invalid PDI": invalid_proportion(ell_raw, u_raw, invalid)}
    try:
        ell_star, u_star = oracle_bounds(test.x, alpha, sd_y)
        out["MAE"], out["MSE"] = interval_errors(ell, u, ell_star, u_star)
    except NoInterval:
        out["MAE"] = out["MSE"] = None
    out.update(classification_metrics(contingency(ell, u, test.a, test.r)).as_dict())
    return out


def run_replicate(config: ExperimentConfig, rep: int) -> list:
    dgp = DgpParams(n=config.n_train, seed=config.seed, sd_a=config.sd_a, sd_y=config.sd_y)
    train = generate_dataset(dgp, rng_for(config.seed, rep, 0))
    test = generate_dataset(DgpParams(n=config.n_test, seed=config.seed, sd_a=config.sd_a, sd_y=config.sd_y),
                            rng_for(config.seed, rep, 1))
    cv_seed = int(rng_for(config.seed, rep, 2).integers(0, 2 ** 31 - 1))
    nuis = fit_nuisance(train, rows=range(train.n))
    records = []
    for alpha in config.alphas:
        for kind in config.estimators:
            est = fit_estimator(kind, train, config.grid, alpha, config.folds, cv_seed, nuis, config.grid_step)
            vals = score(est, test, alpha, config.sd_y)
            log.info("replicate %d alpha %.3g %s: MAE %s", rep, alpha, kind, vals["MAE"])
            records.append(ReplicateRecord(rep, alpha, kind, vals, est.hyper))
    return records


def _mean_defined(values):
    kept = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(kept)) if kept else None


def summarize(records: Sequence[ReplicateRecord], config: ExperimentConfig) -> list:
    """Average per ``(alpha, estimator)`` cell, skipping undefined entries."""
    if not records:
        return []
    rows = []
    for alpha in config.alphas:
        for kind in config.estimators:
            cell = [r for r in records if r.alpha == alpha and r.estimator == kind]
            row = {"alpha": alpha, "Estimator": kind}
            for col in METRIC_COLUMNS:
                row[col] = _mean_defined([r.values[col] for r in cell])
            rows.append(row)
    return rows


def run_experiment(config: ExperimentConfig):
    """Run every replicate and return ``(summary_rows, replicate_records)``.

    Replicates draw from independent streams keyed by ``(seed, replicate)``,
    so the outcome does not depend on ``workers``; results are reduced in
    replicate order.
    """
    reps = range(config.replicates)
    if config.workers > 1 and config.replicates > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(pool.map(run_replicate, [config] * config.replicates, reps))
    else:
        chunks = [run_replicate(config, r) for r in reps]
    records = [rec for chunk in chunks for rec in chunk]
    return summarize(records, config), records
