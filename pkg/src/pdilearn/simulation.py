"""Synthetic tent-shaped dose-response design and its closed-form oracle intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .core import Dataset
from .errors import NoInterval

THRESHOLD = 0.75
PEAK = 1.1
N_COVARIATES = 10


@dataclass(frozen=True)
class DgpParams:
    n: int = 500
    seed: int = 0
    sd_a: float = 0.1
    sd_y: float = 0.25
    threshold: float = THRESHOLD

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not (self.sd_a > 0 and self.sd_y > 0):
            raise ValueError("noise scales must be positive")


def rng_for(seed: int, *counters: int) -> np.random.Generator:
    """Generator for a stream identified by a master seed and fixed counters."""
    return np.random.default_rng([int(seed), *(int(c) for c in counters)])


def knots(x):
    """``(m1, m2, c_lo, c_hi)`` of the tent at covariate rows ``x`` (n x 10 or a single row)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m1 = 0.2 + 0.02 * (x[:, 0] + x[:, 1] + x[:, 2] + x[:, 4] + x[:, 5])
    m2 = m1 + 0.1 * x[:, 3] + 0.1 * x[:, 7]
    c_lo = 2.5 + 10.0 * x[:, 0]
    c_hi = 0.5 + x[:, 6] + 2.0 * x[:, 9]
    return m1, m2, c_lo, c_hi


def nu(a, x):
    """Mean outcome: flat top of height 1.1 on ``[m1, m2]`` with linear arms."""
    m1, m2, c_lo, c_hi = knots(x)
    a = np.asarray(a, dtype=float)
    val = PEAK - c_lo * np.maximum(m1 - a, 0.0) - c_hi * np.maximum(a - m2, 0.0)
    if np.ndim(x) == 1 and np.ndim(a) == 0:
        return float(val[0])
    return val


def true_mu(a, x, sd_y: float = 0.25, threshold: float = THRESHOLD):
    """``P(Y >= threshold | a, x)`` under the Gaussian outcome noise."""
    return norm.cdf((nu(a, x) - threshold) / sd_y)


def sample_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    x = np.empty((n, N_COVARIATES))
    x[:, 0:4] = rng.uniform(0.0, 1.0, size=(n, 4))
    x[:, 4:7] = rng.standard_normal(size=(n, 3))
    x[:, 7:10] = rng.integers(0, 2, size=(n, 3))
    return x


def generate_dataset(params: DgpParams, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Draw ``params.n`` rows; ``rng`` overrides the generator built from ``params.seed``."""
    if rng is None:
        rng = rng_for(params.seed)
    n = params.n
    x = sample_covariates(rng, n)
    a_raw = x.sum(axis=1) / 15.0 + 0.2 + params.sd_a * rng.standard_normal(n)
    a = np.clip(a_raw, 0.0, 1.0)
    y = nu(a, x) + params.sd_y * rng.standard_normal(n)
    r = (y >= params.threshold).astype(int)
    return Dataset(y, a, x, params.threshold, math.inf, r)


def oracle_level(alpha: float, sd_y: float, threshold: float = THRESHOLD) -> float:
    """Mean-outcome level ``tau`` at which the range probability equals ``alpha``."""
    return threshold + sd_y * float(norm.ppf(alpha))


def oracle_bounds(x, alpha: float, sd_y: float = 0.25, clip: bool = True):
    """Vectorized oracle ``(ell*, u*)`` for covariate rows; raises :class:`NoInterval` above the peak."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0,1)")
    tau = oracle_level(alpha, sd_y)
    if tau > PEAK:
        raise NoInterval(f"level {tau:.5f} exceeds the peak {PEAK}")
    m1, m2, c_lo, c_hi = knots(x)
    drop = PEAK - tau
    ell = m1 - drop / c_lo
    with np.errstate(divide="ignore"):
        u = np.where(c_hi > 0, m2 + drop / np.where(c_hi > 0, c_hi, 1.0), 1.0)
    if clip:
        ell = np.clip(ell, 0.0, 1.0)
        u = np.clip(u, 0.0, 1.0)
    return ell, u


def oracle_pdi(x, alpha: float, sd_y: float = 0.25):
    """Oracle interval for a single covariate vector."""
    ell, u = oracle_bounds(np.asarray(x, dtype=float).reshape(1, -1), alpha, sd_y)
    return float(ell[0]), float(u[0])


def run_experiment(config):
    """Replicated study; see :func:`pdilearn.experiment.run_experiment`."""
    from .experiment import run_experiment as _run

    return _run(config)
