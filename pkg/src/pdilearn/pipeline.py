"""Estimation flows: the plug-in baseline, CV, cross-fitting and post-processing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, HyperParams, IntervalRule, validate_dataset
from .errors import TooFewRows
from .kernel import cross_kernel, gram
from .loss import LossContext
from .nuisance import NuisanceModels, fit_nuisance
from .optimizer import (
    DcTrace,
    dc_fit,
    dc_fit_constant_width,
    init_constant_width,
    init_internal_division,
)
from .simulation import rng_for

log = logging.getLogger(__name__)

DEFAULT_GRID_STEP = 0.005
ESTIMATORS = ("D-Joint", "D-CW", "Ind-Para")


# ---------------------------------------------------------------------------
# plug-in baseline


def _longest_run(mask):
    best = (0, -1)
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        if (not flag or i == len(mask) - 1) and start is not None:
            end = i if flag else i - 1
            if end - start > best[1] - best[0]:
                best = (start, end)
            start = None
    return best


def _indirect_rows(mu_table, grid, alpha):
    """Level-set bounds for a table of curve values (rows x grid)."""
    above = mu_table >= alpha
    n = mu_table.shape[0]
    ell = np.empty(n)
    u = np.empty(n)
    valid = np.ones(n, dtype=bool)
    any_above = above.any(axis=1)
    first = np.argmax(above, axis=1)
    last = grid.size - 1 - np.argmax(above[:, ::-1], axis=1)
    count = above.sum(axis=1)
    contiguous = count == last - first + 1
    for i in range(n):
        if not any_above[i]:
            k = int(np.argmax(mu_table[i]))
            ell[i] = u[i] = grid[k]
            valid[i] = False
        elif contiguous[i]:
            ell[i], u[i] = grid[first[i]], grid[last[i]]
        else:
            lo, hi = _longest_run(above[i])
            log.warning("super-level set is not an interval; keeping its longest run")
            ell[i], u[i] = grid[lo], grid[hi]
    return ell, u, valid


def dose_grid(grid_step: float) -> np.ndarray:
    if not 0.0 < grid_step <= 0.1:
        raise ValueError("grid_step must lie in (0, 0.1]")
    m = int(round(1.0 / grid_step))
    if abs(m * grid_step - 1.0) > 1e-9:
        return np.append(np.arange(0.0, 1.0, grid_step), 1.0)
    return np.linspace(0.0, 1.0, m + 1)


def indirect_pdi(mu, x, alpha: float, grid_step: float = DEFAULT_GRID_STEP):
    """Grid search of ``{a : mu(a, x) >= alpha}`` for one covariate vector.

    Returns ``(ell, u, valid)``; an empty set gives the arg-max dose twice and
    ``valid=False``.
    """
    grid = dose_grid(grid_step)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    table = np.asarray(mu.mu(grid, x), dtype=float).reshape(1, -1)
    ell, u, valid = _indirect_rows(table, grid, alpha)
    return float(ell[0]), float(u[0]), bool(valid[0])


def indirect_bounds(mu, X, alpha: float, grid_step: float = DEFAULT_GRID_STEP):
    """:func:`indirect_pdi` for every row of ``X``."""
    grid = dose_grid(grid_step)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if hasattr(mu, "offset") and hasattr(mu, "predictor"):
        table = _dose_prob_table(mu, X, grid)
    else:
        table = np.vstack([np.asarray(mu.mu(grid, X[i:i + 1]), dtype=float) for i in range(X.shape[0])])
    return _indirect_rows(table, grid, alpha)


def _dose_prob_table(m, X, grid):
    from scipy.special import expit

    return expit(m.predictor(grid[None, :], m.offset(X)[:, None]))


def postprocess(ell, u):
    """Clip to ``[0, 1]``; inverted pairs collapse to their (clipped) midpoint.

    Works on scalars or arrays; returns ``(ell, u, fallback_used)``.
    """
    ell_c = np.clip(np.asarray(ell, dtype=float), 0.0, 1.0)
    u_c = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    flip = ell_c > u_c
    mid = np.clip(0.5 * (ell_c + u_c), 0.0, 1.0)
    ell_o = np.where(flip, mid, ell_c)
    u_o = np.where(flip, mid, u_c)
    if ell_o.ndim == 0:
        return float(ell_o), float(u_o), bool(flip)
    return ell_o, u_o, flip


def raw_invalid(ell, u):
    """Rows violating ``0 <= ell <= u <= 1``."""
    ell = np.asarray(ell, dtype=float)
    u = np.asarray(u, dtype=float)
    return (ell > u) | (ell < 0.0) | (u > 1.0)


# ---------------------------------------------------------------------------
# fitted rules


@dataclass(frozen=True, eq=False)
class AggregateRule:
    """Average of several interval rules, evaluated pointwise."""

    rules: tuple

    def evaluate(self, x):
        evals = [r.evaluate(x) for r in self.rules]
        ell = sum(e[0] for e in evals) / len(evals)
        u = sum(e[1] for e in evals) / len(evals)
        return ell, u

    @property
    def d(self) -> int:
        return self.rules[0].d


@dataclass(frozen=True, eq=False)
class IndirectRule:
    mu: object
    alpha: float
    grid_step: float = DEFAULT_GRID_STEP

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            ell, u, _ = indirect_pdi(self.mu, x, self.alpha, self.grid_step)
            return ell, u
        ell, u, _ = indirect_bounds(self.mu, x, self.alpha, self.grid_step)
        return ell, u

    def valid(self, X):
        return indirect_bounds(self.mu, X, self.alpha, self.grid_step)[2]

    @property
    def d(self) -> int:
        return self.mu.d


@dataclass
class FittedEstimator:
    kind: str
    rule: object
    nuisance: Optional[NuisanceModels]
    hyper: Optional[HyperParams]
    trace: Optional[DcTrace] = None
    cv_table: list = field(default_factory=list)

    def predict_raw(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ell, u = self.rule.evaluate(X)
        ell = np.asarray(ell, dtype=float)
        u = np.asarray(u, dtype=float)
        invalid = raw_invalid(ell, u)
        if isinstance(self.rule, IndirectRule):
            invalid = invalid | ~self.rule.valid(X)
        return ell, u, invalid

    def predict(self, X):
        """Post-processed bounds, the fallback flags and the raw-invalid flags."""
        ell, u, invalid = self.predict_raw(X)
        ell_p, u_p, fb = postprocess(ell, u)
        return ell_p, u_p, fb, invalid


# ---------------------------------------------------------------------------
# single fits


class FitCache:
    """Per-dataset quantities shared by every candidate of a CV grid."""

    def __init__(self, ds: Dataset, nuisance: NuisanceModels, alpha: float, grid_step: float = DEFAULT_GRID_STEP):
        self.ds = ds
        self.nuisance = nuisance
        self.alpha = alpha
        self._contexts = {}
        self._grams = {}
        self.init_ell, self.init_u, _ = indirect_bounds(nuisance.dose_prob, ds.x, alpha, grid_step)

    def context(self, hyper: HyperParams) -> LossContext:
        key = (hyper.epsilon, hyper.c_loss, hyper.c_cvx, hyper.nodes)
        if key not in self._contexts:
            self._contexts[key] = LossContext(self.ds, self.nuisance, self.alpha, hyper.epsilon,
                                              hyper.c_loss, hyper.c_cvx, hyper.nodes)
        return self._contexts[key]

    def gram(self, gamma: float) -> np.ndarray:
        if gamma not in self._grams:
            self._grams[gamma] = gram(self.ds.x, gamma).entries
        return self._grams[gamma]


def _fit_rows(cache: FitCache, hyper: HyperParams, rows, constant_width: bool):
    """DC fit on a subset of the cached dataset."""
    ctx = cache.context(hyper).subset(rows)
    K = cache.gram(hyper.gamma)[np.ix_(rows, rows)]
    anchors = cache.ds.x[rows]
    init_fn = init_constant_width if constant_width else init_internal_division
    init = init_fn(cache.init_ell[rows], cache.init_u[rows], hyper.p_init, K, anchors, hyper.gamma)
    fit = dc_fit_constant_width if constant_width else dc_fit
    return fit(ctx, K, hyper, init)


def heldout_loss(cache: FitCache, hyper: HyperParams, rule: IntervalRule, train_rows, test_rows) -> float:
    ctx = cache.context(hyper).subset(test_rows)
    k = cache.gram(hyper.gamma)[np.ix_(test_rows, train_rows)]
    ell = rule.beta_L0 + k @ rule.beta_L
    u = ell + rule.width if rule.width is not None else rule.beta_U0 + k @ rule.beta_U
    return float(np.mean(ctx.loss_surrogate(ell, u)))


def fold_indices(n: int, folds: int, seed: int):
    if folds < 2:
        raise TooFewRows("need at least 2 folds")
    if n < folds:
        raise TooFewRows(f"{n} rows cannot fill {folds} folds")
    perm = rng_for(seed, 7).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def cross_validate(cache: FitCache, grid: Sequence[HyperParams], folds: int, seed: int,
                   constant_width: bool = False):
    """Select the candidate with the smallest fold-averaged held-out surrogate loss.

    Returns ``(best, table)``; ``table`` rows are ``(index, mean_loss, fold_losses)``.
    """
    if len(grid) == 0:
        raise ValueError("empty hyperparameter grid")
    n = cache.ds.n
    parts = fold_indices(n, folds, seed)
    table = []
    if len(grid) == 1:
        return grid[0], [(0, float("nan"), [])]
    for j, hp in enumerate(grid):
        losses = []
        for test in parts:
            train = np.setdiff1d(np.arange(n), test)
            assert np.intersect1d(train, test).size == 0
            rule, _ = _fit_rows(cache, hp, train, constant_width)
            losses.append(heldout_loss(cache, hp, rule, train, test))
        table.append((j, float(np.mean(losses)), losses))
    best = min(table, key=lambda row: (row[1], row[0]))[0]
    return grid[best], table


def dedupe_for_constant_width(grid: Sequence[HyperParams]):
    """Drop candidates that differ only in the monotonicity weight (unused by the constant-width fit)."""
    seen, out = set(), []
    for hp in grid:
        key = hp.with_(kappa=0.0)
        if key not in seen:
            seen.add(key)
            out.append(hp.with_(kappa=0.0))
    return out


def fit_dc(ds: Dataset, hyper_grid: Sequence[HyperParams], alpha: float, folds: int = 10, seed: int = 0,
           constant_width: bool = False, nuisance: Optional[NuisanceModels] = None,
           grid_step: float = DEFAULT_GRID_STEP) -> FittedEstimator:
    """Nuisances, then CV over ``hyper_grid``, then the DC fit on all rows."""
    ds = validate_dataset(ds)
    if nuisance is None:
        nuisance = fit_nuisance(ds, rows=range(ds.n))
    grid = [hp.with_(alpha=alpha) for hp in hyper_grid]
    if constant_width:
        grid = dedupe_for_constant_width(grid)
    cache = FitCache(ds, nuisance, alpha, grid_step)
    best, table = cross_validate(cache, grid, folds, seed, constant_width)
    rule, trace = _fit_rows(cache, best, np.arange(ds.n), constant_width)
    return FittedEstimator("D-CW" if constant_width else "D-Joint", rule, nuisance, best, trace, table)


def fit_indirect(ds: Dataset, alpha: float, grid_step: float = DEFAULT_GRID_STEP,
                 nuisance: Optional[NuisanceModels] = None) -> FittedEstimator:
    ds = validate_dataset(ds)
    if nuisance is None:
        nuisance = fit_nuisance(ds, rows=range(ds.n))
    return FittedEstimator("Ind-Para", IndirectRule(nuisance.dose_prob, alpha, grid_step), nuisance, None)


def fit_estimator(kind: str, ds: Dataset, hyper_grid, alpha: float, folds: int, seed: int,
                  nuisance=None, grid_step: float = DEFAULT_GRID_STEP) -> FittedEstimator:
    if kind == "D-Joint":
        return fit_dc(ds, hyper_grid, alpha, folds, seed, False, nuisance, grid_step)
    if kind == "D-CW":
        return fit_dc(ds, hyper_grid, alpha, folds, seed, True, nuisance, grid_step)
    if kind == "Ind-Para":
        return fit_indirect(ds, alpha, grid_step, nuisance)
    raise ValueError(f"unknown estimator {kind!r}; choose from {ESTIMATORS}")


def cross_fit(ds: Dataset, s_folds: int, hyper_grid: Sequence[HyperParams], alpha: float, seed: int = 0,
              cv_folds: int = 10, constant_width: bool = False,
              grid_step: float = DEFAULT_GRID_STEP) -> FittedEstimator:
    """Fit nuisances on each fold's complement and the rule on the fold; average the rules."""
    ds = validate_dataset(ds)
    if s_folds < 2:
        raise TooFewRows("cross-fitting needs at least 2 folds")
    parts = fold_indices(ds.n, s_folds, seed)
    rules, fits = [], []
    for s, rows in enumerate(parts):
        comp = np.setdiff1d(np.arange(ds.n), rows)
        nuis = fit_nuisance(ds.subset(comp), rows=comp)
        assert not set(nuis.rows) & set(int(i) for i in rows)
        est = fit_dc(ds.subset(rows), hyper_grid, alpha, cv_folds, seed + 1 + s, constant_width, nuis, grid_step)
        rules.append(est.rule)
        fits.append(est)
    kind = ("D-CW" if constant_width else "D-Joint") + "-xfit"
    agg = FittedEstimator(kind, AggregateRule(tuple(rules)), None, fits[0].hyper)
    agg.cv_table = [f.cv_table for f in fits]
    return agg


def study_grid(epsilon: float = 1e-3, **controls) -> list:
    """Candidate grid used for the simulation study."""
    out = []
    for gamma in (2.0 ** -3, 2.0 ** -1.5, 1.0):
        for lam in (1.0, 32.0):
            for p in (0.0, 0.1, 0.5, 1.0):
                for kappa in (0.0, 2.0 ** 10):
                    out.append(HyperParams(gamma=gamma, lam=lam, epsilon=epsilon, kappa=kappa,
                                           p_init=p, **controls))
    return out
