"""Parametric nuisance models and the dose-integral utilities built on them.

Two models are fitted from data: a Gaussian linear model for the dose given
covariates (the generalized propensity density) and a logistic model of the
range indicator on ``(a, a^2, x)`` (the dose-probability curve).  The loss
needs integrals of ``alpha - mu`` over dose intervals and a split of ``mu``
into two non-decreasing parts; both are provided here.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import simpson
from scipy.special import expit

from .core import Dataset
from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    InvalidInterval,
    NonpositiveDose,
    SingleClass,
    SingularDesign,
    Separation,
)

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-3
_SQRT2PI = math.sqrt(2.0 * math.pi)


def _design(x, n=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if n is None else x.reshape(n, -1)
    return x


# ---------------------------------------------------------------------------
# propensity density


@dataclass(frozen=True, eq=False)
class PropensityModel:
    coef: np.ndarray  # intercept followed by d slopes
    sigma2: float
    log_dose: bool = False

    def __post_init__(self):
        object.__setattr__(self, "coef", np.asarray(self.coef, dtype=float).reshape(-1))
        if not self.sigma2 > 0:
            raise DegenerateVariance("sigma2 must be positive")

    @property
    def d(self) -> int:
        return self.coef.size - 1

    def mean(self, x):
        X = _design(x)
        if X.shape[1] != self.d:
            raise DimensionMismatch(f"propensity model expects {self.d} covariates, got {X.shape[1]}")
        return self.coef[0] + X @ self.coef[1:]

    def density(self, a, x):
        return propensity_density(self, a, x)


def fit_propensity(ds: Dataset, log_dose: bool = False) -> PropensityModel:
    """OLS of (log-)dose on covariates; variance uses the ML divisor ``N``."""
    n, d = ds.n, ds.d
    if n <= d + 1:
        raise SingularDesign(f"need more than {d + 1} rows, got {n}")
    target = ds.a
    if log_dose:
        if np.any(ds.a <= 0):
            raise NonpositiveDose("log-dose model needs strictly positive doses")
        target = np.log(ds.a)
    Z = np.column_stack([np.ones(n), ds.x])
    coef, _, rank, _ = np.linalg.lstsq(Z, target, rcond=None)
    if rank < Z.shape[1]:
        raise SingularDesign(f"design matrix has rank {rank} < {Z.shape[1]}")
    resid = target - Z @ coef
    sigma2 = float(resid @ resid) / n
    if sigma2 < 1e-12:
        raise DegenerateVariance(f"residual variance {sigma2:.3g} is degenerate")
    return PropensityModel(coef, sigma2, log_dose)


def propensity_density(m: PropensityModel, a, x):
    """Gaussian density of the dose (or log-dose with Jacobian ``1/a``)."""
    a_arr = np.asarray(a, dtype=float)
    eta = m.mean(x)
    sd = math.sqrt(m.sigma2)
    if m.log_dose:
        if np.any(a_arr <= 0):
            raise NonpositiveDose("density of a log-dose model at a <= 0")
        z = (np.log(a_arr) - eta) / sd
        dens = np.exp(-0.5 * z * z) / (_SQRT2PI * sd) / a_arr
    else:
        z = (a_arr - eta) / sd
        dens = np.exp(-0.5 * z * z) / (_SQRT2PI * sd)
    if np.ndim(a) == 0 and np.ndim(x) == 1:
        return float(dens[0])
    return dens


@dataclass(frozen=True)
class UniformPropensity:
    """Dose density that ignores covariates: Uniform(0, 1)."""

    def density(self, a, x):
        a = np.asarray(a, dtype=float)
        return np.where((a >= 0) & (a <= 1), 1.0, 0.0)


# ---------------------------------------------------------------------------
# dose-probability curve


@dataclass(frozen=True, eq=False)
class DoseProbModel:
    theta0: float
    theta_a: float
    theta_a2: float
    theta_x: np.ndarray
    ridge_fallback: bool = False

    def __post_init__(self):
        object.__setattr__(self, "theta_x", np.asarray(self.theta_x, dtype=float).reshape(-1))

    @property
    def d(self) -> int:
        return self.theta_x.size

    def offset(self, x):
        """Covariate part of the linear predictor, ``theta0 + theta_x'x``."""
        X = _design(x)
        if X.shape[1] != self.d:
            raise DimensionMismatch(f"dose-probability model expects {self.d} covariates, got {X.shape[1]}")
        return self.theta0 + X @ self.theta_x

    def predictor(self, a, offset):
        return offset + self.theta_a * a + self.theta_a2 * a * a

    def mu(self, a, x):
        return mu_eval(self, a, x)

    def peak(self) -> Optional[float]:
        """Stationary point of the dose predictor, if any."""
        if self.theta_a2 == 0.0:
            return None
        return -self.theta_a / (2.0 * self.theta_a2)

    def split_tables(self, x, grid):
        """Monotone parts of ``mu`` on ``grid`` for each covariate row."""
        off = self.offset(x)[:, None]
        mu = expit(self.predictor(grid[None, :], off))
        mu0 = mu[:, :1]
        peak = self.peak()
        if peak is None or not (grid[0] < peak < grid[-1]):
            slope = self.theta_a + 2.0 * self.theta_a2 * 0.5 * (grid[0] + grid[-1])
            inc = mu - mu0
            if slope >= 0:
                return mu, np.zeros_like(mu)
            return np.broadcast_to(mu0, mu.shape).copy(), -inc
        mu_pk = expit(self.predictor(peak, off))
        before = grid[None, :] <= peak
        d1 = np.where(before, mu - mu0, mu_pk - mu0)
        d2 = np.where(before, 0.0, mu - mu_pk)
        plus = mu0 + np.maximum(d1, 0.0) + np.maximum(d2, 0.0)
        minus = np.maximum(-d1, 0.0) + np.maximum(-d2, 0.0)
        return plus, minus


def _loglik(Z, r, theta, ridge):
    eta = Z @ theta
    return float(np.sum(r * eta - np.logaddexp(0.0, eta)) - ridge * theta @ theta)


def _newton_logistic(Z, r, ridge=0.0, max_iter=100, tol=1e-8):
    n, p = Z.shape
    theta = np.zeros(p)
    ll = _loglik(Z, r, theta, ridge)
    history = [ll]
    for _ in range(max_iter):
        prob = expit(Z @ theta)
        grad = Z.T @ (r - prob) - 2.0 * ridge * theta
        if np.max(np.abs(grad)) / n < tol:
            break
        wts = prob * (1.0 - prob)
        H = (Z * wts[:, None]).T @ Z + 2.0 * ridge * np.eye(p)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta + t * step
            ll_c = _loglik(Z, r, cand, ridge)
            if ll_c >= ll or t < 1e-10:
                break
            t *= 0.5
        if ll_c < ll:
            break
        theta, ll = cand, ll_c
        history.append(ll)
        if np.linalg.norm(theta) > 1e3:
            break
    return theta, history


def fit_dose_probability(ds: Dataset) -> DoseProbModel:
    """Logistic ML fit of ``r`` on ``(a, a^2, x)`` by damped Newton steps."""
    n, d = ds.n, ds.d
    r = ds.indicator.astype(float)
    if r.min() == r.max():
        raise SingleClass("indicator takes a single value")
    if n <= d + 3:
        raise SingularDesign(f"need more than {d + 3} rows, got {n}")
    Z = np.column_stack([np.ones(n), ds.a, ds.a**2, ds.x])
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise SingularDesign("logistic design matrix is rank deficient")
    theta, _ = _newton_logistic(Z, r)
    fallback = False
    if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > 1e3:
        log.warning("logistic fit diverged (|theta| > 1e3); refitting with ridge 1e-6")
        theta, _ = _newton_logistic(Z, r, ridge=1e-6, max_iter=200)
        fallback = True
        if not np.all(np.isfinite(theta)):
            raise Separation("ridge-stabilised logistic fit did not converge")
    return DoseProbModel(theta[0], theta[1], theta[2], theta[3:], ridge_fallback=fallback)


def mu_eval(m: DoseProbModel, a, x):
    """``logistic(theta0 + theta_a a + theta_a2 a^2 + theta_x'x)``."""
    off = m.offset(x)
    val = expit(m.predictor(np.asarray(a, dtype=float), off))
    if np.ndim(a) == 0 and np.ndim(x) == 1:
        return float(val[0])
    return val


def integral_alpha_minus_mu(m: DoseProbModel, x, ell: float, u: float, alpha: float,
                            nodes: int = 101) -> float:
    """Composite Simpson approximation of the integral of ``alpha - mu(a, x)`` over ``[ell, u]``."""
    if ell > u:
        raise InvalidInterval(f"ell={ell} > u={u}")
    if nodes < 3:
        raise ValueError("Simpson's rule needs at least 3 nodes")
    if nodes % 2 == 0:
        nodes += 1
    if ell == u:
        return 0.0
    grid = np.linspace(ell, u, nodes)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    vals = alpha - mu_eval(m, grid, x)
    return float(simpson(vals, x=grid))


# ---------------------------------------------------------------------------
# monotone split and the G functions


@dataclass(frozen=True, eq=False)
class MuSplit:
    """Tables of the non-decreasing parts of ``mu`` and their running integrals.

    Arrays are 1-d for a single covariate row or ``(rows, nodes)`` for many.
    Running integrals use the trapezoid rule and are linearly interpolated
    between nodes, so each is convex in its upper limit (see
    :func:`support_slopes` for the extension beyond ``[0, 1]``).
    """

    grid: np.ndarray
    mu_plus: np.ndarray
    mu_minus: np.ndarray
    mu_plus_cum: np.ndarray
    mu_minus_cum: np.ndarray

    @property
    def h(self) -> float:
        return float(self.grid[1] - self.grid[0])


def _cumtrapz(vals, h):
    out = np.zeros_like(vals)
    out[..., 1:] = np.cumsum(0.5 * h * (vals[..., 1:] + vals[..., :-1]), axis=-1)
    return out


def split_from_tables(grid, plus, minus) -> MuSplit:
    h = float(grid[1] - grid[0])
    return MuSplit(grid, plus, minus, _cumtrapz(plus, h), _cumtrapz(minus, h))


def grid_split(mu_values):
    """Split tabulated curve values into non-decreasing parts via grid increments."""
    mu_values = np.asarray(mu_values, dtype=float)
    inc = np.diff(mu_values, axis=-1)
    zeros = np.zeros(mu_values.shape[:-1] + (1,))
    minus = np.concatenate([zeros, np.cumsum(np.maximum(-inc, 0.0), axis=-1)], axis=-1)
    plus = mu_values + minus
    return plus, minus


def mu_split(m, x, nodes: int = 201) -> MuSplit:
    """Monotone split of ``mu(., x)`` on a uniform grid over ``[0, 1]``.

    ``x`` may be one covariate vector or a 2-d array of rows.
    """
    if nodes < 3:
        raise ValueError("need at least 3 nodes")
    grid = np.linspace(0.0, 1.0, nodes)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if hasattr(m, "split_tables"):
        plus, minus = m.split_tables(X, grid)
    else:
        plus, minus = grid_split(m.mu(grid[None, :], X))
    if single:
        plus, minus = plus[0], minus[0]
    return split_from_tables(grid, plus, minus)


def running_integral(cum, vals, grid, v, left_slope=None, right_slope=None):
    """Evaluate a tabulated running integral at ``v`` (broadcast row-wise).

    ``cum`` / ``vals`` are ``(rows, nodes)``; ``v`` has shape ``(rows,)``.
    Outside the grid the integral continues linearly with ``left_slope`` /
    ``right_slope`` (per row; default: the end-point integrand values).
    Returns the value and its right derivative in ``v``.
    """
    n_nodes = grid.size
    h = grid[1] - grid[0]
    v = np.asarray(v, dtype=float)
    rows = np.arange(cum.shape[0])
    pos = (v - grid[0]) / h
    k = np.clip(np.floor(pos).astype(np.int64), 0, n_nodes - 2)
    frac = pos - k
    c0 = cum[rows, k]
    c1 = cum[rows, k + 1]
    slope = (c1 - c0) / h
    val = c0 + slope * (frac * h)
    left = v < grid[0]
    right = v >= grid[-1]
    if left.any():
        ls = vals[:, 0] if left_slope is None else left_slope
        val = np.where(left, cum[:, 0] + ls * (v - grid[0]), val)
        slope = np.where(left, ls, slope)
    if right.any():
        rs = vals[:, -1] if right_slope is None else right_slope
        val = np.where(right, cum[:, -1] + rs * (v - grid[-1]), val)
        slope = np.where(right, rs, slope)
    return val, slope


def support_slopes(split: "MuSplit", alpha: float):
    """Extension slopes that make ``mu`` equal ``alpha`` outside ``[0, 1]``.

    With these the integral of ``alpha - mu`` ignores the part of an interval
    that leaves the dose support, while both running integrals stay convex.
    Returns ``(plus_left, plus_right, minus_left, minus_right)`` per row.
    """
    p, m = np.atleast_2d(split.mu_plus), np.atleast_2d(split.mu_minus)
    mu0 = p[:, 0] - m[:, 0]
    mu1 = p[:, -1] - m[:, -1]
    return (p[:, 0] - np.maximum(mu0 - alpha, 0.0),
            p[:, -1] + np.maximum(alpha - mu1, 0.0),
            m[:, 0] - np.maximum(alpha - mu0, 0.0),
            m[:, -1] + np.maximum(mu1 - alpha, 0.0))


def g_plus_minus(split: MuSplit, ell, u, alpha: float):
    """``(G_plus, G_minus)``; their difference is the integral of ``alpha - mu`` over ``[ell, u]`` within ``[0, 1]``."""
    single = split.mu_plus.ndim == 1

    def rows(a):
        return a[None, :] if single else a

    pl, pr, ml, mr = support_slopes(split, alpha)
    ell_a = np.atleast_1d(np.asarray(ell, dtype=float))
    u_a = np.atleast_1d(np.asarray(u, dtype=float))
    pc, pv = rows(split.mu_plus_cum), rows(split.mu_plus)
    mc, mv = rows(split.mu_minus_cum), rows(split.mu_minus)
    jp_l, _ = running_integral(pc, pv, split.grid, ell_a, pl, pr)
    jm_u, _ = running_integral(mc, mv, split.grid, u_a, ml, mr)
    jp_u, _ = running_integral(pc, pv, split.grid, u_a, pl, pr)
    jm_l, _ = running_integral(mc, mv, split.grid, ell_a, ml, mr)
    gp = jp_l + jm_u + alpha * u_a
    gm = jp_u + jm_l + alpha * ell_a
    if single and np.ndim(ell) == 0 and np.ndim(u) == 0:
        return float(gp[0]), float(gm[0])
    return gp, gm


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuisanceModels:
    """The pair of nuisance functions used by the loss.

    ``propensity`` and ``dose_prob`` only need ``density(a, X)`` and
    ``mu(a, X)``; fitted models additionally carry provenance in ``rows``.
    """

    propensity: object
    dose_prob: object
    density_floor: float = DENSITY_FLOOR
    rows: Optional[tuple] = None

    def e(self, a, X):
        return np.maximum(self.propensity.density(a, X), self.density_floor)

    def mu(self, a, X):
        return self.dose_prob.mu(a, X)


def fit_nuisance(ds: Dataset, log_dose: bool = False, rows=None) -> NuisanceModels:
    return NuisanceModels(fit_propensity(ds, log_dose), fit_dose_probability(ds),
                          rows=None if rows is None else tuple(int(i) for i in rows))
