"""Difference-of-convex fitting of kernel interval rules.

The ERM objective ``Q = Q_plus - Q_minus`` is minimized by repeatedly
linearizing ``Q_minus`` at the current coefficients and approximately solving
the resulting convex problem with a proximal subgradient method.

Coefficients are handled as one flat vector.  For the joint rule it is
``[beta_L0, beta_L (n), beta_U0, beta_U (n)]``; for the constant-width rule
``[beta_0, beta (n), width]``.  Subgradient steps are preconditioned by the
inverse Gram matrix, so the coefficient update for a loss gradient ``K g / n``
is simply ``g / n``: a step in function space.  Each coordinate's step is
further divided by the running RMS of its own subgradient, because a handful
of observations whose dose sits inside a ramp of width ``epsilon`` have
gradients thousands of times larger than the rest; the ridge and
monotonicity penalties are applied through their proximal maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .core import HyperParams, IntervalRule
from .errors import DimensionMismatch, IterationCapWithoutDescent, SolveFailure
from .kernel import GramMatrix
from .loss import LossContext

log = logging.getLogger(__name__)

JITTER = 1e-8
STEP_DECAY_T0 = 100.0
FIRST_MOVE = 0.05  # typical change of one coordinate's contribution per early step
MAX_STEP = 1e12
TRIAL_HALVINGS = 30


@dataclass
class DcTrace:
    objective: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    sub_iterations: list = field(default_factory=list)

    def is_monotone(self, tol: float = 1e-9) -> bool:
        q = np.asarray(self.objective)
        return bool(np.all(np.diff(q) <= tol))


class _Problem:
    """Maps a flat coefficient vector to bound values and back for one rule shape."""

    def __init__(self, ctx: LossContext, K, lam: float, kappa: float, constant_width: bool = False):
        self.ctx = ctx
        self.K = K.entries if isinstance(K, GramMatrix) else np.asarray(K, dtype=float)
        self.n = self.K.shape[0]
        if self.n != ctx.n:
            raise DimensionMismatch(f"gram of size {self.n} for {ctx.n} observations")
        self.lam = float(lam)
        self.kappa = float(kappa) if not constant_width else 0.0
        self.cw = constant_width
        self.dim = self.n + 2 if constant_width else 2 * self.n + 2
        self._buf = ctx.parts_buffer()

    # layout helpers
    def betas(self, theta):
        n = self.n
        if self.cw:
            return theta[1:n + 1][:, None]
        return np.column_stack([theta[1:n + 1], theta[n + 2:]])

    def bounds(self, theta, kb):
        n = self.n
        if self.cw:
            ell = theta[0] + kb[:, 0]
            return ell, ell + theta[n + 1]
        return theta[0] + kb[:, 0], theta[n + 1] + kb[:, 1]

    def kbeta(self, theta):
        return self.K @ self.betas(theta)

    def ridge(self, theta, kb):
        B = self.betas(theta)
        val = self.lam * float(np.sum(B * kb))
        return 2.0 * val if self.cw else val

    def mono(self, theta):
        if self.kappa == 0.0:
            return 0.0
        n = self.n
        return self.kappa * float(np.sum(np.maximum(theta[1:n + 1] - theta[n + 2:], 0.0)))

    def evaluate_parts(self, theta, kb):
        ell, u = self.bounds(theta, kb)
        self.ctx.parts_into(np.ascontiguousarray(ell), np.ascontiguousarray(u), self._buf)
        return self._buf

    def direction(self, g_ell, g_u):
        """Preconditioned coefficient direction for row gradients of the mean loss."""
        n = self.n
        if self.cw:
            tot = g_ell + g_u
            return np.concatenate([[tot.mean()], tot / n, [g_u.mean()]])
        return np.concatenate([[g_ell.mean()], g_ell / n, [g_u.mean()], g_u / n])

    def linear_term(self, theta, kb, z):
        """``<g, theta>`` where ``g`` is the coefficient-space vector with preconditioned form ``z``."""
        n = self.n
        if self.cw:
            return theta[0] * z[0] + float(z[1:n + 1] @ kb[:, 0]) + theta[n + 1] * z[n + 1]
        return (theta[0] * z[0] + float(z[1:n + 1] @ kb[:, 0])
                + theta[n + 1] * z[n + 1] + float(z[n + 2:] @ kb[:, 1]))

    def q_value(self, theta):
        kb = self.kbeta(theta)
        ell, u = self.bounds(theta, kb)
        return float(np.mean(self.ctx.loss_surrogate(ell, u))) + self.ridge(theta, kb) + self.mono(theta)

    def minus_linearization(self, theta):
        """Preconditioned subgradient of ``Q_minus`` at ``theta``."""
        buf = self.evaluate_parts(theta, self.kbeta(theta))
        return self.direction(buf[4].copy(), buf[5].copy())

    def prox(self, theta, eta):
        """Proximal map of the ridge and monotonicity penalties for per-coordinate steps ``eta``."""
        n = self.n
        coef = 4.0 if self.cw else 2.0
        out = theta.copy()
        out[1:n + 1] /= 1.0 + coef * eta[1:n + 1] * self.lam
        if self.cw:
            out[n + 1] = max(out[n + 1], 0.0)
            return out
        out[n + 2:] /= 1.0 + coef * eta[n + 2:] * self.lam
        if self.kappa > 0.0:
            bl, bu = out[1:n + 1], out[n + 2:]
            gap = bl - bu
            t = self.kappa * np.minimum(eta[1:n + 1], eta[n + 2:])
            big = gap > 2.0 * t
            mid = (gap > 0.0) & ~big
            avg = 0.5 * (bl + bu)
            out[1:n + 1] = np.where(big, bl - t, np.where(mid, avg, bl))
            out[n + 2:] = np.where(big, bu + t, np.where(mid, avg, bu))
        return out


@dataclass
class _SubResult:
    theta: np.ndarray
    value: float
    start_value: float
    iterations: int
    improved: bool


def _scale(d2_sum, it):
    """Running RMS of each coordinate's subgradient."""
    return np.maximum(np.sqrt(d2_sum / it), 1e-300)


def _solve_subproblem(prob: _Problem, z: np.ndarray, start: np.ndarray, max_iter: int,
                      tol: float, window: int, losses: bool = True, scale: float = 1.0) -> _SubResult:
    """Proximal subgradient descent on ``Q_plus(theta) - <g, theta>``.

    ``z`` is the preconditioned form of the linear coefficient ``g``.  With
    ``losses=False`` the loss term is dropped (used to check the quadratic part).
    The stopping rule compares improvements with ``tol * max(1, scale)``;
    ``scale`` should be the size of the true objective, since the subproblem
    value itself carries large constants from the convex parts.
    """

    def value_and_dir(theta):
        kb = prob.kbeta(theta)
        if losses:
            buf = prob.evaluate_parts(theta, kb)
            val = float(np.mean(buf[0]))
            d = prob.direction(buf[2].copy(), buf[3].copy())
        else:
            val = 0.0
            d = np.zeros(prob.dim)
        val += prob.ridge(theta, kb) + prob.mono(theta) - prob.linear_term(theta, kb, z)
        return val, d - z

    theta = start.copy()
    f0, d = value_and_dir(theta)
    best, best_f = theta.copy(), f0
    history = [f0]

    # Per-coordinate steps: a harmonic schedule divided by the running RMS of
    # that coordinate's subgradient, so each coefficient moves by about a_t
    # per step however steep its own loss is.  The base length a_0 is halved
    # from FIRST_MOVE until the first step descends.
    sq = d * d
    rms = _scale(sq, 1)
    a0 = FIRST_MOVE
    for _ in range(TRIAL_HALVINGS):
        eta = np.minimum(a0 / rms, MAX_STEP)
        f_trial, _ = value_and_dir(prob.prox(theta - eta * d, eta))
        if f_trial < f0:
            break
        a0 *= 0.5
    else:
        return _SubResult(start.copy(), f0, f0, 0, False)

    it = 0
    for it in range(1, max_iter + 1):
        if it > 1:
            sq += d * d
            rms = _scale(sq, it)
        a_t = a0 * STEP_DECAY_T0 / (it - 1 + STEP_DECAY_T0)
        eta = np.minimum(a_t / rms, MAX_STEP)
        theta = prob.prox(theta - eta * d, eta)
        f, d = value_and_dir(theta)
        if f < best_f:
            best, best_f = theta.copy(), f
        history.append(best_f)
        if it >= window and history[-window - 1] - best_f < tol * max(1.0, abs(scale)):
            break
    return _SubResult(best, best_f, f0, it, best_f < f0)


def _unpack(prob: _Problem, theta, anchors, gamma) -> IntervalRule:
    n = prob.n
    if prob.cw:
        return IntervalRule.constant_width(theta[0], theta[1:n + 1], theta[n + 1], anchors, gamma)
    return IntervalRule(theta[0], theta[1:n + 1], theta[n + 1], theta[n + 2:], anchors, gamma)


def _pack(rule: IntervalRule, constant_width: bool):
    if constant_width:
        width = rule.width if rule.width is not None else rule.beta_U0 - rule.beta_L0
        return np.concatenate([[rule.beta_L0], rule.beta_L, [width]])
    return np.concatenate([[rule.beta_L0], rule.beta_L, [rule.beta_U0], rule.beta_U])


# ---------------------------------------------------------------------------
# public API


def init_internal_division(ell, u, p: float, K, anchors=None, gamma: Optional[float] = None) -> IntervalRule:
    """Kernel rule interpolating bounds shrunk toward their means by ratio ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0,1]")
    ell = np.asarray(ell, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(ell)) and np.all(np.isfinite(u))):
        raise ValueError("initial bounds must be finite")
    Km = K.entries if isinstance(K, GramMatrix) else np.asarray(K, dtype=float)
    if ell.shape != (Km.shape[0],) or u.shape != ell.shape:
        raise DimensionMismatch("one initial bound pair per anchor is required")
    if gamma is None:
        gamma = K.gamma if isinstance(K, GramMatrix) else 1.0
    if anchors is None:
        anchors = np.zeros((Km.shape[0], 1))
    try:
        factor = cho_factor(Km + JITTER * np.eye(Km.shape[0]))
    except LinAlgError as exc:
        raise SolveFailure("gram matrix is not positive definite even after jitter") from exc
    coefs = []
    for b in (ell, u):
        target = p * b + (1.0 - p) * b.mean()
        if np.ptp(target) == 0.0:
            # a constant target needs no expansion (and must not pick up rounding noise)
            coefs.append((float(target[0]), np.zeros_like(target)))
            continue
        b0 = target.mean()
        beta = cho_solve(factor, target - b0)
        if not np.all(np.isfinite(beta)):
            raise SolveFailure("non-finite coefficients from the initial solve")
        coefs.append((b0, beta))
    (l0, bl), (u0, bu) = coefs
    # solve residuals must not invert a degenerate target interval
    overlap = float(np.max((l0 + Km @ bl) - (u0 + Km @ bu)))
    if overlap > 0.0 and np.all(ell <= u):
        u0 += overlap
    return IntervalRule(l0, bl, u0, bu, anchors, gamma)


def init_constant_width(ell, u, p: float, K, anchors=None, gamma: Optional[float] = None) -> IntervalRule:
    """Constant-width start: lower bound from the internal division, width from the mean gap."""
    rule = init_internal_division(ell, u, p, K, anchors, gamma)
    width = max(float(np.mean(np.asarray(u) - np.asarray(ell))), 0.0)
    return IntervalRule.constant_width(rule.beta_L0, rule.beta_L, width, rule.anchors, rule.gamma)


def convex_subproblem(ctx: LossContext, K, lam: float, kappa: float, linearization, start,
                      max_iter: int = 2000, tol: float = 1e-7, window: int = 20,
                      constant_width: bool = False, losses: bool = True, strict: bool = False):
    """Approximately minimize ``Q_plus(theta) - linearization' theta`` from ``start``.

    ``linearization`` and ``start`` are flat coefficient vectors (see module
    docstring); ``linearization`` is an ordinary coefficient-space gradient.
    Returns ``(theta, iterations)``.  The result never has a larger
    subproblem objective than ``start``; with ``strict=True`` a run that
    finds no descent raises :class:`IterationCapWithoutDescent`.
    """
    prob = _Problem(ctx, K, lam, kappa, constant_width)
    g = np.asarray(linearization, dtype=float)
    start = np.asarray(start, dtype=float)
    if g.shape != (prob.dim,) or start.shape != (prob.dim,):
        raise DimensionMismatch(f"expected coefficient vectors of length {prob.dim}")
    z = g.copy()
    n = prob.n
    factor = cho_factor(prob.K + JITTER * np.eye(n))
    blocks = [slice(1, n + 1)] if constant_width else [slice(1, n + 1), slice(n + 2, 2 * n + 2)]
    for b in blocks:
        z[b] = cho_solve(factor, g[b])
    res = _solve_subproblem(prob, z, start, max_iter, tol, window, losses)
    if strict and not res.improved:
        raise IterationCapWithoutDescent("no descent step found; start returned")
    return res.theta, res.iterations


def _dc_loop(prob: _Problem, theta, hyper: HyperParams, anchors, gamma):
    trace = DcTrace()
    q = prob.q_value(theta)
    trace.objective.append(q)
    for _ in range(hyper.max_dc_iter):
        z = prob.minus_linearization(theta)
        res = _solve_subproblem(prob, z, theta, hyper.max_sub_iter, hyper.sub_tol, hyper.sub_window,
                                scale=q)
        trace.sub_iterations.append(res.iterations)
        trace.iterations += 1
        if not res.improved:
            trace.converged = True
            break
        q_new = prob.q_value(res.theta)
        if q_new > q:
            # rounding in the large convex parts; keep the current point
            log.debug("DC step rejected: %.17g > %.17g", q_new, q)
            trace.converged = True
            break
        theta = res.theta
        trace.objective.append(q_new)
        done = abs(q - q_new) < hyper.dc_tol * (1.0 + abs(q))
        q = q_new
        if done:
            trace.converged = True
            break
    return _unpack(prob, theta, anchors, gamma), trace


def dc_fit(ctx: LossContext, K: GramMatrix, hyper: HyperParams, init: IntervalRule):
    """Joint DC fit of ``(f_L, f_U)`` starting from ``init``; returns ``(rule, trace)``."""
    prob = _Problem(ctx, K, hyper.lam, hyper.kappa)
    theta = _pack(init, constant_width=False)
    if theta.shape != (prob.dim,):
        raise DimensionMismatch("initial rule does not match the gram matrix")
    return _dc_loop(prob, theta, hyper, init.anchors, init.gamma)


def dc_fit_constant_width(ctx: LossContext, K: GramMatrix, hyper: HyperParams, init: IntervalRule):
    """DC fit with ``f_U = f_L + width`` and ``width >= 0``."""
    prob = _Problem(ctx, K, hyper.lam, 0.0, constant_width=True)
    theta = _pack(init, constant_width=True)
    if theta.shape != (prob.dim,):
        raise DimensionMismatch("initial rule does not match the gram matrix")
    theta[-1] = max(theta[-1], 0.0)
    return _dc_loop(prob, theta, hyper, init.anchors, init.gamma)
