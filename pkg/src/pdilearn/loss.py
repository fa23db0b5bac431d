"""Loss functions for two-sided dose intervals.

Every loss is evaluated row-wise for a whole dataset at once: a
:class:`LossContext` freezes the nuisance evaluations at the observed doses
and the per-row integral tables, and its methods take arrays ``ell``/``u``
(one entry per row, or scalars broadcast to all rows).

The surrogate loss is written as a difference of two functions that are
convex in ``(ell, u)`` on the whole plane.  Writing ``s = ell - u``, the loss
equals ``max(F1 - K s_+, F2 - K s_-)`` where ``F1`` is the monotone-branch
formula, ``F2`` the non-monotone formula (both extended to the plane) and
``K`` bounds their gap per unit of ``|s|``.  Each of ``F1``, ``F2`` is split
into convex parts (products of ramps in ``F2`` are convexified with a local
Huber bump around the observed dose) and the max is split with the usual
``max(a - b, c - d) = max(a + d, c + b) - (b + d)`` identity.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .core import Dataset, Observation
from .errors import DimensionMismatch, InvalidInterval, MonotonicityViolated, NonpositiveEpsilon
from .nuisance import NuisanceModels, mu_split, running_integral, support_slopes

BUMP_RATIO = 2.5  # curvature of the bump in units of 1/eps^2; (1 + sqrt 2) is the minimum


def _check_eps(eps):
    if not eps > 0:
        raise NonpositiveEpsilon(f"epsilon must be positive, got {eps}")


def psi_eps(ell, t, u, eps):
    """Trapezoidal surrogate of ``1{t in [ell, u]}`` (requires ``ell <= u``)."""
    _check_eps(eps)
    ell, t, u = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (ell, t, u)))
    if np.any(ell > u):
        raise InvalidInterval("psi_eps needs ell <= u")
    out = np.select(
        [(t >= ell) & (t <= u),
         (t >= ell - eps) & (t < ell),
         (t > u) & (t <= u + eps)],
        [np.ones_like(t), (t - ell + eps) / eps, (u + eps - t) / eps],
        default=0.0)
    return out if out.ndim else float(out)


def psi_parts(ell, t, u, eps):
    """Convex max-affine parts of ``psi_eps``; their difference is ``psi_eps`` when ``ell <= u``."""
    _check_eps(eps)
    lo = (np.asarray(ell, dtype=float) - t) / eps
    hi = (np.asarray(t, dtype=float) - u) / eps
    plus = np.maximum(np.maximum(lo, 1.0), hi)
    minus = np.maximum(lo, 0.0) + np.maximum(hi, 0.0)
    if np.ndim(plus) == 0:
        return float(plus), float(minus)
    return plus, minus


def phi_eps(ell, u, eps):
    """Ramp surrogate of ``1{ell <= u}``."""
    _check_eps(eps)
    gap = np.asarray(u, dtype=float) - np.asarray(ell, dtype=float)
    out = np.clip((gap + eps) / eps, 0.0, 1.0)
    return out if out.ndim else float(out)


def phi_parts(ell, u, eps):
    _check_eps(eps)
    over = (np.asarray(ell, dtype=float) - u) / eps
    plus = np.maximum(over, 1.0)
    minus = np.maximum(over, 0.0)
    if np.ndim(plus) == 0:
        return float(plus), float(minus)
    return plus, minus


# ---------------------------------------------------------------------------
# per-row convex parts (compiled)
#
# Gradients are taken with respect to (ell, u).  Every one-dimensional hinge
# is differentiated on one fixed side of its kink in its own argument and
# pushed through the chain rule: from the right in ell - a and u - a, and from
# the ell <= u side in s = ell - u (so a degenerate interval is treated as a
# monotone one).  For a max of affine pieces the gradient of an active piece
# is used, ties going to the monotone branch.  Each returned vector is
# therefore a genuine subgradient of the convex part.


@njit(cache=True)
def _rint(cum, h, lslope, rslope, v):
    """Tabulated running integral on the uniform grid over [0, 1] and its right slope."""
    n = cum.shape[0]
    if v < 0.0:
        return cum[0] + lslope * v, lslope
    if v >= 1.0:
        return cum[n - 1] + rslope * (v - 1.0), rslope
    pos = v / h
    k = int(np.floor(pos))
    if k > n - 2:
        k = n - 2
    slope = (cum[k + 1] - cum[k]) / h
    return cum[k] + slope * ((pos - k) * h), slope


@njit(cache=True)
def _huber(v, radius):
    if abs(v) <= radius:
        return 0.5 * v * v, v
    return radius * abs(v) - 0.5 * radius * radius, radius * np.sign(v)


@njit(cache=True)
def _tri(d, eps):
    val = max(0.0, 1.0 - abs(d) / eps)
    if -eps <= d < 0.0:
        return val, 1.0 / eps
    if 0.0 <= d < eps:
        return val, -1.0 / eps
    return val, 0.0


@njit(cache=True)
def _tplus(d, eps):
    """``max(1, |d|/eps)`` with its right derivative."""
    if d >= eps:
        return d / eps, 1.0 / eps
    if d < -eps:
        return -d / eps, -1.0 / eps
    return 1.0, 0.0


@njit(cache=True)
def _row_parts(ell, u, a, w, kseam, pc, mc, pl, pr, ml, mr, h, eps, C, alpha, cv, rho):
    ie = 1.0 / eps
    wp = max(w, 0.0)
    wm = max(-w, 0.0)
    dl = ell - a
    du = u - a
    s = ell - u

    # Psi_+ = max(dl/eps, 1, -du/eps)
    x1 = dl * ie
    x3 = -du * ie
    psp = max(x1, max(1.0, x3))
    if x1 >= psp:
        psp_l, psp_u = ie, 0.0
    elif 1.0 >= psp:
        psp_l, psp_u = 0.0, 0.0
    else:
        psp_l, psp_u = 0.0, -ie
    # Psi_- = (dl/eps)_+ + (-du/eps)_+
    psm = max(x1, 0.0) + max(x3, 0.0)
    psm_l = ie if dl >= 0.0 else 0.0
    psm_u = -ie if du < 0.0 else 0.0

    jp_l, jp_dl = _rint(pc, h, pl, pr, ell)
    jm_l, jm_dl = _rint(mc, h, ml, mr, ell)
    jp_u, jp_du = _rint(pc, h, pl, pr, u)
    jm_u, jm_du = _rint(mc, h, ml, mr, u)

    P1 = wp * psp + wm * psm + jp_l + jm_u + alpha * u
    P1_l = wp * psp_l + wm * psm_l + jp_dl
    P1_u = wp * psp_u + wm * psm_u + jm_du + alpha
    M1 = wp * psm + wm * psp + jp_u + jm_l + alpha * ell
    M1_l = wp * psm_l + wm * psp_l + jm_dl + alpha
    M1_u = wp * psm_u + wm * psp_u + jp_du

    # triangle parts at both ends: T_+(d) = max(1, |d|/eps), T_-(d) = |d|/eps
    tml = abs(dl) * ie
    tml_g = ie if dl >= 0.0 else -ie
    tmu = abs(du) * ie
    tmu_g = ie if du >= 0.0 else -ie
    tpl, tpl_g = _tplus(dl, eps)
    tpu, tpu_g = _tplus(du, eps)
    Dp = 0.5 * (wp * (tpl + tpu) + wm * (tml + tmu))
    Dp_l = 0.5 * (wp * tpl_g + wm * tml_g)
    Dp_u = 0.5 * (wp * tpu_g + wm * tmu_g)
    Dm = 0.5 * (wp * (tml + tmu) + wm * (tpl + tpu))
    Dm_l = 0.5 * (wp * tml_g + wm * tpl_g)
    Dm_u = 0.5 * (wp * tmu_g + wm * tpu_g)

    # phi(s) = min(s_+/eps, 1) = phia - phib
    phia = max(s, 0.0) * ie
    phia_g = ie if s > 0.0 else 0.0
    phib = max(s - eps, 0.0) * ie
    phib_g = ie if s > eps else 0.0
    phi = phia - phib
    phi_g = phia_g - phib_g

    # h = phi(s) T(d) at each end, made convex by H_- = |d|/eps + phib + bump
    tl, tl_g = _tri(dl, eps)
    tu, tu_g = _tri(du, eps)
    hbl, hbl_g = _huber(dl, 2.0 * eps)
    hbu, hbu_g = _huber(du, 2.0 * eps)
    bump = rho * (hbl + hbu)
    bump_l = rho * hbl_g
    bump_u = rho * hbu_g
    Hml = tml + phib + bump
    Hml_l = tml_g + phib_g + bump_l
    Hml_u = -phib_g + bump_u
    Hmu = tmu + phib + bump
    Hmu_l = phib_g + bump_l
    Hmu_u = tmu_g - phib_g + bump_u
    Hpl = phi * tl + Hml
    Hpl_l = phi_g * tl + phi * tl_g + Hml_l
    Hpl_u = -phi_g * tl + Hml_u
    Hpu = phi * tu + Hmu
    Hpu_l = phi_g * tu + Hmu_l
    Hpu_u = -phi_g * tu + phi * tu_g + Hmu_u

    P2 = Dp + C * phia + 0.5 * wp * (Hml + Hmu) + 0.5 * wm * (Hpl + Hpu)
    P2_l = Dp_l + C * phia_g + 0.5 * wp * (Hml_l + Hmu_l) + 0.5 * wm * (Hpl_l + Hpu_l)
    P2_u = Dp_u - C * phia_g + 0.5 * wp * (Hml_u + Hmu_u) + 0.5 * wm * (Hpl_u + Hpu_u)
    M2 = Dm + C * phib + 0.5 * wp * (Hpl + Hpu) + 0.5 * wm * (Hml + Hmu)
    M2_l = Dm_l + C * phib_g + 0.5 * wp * (Hpl_l + Hpu_l) + 0.5 * wm * (Hml_l + Hmu_l)
    M2_u = Dm_u - C * phib_g + 0.5 * wp * (Hpl_u + Hpu_u) + 0.5 * wm * (Hml_u + Hmu_u)

    # glue across the seam s = 0 (derivatives in s taken from the s <= 0 side)
    sp = max(s, 0.0)
    sp_g = 1.0 if s > 0.0 else 0.0
    sm = max(-s, 0.0)
    sm_g = -1.0 if s <= 0.0 else 0.0
    A1 = P1 + M2 + kseam * sm
    A2 = P2 + M1 + kseam * sp
    quad = cv * sp * sp
    quad_g = 2.0 * cv * sp
    if A1 >= A2:
        plus = A1 + quad
        plus_l = P1_l + M2_l + kseam * sm_g + quad_g
        plus_u = P1_u + M2_u - kseam * sm_g - quad_g
    else:
        plus = A2 + quad
        plus_l = P2_l + M1_l + kseam * sp_g + quad_g
        plus_u = P2_u + M1_u - kseam * sp_g - quad_g
    minus = M1 + M2 + kseam * (sp + sm) + quad
    minus_l = M1_l + M2_l + kseam * (sp_g + sm_g) + quad_g
    minus_u = M1_u + M2_u - kseam * (sp_g + sm_g) - quad_g
    return plus, minus, plus_l, plus_u, minus_l, minus_u


@njit(cache=True)
def _all_parts(ell, u, a, w, kseam, pc, mc, pl, pr, ml, mr, h, eps, C, alpha, cv, rho, out):
    for i in range(ell.shape[0]):
        r = _row_parts(ell[i], u[i], a[i], w[i], kseam[i], pc[i], mc[i], pl[i], pr[i], ml[i], mr[i],
                       h, eps, C, alpha, cv, rho)
        for j in range(6):
            out[j, i] = r[j]


@dataclass
class DCParts:
    """Row-wise convex parts ``plus``/``minus`` with their gradients in ``(ell, u)``."""

    plus: np.ndarray
    minus: np.ndarray
    plus_dl: np.ndarray
    plus_du: np.ndarray
    minus_dl: np.ndarray
    minus_du: np.ndarray

    @property
    def value(self):
        return self.plus - self.minus


class LossContext:
    """Nuisance evaluations and constants needed to evaluate losses on a dataset."""

    def __init__(self, ds: Dataset, nuisance: NuisanceModels, alpha: float, epsilon: float,
                 c_loss: Optional[float] = None, c_cvx: Optional[float] = None,
                 nodes: int = 201, c_loss_nodes: int = 101):
        _check_eps(epsilon)
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")
        self.ds = ds
        self.nuisance = nuisance
        self.alpha = float(alpha)
        self.epsilon = float(epsilon)
        self.n = ds.n
        self.a = ds.a
        self.r = ds.indicator.astype(float)
        self.mu_a = np.asarray(nuisance.mu(ds.a, ds.x), dtype=float)
        raw = np.asarray(nuisance.propensity.density(ds.a, ds.x), dtype=float)
        self.e_a = np.maximum(raw, nuisance.density_floor)
        self.floor_hits = int(np.sum(raw < nuisance.density_floor))
        self.w = (self.mu_a - self.r) / self.e_a
        self.wp = np.maximum(self.w, 0.0)
        self.wm = np.maximum(-self.w, 0.0)
        split = mu_split(nuisance.dose_prob, ds.x, nodes)
        if split.mu_plus.ndim == 1:
            raise DimensionMismatch("expected one table row per observation")
        self.split = split
        self.grid = split.grid
        # running integral of mu itself, used by the plain losses
        self.mu_tab = split.mu_plus - split.mu_minus
        self.mu_cum = split.mu_plus_cum - split.mu_minus_cum
        # beyond the dose support mu is taken to equal alpha (zero integrand)
        self.ext_slopes = tuple(np.ascontiguousarray(v) for v in support_slopes(split, self.alpha))
        self._alpha_rows = np.full(self.n, self.alpha)
        self.c_loss = float(c_loss) if c_loss is not None else self._scan_c_loss(c_loss_nodes)
        self.c_cvx = float(c_cvx) if c_cvx is not None else 1e4 * self.c_loss
        # per-row slope bound of |F2 - F1| / |ell - u|
        self.k_seam = (4.0 * np.abs(self.w) + self.c_loss) / self.epsilon + 2.0

    # -- integrals ---------------------------------------------------------

    def _rows(self, v):
        return np.broadcast_to(np.asarray(v, dtype=float), (self.n,))

    def running_mu(self, v):
        """Running integral of ``mu`` from 0 to ``v`` per row (and ``mu`` there)."""
        return running_integral(self.mu_cum, self.mu_tab, self.grid, self._rows(v),
                                self._alpha_rows, self._alpha_rows)

    def integral(self, ell, u):
        """Integral of ``alpha - mu`` from ``ell`` to ``u`` per row (signed if ``ell > u``)."""
        ell, u = self._rows(ell), self._rows(u)
        jl, _ = self.running_mu(ell)
        ju, _ = self.running_mu(u)
        return self.alpha * (u - ell) - (ju - jl)

    def total_mu(self):
        jv, _ = self.running_mu(1.0)
        return jv

    def _scan_c_loss(self, nodes):
        g = np.linspace(0.0, 1.0, nodes)
        out = 0.0
        for start in range(0, self.n, 64):
            sl = slice(start, min(start + 64, self.n))
            rows = np.arange(sl.start, sl.stop)
            jd = np.empty((rows.size, nodes))
            for k, gk in enumerate(g):
                jv, _ = running_integral(self.mu_cum[sl], self.mu_tab[sl], self.grid, np.full(rows.size, gk))
                jd[:, k] = self.alpha * gk - jv
            integ = jd[:, None, :] - jd[:, :, None]  # [row, lo, hi]
            inside = (g[None, :, None] <= self.a[sl, None, None]) & (self.a[sl, None, None] <= g[None, None, :])
            val = self.w[sl, None, None] * inside + integ
            upper = np.triu(np.ones((nodes, nodes), dtype=bool))
            out = max(out, float(np.max(np.abs(val[:, upper]))))
        return 2.0 * out if out > 0 else 1.0

    # -- plain losses --------------------------------------------------------

    def loss_indicator(self, ell, u):
        """Doubly-robust indicator loss; ``c_loss`` on non-monotone pairs."""
        ell, u = self._rows(ell), self._rows(u)
        inside = (ell <= self.a) & (self.a <= u)
        l1 = self.w * inside + self.integral(ell, u)
        return np.where(ell <= u, l1, self.c_loss)

    def _require_monotone(self, ell, u):
        if np.any(ell > u):
            raise MonotonicityViolated("IPW/AIPW losses are defined for ell <= u only")

    def loss_ipw(self, ell, u):
        ell, u = self._rows(ell), self._rows(u)
        self._require_monotone(ell, u)
        inside = (ell <= self.a) & (self.a <= u)
        return (self.alpha * (1 - self.r) * inside + (1 - self.alpha) * self.r * ~inside) / self.e_a

    def loss_aipw(self, ell, u):
        ell, u = self._rows(ell), self._rows(u)
        self._require_monotone(ell, u)
        inside = (ell <= self.a) & (self.a <= u)
        jl, _ = self.running_mu(ell)
        ju, _ = self.running_mu(u)
        int_mu_in = ju - jl
        int_one_minus_mu_in = (u - ell) - int_mu_in
        int_mu_out = self.total_mu() - int_mu_in
        resid = self.mu_a - self.r
        return (self.alpha * (resid * inside / self.e_a + int_one_minus_mu_in)
                + (1 - self.alpha) * (-resid * ~inside / self.e_a + int_mu_out))

    # -- surrogate -------------------------------------------------------------

    def _psi(self, ell, u):
        # Psi_eps(ell, A, u) for ell <= u, written out branch by branch
        t, eps = self.a, self.epsilon
        return np.select(
            [(t >= ell) & (t <= u),
             (t >= ell - eps) & (t < ell),
             (t > u) & (t <= u + eps)],
            [np.ones_like(t), (t - ell + eps) / eps, (u + eps - t) / eps],
            default=0.0)

    def loss_surrogate(self, ell, u):
        """Three-branch surrogate loss per row."""
        ell, u = self._rows(ell), self._rows(u)
        eps, C = self.epsilon, self.c_loss
        mono = ell <= u
        safe_u = np.where(mono, u, ell)
        b1 = self.w * self._psi(ell, safe_u) + self.integral(ell, safe_u)
        deg = 0.5 * (self.w * self._psi(ell, ell) + self.w * self._psi(u, u))
        phi = np.clip((u - ell + eps) / eps, 0.0, 1.0)
        b2 = phi * (deg - C) + C
        return np.where(mono, b1, np.where(ell <= u + eps, b2, C))

    def surrogate_parts(self, ell, u) -> DCParts:
        """Convex parts of the surrogate loss and their gradients in ``(ell, u)``."""
        ell = np.ascontiguousarray(self._rows(ell))
        u = np.ascontiguousarray(self._rows(u))
        out = self.parts_buffer()
        self.parts_into(ell, u, out)
        return DCParts(*(out[j].copy() for j in range(6)))

    def parts_buffer(self):
        return np.empty((6, self.n))

    def parts_into(self, ell, u, out):
        """Fill ``out`` (6 x n) with plus, minus and their (ell, u) gradients."""
        sp = self.split
        _all_parts(ell, u, self.a, self.w, self.k_seam, sp.mu_plus_cum, sp.mu_minus_cum,
                   *self.ext_slopes, sp.h, self.epsilon, self.c_loss,
                   self.alpha, self.c_cvx / self.epsilon, BUMP_RATIO / self.epsilon**2, out)

    def subset(self, rows) -> "LossContext":
        """Context restricted to ``rows``; constants (``c_loss``, ``c_cvx``) are kept."""
        rows = np.asarray(rows)
        sub = copy.copy(self)
        sub.ds = self.ds.subset(rows)
        sub.n = sub.ds.n
        for name in ("a", "r", "mu_a", "e_a", "w", "wp", "wm", "mu_tab", "mu_cum", "k_seam", "_alpha_rows"):
            setattr(sub, name, np.ascontiguousarray(getattr(self, name)[rows]))
        sub.ext_slopes = tuple(np.ascontiguousarray(v[rows]) for v in self.ext_slopes)
        sp = self.split
        sub.split = type(sp)(sp.grid, sp.mu_plus[rows], sp.mu_minus[rows], sp.mu_plus_cum[rows], sp.mu_minus_cum[rows])
        sub.floor_hits = int(np.sum(self.e_a[rows] <= self.nuisance.density_floor))
        return sub

    # -- single-observation views --------------------------------------------

    def row(self, i: int) -> Observation:
        return self.ds.observation(i)


# ---------------------------------------------------------------------------
# penalized empirical objective


def _gram_entries(K):
    return K.entries if hasattr(K, "entries") else np.asarray(K, dtype=float)


def _check_coefs(Km, beta_L, beta_U):
    n = Km.shape[0]
    if np.shape(beta_L) != (n,) or np.shape(beta_U) != (n,):
        raise DimensionMismatch(f"coefficients must have length {n}")


def objective_q(ctx: LossContext, K, beta_L0, beta_L, beta_U0, beta_U, lam, kappa) -> float:
    """Mean surrogate loss of the kernel rule plus ridge and monotonicity penalties."""
    Km = _gram_entries(K)
    beta_L = np.asarray(beta_L, dtype=float)
    beta_U = np.asarray(beta_U, dtype=float)
    _check_coefs(Km, beta_L, beta_U)
    ell = beta_L0 + Km @ beta_L
    u = beta_U0 + Km @ beta_U
    risk = float(np.mean(ctx.loss_surrogate(ell, u)))
    ridge = lam * (beta_L @ (Km @ beta_L) + beta_U @ (Km @ beta_U))
    mono = kappa * float(np.sum(np.maximum(beta_L - beta_U, 0.0)))
    return risk + float(ridge) + mono


def objective_q_parts(ctx: LossContext, K, beta_L0, beta_L, beta_U0, beta_U, lam, kappa):
    """``(q_plus, q_minus)``; the penalties are convex and sit in ``q_plus``."""
    Km = _gram_entries(K)
    beta_L = np.asarray(beta_L, dtype=float)
    beta_U = np.asarray(beta_U, dtype=float)
    _check_coefs(Km, beta_L, beta_U)
    parts = ctx.surrogate_parts(beta_L0 + Km @ beta_L, beta_U0 + Km @ beta_U)
    ridge = lam * (beta_L @ (Km @ beta_L) + beta_U @ (Km @ beta_U))
    mono = kappa * float(np.sum(np.maximum(beta_L - beta_U, 0.0)))
    return float(np.mean(parts.plus)) + float(ridge) + mono, float(np.mean(parts.minus))
