"""Domain types shared by the estimation, simulation and CLI layers.

Datasets are stored column-wise as numpy arrays; :class:`Observation` is the
row view used at API boundaries and in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DoseOutOfRange,
    EmptyDataset,
    IndicatorMismatch,
    PDIError,
)


@dataclass(frozen=True)
class Observation:
    y: float
    a: float
    x: tuple
    t_lo: float = -math.inf
    t_hi: float = math.inf
    r: Optional[int] = None

    @property
    def d(self) -> int:
        return len(self.x)


def in_range(y, t_lo, t_hi):
    """Closed-interval membership ``t_lo <= y <= t_hi`` as an int array."""
    y = np.asarray(y, dtype=float)
    return ((y >= t_lo) & (y <= t_hi)).astype(int)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of observations.

    ``r`` may be omitted, in which case it is derived from ``y`` and the
    per-row desired range.
    """

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray
    r: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, 0)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(-1))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t_lo", np.broadcast_to(np.asarray(self.t_lo, dtype=float), (n,)).copy())
        object.__setattr__(self, "t_hi", np.broadcast_to(np.asarray(self.t_hi, dtype=float), (n,)).copy())
        if self.r is not None:
            object.__setattr__(self, "r", np.asarray(self.r).reshape(-1).astype(int))
        for arr in (self.a, self.t_lo, self.t_hi):
            if arr.shape[0] != n:
                raise DimensionMismatch("column lengths differ")
        if x.shape[0] != n:
            raise DimensionMismatch("covariate rows differ from outcome rows")
        if self.r is not None and self.r.shape[0] != n:
            raise DimensionMismatch("indicator column length differs")
        for arr in (self.y, self.a, self.x, self.t_lo, self.t_hi):
            arr.setflags(write=False)
        if self.r is not None:
            self.r.setflags(write=False)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.n

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Dataset":
        if len(observations) == 0:
            raise EmptyDataset("no observations")
        dims = {o.d for o in observations}
        if len(dims) != 1:
            raise DimensionMismatch(f"observations have covariate dimensions {sorted(dims)}")
        r = None
        if any(o.r is not None for o in observations):
            if any(o.r is None for o in observations):
                raise PDIError("indicator supplied for some rows only")
            r = [o.r for o in observations]
        return cls(
            y=[o.y for o in observations],
            a=[o.a for o in observations],
            x=np.array([o.x for o in observations], dtype=float),
            t_lo=[o.t_lo for o in observations],
            t_hi=[o.t_hi for o in observations],
            r=r,
        )

    def observation(self, i: int) -> Observation:
        r = None if self.r is None else int(self.r[i])
        return Observation(float(self.y[i]), float(self.a[i]), tuple(self.x[i]),
                           float(self.t_lo[i]), float(self.t_hi[i]), r)

    def observations(self) -> list:
        return [self.observation(i) for i in range(self.n)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.a[idx], self.x[idx], self.t_lo[idx], self.t_hi[idx],
                       None if self.r is None else self.r[idx])

    @property
    def indicator(self) -> np.ndarray:
        """``r`` if present, else recomputed from the desired ranges."""
        if self.r is not None:
            return self.r
        return in_range(self.y, self.t_lo, self.t_hi)


def validate_dataset(ds: Dataset) -> Dataset:
    """Check row invariants and return a dataset with ``r`` recomputed.

    Idempotent: validating a validated dataset returns an equal dataset.
    """
    if ds.n == 0:
        raise EmptyDataset("dataset has no rows")
    if ds.x.ndim != 2:
        raise DimensionMismatch("covariates must be a 2-d array")
    if np.any(~np.isfinite(ds.y)) or np.any(~np.isfinite(ds.a)) or np.any(~np.isfinite(ds.x)):
        raise PDIError("missing or non-finite values are not supported")
    if np.any(np.isnan(ds.t_lo)) or np.any(np.isnan(ds.t_hi)):
        raise PDIError("missing desired-range bounds")
    bad = np.flatnonzero((ds.a < 0.0) | (ds.a > 1.0))
    if bad.size:
        raise DoseOutOfRange(f"dose outside [0,1] at row {bad[0]}: {ds.a[bad[0]]}")
    if np.any(ds.t_lo > ds.t_hi):
        raise PDIError("desired range with t_lo > t_hi")
    r = in_range(ds.y, ds.t_lo, ds.t_hi)
    if ds.r is not None:
        bad = np.flatnonzero(ds.r != r)
        if bad.size:
            raise IndicatorMismatch(
                f"row {bad[0]}: supplied r={ds.r[bad[0]]} but y={ds.y[bad[0]]} "
                f"{'is' if r[bad[0]] else 'is not'} in [{ds.t_lo[bad[0]]}, {ds.t_hi[bad[0]]}]")
    return Dataset(ds.y, ds.a, ds.x, ds.t_lo, ds.t_hi, r)


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 1.0
    lam: float = 1.0
    epsilon: float = 1e-3
    kappa: float = 0.0
    p_init: float = 0.5
    alpha: float = 0.7
    c_loss: Optional[float] = None  # None: computed from the data at fit time
    c_cvx: Optional[float] = None  # None: 1e4 * c_loss
    max_dc_iter: int = 50
    dc_tol: float = 1e-6
    max_sub_iter: int = 2000
    sub_tol: float = 1e-7
    sub_window: int = 20
    nodes: int = 201

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.kappa >= 0:
            raise ValueError("kappa must be non-negative")
        if not 0.0 <= self.p_init <= 1.0:
            raise ValueError("p_init must lie in [0,1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")
        if self.c_loss is not None and not self.c_loss > 0:
            raise ValueError("c_loss must be positive")
        if self.c_cvx is not None:
            if not self.c_cvx > 0:
                raise ValueError("c_cvx must be positive")
            if self.c_loss is not None and self.c_cvx < self.c_loss:
                raise ValueError("c_cvx must be at least c_loss")
        if self.max_dc_iter < 1 or self.max_sub_iter < 1:
            raise ValueError("iteration caps must be positive")
        if self.nodes < 3:
            raise ValueError("need at least 3 quadrature nodes")

    def with_(self, **changes) -> "HyperParams":
        return replace(self, **changes)

    def resolved_c_cvx(self, c_loss: float) -> float:
        return 1e4 * c_loss if self.c_cvx is None else self.c_cvx


@dataclass(frozen=True)
class TaskSpec:
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")


@dataclass(frozen=True, eq=False)
class IntervalRule:
    """Kernel expansion of a lower/upper bound pair.

    For the constant-width variant ``beta_U`` equals ``beta_L`` and
    ``beta_U0 == beta_L0 + width``.
    """

    beta_L0: float
    beta_L: np.ndarray
    beta_U0: float
    beta_U: np.ndarray
    anchors: np.ndarray
    gamma: float
    width: Optional[float] = None

    def __post_init__(self):
        bl = np.asarray(self.beta_L, dtype=float).reshape(-1)
        bu = np.asarray(self.beta_U, dtype=float).reshape(-1)
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        object.__setattr__(self, "beta_L", bl)
        object.__setattr__(self, "beta_U", bu)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "beta_L0", float(self.beta_L0))
        object.__setattr__(self, "beta_U0", float(self.beta_U0))
        if bl.shape != bu.shape or bl.shape[0] != anchors.shape[0]:
            raise DimensionMismatch("coefficient vectors and anchors disagree in length")
        if self.width is not None:
            if not self.width >= 0:
                raise ValueError("width must be non-negative")
            object.__setattr__(self, "width", float(self.width))

    @property
    def d(self) -> int:
        return self.anchors.shape[1]

    @classmethod
    def constant_width(cls, beta0, beta, width, anchors, gamma) -> "IntervalRule":
        beta = np.asarray(beta, dtype=float)
        return cls(beta0, beta, beta0 + width, beta.copy(), anchors, gamma, width=width)

    def evaluate(self, x):
        """Raw ``(ell, u)`` at covariate rows ``x`` (no clipping)."""
        from .kernel import eval_rule

        return eval_rule(self, x)
