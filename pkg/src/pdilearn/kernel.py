"""Gaussian kernel, Gram matrices and evaluation of kernel interval rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IntervalRule
from .errors import DimensionMismatch

PSD_TOL = 1e-8


def gaussian_kernel(x, x2, gamma: float) -> float:
    """``exp(-||x - x2||^2 / gamma^2)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    if x.shape != x2.shape:
        raise DimensionMismatch(f"vectors of length {x.size} and {x2.size}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    diff = x - x2
    return float(np.exp(-np.dot(diff, diff) / gamma**2))


def _sqdist(X, Z):
    xx = np.einsum("ij,ij->i", X, X)
    zz = np.einsum("ij,ij->i", Z, Z)
    d2 = xx[:, None] + zz[None, :] - 2.0 * (X @ Z.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def cross_kernel(X, Z, gamma: float) -> np.ndarray:
    """Kernel rows ``k(X_i, Z_j)`` as an ``len(X) x len(Z)`` array."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if X.shape[1] != Z.shape[1]:
        raise DimensionMismatch(f"dimension {X.shape[1]} vs {Z.shape[1]}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return np.exp(-_sqdist(X, Z) / gamma**2)


@dataclass(frozen=True, eq=False)
class GramMatrix:
    entries: np.ndarray
    gamma: float

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[0])

    def is_psd(self, tol: float = PSD_TOL) -> bool:
        return self.min_eigenvalue() >= -tol


def gram(X, gamma: float) -> GramMatrix:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("gram matrix of an empty point set")
    d2 = _sqdist(X, X)
    np.fill_diagonal(d2, 0.0)
    K = np.exp(-d2 / gamma**2)
    # exact symmetry regardless of BLAS rounding
    K = 0.5 * (K + K.T)
    K.setflags(write=False)
    return GramMatrix(K, float(gamma))


def eval_rule(rule: IntervalRule, x):
    """Evaluate ``(ell, u)`` of a rule.

    ``x`` may be a single covariate vector (scalars returned) or a 2-d array
    of rows (arrays returned).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != rule.d:
        raise DimensionMismatch(f"rule expects dimension {rule.d}, got {X.shape[1]}")
    k = cross_kernel(X, rule.anchors, rule.gamma)
    ell = rule.beta_L0 + k @ rule.beta_L
    if rule.width is not None:
        u = ell + rule.width
    else:
        u = rule.beta_U0 + k @ rule.beta_U
    if single:
        return float(ell[0]), float(u[0])
    return ell, u


def rkhs_penalty(beta, K) -> float:
    """``beta' K beta``; ``K`` may be a :class:`GramMatrix` or an array."""
    Km = K.entries if isinstance(K, GramMatrix) else np.asarray(K, dtype=float)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if Km.shape != (beta.size, beta.size):
        raise DimensionMismatch(f"beta of length {beta.size} vs gram {Km.shape}")
    return float(beta @ (Km @ beta))
