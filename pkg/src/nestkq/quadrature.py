"""Kernel quadrature weights, regularisation schedules and estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .kernels import Family, KernelSpec, gram

JITTER_START = 1e-10
JITTER_MAX = 1e-6
# finite smoothness used to schedule the ridge for infinitely smooth kernels
GAUSSIAN_SMOOTHNESS_OFFSET = 3.5


class SingularGramError(LinAlgError):
    """The regularised Gram matrix could not be factorised, even with jitter."""

    def __init__(self, message: str, condition: float = math.inf, stage: str | None = None):
        super().__init__(message)
        self.condition = condition
        self.stage = stage


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    lam: float
    kernel: KernelSpec
    jitter: float = 0.0

    def __call__(self, values) -> float:
        return kq_estimate(self.weights, values)


def solve_spd(K: np.ndarray, rhs: np.ndarray, ridge: float, amplitude: float = 1.0):
    """Solve ``(K + ridge I) w = rhs`` by Cholesky, escalating jitter on failure.

    Returns ``(w, jitter)`` where ``jitter`` is the extra diagonal term that
    was needed (0 when the plain factorisation succeeded).
    """
    n = K.shape[0]
    A = K.copy()
    A.flat[:: n + 1] += ridge
    jitter = 0.0
    while True:
        try:
            M = A
            if jitter:
                M = A.copy()
                M.flat[:: n + 1] += jitter
            factor = cho_factor(M, lower=True, overwrite_a=M is not A, check_finite=False)
            if not np.all(np.isfinite(factor[0])):
                raise LinAlgError("non-finite Cholesky factor")
            return cho_solve(factor, rhs, check_finite=False), jitter
        except LinAlgError:
            jitter = JITTER_START * amplitude if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * amplitude * (1 + 1e-9):
                cond = float(np.linalg.cond(A)) if np.all(np.isfinite(A)) else math.inf
                raise SingularGramError(
                    f"Gram matrix of size {n} is numerically singular (condition ~ {cond:.3g}) "
                    f"even with jitter {JITTER_MAX * amplitude:g}", condition=cond) from None


def kq_weights(kernel: KernelSpec, points, kme_values, lam: float = 0.0) -> np.ndarray:
    """Kernel quadrature weights ``w = (K + n lam I)^{-1} mu``.

    Parameters
    ----------
    kernel : KernelSpec
        Kernel with a concrete lengthscale.
    points : array_like, shape (n, d)
    kme_values : array_like, shape (n,)
        Kernel mean embedding of the target measure at ``points``.
    lam : float
        Nonnegative ridge; the system is regularised by ``n * lam``.
    """
    return kq_rule(kernel, points, kme_values, lam).weights


def kq_rule(kernel: KernelSpec, points, kme_values, lam: float = 0.0) -> QuadratureRule:
    points = np.asarray(points, dtype=float)
    points = points.reshape(-1, 1) if points.ndim <= 1 else points
    mu = np.asarray(kme_values, dtype=float).ravel()
    if lam < 0:
        raise ValueError("regularisation must be nonnegative")
    if mu.shape[0] != points.shape[0]:
        raise ValueError("kme_values must have one entry per point")
    n = points.shape[0]
    K = gram(kernel, points)
    w, jitter = solve_spd(K, mu, n * lam, kernel.amplitude)
    return QuadratureRule(points, w, lam, kernel, jitter)


def kq_estimate(weights, fvals) -> float:
    weights = np.asarray(weights, dtype=float)
    fvals = np.asarray(fvals, dtype=float)
    if weights.shape != fvals.shape:
        raise ValueError(f"length mismatch: {weights.shape} vs {fvals.shape}")
    return float(weights @ fvals)


def reg_schedule(lambda0: float, n: int, s: float, d: int) -> float:
    """``lambda0 * n^(-2s/d) * max(ln n, 1)^((2s+2)/d)``."""
    if lambda0 < 0:
        raise ValueError("lambda0 must be nonnegative")
    if n < 1:
        raise ValueError("sample size must be positive")
    return lambda0 * n ** (-2.0 * s / d) * max(math.log(n), 1.0) ** ((2.0 * s + 2.0) / d)


def reg_schedule_multilevel(lambda0: float, n: int, s: float, d: int) -> float:
    """Outer ridge for multilevel levels: ``lambda0 * n^(-2s/(2s+d))``."""
    if lambda0 < 0:
        raise ValueError("lambda0 must be nonnegative")
    return lambda0 * n ** (-2.0 * s / (2.0 * s + d))


def schedule_smoothness(kernel: KernelSpec, d: int) -> float:
    """Smoothness order used to schedule the ridge for ``kernel`` in ``d`` dims."""
    if kernel.family is Family.GAUSSIAN:
        return d / 2.0 + GAUSSIAN_SMOOTHNESS_OFFSET
    return kernel.sobolev_order(d)
