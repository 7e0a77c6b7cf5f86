"""Stationary kernels, Gram matrices and hyperparameter heuristics."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

SQRT3 = np.sqrt(3.0)


class Family(str, enum.Enum):
    MATERN12 = "matern12"
    MATERN32 = "matern32"
    GAUSSIAN = "gaussian"


class Composition(str, enum.Enum):
    ISOTROPIC = "isotropic"
    TENSOR = "tensor"


# Matern order nu for each family; Gaussian is infinitely smooth.
NU = {Family.MATERN12: 0.5, Family.MATERN32: 1.5, Family.GAUSSIAN: np.inf}


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel ``k(x, y) = A * phi(x - y)``.

    Parameters
    ----------
    family : Family or str
        One of ``matern12``, ``matern32`` or ``gaussian``.
    lengthscale : float or tuple of float, optional
        Positive lengthscale, scalar or one entry per dimension. ``None``
        marks a template whose lengthscale is filled in later (for example
        by :func:`median_heuristic`); such a spec cannot be evaluated.
    amplitude : float
        Value of ``k(x, x)``.
    composition : Composition or str
        ``isotropic`` applies the radial profile to the (scaled) Euclidean
        distance; ``tensor`` multiplies one-dimensional profiles.
    """

    family: Family = Family.MATERN32
    lengthscale: float | tuple[float, ...] | None = None
    amplitude: float = 1.0
    composition: Composition = Composition.ISOTROPIC

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "composition", Composition(self.composition))
        if self.lengthscale is not None:
            ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
            if ls.ndim != 1 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
                raise ValueError(f"lengthscale must be positive, got {self.lengthscale!r}")
            value = float(ls[0]) if ls.size == 1 else tuple(float(v) for v in ls)
            object.__setattr__(self, "lengthscale", value)
        if not (np.isfinite(self.amplitude) and self.amplitude > 0):
            raise ValueError(f"amplitude must be positive, got {self.amplitude!r}")

    def with_lengthscale(self, lengthscale) -> KernelSpec:
        return replace(self, lengthscale=lengthscale)

    def lengthscales(self, dim: int) -> np.ndarray:
        """Per-dimension lengthscale vector of length ``dim``."""
        if self.lengthscale is None:
            raise ValueError("kernel lengthscale has not been set")
        ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
        if ls.size == 1:
            return np.full(dim, ls[0])
        if ls.size != dim:
            raise ValueError(f"kernel has {ls.size} lengthscales but points have dimension {dim}")
        return ls

    @property
    def nu(self) -> float:
        return NU[self.family]

    def sobolev_order(self, dim: int) -> float:
        """Smoothness ``s = nu + d/2`` of the Sobolev space matching this kernel."""
        return self.nu + dim / 2.0


def _profile(family: Family, r: np.ndarray) -> np.ndarray:
    """Radial profile evaluated at scaled distance ``r = |x - y| / lengthscale``."""
    if family is Family.MATERN12:
        return np.exp(-r)
    if family is Family.MATERN32:
        a = SQRT3 * r
        return (1.0 + a) * np.exp(-a)
    return np.exp(-0.5 * r * r)


def cross(spec: KernelSpec, x, y) -> np.ndarray:
    """Cross-covariance matrix ``k(x_i, y_j)`` of shape ``(n, m)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x = x.reshape(-1, 1) if x.ndim <= 1 else x
    y = y.reshape(-1, 1) if y.ndim <= 1 else y
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("kernel inputs must be finite")
    ls = spec.lengthscales(x.shape[1])
    diff = (x[:, None, :] - y[None, :, :]) / ls
    if spec.composition is Composition.TENSOR:
        out = np.prod(_profile(spec.family, np.abs(diff)), axis=-1)
    else:
        out = _profile(spec.family, np.sqrt(np.sum(diff * diff, axis=-1)))
    return spec.amplitude * out


def eval_kernel(spec: KernelSpec, x, y) -> float:
    """Kernel value at a single pair of points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(cross(spec, x[None, :], y[None, :])[0, 0])


def gram(spec: KernelSpec, points) -> np.ndarray:
    """Symmetric Gram matrix of a point set of shape ``(n, d)``."""
    points = np.asarray(points, dtype=float)
    points = points.reshape(-1, 1) if points.ndim <= 1 else points
    n = points.shape[0]
    if n == 0:
        raise ValueError("gram matrix needs at least one point")
    if not np.all(np.isfinite(points)):
        raise ValueError("kernel inputs must be finite")
    if n == 1:
        return np.full((1, 1), spec.amplitude)
    scaled = points / spec.lengthscales(points.shape[1])
    # condensed upper triangle: half the kernel evaluations of the dense form
    if spec.composition is Composition.TENSOR:
        vals = np.ones(n * (n - 1) // 2)
        for j in range(scaled.shape[1]):
            vals *= _profile(spec.family, pdist(scaled[:, j:j + 1], "cityblock"))
    else:
        vals = _profile(spec.family, pdist(scaled))
    K = squareform(spec.amplitude * vals)
    np.fill_diagonal(K, spec.amplitude)
    return K


def median_heuristic(points) -> float:
    """Median of the pairwise Euclidean distances of ``points``."""
    points = np.asarray(points, dtype=float)
    points = points.reshape(-1, 1) if points.ndim <= 1 else points
    if points.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    dist = pdist(points)
    med = float(np.median(dist))
    if med <= 0.0:
        positive = dist[dist > 0]
        if positive.size == 0:
            raise ValueError("all points coincide: lengthscale is degenerate")
        # more than half of the pairs coincide; fall back to the positive pairs
        med = float(np.median(positive))
    return med


class Standardized(NamedTuple):
    values: np.ndarray
    mean: float
    std: float
    degenerate: bool


def standardize(values) -> Standardized:
    """Centre and scale ``values`` using the population standard deviation.

    Constant input (or a single value) is returned unchanged with
    ``mean = 0``, ``std = 1`` and ``degenerate = True`` so that the affine
    fold-back ``mean + std * z`` is always the identity map in that case.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return Standardized(values.copy(), 0.0, 1.0, True)
    mean = float(np.mean(values))
    std = float(np.std(values))
    if not std > 1e-14 * max(1.0, abs(mean)):
        return Standardized(values.copy(), 0.0, 1.0, True)
    return Standardized((values - mean) / std, mean, std, False)
