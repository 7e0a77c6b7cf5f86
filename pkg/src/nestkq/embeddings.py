"""Closed-form kernel mean embeddings and a quadrature oracle to check them.

The embedding of a measure ``pi`` under kernel ``k`` is
``mu(y) = E_{X ~ pi}[k(X, y)]``. Closed forms are provided for

* every family (tensor product) against the uniform measure on ``[0, 1]^d``;
* the Gaussian kernel against diagonal or full-covariance Gaussians;
* the Matern-1/2 kernel (tensor product) against diagonal Gaussians.

Anything else raises :class:`NoClosedFormKME`; such measures are handled by
mapping them to one of the supported base measures (change of variables).
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf, log_ndtr

from .kernels import Composition, Family, KernelSpec, cross
from .measures import MeasureKind, MeasureSpec

SQRT2 = np.sqrt(2.0)
SQRT3 = np.sqrt(3.0)


class NoClosedFormKME(NotImplementedError):
    """Raised for (kernel, measure) pairs without a closed-form embedding."""


def _unsupported(kernel: KernelSpec, measure: MeasureSpec) -> NoClosedFormKME:
    return NoClosedFormKME(
        f"no closed-form KME for {kernel.family.value}/{kernel.composition.value} kernel "
        f"against a {measure.kind.value} measure; map the measure to a uniform or "
        "standard Gaussian base measure (change of variables) instead"
    )


# ---------------------------------------------------------------------------
# one-dimensional building blocks (unit amplitude)


def _uniform_1d(family: Family, y: np.ndarray, ls: float) -> np.ndarray:
    if family is Family.MATERN12:
        return ls * (2.0 - np.exp(-y / ls) - np.exp(-(1.0 - y) / ls))
    if family is Family.MATERN32:
        a = SQRT3 / ls
        left = (2.0 + a * y) * np.exp(-a * y)
        right = (2.0 + a * (1.0 - y)) * np.exp(-a * (1.0 - y))
        return (4.0 - left - right) / a
    s = SQRT2 * ls
    return ls * np.sqrt(np.pi / 2.0) * (erf((1.0 - y) / s) + erf(y / s))


def _matern12_gaussian_1d(y: np.ndarray, ls: float, mean: float, std: float) -> np.ndarray:
    delta = mean - y
    if std == 0.0:
        return np.exp(-np.abs(delta) / ls)
    half_var = 0.5 * (std / ls) ** 2
    up = half_var - delta / ls + log_ndtr(delta / std - std / ls)
    down = half_var + delta / ls + log_ndtr(-delta / std - std / ls)
    return np.exp(up) + np.exp(down)


def _gaussian_gaussian(y: np.ndarray, ls: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    S = np.diag(ls**2) + cov
    chol = np.linalg.cholesky(S)
    diff = np.linalg.solve(chol, (y - mean).T)
    quad = np.sum(diff * diff, axis=0)
    # sqrt(det(Gamma) / det(Gamma + Sigma)) with Gamma = diag(ls^2)
    log_ratio = np.sum(np.log(ls)) - np.sum(np.log(np.diag(chol)))
    return np.exp(log_ratio - 0.5 * quad)


# ---------------------------------------------------------------------------


def kme(kernel: KernelSpec, measure: MeasureSpec, points) -> np.ndarray:
    """Kernel mean embedding of ``measure`` evaluated at each row of ``points``.

    Parameters
    ----------
    kernel : KernelSpec
        Kernel with a concrete lengthscale.
    measure : MeasureSpec
        Measure to embed.
    points : array_like, shape (n, d)
        Evaluation points; a 1-D array is read as ``n`` scalar points when the
        measure is one-dimensional.

    Returns
    -------
    ndarray, shape (n,)

    Raises
    ------
    NoClosedFormKME
        If the (kernel, measure) pair is not in the supported table.
    """
    y = np.asarray(points, dtype=float)
    y = y.reshape(-1, measure.dim) if y.ndim <= 1 else y
    if y.shape[1] != measure.dim:
        raise ValueError(f"points have dimension {y.shape[1]}, measure has {measure.dim}")
    d = measure.dim
    ls = kernel.lengthscales(d)
    family = kernel.family
    # isotropic and tensor-product kernels coincide for d = 1 and for Gaussian kernels
    factorizes = kernel.composition is Composition.TENSOR or d == 1 or family is Family.GAUSSIAN

    if measure.kind is MeasureKind.UNIFORM01:
        if not factorizes:
            raise _unsupported(kernel, measure)
        out = np.ones(y.shape[0])
        for j in range(d):
            out *= _uniform_1d(family, y[:, j], ls[j])
        return kernel.amplitude * out

    if measure.kind in (MeasureKind.GAUSSIAN_DIAG, MeasureKind.GAUSSIAN_FULL):
        diag = measure.kind is MeasureKind.GAUSSIAN_DIAG
        if family is Family.GAUSSIAN:
            cov = np.diag(measure.std**2) if diag else measure.cov
            return kernel.amplitude * _gaussian_gaussian(y, ls, measure.mean, cov)
        if family is Family.MATERN12 and factorizes and diag:
            out = np.ones(y.shape[0])
            for j in range(d):
                out *= _matern12_gaussian_1d(y[:, j], ls[j], measure.mean[j], measure.std[j])
            return kernel.amplitude * out
    raise _unsupported(kernel, measure)


def has_closed_form(kernel: KernelSpec, measure: MeasureSpec) -> bool:
    try:
        kme(kernel.with_lengthscale(kernel.lengthscale or 1.0), measure, np.zeros((1, measure.dim)))
    except NoClosedFormKME:
        return False
    return True


def kme_oracle(
    kernel: KernelSpec | Callable[[np.ndarray, np.ndarray], np.ndarray],
    measure: MeasureSpec,
    point,
    nodes: int = 1_000_000,
) -> float:
    """Tensor-trapezoid approximation of ``E[k(X, point)]``.

    Intended only for validating :func:`kme` at test scale: supports
    ``dim <= 2`` and measures with a density (Gaussians are truncated at
    ten standard deviations, lognormals are integrated in log space).
    ``kernel`` may also be a callable ``k(X, y)`` returning ``k`` at each
    row of ``X``.
    """
    point = np.atleast_1d(np.asarray(point, dtype=float))
    d = measure.dim
    if d > 2:
        raise ValueError("kme_oracle supports at most two dimensions")
    if nodes < 1000:
        raise ValueError("kme_oracle needs at least 1000 nodes")
    per_dim = int(round(nodes ** (1.0 / d)))

    if callable(kernel) and not isinstance(kernel, KernelSpec):
        kfun = kernel
    else:
        def kfun(X, y):
            return cross(kernel, X, y[None, :])[:, 0]

    kind = measure.kind
    if kind is MeasureKind.UNIFORM01:
        axes = [np.linspace(0.0, 1.0, per_dim) for _ in range(d)]
    elif kind in (MeasureKind.GAUSSIAN_DIAG, MeasureKind.GAUSSIAN_FULL):
        sd = measure.std if kind is MeasureKind.GAUSSIAN_DIAG else np.sqrt(np.diag(measure.cov))
        if np.any(sd <= 0):
            raise ValueError("kme_oracle needs a nondegenerate density")
        axes = [np.linspace(m - 10 * s, m + 10 * s, per_dim) for m, s in zip(measure.mean, sd)]
    elif kind is MeasureKind.LOGNORMAL:
        axes = [np.linspace(m - 10 * s, m + 10 * s, per_dim) for m, s in zip(measure.log_mean, measure.log_std)]
    else:
        raise ValueError(f"kme_oracle does not support {kind.value} measures")

    grids = np.meshgrid(*axes, indexing="ij")
    G = np.stack([g.ravel() for g in grids], axis=1)

    if kind is MeasureKind.UNIFORM01:
        dens = np.ones(G.shape[0])
        X = G
    elif kind is MeasureKind.GAUSSIAN_DIAG:
        z = (G - measure.mean) / measure.std
        dens = np.exp(-0.5 * np.sum(z * z, axis=1)) / np.prod(np.sqrt(2 * np.pi) * measure.std)
        X = G
    elif kind is MeasureKind.GAUSSIAN_FULL:
        prec = np.linalg.inv(measure.cov)
        diff = G - measure.mean
        quad = np.einsum("ni,ij,nj->n", diff, prec, diff)
        dens = np.exp(-0.5 * quad) / np.sqrt(np.linalg.det(2 * np.pi * measure.cov))
        X = G
    else:
        z = (G - measure.log_mean) / measure.log_std
        dens = np.exp(-0.5 * np.sum(z * z, axis=1)) / np.prod(np.sqrt(2 * np.pi) * measure.log_std)
        X = np.exp(G)

    vals = (kfun(X, point) * dens).reshape(grids[0].shape)
    for ax in reversed(axes):
        vals = np.trapezoid(vals, ax, axis=-1)
    return float(vals)
