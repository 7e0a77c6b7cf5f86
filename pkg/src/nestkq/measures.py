"""Probability measures and transport maps shared by the embedding and sampling code."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class MeasureKind(str, enum.Enum):
    UNIFORM01 = "uniform01"
    GAUSSIAN_DIAG = "gaussian_diag"
    GAUSSIAN_FULL = "gaussian_full"
    LOGNORMAL = "lognormal"
    PUSHFORWARD = "pushforward"


class TransformKind(str, enum.Enum):
    IDENTITY = "identity"
    NORMAL_INV_CDF = "normal_inv_cdf"
    AFFINE_GAUSSIAN = "affine_gaussian"
    LOGNORMAL_INV_CDF = "lognormal_inv_cdf"
    COMPOSITE = "composite"


def _vec(value, dim: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1 and dim > 1:
        arr = np.full(dim, arr[0])
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have {dim} entries, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class TransformMap:
    """A map from a simple base domain onto the support of a target measure.

    ``normal_inv_cdf`` and ``lognormal_inv_cdf`` act componentwise on points in
    ``(0, 1)^d``; ``affine_gaussian`` maps ``z`` to ``mean + chol @ z``;
    ``composite`` applies ``stages`` left to right.
    """

    kind: TransformKind = TransformKind.IDENTITY
    mean: np.ndarray | None = None
    chol: np.ndarray | None = None
    log_mean: np.ndarray | None = None
    log_std: np.ndarray | None = None
    stages: tuple[TransformMap, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", TransformKind(self.kind))
        if self.kind is TransformKind.AFFINE_GAUSSIAN:
            L = np.atleast_2d(np.asarray(self.chol, dtype=float))
            if L.shape[0] != L.shape[1] or not np.allclose(L, np.tril(L)) or np.any(np.diag(L) <= 0):
                raise ValueError("affine_gaussian factor must be lower triangular with positive diagonal")
            object.__setattr__(self, "chol", L)
            object.__setattr__(self, "mean", _vec(self.mean, L.shape[0], "mean"))
        elif self.kind is TransformKind.LOGNORMAL_INV_CDF:
            log_std = np.atleast_1d(np.asarray(self.log_std, dtype=float))
            if np.any(log_std <= 0):
                raise ValueError("lognormal log_std must be positive")
            log_mean = np.atleast_1d(np.asarray(self.log_mean, dtype=float))
            np.broadcast_shapes(log_mean.shape, log_std.shape)
            object.__setattr__(self, "log_std", log_std)
            object.__setattr__(self, "log_mean", log_mean)
        elif self.kind is TransformKind.COMPOSITE:
            if not self.stages:
                raise ValueError("composite transform needs at least one stage")
            object.__setattr__(self, "stages", tuple(self.stages))

    @classmethod
    def identity(cls) -> TransformMap:
        return cls(TransformKind.IDENTITY)

    @classmethod
    def normal_inv_cdf(cls) -> TransformMap:
        return cls(TransformKind.NORMAL_INV_CDF)

    @classmethod
    def affine_gaussian(cls, mean, chol) -> TransformMap:
        return cls(TransformKind.AFFINE_GAUSSIAN, mean=mean, chol=chol)

    @classmethod
    def lognormal_inv_cdf(cls, log_mean, log_std) -> TransformMap:
        return cls(TransformKind.LOGNORMAL_INV_CDF, log_mean=log_mean, log_std=log_std)

    @classmethod
    def composite(cls, *stages: TransformMap) -> TransformMap:
        return cls(TransformKind.COMPOSITE, stages=tuple(stages))


@dataclass(frozen=True, eq=False)
class MeasureSpec:
    """A sampleable probability measure on ``R^dim``.

    Only the fields relevant to ``kind`` are used: ``mean``/``std`` for
    ``gaussian_diag``, ``mean``/``cov`` for ``gaussian_full``,
    ``log_mean``/``log_std`` for ``lognormal`` and ``base``/``transform`` for
    ``pushforward``.
    """

    kind: MeasureKind
    dim: int = 1
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    cov: np.ndarray | None = None
    log_mean: np.ndarray | None = None
    log_std: np.ndarray | None = None
    base: MeasureSpec | None = None
    transform: TransformMap | None = None
    chol: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        kind = MeasureKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if int(self.dim) < 1:
            raise ValueError("measure dimension must be positive")
        dim = int(self.dim)
        object.__setattr__(self, "dim", dim)
        if kind is MeasureKind.GAUSSIAN_DIAG:
            std = _vec(self.std, dim, "std")
            if np.any(std < 0):
                raise ValueError("std must be nonnegative")
            object.__setattr__(self, "mean", _vec(self.mean, dim, "mean"))
            object.__setattr__(self, "std", std)
        elif kind is MeasureKind.GAUSSIAN_FULL:
            cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
            if cov.shape != (dim, dim) or not np.allclose(cov, cov.T):
                raise ValueError("covariance must be a symmetric dim x dim matrix")
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as err:
                raise ValueError("covariance is not positive definite") from err
            object.__setattr__(self, "mean", _vec(self.mean, dim, "mean"))
            object.__setattr__(self, "cov", cov)
            object.__setattr__(self, "chol", chol)
        elif kind is MeasureKind.LOGNORMAL:
            log_std = _vec(self.log_std, dim, "log_std")
            if np.any(log_std <= 0):
                raise ValueError("lognormal log_std must be positive")
            object.__setattr__(self, "log_mean", _vec(self.log_mean, dim, "log_mean"))
            object.__setattr__(self, "log_std", log_std)
        elif kind is MeasureKind.PUSHFORWARD:
            if self.base is None or self.transform is None:
                raise ValueError("pushforward measure needs a base measure and a transform")
            if self.base.kind is MeasureKind.PUSHFORWARD and self.base.base is None:
                raise ValueError("pushforward base must be sampleable")

    @classmethod
    def uniform(cls, dim: int = 1) -> MeasureSpec:
        return cls(MeasureKind.UNIFORM01, dim)

    @classmethod
    def gaussian_diag(cls, mean, std) -> MeasureSpec:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(MeasureKind.GAUSSIAN_DIAG, mean.size, mean=mean, std=std)

    @classmethod
    def standard_normal(cls, dim: int = 1) -> MeasureSpec:
        return cls(MeasureKind.GAUSSIAN_DIAG, dim, mean=np.zeros(dim), std=np.ones(dim))

    @classmethod
    def gaussian_full(cls, mean, cov) -> MeasureSpec:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(MeasureKind.GAUSSIAN_FULL, mean.size, mean=mean, cov=cov)

    @classmethod
    def lognormal(cls, log_mean, log_std) -> MeasureSpec:
        log_mean = np.atleast_1d(np.asarray(log_mean, dtype=float))
        return cls(MeasureKind.LOGNORMAL, log_mean.size, log_mean=log_mean, log_std=log_std)

    @classmethod
    def pushforward(cls, base: MeasureSpec, transform: TransformMap, dim: int | None = None) -> MeasureSpec:
        return cls(MeasureKind.PUSHFORWARD, dim or base.dim, base=base, transform=transform)
