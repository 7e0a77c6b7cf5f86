"""Seeded sampling, scrambled Sobol points and change-of-variable maps."""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erfc, ndtr

from .measures import MeasureKind, MeasureSpec, TransformKind, TransformMap

__all__ = [
    "PointSource",
    "PointSet",
    "derive_seed",
    "sobol",
    "norm_inv_cdf",
    "apply_transform",
    "inverse_transform",
    "sample_iid",
    "uniform_points",
    "CLAMP_EPS",
]

BITS = 32
MASK = np.uint64(0xFFFFFFFF)
MAX_DIM = 64
CLAMP_EPS = 1e-12


class PointSource(str, enum.Enum):
    IID = "iid"
    QMC = "qmc"


@dataclass(frozen=True, eq=False)
class PointSet:
    points: np.ndarray
    base: PointSource
    seed: int | None
    scrambled: bool


def derive_seed(base_seed: int, *keys: int) -> int:
    """Deterministically split ``base_seed`` into an independent 63-bit seed.

    Uses :class:`numpy.random.SeedSequence` with ``keys`` as the spawn key, so
    distinct key tuples give statistically independent streams.
    """
    ss = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in keys))
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) & 0x7FFF_FFFF_FFFF_FFFF)


# ---------------------------------------------------------------------------
# Sobol sequence


def _read_direction_table() -> dict[int, tuple[int, int, list[int]]]:
    text = resources.files("nestkq").joinpath("data/sobol_directions.txt").read_text()
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        d, s, a, *m = (int(tok) for tok in line.split())
        if len(m) != s:
            raise ValueError(f"direction table row for dimension {d} has {len(m)} m-values, expected {s}")
        table[d] = (s, a, m)
    return table


@lru_cache(maxsize=1)
def _direction_integers() -> np.ndarray:
    """Direction integers ``V[dim, k]`` scaled to 32 bits, dims 1..MAX_DIM."""
    table = _read_direction_table()
    V = np.zeros((MAX_DIM, BITS), dtype=np.uint64)
    V[0] = [1 << (BITS - 1 - k) for k in range(BITS)]
    for dim in range(2, MAX_DIM + 1):
        s, a, m = table[dim]
        m = list(m)
        for k in range(s, BITS):
            new = m[k - s] ^ (m[k - s] << s)
            for j in range(1, s):
                if (a >> (s - 1 - j)) & 1:
                    new ^= m[k - j] << j
            m.append(new)
        V[dim - 1] = [m[k] << (BITS - 1 - k) for k in range(BITS)]
    return V


def _reverse_bits32(x: np.ndarray) -> np.ndarray:
    x = ((x >> np.uint64(1)) & np.uint64(0x55555555)) | ((x & np.uint64(0x55555555)) << np.uint64(1))
    x = ((x >> np.uint64(2)) & np.uint64(0x33333333)) | ((x & np.uint64(0x33333333)) << np.uint64(2))
    x = ((x >> np.uint64(4)) & np.uint64(0x0F0F0F0F)) | ((x & np.uint64(0x0F0F0F0F)) << np.uint64(4))
    x = ((x >> np.uint64(8)) & np.uint64(0x00FF00FF)) | ((x & np.uint64(0x00FF00FF)) << np.uint64(8))
    x = (x >> np.uint64(16)) | ((x & np.uint64(0xFFFF)) << np.uint64(16))
    return x & MASK


def _owen_scramble(x: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Hash-based nested uniform scrambling of 32-bit digit strings.

    Each bit of the output is flipped by a pseudo-random function of the
    more significant bits only, which is the defining property of Owen's
    nested scrambling (Burley's Laine-Karras style hash).
    """
    x = _reverse_bits32(x)
    x = (x + seeds) & MASK
    for c in (0x6C50B47C, 0xB82F1E52, 0xC7AFE638, 0x8D22F6E6):
        x ^= (x * np.uint64(c)) & MASK
    return _reverse_bits32(x)


def sobol(n: int, d: int, scramble_seed: int | None = None, skip: int | None = None) -> PointSet:
    """First ``n`` points of the ``d``-dimensional Sobol sequence.

    Parameters
    ----------
    n, d : int
        Number of points and dimension (``d <= 64``).
    scramble_seed : int, optional
        If given, apply Owen-style scrambling with per-dimension seeds
        derived from this value; output lies strictly inside ``(0, 1)``.
    skip : int, optional
        Index of the first emitted point. Defaults to 1 for the plain
        sequence (drop the origin, which maps to infinity under inverse
        CDFs) and 0 for the scrambled one (keeps full nets of ``2^k``).

    Returns
    -------
    PointSet
    """
    if n < 1:
        raise ValueError("sobol needs n >= 1")
    if not 1 <= d <= MAX_DIM:
        raise ValueError(f"sobol supports 1 <= d <= {MAX_DIM}, got {d}")
    if skip is None:
        skip = 0 if scramble_seed is not None else 1
    if skip + n > 2**BITS:
        raise ValueError("requested more points than the 32-bit generator provides")
    V = _direction_integers()[:d]
    idx = np.arange(skip, skip + n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    X = np.zeros((n, d), dtype=np.uint64)
    for k in range(int(skip + n).bit_length()):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        X[bit] ^= V[:, k]
    if scramble_seed is None:
        pts = X.astype(float) * 2.0**-BITS
        return PointSet(pts, PointSource.QMC, None, False)
    seeds = np.random.SeedSequence(int(scramble_seed)).generate_state(d, dtype=np.uint32).astype(np.uint64)
    X = _owen_scramble(X, seeds[None, :])
    pts = (X.astype(float) + 0.5) * 2.0**-BITS
    return PointSet(pts, PointSource.QMC, int(scramble_seed), True)


# ---------------------------------------------------------------------------
# inverse normal CDF

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _lower_half(p: np.ndarray) -> np.ndarray:
    """Quantile for ``0 < p <= 1/2``: rational start plus one Halley step."""
    x = np.empty_like(p)
    tail = p < _P_LOW
    q = np.sqrt(-2.0 * np.log(p[tail]))
    x[tail] = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
               / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = p[~tail] - 0.5
    r = q * q
    x[~tail] = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
                / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    err = 0.5 * erfc(-x / np.sqrt(2.0)) - p
    u = err * np.sqrt(2.0 * np.pi) * np.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def norm_inv_cdf(u):
    """Standard normal quantile function, exactly antisymmetric about 1/2."""
    u = np.asarray(u, dtype=float)
    if np.any(~(u > 0.0) | ~(u < 1.0)):
        raise ValueError("norm_inv_cdf requires 0 < u < 1")
    flat = np.atleast_1d(u).ravel()
    upper = flat > 0.5
    # 1 - u is exact for u in [1/2, 1]
    p = np.where(upper, 1.0 - flat, flat)
    x = _lower_half(p)
    x = np.where(upper, -x, x)
    x[flat == 0.5] = 0.0
    return x.reshape(u.shape) if u.ndim else float(x[0])


# ---------------------------------------------------------------------------
# transforms and sampling


def _clamp(u: np.ndarray) -> tuple[np.ndarray, int]:
    bad = (u < CLAMP_EPS) | (u > 1.0 - CLAMP_EPS)
    count = int(np.count_nonzero(bad))
    if count:
        u = np.clip(u, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return u, count


def apply_transform(tmap: TransformMap, points, return_clamped: bool = False):
    """Push ``points`` through ``tmap``.

    Inverse-CDF maps clamp inputs to ``[1e-12, 1 - 1e-12]``; the number of
    clamped entries is returned when ``return_clamped`` is set and otherwise
    reported through a :class:`RuntimeWarning`.
    """
    pts = np.asarray(points, dtype=float)
    clamped = 0
    kind = tmap.kind
    if kind is TransformKind.IDENTITY:
        out = pts.copy()
    elif kind is TransformKind.NORMAL_INV_CDF:
        u, clamped = _clamp(pts)
        out = norm_inv_cdf(u)
    elif kind is TransformKind.LOGNORMAL_INV_CDF:
        u, clamped = _clamp(pts)
        out = np.exp(tmap.log_mean + tmap.log_std * norm_inv_cdf(u))
    elif kind is TransformKind.AFFINE_GAUSSIAN:
        if pts.shape[-1] != tmap.chol.shape[1]:
            raise ValueError(f"affine map expects dimension {tmap.chol.shape[1]}, got {pts.shape[-1]}")
        out = tmap.mean + pts @ tmap.chol.T
    else:
        out = pts
        for stage in tmap.stages:
            out, c = apply_transform(stage, out, return_clamped=True)
            clamped += c
    if return_clamped:
        return out, clamped
    if clamped:
        warnings.warn(f"clamped {clamped} values to [{CLAMP_EPS}, 1 - {CLAMP_EPS}] before an inverse CDF",
                      RuntimeWarning, stacklevel=2)
    return out


def inverse_transform(tmap: TransformMap, points) -> np.ndarray:
    """Map target-space points back to the base domain of ``tmap``."""
    pts = np.asarray(points, dtype=float)
    kind = tmap.kind
    if kind is TransformKind.IDENTITY:
        return pts.copy()
    if kind is TransformKind.NORMAL_INV_CDF:
        return ndtr(pts)
    if kind is TransformKind.LOGNORMAL_INV_CDF:
        if np.any(pts <= 0):
            raise ValueError("lognormal inverse needs positive points")
        return ndtr((np.log(pts) - tmap.log_mean) / tmap.log_std)
    if kind is TransformKind.AFFINE_GAUSSIAN:
        flat = pts.reshape(-1, tmap.chol.shape[0])
        z = solve_triangular(tmap.chol, (flat - tmap.mean).T, lower=True).T
        return z.reshape(pts.shape)
    out = pts
    for stage in reversed(tmap.stages):
        out = inverse_transform(stage, out)
    return out


def sample_iid(measure: MeasureSpec, n: int, seed: int) -> np.ndarray:
    """``n`` independent draws from ``measure`` as an ``(n, dim)`` array."""
    if n < 1:
        raise ValueError("sample size must be positive")
    rng = np.random.default_rng(seed)
    return _draw(measure, n, rng)


def _draw(measure: MeasureSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    d = measure.dim
    kind = measure.kind
    if kind is MeasureKind.UNIFORM01:
        return rng.random((n, d))
    if kind is MeasureKind.GAUSSIAN_DIAG:
        return measure.mean + measure.std * rng.standard_normal((n, d))
    if kind is MeasureKind.GAUSSIAN_FULL:
        return measure.mean + rng.standard_normal((n, d)) @ measure.chol.T
    if kind is MeasureKind.LOGNORMAL:
        return np.exp(measure.log_mean + measure.log_std * rng.standard_normal((n, d)))
    if kind is MeasureKind.PUSHFORWARD:
        return apply_transform(measure.transform, _draw(measure.base, n, rng))
    raise ValueError(f"cannot sample a {kind} measure")


def uniform_points(shape: tuple[int, ...], d: int, source: PointSource | str, seed: int) -> np.ndarray:
    """Points in ``(0, 1)^d`` with leading ``shape``, i.i.d. or scrambled Sobol.

    For QMC, each leading index gets its own independently scrambled
    Sobol sequence along the last axis of ``shape``.
    """
    source = PointSource(source)
    if source is PointSource.IID:
        return np.random.default_rng(seed).random((*shape, d))
    *outer, n = shape
    if not outer:
        return sobol(n, d, scramble_seed=seed).points
    count = int(np.prod(outer))
    blocks = [sobol(n, d, scramble_seed=derive_seed(seed, i)).points for i in range(count)]
    return np.stack(blocks).reshape(*shape, d)
