"""Baseline estimators: nested (quasi-)Monte Carlo, antithetic MLMC and MLKQ.

All estimators draw their points through :mod:`nestkq.nested`, so for a
given seed the level-0 samples of the multilevel estimators coincide with
the samples of the corresponding single-level estimator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .nested import (NkqConfig, StageOne, apply_f, draw_theta, eval_g, iter_inner, lambda_x, mc_inner_means,
                     mc_outer_terms, nkq, resolve_kernels, smoothness_theta, smoothness_x, stage_two)
from .problems import NestedProblem
from .quadrature import reg_schedule_multilevel
from .sampling import PointSource, derive_seed


@dataclass(frozen=True)
class MlConfig:
    """Per-level inner sizes ``N_levels`` and outer sizes ``T_levels`` (levels ``0..L``)."""

    N_levels: tuple[int, ...]
    T_levels: tuple[int, ...]
    seed: int = 0
    point_source: PointSource = PointSource.IID

    def __post_init__(self):
        N = tuple(int(n) for n in self.N_levels)
        T = tuple(int(t) for t in self.T_levels)
        if not N or len(N) != len(T):
            raise ValueError("N_levels and T_levels must be nonempty and of equal length")
        if N[0] < 1 or any(t < 1 for t in T):
            raise ValueError("sample sizes must be positive")
        if any(b <= a for a, b in zip(N, N[1:])):
            raise ValueError(f"N_levels must be strictly increasing, got {N}")
        object.__setattr__(self, "N_levels", N)
        object.__setattr__(self, "T_levels", T)
        object.__setattr__(self, "point_source", PointSource(self.point_source))

    @property
    def L(self) -> int:
        return len(self.N_levels) - 1

    @property
    def cost(self) -> int:
        return sum(n * t for n, t in zip(self.N_levels, self.T_levels))


def level_seed(seed: int, level: int) -> int:
    """Seed of level ``level``; level 0 reuses ``seed`` itself."""
    return seed if level == 0 else derive_seed(seed, 100 + level)


# ---------------------------------------------------------------------------
# nested Monte Carlo


def nmc_terms(problem: NestedProblem, N: int, T: int, point_source=PointSource.IID, seed: int = 0) -> np.ndarray:
    if N < 1 or T < 1:
        raise ValueError("N and T must be at least 1")
    _, theta = draw_theta(problem, T, point_source, seed)
    J = np.empty((T, problem.n_out))
    for sl, _, x in iter_inner(problem, theta, N, point_source, seed):
        J[sl] = mc_inner_means(problem, x, theta[sl])
    return mc_outer_terms(problem, J)


def nmc(problem: NestedProblem, N: int, T: int, point_source=PointSource.IID, seed: int = 0) -> float:
    """Nested Monte Carlo ``(1/T) sum_t f((1/N) sum_n g(x_n^(t), theta_t))``.

    ``point_source="qmc"`` gives nested QMC: scrambled Sobol points at both
    levels, pushed through the problem's transforms.
    """
    return problem.reduce(nmc_terms(problem, N, T, point_source, seed))


def nmc_from_samples(problem: NestedProblem, x, theta) -> float:
    """Nested Monte Carlo on explicit samples ``x`` ``(T, N, d_x)`` and ``theta`` ``(T, d_theta)``."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    x = x.reshape(x.shape[0], x.shape[1], problem.d_x)
    theta = theta.reshape(x.shape[0], problem.d_theta)
    return problem.reduce(mc_outer_terms(problem, mc_inner_means(problem, x, theta)))


# ---------------------------------------------------------------------------
# allocations


def mlmc_allocation(N0: int, T0: int, L: int, seed: int = 0, point_source=PointSource.IID) -> MlConfig:
    """``N_l = N0 2^l`` and ``T_l = ceil(T0 4^-l)``."""
    N = tuple(N0 * 2**lv for lv in range(L + 1))
    T = tuple(max(1, math.ceil(T0 * 4.0**-lv)) for lv in range(L + 1))
    return MlConfig(N, T, seed, point_source)


def mlmc_for_cost(cost: float, L: int = 5, N0: int = 2, seed: int = 0, point_source=PointSource.IID) -> MlConfig:
    """MLMC allocation whose total cost is close to ``cost``."""
    T0 = max(1, round(cost / (N0 * sum(2.0**-lv for lv in range(L + 1)))))
    return mlmc_allocation(N0, T0, L, seed, point_source)


def nested_sizes(N0: int, ratio: float, L: int) -> tuple[int, ...]:
    """Sizes close to ``N0 ratio^l`` with ``N_{l-1} < N_l < ratio N_{l-1}``."""
    sizes = [int(N0)]
    for lv in range(1, L + 1):
        prev = sizes[-1]
        upper = math.ceil(ratio * prev) - 1
        if upper <= prev:
            raise ValueError(f"no integer strictly between {prev} and {ratio:.4g} * {prev}; increase N0")
        sizes.append(min(upper, max(prev + 1, round(N0 * ratio**lv))))
    return tuple(sizes)


def mlkq_ratio(problem: NestedProblem, s_x: float | None = None) -> float:
    cfg = NkqConfig(N=1, T=1, s_x=s_x)
    kx, _ = resolve_kernels(problem, cfg)
    return 2.0 ** (problem.d_x / smoothness_x(problem, cfg, kx))


def mlkq_allocation(problem: NestedProblem, N0: int, T0: int, L: int, seed: int = 0,
                    point_source=PointSource.IID, s_x: float | None = None,
                    s_theta: float | None = None) -> MlConfig:
    """``N_l ~ N0 2^{(d_x/s_x) l}``, ``T_l ~ T0 2^{-((2 s_theta + d_theta)/s_theta) l}``."""
    cfg = NkqConfig(N=1, T=1, s_x=s_x, s_theta=s_theta)
    _, kt = resolve_kernels(problem, cfg)
    st = smoothness_theta(problem, cfg, kt[0])
    decay = (2.0 * st + problem.d_theta) / st
    N = nested_sizes(N0, mlkq_ratio(problem, s_x), L)
    T = tuple(max(1, math.ceil(T0 * 2.0 ** (-decay * lv))) for lv in range(L + 1))
    return MlConfig(N, T, seed, point_source)


def mlkq_for_cost(problem: NestedProblem, cost: float, L: int = 3, seed: int = 0, point_source=PointSource.IID,
                  n_factor: float = 8.0, min_N0: int = 3) -> MlConfig:
    """MLKQ allocation ``N_l = c 2^{(d_x/s_x) l} D^{-d_x/(2 s_x)}`` scaled so the total cost is near ``cost``.

    ``T_l`` follows the matching ``D^{-(2 s_theta + d_theta)/(2 s_theta)}`` law;
    ``D`` is found by bisection in log scale. The constant ``c = n_factor``
    only shifts budget from the outer to the inner samples; small inner
    sets leave a visible bias in the level-0 rule.
    """
    cfg = NkqConfig(N=1, T=1)
    kx, kt = resolve_kernels(problem, cfg)
    sx = smoothness_x(problem, cfg, kx)
    st = smoothness_theta(problem, cfg, kt[0])
    ex = problem.d_x / (2.0 * sx)
    et = (2.0 * st + problem.d_theta) / (2.0 * st)

    def build(log_delta):
        delta = math.exp(log_delta)
        N0 = max(min_N0, round(n_factor * delta**-ex))
        T0 = max(1, round(delta**-et))
        return mlkq_allocation(problem, N0, T0, L, seed, point_source)

    lo, hi = math.log(1e-12), 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if build(mid).cost > cost:
            lo = mid
        else:
            hi = mid
    return build(hi)


# ---------------------------------------------------------------------------
# antithetic MLMC


def mlmc_levels(problem: NestedProblem, config: MlConfig, seed: int | None = None) -> np.ndarray:
    """Per-level contributions ``Y_l`` as an ``(L + 1, n_terms)`` array."""
    seed = config.seed if seed is None else seed
    N, T = config.N_levels, config.T_levels
    for lv in range(1, len(N)):
        if N[lv] != 2 * N[lv - 1]:
            raise ValueError(f"antithetic MLMC needs N_l = 2 N_(l-1); level {lv} has {N[lv]} vs {N[lv - 1]}")
    out = np.empty((len(N), problem.n_terms))
    out[0] = nmc_terms(problem, N[0], T[0], config.point_source, seed)
    for lv in range(1, len(N)):
        s = level_seed(seed, lv)
        half = N[lv - 1]
        _, theta = draw_theta(problem, T[lv], config.point_source, s)
        diff = np.empty((T[lv], problem.n_terms))
        for sl, _, x in iter_inner(problem, theta, N[lv], config.point_source, s):
            gv = eval_g(problem, x, theta[sl])
            Ja = gv[:, :half].mean(axis=1)
            Jb = gv[:, half:].mean(axis=1)
            # the fine average is the mean of the two halves, so linear f cancels exactly
            Jf = 0.5 * (Ja + Jb)
            diff[sl] = apply_f(problem, Jf) - 0.5 * (apply_f(problem, Ja) + apply_f(problem, Jb))
        out[lv] = diff.mean(axis=0)
    return out


def mlmc(problem: NestedProblem, config: MlConfig, seed: int | None = None) -> float:
    """Antithetic multilevel Monte Carlo; level 0 is plain nested Monte Carlo.

    Level ``l`` averages ``f(J_full) - (f(J_a) + f(J_b)) / 2`` where ``J_a``
    and ``J_b`` are the means over the two disjoint halves of the level's
    ``N_l = 2 N_(l-1)`` inner samples.
    """
    return problem.reduce(mlmc_levels(problem, config, seed).sum(axis=0))


# ---------------------------------------------------------------------------
# multilevel NKQ


def mlkq_levels(problem: NestedProblem, config: MlConfig, kernel_x=None, kernel_theta=None,
                lambda0_x: float = 0.1, lambda0_theta: float = 0.1, seed: int | None = None,
                **options) -> np.ndarray:
    """Per-level contributions of :func:`mlkq` as an ``(L + 1, n_terms)`` array."""
    seed = config.seed if seed is None else seed
    N, T = config.N_levels, config.T_levels
    base = NkqConfig(N=N[0], T=T[0], kernel_x=kernel_x, kernel_theta=kernel_theta, lambda0_x=lambda0_x,
                     lambda0_theta=lambda0_theta, point_source=config.point_source, seed=seed, **options)
    kx, kt = resolve_kernels(problem, base)
    ratio = 2.0 ** (problem.d_x / smoothness_x(problem, base, kx))
    for lv in range(1, len(N)):
        if not N[lv - 1] < N[lv] < ratio * N[lv - 1]:
            raise ValueError(f"MLKQ needs N_(l-1) < N_l < {ratio:.4g} N_(l-1); level {lv} has {N[lv - 1]} -> {N[lv]}")

    out = np.empty((len(N), problem.n_terms))
    out[0] = nkq(problem, base).terms
    for lv in range(1, len(N)):
        s = level_seed(seed, lv)
        cfg = replace(base, N=N[lv], T=T[lv], seed=s)
        fine = StageOne(problem, cfg, kx, lambda_x(problem, cfg, kx, N[lv]))
        coarse = StageOne(problem, cfg, kx, lambda_x(problem, cfg, kx, N[lv - 1]))
        theta_z, theta = draw_theta(problem, T[lv], cfg.point_source, s)
        D = np.empty((T[lv], problem.n_terms))
        for sl, z, x in iter_inner(problem, theta, N[lv], cfg.point_source, s):
            gv = eval_g(problem, x, theta[sl])
            Jf, _ = fine(theta[sl], z, x, gv)
            m = N[lv - 1]
            Jc, _ = coarse(theta[sl], z[:, :m], x[:, :m], gv[:, :m])
            D[sl] = apply_f(problem, Jf) - apply_f(problem, Jc)
        points = theta_z if cfg.use_change_of_variable else theta

        def lam_fn(kernel, cfg=cfg, Tl=T[lv]):
            if cfg.lambda0_theta == 0:
                return 0.0
            return reg_schedule_multilevel(cfg.lambda0_theta, Tl, smoothness_theta(problem, cfg, kernel),
                                           problem.d_theta)

        out[lv], _, _ = stage_two(problem, cfg, kt, points, D, lam_fn)
    return out


def mlkq(problem: NestedProblem, config: MlConfig, kernel_x=None, kernel_theta=None,
         lambda0_x: float = 0.1, lambda0_theta: float = 0.1, seed: int | None = None, **options) -> float:
    """Multilevel nested kernel quadrature.

    Level 0 is :func:`nkq` with ``(N_0, T_0)``. Level ``l >= 1`` applies a
    Stage II rule with ridge ``lambda0_theta T_l^{-2 s/(2 s + d)}`` to the
    differences of Stage I estimates built from the first ``N_(l-1)`` and
    all ``N_l`` inner samples at the same ``theta_t``. Extra keyword
    arguments are passed to :class:`NkqConfig`.
    """
    levels = mlkq_levels(problem, config, kernel_x, kernel_theta, lambda0_x, lambda0_theta, seed, **options)
    return problem.reduce(levels.sum(axis=0))
