"""Nested kernel quadrature (NKQ) and conditional kernel quadrature (CKQ).

Stage I estimates the inner conditional expectation at each outer sample
``theta_t`` with a kernel quadrature rule over ``x_{1:N}^{(t)}``; Stage II
integrates ``f`` of those estimates over ``theta_{1:T}`` with a second rule:

    I_NKQ = sum_t w^Theta_t f(sum_n w^X_{n,t} g(x_n^{(t)}, theta_t)).

Function values are standardised before each rule is applied and the
affine map is folded back afterwards, so each rule integrates constants
exactly. The weights stored on :class:`NkqResult` are the *effective*
weights after that fold-back, which makes the double-sum form above hold
for the returned estimate.

The sampling helpers here are shared with :mod:`nestkq.baselines` so that
every estimator sees identical points for identical seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import pdist

from .embeddings import kme
from .kernels import KernelSpec, cross, gram, median_heuristic, standardize
from .measures import MeasureKind, MeasureSpec, TransformMap
from .problems import NestedProblem
from .quadrature import (SingularGramError, reg_schedule, schedule_smoothness,
                         solve_spd)
from .sampling import (PointSource, apply_transform, derive_seed,
                       inverse_transform, sobol, uniform_points)

# elements of x generated per chunk of outer samples
CHUNK_ELEMENTS = 2_000_000
# outer samples used for the pooled inner lengthscale
POOLED_SUBSAMPLE = 64
# lengthscale used when a stage has a single point
FALLBACK_LENGTHSCALE = 1.0


@dataclass(frozen=True)
class NkqConfig:
    """Sample sizes and hyperparameters for :func:`nkq`.

    Kernels left as ``None`` fall back to the problem defaults; a kernel
    without a lengthscale gets one from the median heuristic on the points
    of its own stage. ``s_x``/``s_theta`` override the smoothness used by
    the regularisation schedules. ``uniform_weights`` replaces every rule by
    plain averaging (testing hook; the result is then nested Monte Carlo).
    """

    N: int
    T: int
    kernel_x: KernelSpec | None = None
    kernel_theta: KernelSpec | tuple[KernelSpec, ...] | None = None
    lambda0_x: float = 0.1
    lambda0_theta: float = 0.1
    s_x: float | None = None
    s_theta: float | None = None
    point_source: PointSource = PointSource.IID
    use_change_of_variable: bool = True
    seed: int = 0
    pooled_lengthscale: bool = False
    standardize: bool = True
    uniform_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "point_source", PointSource(self.point_source))
        if int(self.N) < 1 or int(self.T) < 1:
            raise ValueError("N and T must be at least 1")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", int(self.T))
        if self.lambda0_x < 0 or self.lambda0_theta < 0:
            raise ValueError("lambda0 values must be nonnegative")


@dataclass(eq=False)
class NkqResult:
    estimate: float
    terms: np.ndarray
    stage1_values: np.ndarray
    inner_estimates: np.ndarray
    stage1_weights: np.ndarray
    stage2_weights: np.ndarray
    thetas: np.ndarray
    theta_points: np.ndarray
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shared sampling


def to_base(base: MeasureSpec, u: np.ndarray) -> np.ndarray:
    """Map unit-cube points to the base measure (identity or normal quantiles)."""
    if base.kind is MeasureKind.UNIFORM01:
        return u
    return apply_transform(TransformMap.normal_inv_cdf(), u)


def draw_theta(problem: NestedProblem, T: int, source: PointSource | str, seed: int):
    """Outer base points and ``theta`` values, both of shape ``(T, d_theta)``."""
    u = uniform_points((T,), problem.d_theta, source, derive_seed(seed, 0))
    z = to_base(problem.theta_base, u)
    return z, problem.map_theta(z)


def chunk_size(N: int, d: int) -> int:
    return max(1, CHUNK_ELEMENTS // max(1, N * d))


def iter_inner(problem: NestedProblem, theta: np.ndarray, N: int, source: PointSource | str, seed: int,
               chunk: int | None = None):
    """Yield ``(slice, z, x)`` blocks of inner samples for consecutive ``theta`` rows.

    The i.i.d. stream is consumed in order, so the samples do not depend on
    the chunk size; QMC points use one scrambled Sobol sequence per ``t``.
    """
    source = PointSource(source)
    T = theta.shape[0]
    dx = problem.d_x
    xseed = derive_seed(seed, 1)
    chunk = chunk or chunk_size(N, dx)
    rng = np.random.default_rng(xseed) if source is PointSource.IID else None
    for start in range(0, T, chunk):
        stop = min(T, start + chunk)
        if rng is not None:
            u = rng.random((stop - start, N, dx))
        else:
            u = np.stack([sobol(N, dx, scramble_seed=derive_seed(xseed, t)).points for t in range(start, stop)])
        z = to_base(problem.x_base, u)
        yield slice(start, stop), z, problem.map_x(z, theta[start:stop])


def draw(problem: NestedProblem, N: int, T: int, source: PointSource | str = PointSource.IID, seed: int = 0):
    """All samples at once: ``(theta_z, theta, x_z, x)``; meant for small sizes."""
    tz, theta = draw_theta(problem, T, source, seed)
    zs, xs = [], []
    for _, z, x in iter_inner(problem, theta, N, source, seed):
        zs.append(z)
        xs.append(x)
    return tz, theta, np.concatenate(zs), np.concatenate(xs)


def eval_g(problem: NestedProblem, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``g`` with a trailing output axis: shape ``(T, N, n_out)``."""
    vals = np.asarray(problem.g(x, theta), dtype=float)
    return vals.reshape(x.shape[0], x.shape[1], problem.n_out)


def squeeze_out(J: np.ndarray, n: int) -> np.ndarray:
    return J[..., 0] if n == 1 else J


def mc_inner_means(problem: NestedProblem, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return eval_g(problem, x, theta).mean(axis=1)


def mc_outer_terms(problem: NestedProblem, J: np.ndarray) -> np.ndarray:
    """Average ``f(J)`` over the outer samples, one value per term."""
    F = apply_f(problem, J)
    return F.mean(axis=0)


def apply_f(problem: NestedProblem, J: np.ndarray) -> np.ndarray:
    """``f`` of inner values ``J`` (shape ``(T, n_out)``) as a ``(T, n_terms)`` array."""
    F = np.asarray(problem.f(squeeze_out(J, problem.n_out)), dtype=float)
    return F.reshape(J.shape[0], problem.n_terms)


# ---------------------------------------------------------------------------
# quadrature pieces


def fold(weights: np.ndarray, values: np.ndarray, use_standardize: bool = True):
    """Apply a rule to standardised ``values`` and undo the standardisation.

    Returns ``(estimate, effective_weights)`` with
    ``estimate = mean + std * (weights @ z)``, which equals
    ``effective_weights @ values`` for ``effective_weights = w + (1 - sum w) / n``.
    Degenerate (constant or single) values are integrated with the raw
    weights.
    """
    if not use_standardize:
        return float(weights @ values), weights
    st = standardize(values)
    if st.degenerate:
        return float(weights @ values), weights
    est = st.mean + st.std * float(weights @ st.values)
    return est, weights + (1.0 - weights.sum()) / weights.size


def lengthscale_for(template: KernelSpec, points: np.ndarray, fixed: float | None = None) -> KernelSpec:
    if template.lengthscale is not None:
        return template
    if fixed is not None:
        return template.with_lengthscale(fixed)
    if points.shape[0] < 2:
        return template.with_lengthscale(FALLBACK_LENGTHSCALE)
    try:
        return template.with_lengthscale(median_heuristic(points))
    except ValueError:
        return template.with_lengthscale(FALLBACK_LENGTHSCALE)


def kq_solve(kernel: KernelSpec, measure: MeasureSpec, points: np.ndarray, lam: float):
    mu = kme(kernel, measure, points)
    K = gram(kernel, points)
    return solve_spd(K, mu, points.shape[0] * lam, kernel.amplitude)


def resolve_kernels(problem: NestedProblem, config: NkqConfig):
    kx = config.kernel_x or problem.kernel_x
    kt = config.kernel_theta or problem.kernel_theta
    if isinstance(kt, KernelSpec):
        kt = (kt,) * problem.n_terms
    kt = tuple(kt)
    if len(kt) != problem.n_terms:
        raise ValueError(f"problem has {problem.n_terms} outer terms but {len(kt)} outer kernels were given")
    return kx, kt


def smoothness_x(problem: NestedProblem, config: NkqConfig, kernel: KernelSpec) -> float:
    if config.s_x is not None:
        return config.s_x
    if problem.s_x is not None:
        return problem.s_x
    return schedule_smoothness(kernel, problem.d_x)


def smoothness_theta(problem: NestedProblem, config: NkqConfig, kernel: KernelSpec) -> float:
    if config.s_theta is not None:
        return config.s_theta
    if problem.s_theta is not None:
        return problem.s_theta
    return schedule_smoothness(kernel, problem.d_theta)


def lambda_x(problem: NestedProblem, config: NkqConfig, kernel: KernelSpec, N: int) -> float:
    if config.lambda0_x == 0:
        return 0.0
    return reg_schedule(config.lambda0_x, N, smoothness_x(problem, config, kernel), problem.d_x)


def pooled_inner_lengthscale(z: np.ndarray) -> float:
    """Median of the pairwise distances pooled over (up to 64) outer samples."""
    dist = np.concatenate([pdist(block) for block in z[:POOLED_SUBSAMPLE]])
    dist = dist[dist > 0]
    if dist.size == 0:
        return FALLBACK_LENGTHSCALE
    return float(np.median(dist))


class StageOne:
    """Stage I rules for one block of outer samples."""

    def __init__(self, problem: NestedProblem, config: NkqConfig, kernel: KernelSpec, lam: float):
        self.problem = problem
        self.config = config
        self.kernel = kernel
        self.lam = lam
        self.fixed_ls = None
        self.max_jitter = 0.0
        self.lengthscales: list[float] = []

    def __call__(self, theta: np.ndarray, z: np.ndarray, x: np.ndarray, gvals: np.ndarray):
        """Inner estimates ``(c, n_out)`` and effective weights ``(c, n_out, N)``."""
        p, cfg = self.problem, self.config
        c, N = gvals.shape[:2]
        J = np.empty((c, p.n_out))
        W = np.empty((c, p.n_out, N))
        if cfg.pooled_lengthscale and self.fixed_ls is None and self.kernel.lengthscale is None:
            self.fixed_ls = pooled_inner_lengthscale(z if cfg.use_change_of_variable else x)
        for t in range(c):
            if cfg.use_change_of_variable:
                pts, measure = z[t], p.x_base
            else:
                pts, measure = x[t], p.conditional(theta[t])
            kernel = lengthscale_for(self.kernel, pts, self.fixed_ls)
            self.lengthscales.append(float(np.mean(kernel.lengthscales(pts.shape[1]))))
            try:
                w, jitter = kq_solve(kernel, measure, pts, self.lam)
            except SingularGramError as err:
                err.stage = "I"
                raise
            self.max_jitter = max(self.max_jitter, jitter)
            for k in range(p.n_out):
                J[t, k], W[t, k] = fold(w, gvals[t, :, k], cfg.standardize)
        return J, W


def stage_two(problem: NestedProblem, config: NkqConfig, kernels, points: np.ndarray, F: np.ndarray,
              lam_fn):
    """Outer rules for each term; returns terms, effective weights, diagnostics."""
    measure = problem.theta_base if config.use_change_of_variable else problem.outer
    T = points.shape[0]
    cache = {}
    terms = np.empty(problem.n_terms)
    weights = np.empty((problem.n_terms, T))
    lams, scales, jitter = [], [], 0.0
    for r, template in enumerate(kernels):
        kernel = lengthscale_for(template, points)
        lam = lam_fn(kernel)
        key = (kernel, lam)
        if key not in cache:
            try:
                cache[key] = kq_solve(kernel, measure, points, lam)
            except SingularGramError as err:
                err.stage = "II"
                raise
        w, jit = cache[key]
        jitter = max(jitter, jit)
        terms[r], weights[r] = fold(w, F[:, r], config.standardize)
        lams.append(lam)
        scales.append(float(np.mean(kernel.lengthscales(points.shape[1]))))
    return terms, weights, {"lambda_theta": lams, "lengthscale_theta": scales, "jitter_theta": jitter}


# ---------------------------------------------------------------------------


def nkq(problem: NestedProblem, config: NkqConfig) -> NkqResult:
    """Nested kernel quadrature estimate of ``problem``.

    Raises
    ------
    NoClosedFormKME
        If a stage has no closed-form embedding (for example a lognormal
        measure with the change of variables switched off).
    SingularGramError
        If a Gram system cannot be factorised; ``stage`` is ``"I"`` or ``"II"``.
    """
    N, T = config.N, config.T
    kx, kt = resolve_kernels(problem, config)
    theta_z, theta = draw_theta(problem, T, config.point_source, config.seed)
    n_out = problem.n_out

    if config.uniform_weights:
        J = np.empty((T, n_out))
        for sl, _, x in iter_inner(problem, theta, N, config.point_source, config.seed):
            J[sl] = mc_inner_means(problem, x, theta[sl])
        terms = mc_outer_terms(problem, J)
        F = apply_f(problem, J)
        return NkqResult(
            estimate=problem.reduce(terms), terms=terms,
            stage1_values=squeeze_out(F, problem.n_terms), inner_estimates=squeeze_out(J, n_out),
            stage1_weights=_squeeze_weights(np.full((T, n_out, N), 1.0 / N), n_out),
            stage2_weights=_squeeze_terms(np.full((problem.n_terms, T), 1.0 / T), problem.n_terms),
            thetas=theta, theta_points=theta_z if config.use_change_of_variable else theta,
            diagnostics={"uniform_weights": True},
        )

    lam_x = lambda_x(problem, config, kx, N)
    stage1 = StageOne(problem, config, kx, lam_x)
    J = np.empty((T, n_out))
    W = np.empty((T, n_out, N))
    for sl, z, x in iter_inner(problem, theta, N, config.point_source, config.seed):
        gvals = eval_g(problem, x, theta[sl])
        J[sl], W[sl] = stage1(theta[sl], z, x, gvals)

    F = apply_f(problem, J)
    points = theta_z if config.use_change_of_variable else theta

    def lam_fn(kernel):
        if config.lambda0_theta == 0:
            return 0.0
        return reg_schedule(config.lambda0_theta, T, smoothness_theta(problem, config, kernel), problem.d_theta)

    terms, weights, diag = stage_two(problem, config, kt, points, F, lam_fn)
    diag.update({
        "lambda_x": lam_x,
        "lengthscale_x": float(np.median(stage1.lengthscales)),
        "jitter_x": stage1.max_jitter,
    })
    return NkqResult(
        estimate=problem.reduce(terms), terms=terms,
        stage1_values=squeeze_out(F, problem.n_terms), inner_estimates=squeeze_out(J, n_out),
        stage1_weights=_squeeze_weights(W, n_out), stage2_weights=_squeeze_terms(weights, problem.n_terms),
        thetas=theta, theta_points=points, diagnostics=diag,
    )


def _squeeze_weights(W: np.ndarray, n_out: int) -> np.ndarray:
    return W[:, 0, :] if n_out == 1 else W


def _squeeze_terms(W: np.ndarray, n_terms: int) -> np.ndarray:
    return W[0] if n_terms == 1 else W


def ckq(problem: NestedProblem, config: NkqConfig, query_thetas, result: NkqResult | None = None) -> np.ndarray:
    """Conditional kernel quadrature: kernel ridge interpolation of Stage I values.

    ``J_CKQ(theta) = k(theta, theta_{1:T}) (K + T lambda I)^{-1} J_KQ(theta_{1:T})``
    with the first outer kernel of the problem (or of ``config``). Values are
    standardised before the solve and mapped back afterwards. An existing
    :func:`nkq` result for the same problem and config can be passed to
    avoid recomputing Stage I.

    Returns
    -------
    ndarray, shape (m,) or (m, n_out)
    """
    result = result if result is not None else nkq(problem, config)
    _, kt = resolve_kernels(problem, config)
    q = np.asarray(query_thetas, dtype=float)
    q = q.reshape(-1, problem.d_theta)
    if config.use_change_of_variable:
        q = inverse_transform(problem.outer_transform, q)
        if problem.theta_base.kind is MeasureKind.UNIFORM01:
            q = np.clip(q, 0.0, 1.0)
    points = result.theta_points
    T = points.shape[0]
    kernel = lengthscale_for(kt[0], points)
    lam = 0.0 if config.lambda0_theta == 0 else reg_schedule(
        config.lambda0_theta, T, smoothness_theta(problem, config, kernel), problem.d_theta)
    J = result.inner_estimates.reshape(T, -1)
    K = gram(kernel, points)
    kq = cross(kernel, q, points)
    out = np.empty((q.shape[0], J.shape[1]))
    for k in range(J.shape[1]):
        st = standardize(J[:, k]) if config.standardize else None
        target = J[:, k] if st is None or st.degenerate else st.values
        try:
            alpha, _ = solve_spd(K, target, T * lam, kernel.amplitude)
        except SingularGramError as err:
            err.stage = "CKQ"
            raise
        pred = kq @ alpha
        out[:, k] = pred if st is None or st.degenerate else st.mean + st.std * pred
    return out[:, 0] if J.shape[1] == 1 else out


def with_seed(config: NkqConfig, seed: int) -> NkqConfig:
    return replace(config, seed=seed)
