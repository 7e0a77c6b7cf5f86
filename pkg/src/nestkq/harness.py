"""Replicated convergence sweeps, empirical rates and CSV persistence.

A sweep runs every estimator at every budget of a grid for ``R``
replicates. Budgets are target accuracies ``delta``, target costs, or
explicit sample sizes; the cost of a run is the number of ``g``
evaluations it actually made, counted by a wrapper around ``g``.

Budget to sample-size maps
--------------------------
nkq
    ``N = ceil(delta^(-d_x/s_x))``, ``T = ceil(delta^(-d_theta/s_theta))``;
    a cost budget is first turned into ``delta = cost^(-1/(d_x/s_x + d_theta/s_theta))``.
nmc
    ``N = ceil(1/delta)``, ``T = N^2``; a cost budget gives ``N = round(cost^(1/3))``
    and ``T = round(cost/N)``.
mlmc
    :func:`nestkq.baselines.mlmc_for_cost` at the cost itself, or at
    ``delta^-2`` for accuracy budgets.
mlkq
    :func:`nestkq.baselines.mlkq_for_cost` at the cost itself, or at the NKQ
    cost of the same ``delta``.

Quantiles reported by :func:`summarize` use linear interpolation between
order statistics (numpy's default, "type 7").
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .baselines import MlConfig, mlkq, mlkq_for_cost, mlmc, mlmc_for_cost, nmc
from .kernels import cross, gram, standardize
from .nested import NkqConfig, draw, lengthscale_for, nkq, resolve_kernels, smoothness_theta, smoothness_x
from .problems import NestedProblem, get_problem
from .quadrature import SingularGramError, reg_schedule, solve_spd
from .sampling import PointSource, derive_seed

log = logging.getLogger(__name__)

ESTIMATORS = ("nkq", "nmc", "mlmc", "mlkq")
KERNEL_ESTIMATORS = ("nkq", "mlkq")
LAMBDA0_GRID = (0.01, 0.1, 1.0)
CSV_COLUMNS = ("problem", "estimator", "point_source", "cost", "N", "T", "L", "replicate", "seed",
               "estimate", "abs_error", "wall_millis", "lambda0_x", "lambda0_theta")
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3


class ConfigError(ValueError):
    """Invalid sweep specification or configuration file."""


# ---------------------------------------------------------------------------
# budgets


@dataclass(frozen=True)
class Budget:
    """One entry of a budget grid.

    ``kind`` is ``"delta"`` or ``"cost"`` (with ``value``) or ``"sizes"``
    (with ``N`` and ``T``, integers for single-level estimators or
    per-level tuples for the multilevel ones).
    """

    kind: str
    value: float | None = None
    N: int | tuple[int, ...] | None = None
    T: int | tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind in ("delta", "cost"):
            if self.value is None or not self.value > 0:
                raise ConfigError(f"{self.kind} budget must be positive, got {self.value!r}")
            if self.kind == "delta" and self.value >= 1:
                raise ConfigError(f"delta budget must be below 1, got {self.value}")
        elif self.kind == "sizes":
            if self.N is None or self.T is None:
                raise ConfigError("sizes budget needs N and T")
            N, T = _as_sizes(self.N), _as_sizes(self.T)
            if type(N) is not type(T) or (isinstance(N, tuple) and len(N) != len(T)):
                raise ConfigError("N and T of a sizes budget must have the same shape")
            object.__setattr__(self, "N", N)
            object.__setattr__(self, "T", T)
        else:
            raise ConfigError(f"unknown budget kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "sizes":
            return f"N={_fmt_sizes(self.N)},T={_fmt_sizes(self.T)}"
        return f"{self.kind}={self.value:g}"

    @classmethod
    def parse(cls, item) -> Budget:
        """Budget from a JSON item: ``{"delta": x}``, ``{"cost": x}``, ``{"N": .., "T": ..}`` or ``[N, T]``."""
        if isinstance(item, Budget):
            return item
        if isinstance(item, (list, tuple)) and len(item) == 2:
            return cls("sizes", N=item[0], T=item[1])
        if isinstance(item, dict):
            keys = set(item)
            if keys == {"delta"}:
                return cls("delta", float(item["delta"]))
            if keys == {"cost"}:
                return cls("cost", float(item["cost"]))
            if keys == {"N", "T"}:
                return cls("sizes", N=item["N"], T=item["T"])
            if keys == {"N_levels", "T_levels"}:
                return cls("sizes", N=tuple(item["N_levels"]), T=tuple(item["T_levels"]))
        raise ConfigError(f"cannot read budget {item!r}")


def _as_sizes(v):
    if isinstance(v, (list, tuple)):
        out = tuple(int(x) for x in v)
        if not out:
            raise ConfigError("empty level list")
        return out
    return int(v)


def _fmt_sizes(v) -> str:
    return ";".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def _parse_sizes(s: str):
    return tuple(int(x) for x in s.split(";")) if ";" in s else int(s)


def _ceil(v: float) -> int:
    # guard against 100.00000000001 -> 101
    return max(1, math.ceil(v * (1.0 - 1e-12)))


def _exponents(problem: NestedProblem) -> tuple[float, float]:
    cfg = NkqConfig(N=1, T=1)
    kx, kt = resolve_kernels(problem, cfg)
    return problem.d_x / smoothness_x(problem, cfg, kx), problem.d_theta / smoothness_theta(problem, cfg, kt[0])


def nkq_sizes(problem: NestedProblem, delta: float) -> tuple[int, int]:
    """``(N, T) = (ceil(delta^(-d_x/s_x)), ceil(delta^(-d_theta/s_theta)))``."""
    a, b = _exponents(problem)
    return _ceil(delta**-a), _ceil(delta**-b)


def nkq_sizes_for_cost(problem: NestedProblem, cost: float) -> tuple[int, int]:
    a, b = _exponents(problem)
    return nkq_sizes(problem, cost ** (-1.0 / (a + b)))


def nmc_sizes(delta: float) -> tuple[int, int]:
    """``N = ceil(1/delta)`` and ``T = N^2``."""
    N = _ceil(1.0 / delta)
    return N, N * N


def nmc_sizes_for_cost(cost: float) -> tuple[int, int]:
    N = max(1, round(cost ** (1.0 / 3.0)))
    return N, max(1, round(cost / N))


@dataclass(frozen=True)
class Plan:
    """Resolved sample sizes of one cell."""

    N: int | tuple[int, ...]
    T: int | tuple[int, ...]

    @property
    def L(self) -> int:
        return len(self.N) - 1 if isinstance(self.N, tuple) else 0

    @property
    def cost(self) -> int:
        if isinstance(self.N, tuple):
            return sum(n * t for n, t in zip(self.N, self.T))
        return self.N * self.T


def plan_cell(problem: NestedProblem, estimator: str, budget: Budget, mlmc_L: int = 5, mlkq_L: int = 3) -> Plan:
    """Sample sizes for ``estimator`` at ``budget`` (see the module docstring)."""
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    multilevel = estimator in ("mlmc", "mlkq")
    if budget.kind == "sizes":
        if multilevel != isinstance(budget.N, tuple):
            want = "per-level lists" if multilevel else "single integers"
            raise ValueError(f"{estimator} needs {want} for N and T, got N={budget.N!r}")
        return Plan(budget.N, budget.T)
    if estimator == "nkq":
        N, T = nkq_sizes(problem, budget.value) if budget.kind == "delta" else nkq_sizes_for_cost(problem, budget.value)
        return Plan(N, T)
    if estimator == "nmc":
        N, T = nmc_sizes(budget.value) if budget.kind == "delta" else nmc_sizes_for_cost(budget.value)
        return Plan(N, T)
    if estimator == "mlmc":
        cost = budget.value if budget.kind == "cost" else budget.value**-2.0
        ml = mlmc_for_cost(cost, L=mlmc_L)
        return Plan(ml.N_levels, ml.T_levels)
    cost = budget.value if budget.kind == "cost" else Plan(*nkq_sizes(problem, budget.value)).cost
    ml = mlkq_for_cost(problem, cost, L=mlkq_L)
    return Plan(ml.N_levels, ml.T_levels)


# ---------------------------------------------------------------------------
# evaluation counting


class CountingG:
    """Wrap ``g`` and count the number of points it is evaluated at."""

    def __init__(self, g):
        self.g = g
        self.count = 0

    def __call__(self, x, theta):
        x = np.asarray(x)
        self.count += int(x.shape[0] * x.shape[1])
        return self.g(x, theta)


def counted(problem: NestedProblem) -> tuple[NestedProblem, CountingG]:
    counter = CountingG(problem.g)
    return replace(problem, g=counter), counter


def run_estimator(problem: NestedProblem, estimator: str, plan: Plan, seed: int,
                  point_source=PointSource.IID, lambda0_x: float = 0.1, lambda0_theta: float = 0.1) -> float:
    """One estimate of ``problem`` with the sizes of ``plan``."""
    if estimator == "nkq":
        cfg = NkqConfig(N=plan.N, T=plan.T, lambda0_x=lambda0_x, lambda0_theta=lambda0_theta,
                        point_source=point_source, seed=seed)
        return nkq(problem, cfg).estimate
    if estimator == "nmc":
        return nmc(problem, plan.N, plan.T, point_source, seed)
    ml = MlConfig(plan.N, plan.T, seed, point_source)
    if estimator == "mlmc":
        return mlmc(problem, ml)
    if estimator == "mlkq":
        return mlkq(problem, ml, lambda0_x=lambda0_x, lambda0_theta=lambda0_theta)
    raise ConfigError(f"unknown estimator {estimator!r}")


# ---------------------------------------------------------------------------
# records and CSV


@dataclass
class RunRecord:
    problem: str
    estimator: str
    point_source: str
    cost: int
    N: int | tuple[int, ...]
    T: int | tuple[int, ...]
    L: int
    replicate: int
    seed: int
    estimate: float
    abs_error: float | None
    wall_millis: float
    lambda0_x: float | None
    lambda0_theta: float | None

    @property
    def cell(self) -> tuple:
        return (self.problem, self.estimator, self.point_source, _fmt_sizes(self.N), _fmt_sizes(self.T),
                self.lambda0_x, self.lambda0_theta)

    def row(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif name in ("N", "T"):
                out.append(_fmt_sizes(v))
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_row(cls, row: dict) -> RunRecord:
        def opt(key):
            return float(row[key]) if row[key] != "" else None
        return cls(
            problem=row["problem"], estimator=row["estimator"], point_source=row["point_source"],
            cost=int(row["cost"]), N=_parse_sizes(row["N"]), T=_parse_sizes(row["T"]), L=int(row["L"]),
            replicate=int(row["replicate"]), seed=int(row["seed"]), estimate=float(row["estimate"]),
            abs_error=opt("abs_error"), wall_millis=float(row["wall_millis"]),
            lambda0_x=opt("lambda0_x"), lambda0_theta=opt("lambda0_theta"),
        )


class CsvSink:
    """Single writer appending records; the header is written once per file."""

    def __init__(self, path, append: bool = True):
        self.path = os.fspath(path)
        new = not append or not os.path.exists(self.path) or os.path.getsize(self.path) == 0
        self._fh = open(self.path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._writer.writerow(CSV_COLUMNS)
            self._fh.flush()

    def write(self, record: RunRecord):
        self._writer.writerow(record.row())
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(records, path, append: bool = False):
    with CsvSink(path, append=append) as sink:
        for r in records:
            sink.write(r)


def read_csv(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [RunRecord.from_row(row) for row in reader]


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    """Everything needed to reproduce a sweep.

    ``lambda0_search`` switches on the pilot grid search over
    ``LAMBDA0_GRID`` for the kernel estimators; the selected pair replaces
    ``lambda0_x``/``lambda0_theta`` for the whole sweep.
    """

    problem: str
    estimators: tuple[str, ...]
    budgets: tuple[Budget, ...]
    replicates: int = 1
    seed: int = 0
    out: str | None = None
    overrides: dict = field(default_factory=dict)
    point_source: PointSource = PointSource.IID
    lambda0_x: float = 0.1
    lambda0_theta: float = 0.1
    lambda0_search: bool = False
    pilot: Budget | None = None
    pilot_replicates: int = 3
    workers: int = 1
    mlmc_L: int = 5
    mlkq_L: int = 3
    append: bool = True

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "budgets", tuple(Budget.parse(b) for b in self.budgets))
        if not self.estimators:
            raise ConfigError("estimator list is empty")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}; choose from {ESTIMATORS}")
        if not self.budgets:
            raise ConfigError("budget grid is empty")
        if self.replicates < 1 or self.pilot_replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.lambda0_x < 0 or self.lambda0_theta < 0:
            raise ConfigError("lambda0 values must be nonnegative")
        try:
            object.__setattr__(self, "point_source", PointSource(self.point_source))
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if self.pilot is not None:
            object.__setattr__(self, "pilot", Budget.parse(self.pilot))
        try:
            get_problem(self.problem, **self.overrides)
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"problem {self.problem!r}: {err}") from None


@dataclass
class SweepResult:
    records: list[RunRecord]
    failures: list[tuple[str, str, int, str]] = field(default_factory=list)
    lambda0: tuple[float, float] | None = None
    lambda0_scores: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failures else EXIT_OK


def cell_seed(base: int, problem: str, estimator: str, budget: Budget, replicate: int) -> int:
    """``derive_seed(base, hash(cell), r)`` with a hash that is stable across processes."""
    key = zlib.crc32(f"{problem}|{estimator}|{budget.label}".encode())
    return derive_seed(base, key, replicate)


_PROBLEMS: dict = {}


def _problem(name: str, overrides: dict) -> NestedProblem:
    key = (name, json.dumps(overrides, sort_keys=True))
    if key not in _PROBLEMS:
        _PROBLEMS[key] = get_problem(name, **overrides)
    return _PROBLEMS[key]


def run_cell(problem: NestedProblem, problem_name: str, estimator: str, plan: Plan, replicate: int, seed: int,
             point_source=PointSource.IID, lambda0_x: float = 0.1, lambda0_theta: float = 0.1) -> RunRecord:
    """One replicate of one cell, timed and with its cost counted."""
    wrapped, counter = counted(problem)
    start = time.perf_counter()
    est = run_estimator(wrapped, estimator, plan, seed, point_source, lambda0_x, lambda0_theta)
    wall = 1e3 * (time.perf_counter() - start)
    kernel = estimator in KERNEL_ESTIMATORS
    truth = problem.true_value
    return RunRecord(
        problem=problem_name, estimator=estimator, point_source=PointSource(point_source).value,
        cost=counter.count, N=plan.N, T=plan.T, L=plan.L, replicate=replicate, seed=seed,
        estimate=float(est), abs_error=None if truth is None else abs(float(est) - truth), wall_millis=wall,
        lambda0_x=float(lambda0_x) if kernel else None, lambda0_theta=float(lambda0_theta) if kernel else None,
    )


def rerun(record: RunRecord, overrides: dict | None = None) -> float:
    """Recompute the estimate of a stored record from its seed and sizes."""
    problem = _problem(record.problem, overrides or {})
    plan = Plan(record.N, record.T)
    return run_estimator(problem, record.estimator, plan, record.seed, record.point_source,
                         record.lambda0_x if record.lambda0_x is not None else 0.1,
                         record.lambda0_theta if record.lambda0_theta is not None else 0.1)


def _task(args):
    (index, name, overrides, estimator, plan, replicate, seed, source, l0x, l0t) = args
    try:
        rec = run_cell(_problem(name, overrides), name, estimator, plan, replicate, seed, source, l0x, l0t)
        return index, rec, None
    except Exception as err:  # reported per cell; the sweep goes on
        return index, None, f"{type(err).__name__}: {err}"


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Run every (estimator, budget) cell of ``spec`` for ``spec.replicates`` replicates.

    Rows are written to ``spec.out`` (if set) in (cell, replicate) order
    whatever the order in which workers finish. A cell that cannot be run
    (for example a multilevel estimator given single-level sizes) is
    reported in ``failures`` and skipped.
    """
    problem = _problem(spec.problem, spec.overrides)
    result = SweepResult(records=[])
    l0x, l0t = spec.lambda0_x, spec.lambda0_theta
    if spec.lambda0_search and any(e in KERNEL_ESTIMATORS for e in spec.estimators):
        pilot = spec.pilot or spec.budgets[0]
        (l0x, l0t), scores = select_lambda0(problem, pilot, seed=derive_seed(spec.seed, 7),
                                            replicates=spec.pilot_replicates, point_source=spec.point_source)
        result.lambda0, result.lambda0_scores = (l0x, l0t), scores
        log.info("lambda0 selection on %s: lambda0_x=%g lambda0_theta=%g", pilot.label, l0x, l0t)
        if spec.out:
            with open(spec.out + ".meta.json", "w") as fh:
                json.dump({"pilot": pilot.label, "lambda0_x": l0x, "lambda0_theta": l0t,
                           "scores": {f"{a:g},{b:g}": s for (a, b), s in scores.items()}}, fh, indent=2)

    tasks = []
    for estimator, budget in product(spec.estimators, spec.budgets):
        try:
            plan = plan_cell(problem, estimator, budget, spec.mlmc_L, spec.mlkq_L)
        except Exception as err:
            msg = f"{type(err).__name__}: {err}"
            log.warning("cell %s/%s skipped: %s", estimator, budget.label, msg)
            result.failures.append((estimator, budget.label, -1, msg))
            continue
        for r in range(spec.replicates):
            seed = cell_seed(spec.seed, spec.problem, estimator, budget, r)
            tasks.append((len(tasks), spec.problem, spec.overrides, estimator, plan, r, seed,
                          spec.point_source, l0x, l0t))

    sink = CsvSink(spec.out, append=spec.append) if spec.out else None
    done: dict[int, RunRecord | None] = {}
    nxt = 0
    try:
        if spec.workers == 1 or len(tasks) <= 1:
            outcomes = map(_task, tasks)
            pool = None
        else:
            pool = ProcessPoolExecutor(max_workers=spec.workers)
            outcomes = pool.map(_task, tasks, chunksize=max(1, len(tasks) // (8 * spec.workers)))
        for index, rec, err in outcomes:
            if err is not None:
                t = tasks[index]
                log.warning("cell %s/%s replicate %d failed: %s", t[3], t[4], t[5], err)
                result.failures.append((t[3], _fmt_sizes(t[4].N), t[5], err))
            done[index] = rec
            while nxt in done:
                rec = done.pop(nxt)
                if rec is not None:
                    result.records.append(rec)
                    if sink:
                        sink.write(rec)
                nxt += 1
        if pool is not None:
            pool.shutdown()
    finally:
        if sink:
            sink.close()
    return result


# ---------------------------------------------------------------------------
# lambda0 selection


def holdout_residual(kernel, points: np.ndarray, values: np.ndarray, lam: float) -> float:
    """Mean squared error of kernel ridge regression fitted on even rows, tested on odd rows.

    Values are standardised on the training half, so the residual is on a
    unit scale and comparable across stages.
    """
    train, test = points[::2], points[1::2]
    if test.shape[0] == 0 or train.shape[0] < 2:
        return float("nan")
    st = standardize(values[::2])
    k = lengthscale_for(kernel, train)
    alpha, _ = solve_spd(gram(k, train), st.values, train.shape[0] * lam, k.amplitude)
    pred = cross(k, test, train) @ alpha
    return float(np.mean((pred - (values[1::2] - st.mean) / st.std) ** 2))


def _leave_out_score(problem: NestedProblem, plan: Plan, seed: int, source, l0x: float, l0t: float) -> float:
    cfg = NkqConfig(N=plan.N, T=plan.T, lambda0_x=l0x, lambda0_theta=l0t, point_source=source, seed=seed)
    res = nkq(problem, cfg)
    kx, kt = resolve_kernels(problem, cfg)
    tz, theta, xz, x = draw(problem, plan.N, min(plan.T, 8), source, seed)
    gv = np.asarray(problem.g(x, theta), dtype=float).reshape(x.shape[0], x.shape[1], -1)
    n = plan.N - plan.N // 2
    lam_x = reg_schedule(l0x, n, smoothness_x(problem, cfg, kx), problem.d_x)
    stage1 = np.nanmean([holdout_residual(kx, xz[t], gv[t, :, k], lam_x)
                         for t in range(gv.shape[0]) for k in range(gv.shape[2])])
    m = plan.T - plan.T // 2
    F = res.stage1_values.reshape(plan.T, -1)
    stage2 = np.nanmean([
        holdout_residual(kt[min(k, len(kt) - 1)], res.theta_points, F[:, k],
                         reg_schedule(l0t, m, smoothness_theta(problem, cfg, kt[min(k, len(kt) - 1)]),
                                      problem.d_theta))
        for k in range(F.shape[1])])
    return float(stage1 + stage2)


def select_lambda0(problem: NestedProblem, pilot: Budget, seed: int = 0, replicates: int = 3,
                   point_source=PointSource.IID, grid=LAMBDA0_GRID):
    """Pick ``(lambda0_x, lambda0_theta)`` from ``grid x grid`` on a pilot NKQ budget.

    With a known truth the pair with the smallest mean absolute error over
    ``replicates`` pilot runs wins; otherwise the smallest leave-out
    kernel-ridge residual of the two stages. Pairs whose Gram systems are
    singular score ``inf``. Returns ``((lambda0_x, lambda0_theta), scores)``.
    """
    plan = plan_cell(problem, "nkq", pilot)
    scores = {}
    for l0x, l0t in product(grid, grid):
        vals = []
        for r in range(replicates):
            s = derive_seed(seed, r)
            try:
                if problem.true_value is not None:
                    cfg = NkqConfig(N=plan.N, T=plan.T, lambda0_x=l0x, lambda0_theta=l0t,
                                    point_source=point_source, seed=s)
                    vals.append(abs(nkq(problem, cfg).estimate - problem.true_value))
                else:
                    vals.append(_leave_out_score(problem, plan, s, point_source, l0x, l0t))
            except SingularGramError:
                vals.append(math.inf)
        scores[(l0x, l0t)] = float(np.mean(vals))
    best = min(scores, key=lambda k: (scores[k], k))
    return best, scores


# ---------------------------------------------------------------------------
# analysis


def fit_loglog_slope(costs, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(cost)``.

    Raises
    ------
    ValueError
        On nonpositive entries or fewer than two distinct costs.
    """
    c = np.asarray(costs, dtype=float).ravel()
    e = np.asarray(errors, dtype=float).ravel()
    if c.shape != e.shape:
        raise ValueError("costs and errors must have the same length")
    if np.any(~(c > 0)) or np.any(~(e > 0)):
        raise ValueError("costs and errors must be positive")
    if np.unique(c).size < 2:
        raise ValueError("need at least two distinct costs")
    return float(np.polyfit(np.log(c), np.log(e), 1)[0])


def empirical_rate(slope: float) -> float:
    """Rate ``r`` with ``cost ~ delta^(-r)`` for an error-vs-cost slope: ``-1/slope``.

    A nonnegative slope means no observed convergence and gives ``0``.
    """
    return -1.0 / slope if slope < 0 else 0.0


@dataclass(frozen=True)
class CellSummary:
    problem: str
    estimator: str
    point_source: str
    N: int | tuple[int, ...]
    T: int | tuple[int, ...]
    L: int
    cost: float
    count: int
    mean_estimate: float
    std_estimate: float
    mean_error: float
    q25: float
    q75: float
    mean_wall_millis: float


def summarize(records) -> list[CellSummary]:
    """Per-cell mean error, 25%/75% error quantiles and mean wall time, in first-seen cell order."""
    cells: dict[tuple, list[RunRecord]] = {}
    for r in records:
        cells.setdefault(r.cell, []).append(r)
    out = []
    for rs in cells.values():
        est = np.array([r.estimate for r in rs])
        errs = np.array([np.nan if r.abs_error is None else r.abs_error for r in rs])
        if np.all(np.isnan(errs)):
            mean_err = q25 = q75 = float("nan")
        else:
            errs = errs[~np.isnan(errs)]
            mean_err = float(errs.mean())
            q25, q75 = (float(q) for q in np.quantile(errs, [0.25, 0.75], method="linear"))
        r0 = rs[0]
        out.append(CellSummary(
            problem=r0.problem, estimator=r0.estimator, point_source=r0.point_source, N=r0.N, T=r0.T, L=r0.L,
            cost=float(np.mean([r.cost for r in rs])), count=len(rs), mean_estimate=float(est.mean()),
            std_estimate=float(est.std(ddof=1)) if len(rs) > 1 else 0.0, mean_error=mean_err, q25=q25, q75=q75,
            mean_wall_millis=float(np.mean([r.wall_millis for r in rs])),
        ))
    return out


def fit_rates(summaries) -> dict[tuple[str, str], tuple[float, float]]:
    """``{(estimator, point_source): (slope, rate)}`` fitted to per-cell mean errors."""
    groups: dict[tuple[str, str], list[CellSummary]] = {}
    for s in summaries:
        if np.isfinite(s.mean_error) and s.mean_error > 0:
            groups.setdefault((s.estimator, s.point_source), []).append(s)
    out = {}
    for key, ss in groups.items():
        if len({s.cost for s in ss}) >= 2:
            slope = fit_loglog_slope([s.cost for s in ss], [s.mean_error for s in ss])
            out[key] = (slope, empirical_rate(slope))
    return out


# ---------------------------------------------------------------------------
# configuration files


CONFIG_KEYS = {
    "problem", "overrides", "estimators", "delta_grid", "cost_grid", "sizes", "replicates", "seed", "out",
    "qmc", "lambda0_x", "lambda0_theta", "lambda0_search", "pilot", "pilot_replicates", "workers", "mlmc_L",
    "mlkq_L", "append",
}


def spec_from_dict(cfg: dict) -> SweepSpec:
    """Build a :class:`SweepSpec` from a JSON-style mapping.

    Keys: ``problem`` (required), ``overrides``, ``estimators``, exactly
    one of ``delta_grid``/``cost_grid``/``sizes`` (lists; ``sizes`` items
    are ``[N, T]`` or ``{"N_levels": [...], "T_levels": [...]}``),
    ``replicates``, ``seed``, ``out``, ``qmc``, ``lambda0_x``,
    ``lambda0_theta``, ``lambda0_search``, ``pilot`` (a budget item),
    ``pilot_replicates``, ``workers``, ``mlmc_L``, ``mlkq_L``, ``append``.
    """
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    if "problem" not in cfg:
        raise ConfigError("configuration needs a problem")
    grids = [k for k in ("delta_grid", "cost_grid", "sizes") if cfg.get(k) is not None]
    if len(grids) != 1:
        raise ConfigError("give exactly one of delta_grid, cost_grid or sizes")
    items = cfg[grids[0]]
    if not isinstance(items, (list, tuple)):
        raise ConfigError(f"{grids[0]} must be a list")
    if grids[0] == "delta_grid":
        budgets = [Budget("delta", float(v)) for v in items]
    elif grids[0] == "cost_grid":
        budgets = [Budget("cost", float(v)) for v in items]
    else:
        budgets = [Budget.parse(v) for v in items]
    estimators = cfg.get("estimators", ["nkq"])
    if isinstance(estimators, str):
        estimators = [estimators]
    try:
        return SweepSpec(
            problem=str(cfg["problem"]), estimators=tuple(estimators), budgets=tuple(budgets),
            replicates=int(cfg.get("replicates", 1)), seed=int(cfg.get("seed", 0)), out=cfg.get("out"),
            overrides=dict(cfg.get("overrides") or {}),
            point_source=PointSource.QMC if cfg.get("qmc") else PointSource.IID,
            lambda0_x=float(cfg.get("lambda0_x", 0.1)), lambda0_theta=float(cfg.get("lambda0_theta", 0.1)),
            lambda0_search=bool(cfg.get("lambda0_search", False)),
            pilot=Budget.parse(cfg["pilot"]) if cfg.get("pilot") is not None else None,
            pilot_replicates=int(cfg.get("pilot_replicates", 3)), workers=int(cfg.get("workers", 1)),
            mlmc_L=int(cfg.get("mlmc_L", 5)), mlkq_L=int(cfg.get("mlkq_L", 3)), append=bool(cfg.get("append", True)),
        )
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from None


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read configuration {path}: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a JSON object")
    return cfg


__all__ = [
    "Budget", "CellSummary", "ConfigError", "CountingG", "CSV_COLUMNS", "ESTIMATORS", "LAMBDA0_GRID", "Plan",
    "RunRecord", "SweepResult", "SweepSpec", "cell_seed", "counted", "empirical_rate", "fit_loglog_slope",
    "fit_rates", "holdout_residual", "load_config", "nkq_sizes", "nkq_sizes_for_cost", "nmc_sizes",
    "nmc_sizes_for_cost", "plan_cell", "read_csv", "rerun", "run_cell", "run_estimator", "run_sweep",
    "select_lambda0", "spec_from_dict", "summarize", "write_csv",
]
