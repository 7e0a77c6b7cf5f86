import csv
import json

import numpy as np
import pytest

from nestkq import harness
from nestkq.harness import (CSV_COLUMNS, Budget, ConfigError, Plan, RunRecord, SweepSpec, cell_seed, counted,
                            empirical_rate, fit_loglog_slope, fit_rates, nkq_sizes, nkq_sizes_for_cost, nmc_sizes,
                            nmc_sizes_for_cost, plan_cell, read_csv, rerun, run_cell, run_sweep, select_lambda0,
                            spec_from_dict, summarize, write_csv)
from nestkq.problems import evppi, finance, gp_lookahead, synthetic


def _record(**kw):
    base = dict(problem="synthetic", estimator="nmc", point_source="iid", cost=100, N=10, T=10, L=0, replicate=0,
                seed=1, estimate=0.4, abs_error=0.01, wall_millis=1.5, lambda0_x=None, lambda0_theta=None)
    base.update(kw)
    return RunRecord(**base)


def test_fit_loglog_slope_examples():
    slope = fit_loglog_slope([1, 10], [1, 0.1])
    assert slope == pytest.approx(-1.0, abs=1e-12)
    assert empirical_rate(slope) == pytest.approx(1.0)
    slope = fit_loglog_slope([1, 10, 100], [0.3, 0.3, 0.3])
    assert slope == pytest.approx(0.0, abs=1e-12)
    assert empirical_rate(slope) == 0.0
    assert empirical_rate(-1 / 3) == pytest.approx(3.0)


@pytest.mark.parametrize("costs,errors", [([1, 10], [1, 0]), ([0, 10], [1, 1]), ([5, 5], [1, 2]),
                                          ([1, 2, 3], [1, 2]), ([1, np.nan], [1, 2])])
def test_fit_loglog_slope_errors(costs, errors):
    with pytest.raises(ValueError):
        fit_loglog_slope(costs, errors)


def test_summarize_quantiles():
    recs = [_record(replicate=i, abs_error=float(e), wall_millis=float(i)) for i, e in enumerate([1, 2, 3, 4])]
    (s,) = summarize(recs)
    assert (s.q25, s.q75) == (1.75, 3.25)
    assert s.mean_error == 2.5
    assert s.count == 4
    assert s.mean_wall_millis == 1.5
    (one,) = summarize([_record(abs_error=0.7)])
    assert one.mean_error == one.q25 == one.q75 == 0.7


def test_summarize_order_and_missing_truth():
    recs = [_record(estimator="nmc"), _record(estimator="nkq", lambda0_x=0.1, lambda0_theta=0.1),
            _record(estimator="nmc", replicate=1), _record(problem="gp", abs_error=None)]
    out = summarize(recs)
    assert [(s.problem, s.estimator, s.count) for s in out] == [("synthetic", "nmc", 2), ("synthetic", "nkq", 1),
                                                                ("gp", "nmc", 1)]
    assert np.isnan(out[2].mean_error)


def test_fit_rates():
    recs = [_record(cost=c, N=n, T=n, abs_error=e) for c, n, e in [(100, 10, 0.1), (10_000, 100, 0.001)]]
    rates = fit_rates(summarize(recs))
    slope, rate = rates[("nmc", "iid")]
    assert slope == pytest.approx(-1.0)
    assert rate == pytest.approx(1.0)


def test_budget_parsing():
    assert Budget.parse({"delta": 0.1}).label == "delta=0.1"
    assert Budget.parse({"cost": 1e4}).label == "cost=10000"
    assert Budget.parse([8, 16]).label == "N=8,T=16"
    b = Budget.parse({"N_levels": [2, 4], "T_levels": [10, 3]})
    assert b.N == (2, 4) and b.label == "N=2;4,T=10;3"
    for bad in ({"delta": 2.0}, {"cost": -1}, {"foo": 1}, {"N": [2, 4], "T": 3}, [1, 2, 3]):
        with pytest.raises(ConfigError):
            Budget.parse(bad)


def test_size_maps():
    p = synthetic()
    assert nkq_sizes(p, 0.01) == (10, 10)
    assert nkq_sizes_for_cost(p, 1e4) == (100, 100)
    assert nkq_sizes(finance(), 0.1) == (10, 10)
    assert nmc_sizes(0.1) == (10, 100)
    assert nmc_sizes(0.05) == (20, 400)
    assert nmc_sizes_for_cost(1e6) == (100, 10_000)
    assert plan_cell(p, "mlmc", Budget("cost", 1e4)).cost == pytest.approx(1e4, rel=0.05)
    assert plan_cell(p, "mlkq", Budget("cost", 1e4)).N == (25, 35, 49, 69)
    assert plan_cell(p, "mlkq", Budget("delta", 0.01)).cost <= 1e4
    with pytest.raises(ValueError):
        plan_cell(p, "mlmc", Budget("sizes", N=8, T=8))
    with pytest.raises(ConfigError):
        plan_cell(p, "mc", Budget("cost", 100))


@pytest.mark.parametrize("problem", [synthetic(), finance(), evppi(), gp_lookahead()])
def test_cost_audit(problem):
    plans = {"nkq": Plan(6, 5), "nmc": Plan(6, 5), "mlmc": Plan((2, 4, 8), (9, 3, 2)),
             "mlkq": Plan((6, 7, 9), (9, 3, 2))}
    for est, plan in plans.items():
        wrapped, counter = counted(problem)
        harness.run_estimator(wrapped, est, plan, seed=3)
        assert counter.count == plan.cost, est


def test_run_cell_record():
    p = synthetic()
    rec = run_cell(p, "synthetic", "nkq", Plan(8, 8), 0, 42)
    assert rec.cost == 64 and rec.L == 0 and rec.seed == 42
    assert rec.abs_error == pytest.approx(abs(rec.estimate - p.true_value))
    assert rec.lambda0_x == 0.1 and rec.wall_millis > 0
    assert run_cell(p, "synthetic", "nmc", Plan(8, 8), 0, 42).lambda0_x is None
    assert run_cell(gp_lookahead(), "gp_lookahead", "nmc", Plan(4, 4), 0, 1).abs_error is None


def test_sweep_determinism_and_seeds():
    spec = SweepSpec("synthetic", ["nmc"], [Budget("cost", 1000)], replicates=2, seed=5)
    a, b = run_sweep(spec), run_sweep(spec)
    assert len(a) == 2
    assert a.records[0].seed != a.records[1].seed
    assert [r.estimate for r in a] == [r.estimate for r in b]
    assert a.records[0].seed == cell_seed(5, "synthetic", "nmc", Budget("cost", 1000), 0)
    assert a.exit_code == 0


def test_sweep_seed_audit():
    spec = SweepSpec("finance", ["nkq", "nmc", "mlmc", "mlkq"], [Budget("cost", 2000)], replicates=2, seed=1)
    for rec in run_sweep(spec):
        assert rerun(rec) == rec.estimate


def test_cell_seeds_differ_across_cells():
    seeds = {cell_seed(0, "synthetic", e, Budget("delta", d), r)
             for e in ("nkq", "nmc") for d in (0.1, 0.05) for r in range(3)}
    assert len(seeds) == 12


def test_sweep_validation():
    with pytest.raises(ConfigError):
        SweepSpec("synthetic", [], [Budget("cost", 100)])
    with pytest.raises(ConfigError):
        SweepSpec("synthetic", ["nmc"], [])
    with pytest.raises(ConfigError):
        SweepSpec("synthetic", ["nmc"], [Budget("cost", 100)], replicates=0)
    with pytest.raises(ConfigError):
        SweepSpec("nope", ["nmc"], [Budget("cost", 100)])
    with pytest.raises(ConfigError):
        SweepSpec("synthetic", ["xyz"], [Budget("cost", 100)])


def test_sweep_partial_failure():
    spec = SweepSpec("synthetic", ["nmc", "mlkq"], [[8, 8]], replicates=2)
    res = run_sweep(spec)
    assert len(res) == 2
    assert res.exit_code == harness.EXIT_PARTIAL
    assert res.failures[0][0] == "mlkq"


def test_csv_round_trip(tmp_path):
    recs = [_record(), _record(estimator="mlmc", N=(2, 4), T=(9, 3), L=1, cost=30, estimate=1 / 3),
            _record(estimator="nkq", abs_error=None, lambda0_x=0.01, lambda0_theta=1.0)]
    path = tmp_path / "runs.csv"
    write_csv(recs, path)
    assert read_csv(path) == recs
    with open(path) as fh:
        assert next(csv.reader(fh)) == list(CSV_COLUMNS)


def test_csv_append_and_missing_columns(tmp_path):
    path = tmp_path / "runs.csv"
    write_csv([_record()], path)
    write_csv([_record(replicate=1)], path, append=True)
    assert [r.replicate for r in read_csv(path)] == [0, 1]
    write_csv([_record(replicate=7)], path)
    assert [r.replicate for r in read_csv(path)] == [7]
    bad = tmp_path / "bad.csv"
    bad.write_text("problem,estimator\nx,y\n")
    with pytest.raises(ValueError):
        read_csv(bad)


def test_sweep_writes_csv_in_order(tmp_path):
    out = tmp_path / "sweep.csv"
    spec = SweepSpec("synthetic", ["nkq", "nmc"], [Budget("delta", 0.2), Budget("delta", 0.1)], replicates=3,
                     out=str(out), append=False)
    res = run_sweep(spec)
    back = read_csv(out)
    assert back == res.records
    keys = [(r.estimator, r.N, r.replicate) for r in back]
    assert keys == [(e, n, r) for e, n in [("nkq", 3), ("nkq", 4), ("nmc", 5), ("nmc", 10)] for r in range(3)]


def test_parallel_sweep_matches_serial(tmp_path):
    kw = dict(problem="synthetic", estimators=["nkq", "nmc"], budgets=[Budget("cost", 400), Budget("cost", 900)],
              replicates=3, seed=2)
    serial = run_sweep(SweepSpec(**kw, out=str(tmp_path / "a.csv")))
    parallel = run_sweep(SweepSpec(**kw, workers=2, out=str(tmp_path / "b.csv")))
    strip = [(r.cell, r.replicate, r.seed, r.estimate, r.cost) for r in serial]
    assert strip == [(r.cell, r.replicate, r.seed, r.estimate, r.cost) for r in parallel]
    with open(tmp_path / "a.csv") as a, open(tmp_path / "b.csv") as b:
        rows_a = [row[:10] for row in csv.reader(a)]
        rows_b = [row[:10] for row in csv.reader(b)]
    assert rows_a == rows_b


def test_summarize_statistical_reproducibility():
    p = synthetic()
    runs = [[run_cell(p, "synthetic", "nmc", Plan(4, 16), r, derive) for r, derive in enumerate(seeds)]
            for seeds in (range(1000), range(1000, 2000))]
    a, b = (summarize(rs)[0] for rs in runs)
    se = np.hypot(a.std_estimate, b.std_estimate) / np.sqrt(1000)
    assert abs(a.mean_estimate - b.mean_estimate) < 3 * se


def test_select_lambda0_with_truth():
    best, scores = select_lambda0(synthetic(), Budget("sizes", N=16, T=16), seed=0, replicates=2)
    assert len(scores) == 9
    assert best in scores and scores[best] == min(scores.values())


def test_select_lambda0_without_truth():
    best, scores = select_lambda0(gp_lookahead(), Budget("sizes", N=12, T=12), seed=0, replicates=1)
    assert all(np.isfinite(v) for v in scores.values())
    assert scores[best] == min(scores.values())


def test_holdout_residual_prefers_fitting_ridge():
    from nestkq.kernels import KernelSpec
    rng = np.random.default_rng(0)
    x = rng.random((80, 1))
    y = np.sin(6 * x[:, 0]) + 0.3 * rng.standard_normal(80)
    k = KernelSpec("matern32", 0.2)
    small = harness.holdout_residual(k, x, y, 1e-9)
    mid = harness.holdout_residual(k, x, y, 1e-2)
    assert mid < small


def test_sweep_lambda0_search_records_choice(tmp_path):
    out = tmp_path / "s.csv"
    spec = SweepSpec("synthetic", ["nkq", "nmc"], [Budget("sizes", N=8, T=8)], replicates=1, out=str(out),
                     lambda0_search=True, pilot_replicates=1)
    res = run_sweep(spec)
    assert res.lambda0 is not None
    nk = [r for r in res if r.estimator == "nkq"][0]
    assert (nk.lambda0_x, nk.lambda0_theta) == res.lambda0
    meta = json.loads((tmp_path / "s.csv.meta.json").read_text())
    assert (meta["lambda0_x"], meta["lambda0_theta"]) == res.lambda0
    assert len(meta["scores"]) == 9


def test_spec_from_dict():
    spec = spec_from_dict({"problem": "finance", "estimators": ["nkq", "nmc"], "cost_grid": [100, 1000],
                           "replicates": 3, "qmc": True, "overrides": {"shock": 0.1}})
    assert spec.budgets == (Budget("cost", 100.0), Budget("cost", 1000.0))
    assert spec.point_source.value == "qmc" and spec.replicates == 3
    spec = spec_from_dict({"problem": "synthetic", "sizes": [[4, 4], {"N_levels": [2, 4], "T_levels": [5, 2]}]})
    assert spec.estimators == ("nkq",)
    for bad in ({"delta_grid": [0.1]}, {"problem": "synthetic"},
                {"problem": "synthetic", "delta_grid": [0.1], "cost_grid": [10]},
                {"problem": "synthetic", "delta_grid": [0.1], "colour": "red"},
                {"problem": "synthetic", "delta_grid": 0.1}):
        with pytest.raises(ConfigError):
            spec_from_dict(bad)


def test_load_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"problem": "synthetic", "delta_grid": [0.1]}))
    assert harness.load_config(path)["problem"] == "synthetic"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        harness.load_config(path)
