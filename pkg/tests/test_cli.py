import json
import subprocess
import sys

import pytest

from nestkq.cli import main
from nestkq.harness import read_csv


def test_sweep_writes_csv_and_summary(tmp_path, capsys):
    out = tmp_path / "runs.csv"
    rc = main(["sweep", "--problem", "synthetic", "--estimator", "nkq,nmc", "--delta-grid", "0.2,0.1",
               "--replicates", "2", "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "nkq (iid): slope" in text and "nmc (iid): slope" in text
    recs = read_csv(out)
    assert len(recs) == 8
    # appending by default, truncating with --overwrite
    main(["--problem", "synthetic", "--estimator", "nmc", "--delta-grid", "0.2", "--out", str(out)])
    assert len(read_csv(out)) == 9
    main(["--problem", "synthetic", "--estimator", "nmc", "--delta-grid", "0.2", "--out", str(out), "--overwrite"])
    assert len(read_csv(out)) == 1


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    out = tmp_path / "o.csv"
    cfg.write_text(json.dumps({"problem": "finance", "estimators": ["nmc"], "cost_grid": [100, 1000],
                               "replicates": 1, "out": str(out)}))
    assert main(["sweep", "--config", str(cfg), "--replicates", "2", "--qmc"]) == 0
    recs = read_csv(out)
    assert len(recs) == 4 and {r.point_source for r in recs} == {"qmc"}


def test_overrides_flag(tmp_path):
    out = tmp_path / "o.csv"
    assert main(["sweep", "--problem", "synthetic2", "--estimator", "nmc", "--cost-grid", "200",
                 "--out", str(out)]) == 0
    assert read_csv(out)[0].problem == "synthetic2"
    assert main(["sweep", "--problem", "finance", "--set", "shock=0.1", "--estimator", "nmc", "--cost-grid", "200",
                 "--out", str(out), "--overwrite"]) == 0


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["sweep", "--problem", "nope", "--delta-grid", "0.1"]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["sweep", "--problem", "synthetic"]) == 2  # no budget grid
    assert main(["sweep", "--problem", "synthetic", "--estimator", "", "--delta-grid", "0.1"]) == 2
    assert main(["sweep", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["estimate", "--N", "4", "--T", "4"]) == 2
    assert main([]) == 2


def test_sizes_config_with_failing_cell_exit_3(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": "synthetic", "estimators": ["nmc", "mlkq"], "sizes": [[8, 8]]}))
    assert main(["sweep", "--config", str(cfg)]) == 3
    assert "FAILED mlkq" in capsys.readouterr().err


def test_estimate_command(capsys):
    assert main(["estimate", "--problem", "synthetic", "--N", "16", "--T", "16", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "estimate" in out and "true value 0.4115646259" in out and "cost 256" in out
    assert main(["estimate", "--problem", "synthetic", "--estimator", "mlmc", "--N", "2,4", "--T", "20,5"]) == 0
    assert "cost 60" in capsys.readouterr().out


def test_fit_command(tmp_path, capsys):
    out = tmp_path / "runs.csv"
    main(["sweep", "--problem", "synthetic", "--estimator", "nmc", "--delta-grid", "0.2,0.1,0.05",
          "--replicates", "3", "--out", str(out)])
    capsys.readouterr()
    assert main(["fit", str(out)]) == 0
    text = capsys.readouterr().out
    assert "nmc (iid): slope" in text and "rate r =" in text
    assert main(["fit", str(tmp_path / "missing.csv")]) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "nestkq.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "sweep" in res.stdout


@pytest.mark.parametrize("flag", ["--delta-grid", "--cost-grid"])
def test_bad_grid_values(flag):
    with pytest.raises(SystemExit) as err:
        main(["sweep", "--problem", "synthetic", flag, "a,b"])
    assert err.value.code == 2
