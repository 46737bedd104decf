import csv
import subprocess
import sys

import numpy as np
import pytest

from elsurvey import RFunction, load_dataset, lr_nested, read_schema
from elsurvey.cli import UsageError, main, parse_hypothesis
from elsurvey.datamodel import DesignSidecar, save_dataset, write_keyvalue

pytestmark = pytest.mark.filterwarnings("ignore:only .* replicate columns")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture()
def three_rows(tmp_path):
    (tmp_path / "d.csv").write_text("y,w,w_rep_1,w_rep_2,w_rep_3\n1,1,2,0,1\n2,2,1,3,2\n4,1,0,1,2\n")
    write_keyvalue(tmp_path / "d.schema", {"y": "y", "weight": "w", "rep_prefix": "w_rep_"})
    return tmp_path


@pytest.fixture()
def linear_files(tmp_path, scenario_a):
    schema = save_dataset(scenario_a.dataset, tmp_path / "a.csv",
                          extra={"d": scenario_a.sample.design_weights})
    write_keyvalue(tmp_path / "a.schema", schema.to_mapping())
    return tmp_path


def _run(tmp_path, *argv, out="out"):
    return main(list(argv) + ["--out-dir", str(tmp_path / out)])


def test_estimate_mean_is_weighted_mean(three_rows, capsys):
    t = three_rows
    assert _run(t, "estimate", "--data", str(t / "d.csv"), "--schema", str(t / "d.schema")) == 0
    row = _rows(t / "out" / "estimate.csv")[0]
    assert float(row["estimate"]) == pytest.approx((1 + 4 + 4) / 4, rel=1e-9)
    assert (t / "out" / "manifest.txt").is_file()


def test_missing_schema_is_usage_error(three_rows, capsys):
    t = three_rows
    code = _run(t, "estimate", "--data", str(t / "d.csv"), "--schema", str(t / "nope.schema"))
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 2 and len(err) == 1 and err[0].startswith("error[2]:")


def test_unknown_flag_is_usage_error(capsys):
    assert main(["estimate", "--bogus"]) == 2
    assert main([]) == 2


def test_bad_data_exit_code(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("y,w\n1,1\n2,-1\n")
    write_keyvalue(tmp_path / "d.schema", {"y": "y", "weight": "w"})
    assert _run(tmp_path, "estimate", "--data", str(tmp_path / "d.csv"), "--schema", str(tmp_path / "d.schema")) == 3
    assert capsys.readouterr().err.startswith("error[3]:")


def test_numerical_failure_exit_code(tmp_path, capsys):
    # perfectly separated logistic data: no finite maximiser
    (tmp_path / "d.csv").write_text("y,one,x,w\n0,1,-2,1\n0,1,-1,1\n1,1,1,1\n1,1,2,1\n")
    write_keyvalue(tmp_path / "d.schema", {"y": "y", "x": "one,x", "weight": "w"})
    code = _run(tmp_path, "estimate", "--data", str(tmp_path / "d.csv"), "--schema",
                str(tmp_path / "d.schema"), "--family", "logistic")
    assert code == 4
    assert capsys.readouterr().err.startswith("error[4]:")


def test_hypothesis_at_estimate_has_unit_pvalue(three_rows, capsys):
    t = three_rows
    assert _run(t, "test", "--data", str(t / "d.csv"), "--schema", str(t / "d.schema"),
                "--hypothesis", "theta[0]=2.25") == 0
    row = _rows(t / "out" / "test.csv")[0]
    assert float(row["p_value"]) == 1.0 and float(row["statistic"]) == pytest.approx(0.0, abs=1e-12)


def test_contrast_matches_library(linear_files, scenario_a, capsys):
    t = linear_files
    code = _run(t, "test", "--data", str(t / "a.csv"), "--schema", str(t / "a.schema"),
                "--family", "linear", "--hypothesis", "theta[x1]-theta[x2]=0", "--mc-draws", "20000")
    assert code == 0
    row = _rows(t / "out" / "test.csv")[0]
    ds = load_dataset(t / "a.csv", read_schema(t / "a.schema"))
    from elsurvey import family_linear_regression
    lib = lr_nested("pel", ds, family_linear_regression(4), RFunction.linear([[0, 1, -1, 0]]),
                    mc_draws=20000)
    assert float(row["statistic"]) == pytest.approx(lib.statistic, rel=1e-9)
    assert float(row["p_value"]) == pytest.approx(lib.p_value, abs=1e-12)
    assert len(row["eigenvalues"].split()) == 1


def test_wald_method(linear_files, capsys):
    t = linear_files
    assert _run(t, "test", "--data", str(t / "a.csv"), "--schema", str(t / "a.schema"), "--family",
                "linear", "--hypothesis", "theta[1]=1", "--method", "wald") == 0
    row = _rows(t / "out" / "test.csv")[0]
    assert row["method"] == "wald" and 0 <= float(row["p_value"]) <= 1


def test_bootstrap_needs_design_sidecar(linear_files, capsys):
    t = linear_files
    code = _run(t, "test", "--data", str(t / "a.csv"), "--schema", str(t / "a.schema"), "--family",
                "linear", "--hypothesis", "theta[1]=1", "--method", "boot")
    assert code == 2
    assert "--design" in capsys.readouterr().err


def test_bootstrap_with_sidecar(linear_files, capsys):
    t = linear_files
    DesignSidecar("d", ("x1", "x2")).write(t / "a.design")
    code = _run(t, "test", "--data", str(t / "a.csv"), "--schema", str(t / "a.schema"), "--family",
                "linear", "--hypothesis", "theta[1]=1", "--method", "boot", "--design", str(t / "a.design"),
                "--B", "40", "--el", "sel")
    assert code == 0
    row = _rows(t / "out" / "test.csv")[0]
    assert row["reference"] == "BOOTSTRAP" and 0 < float(row["p_value"]) <= 1
    assert "single-stage" in capsys.readouterr().err


def test_quantile_interval_contains_median(tmp_path, capsys):
    (tmp_path / "q.csv").write_text("y,w," + ",".join(f"r{b}" for b in range(1, 6)) + "\n"
                                    + "1,1,2,0,1,1,0\n2,1,0,1,1,2,1\n3,1,1,1,0,1,2\n4,1,1,2,1,0,1\n5,1,1,1,2,1,1\n")
    write_keyvalue(tmp_path / "q.schema", {"y": "y", "weight": "w", "rep_prefix": "r"})
    assert _run(tmp_path, "quantile", "--data", str(tmp_path / "q.csv"), "--schema",
                str(tmp_path / "q.schema"), "--tau", "0.5") == 0
    rows = _rows(tmp_path / "out" / "quantile.csv")
    el = rows[0]
    assert el["method"] == "PEL" and float(el["lower"]) <= 3.0 <= float(el["upper"])
    assert rows[-1]["method"] == "NA"


def test_repweights_deterministic(linear_files, capsys):
    t = linear_files
    DesignSidecar("d", ("x1", "x2")).write(t / "a.design")
    args = ["repweights", "--data", str(t / "a.csv"), "--schema", str(t / "a.schema"),
            "--design", str(t / "a.design"), "--B", "2", "--seed", "1", "--rep-prefix", "rw"]
    assert main(args + ["--out-dir", str(t / "r1")]) == 0
    assert main(args + ["--out-dir", str(t / "r2")]) == 0
    a, b = (t / "r1" / "a_rep.csv").read_bytes(), (t / "r2" / "a_rep.csv").read_bytes()
    assert a == b
    ds = load_dataset(t / "r1" / "a_rep.csv", read_schema(t / "r1" / "a_rep.schema"))
    assert ds.B == 2


def test_simulate_and_replay(tmp_path, capsys):
    desc = tmp_path / "mini.txt"
    write_keyvalue(desc, {"name": "mini", "test": "simple", "cells": "0.5,1", "n": "60",
                          "fraction": "0.05", "sigmas": "1", "methods": "I,V", "runs": "2", "B": "20",
                          "mc_draws": "2000", "table_pel": "miniP", "table_sel": "miniS"})
    assert main(["simulate", "--descriptor", str(desc), "--threads", "1",
                 "--out-dir", str(tmp_path / "s1")]) == 0
    out = tmp_path / "s1"
    assert {"miniP.csv", "miniS.csv", "mini_long.csv", "mini_descriptor.txt", "manifest.txt"} <= {
        p.name for p in out.iterdir()}
    header = (out / "miniP.csv").read_text().splitlines()[0]
    assert header == "scenario,method,sigma,0.5,1,runs_ok,runs_failed"
    assert main(["replay", "--manifest", str(out / "manifest.txt"), "--out-dir", str(tmp_path / "s2")]) == 0
    for name in ("miniP.csv", "miniS.csv", "mini_long.csv"):
        assert (out / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()


def test_simulate_unknown_descriptor(tmp_path, capsys):
    assert main(["simulate", "--descriptor", "no_such_table", "--out-dir", str(tmp_path)]) == 2


def test_parse_hypothesis():
    A, c = parse_hypothesis("theta[1] - 2*theta[x2] = 0.5; theta[0]=1", ["one", "x1", "x2"], 3)
    assert np.array_equal(A, [[0, 1, -2], [1, 0, 0]]) and np.array_equal(c, [0.5, 1.0])
    for bad in ("theta[5]=1", "theta[z]=1", "theta[0]", "theta[0]=a", "theta[0] theta[1]=0",
                "theta[0]=1;theta[0]=2"):
        with pytest.raises(UsageError):
            parse_hypothesis(bad, ["one", "x1", "x2"], 3)


def test_console_entry_point(three_rows):
    t = three_rows
    proc = subprocess.run([sys.executable, "-m", "elsurvey.cli", "estimate", "--data", str(t / "d.csv"),
                           "--schema", str(t / "d.schema"), "--out-dir", str(t / "sub")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip().endswith("manifest.txt")
