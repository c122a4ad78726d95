import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kgwdro import Dataset
from kgwdro.cli import main, parse_grid
from kgwdro.io import (
    DataFormatError,
    dumps,
    read_dataset,
    read_matrix,
    read_thetas,
    write_dataset,
    write_thetas,
)
from kgwdro.selection import make_log_grid

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --- file formats ----------------------------------------------------------------

@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 4))
def test_dataset_round_trip(tmp_path_factory, seed, N, d):
    rng = np.random.default_rng(seed)
    D = Dataset(rng.standard_normal((N, d)) * 10 ** rng.uniform(-8, 8), rng.standard_normal(N))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset(path, D)
    back = read_dataset(path)
    assert np.array_equal(back.X, D.X) and np.array_equal(back.y, D.y) and back.task is D.task


def test_theta_round_trip(tmp_path):
    T = np.array([[0.1, 1 / 3], [2.0, -7e-12]])
    write_thetas(tmp_path / "t.csv", T, names=["a", "b"])
    names, back = read_thetas(tmp_path / "t.csv")
    assert names == ["a", "b"] and np.array_equal(back, T)


@pytest.mark.parametrize("text", [
    "x1,x2\n1,2\n",            # no y column
    "x1,y\n1,\n",              # missing value
    "x1,y\n1,abc\n",           # not a number
    "x1,y\n1,nan\n",           # non-finite
    "x1,y\n1,2,3\n",           # ragged
    "y\n1\n",                  # no covariates
    "x1,y\n",                  # no rows
])
def test_bad_data_files(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataFormatError):
        read_dataset(p)


def test_classification_labels_checked(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x1,y\n1,0\n")
    with pytest.raises(DataFormatError):
        read_dataset(p, "classification")


def test_matrix_reader(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,0\n0,2\n")
    assert np.array_equal(read_matrix(p), np.diag([1.0, 2.0]))
    p.write_text("1,0\n0\n")
    with pytest.raises(DataFormatError):
        read_matrix(p)


def test_json_uses_17_digits():
    text = dumps({"x": 0.1, "n": 3, "v": [1 / 3, float("nan")], "s": "a"})
    doc = json.loads(text)
    assert "0.10000000000000001" in text
    assert doc["x"] == 0.1 and doc["v"][0] == 1 / 3 and doc["v"][1] is None


# --- grids ---------------------------------------------------------------------------

def test_parse_grid():
    assert parse_grid("0.0001:1:10") == make_log_grid(0.0001, 1, 10)
    assert parse_grid("0.5") == [0.5]
    assert parse_grid("0.5:0.5:1") == [0.5]


# --- fit -----------------------------------------------------------------------------

def test_fit_delta_zero_is_ols(capsys):
    code, out, _ = run(capsys, "fit", "--task", "linreg-strong", "--data", DATA / "toy.csv",
                       "--theta", DATA / "toy_theta.csv", "--delta", 0)
    assert code == 0
    doc = json.loads(out)
    expect = json.loads((DATA / "toy_ols.json").read_text())["beta_ols"]
    assert doc["beta"] == pytest.approx(expect, abs=1e-6)
    assert doc["status"] == "converged"
    assert set(doc["manifest"]) == {"command", "params", "seed", "version", "inputs"}
    assert len(doc["manifest"]["inputs"]["data"]["sha256"]) == 64


def test_fit_missing_theta_is_usage_error(capsys):
    code, _, err = run(capsys, "fit", "--task", "linreg-strong", "--data", DATA / "toy.csv",
                       "--delta", 0.1)
    assert code == 2 and "--theta" in err
    code, out, _ = run(capsys, "fit", "--task", "linreg-strong", "--data", DATA / "toy.csv",
                       "--delta", 0.1, "--no-prior")
    assert code == 0 and json.loads(out)["kappa"] == []


def test_fit_p_inf_and_bad_p(capsys):
    code, out, _ = run(capsys, "fit", "--task", "linreg-strong", "--data", DATA / "toy.csv",
                       "--theta", DATA / "toy_theta.csv", "--p", "inf", "--delta", 0.1)
    assert code == 0 and json.loads(out)["manifest"]["params"]["p"] == "inf"
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--task", "linreg-strong", "--data", str(DATA / "toy.csv"), "--p", "3",
              "--delta", "0.1", "--no-prior"])
    assert exc.value.code == 2


def test_fit_data_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,x2\n1,2\n")
    code, _, err = run(capsys, "fit", "--task", "linreg-strong", "--data", bad, "--no-prior",
                       "--delta", 0.1)
    assert code == 3 and "data error" in err


def test_fit_nonconvergence_exit_code(capsys, tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 3))
    write_dataset(tmp_path / "c.csv", Dataset(X, np.where(X[:, 0] > 0, 1.0, -1.0), "classification"))
    code, out, _ = run(capsys, "fit", "--task", "logistic", "--data", tmp_path / "c.csv",
                       "--no-prior", "--delta", 0.001, "--max-iter", 1)
    assert code == 4 and json.loads(out)["status"] == "max_iter"


def test_fit_weak_and_mahalanobis(capsys, tmp_path):
    code, out, _ = run(capsys, "fit", "--task", "linreg-weak", "--data", DATA / "toy.csv",
                       "--theta", DATA / "toy_theta.csv", "--delta", 0.1, "--lambda-inv", 0.5)
    assert code == 0
    (tmp_path / "L.csv").write_text("1,0,0\n0,1,0\n0,0,1\n")
    code, out2, _ = run(capsys, "fit", "--task", "mahalanobis", "--data", DATA / "toy.csv",
                        "--theta", DATA / "toy_theta.csv", "--delta", 0.1,
                        "--lambda-matrix", tmp_path / "L.csv")
    code3, out3, _ = run(capsys, "fit", "--task", "linreg-strong", "--data", DATA / "toy.csv",
                         "--theta", DATA / "toy_theta.csv", "--delta", 0.1)
    assert code == 0 and code3 == 0
    assert json.loads(out2)["objective"] == pytest.approx(json.loads(out3)["objective"], rel=1e-8)
    code, _, err = run(capsys, "fit", "--task", "linreg-weak", "--data", DATA / "toy.csv",
                       "--theta", DATA / "toy_theta.csv", "--delta", 0.1)
    assert code == 2 and "lambda-inv" in err


def test_fit_writes_out_file(capsys, tmp_path):
    out = tmp_path / "r.json"
    code, stdout, _ = run(capsys, "fit", "--task", "linreg-strong", "--data", DATA / "toy.csv",
                          "--no-prior", "--delta", 0.1, "--out", out)
    assert code == 0 and stdout == "" and json.loads(out.read_text())["status"] == "converged"


# --- gridsearch ------------------------------------------------------------------------

def test_gridsearch(capsys, tmp_path):
    args = ["gridsearch", "--task", "linreg-weak", "--train", DATA / "toy.csv",
            "--val", DATA / "toy.csv", "--theta", DATA / "toy_theta.csv"]
    code, out, _ = run(capsys, *args, "--delta-grid", "0.0001:1:10", "--lambda-inv-grid", "0.1:10:3")
    doc = json.loads(out)
    assert code == 0 and len(doc["table"]) == 30
    assert doc["manifest"]["params"]["delta_grid"] == {"lo": 0.0001, "hi": 1.0, "n": 10}
    code, out, _ = run(capsys, *args, "--delta-grid", "0.25", "--lambda-inv-grid", "2")
    assert json.loads(out)["best_params"] == {"delta": 0.25, "lambda_inv": 2.0}
    with pytest.raises(SystemExit) as exc:
        main([str(a) for a in args] + ["--delta-grid", "1:0.1"])
    assert exc.value.code == 2


# --- simulate --------------------------------------------------------------------------

def test_simulate_files_identical(capsys, tmp_path):
    argv = ["simulate", "--sim", "1", "--reps", "1", "--seed", "3", "--rho-list", "0.9",
            "--n", "20"]
    for tag in ("a", "b"):
        assert run(capsys, *argv, "--out-prefix", tmp_path / tag)[0] == 0
    for ext in ("json", "csv"):
        assert (tmp_path / f"a.{ext}").read_bytes() == (tmp_path / f"b.{ext}").read_bytes()
    _, out, err = run(capsys, *argv, "--runtime-out", tmp_path / "t.json")
    assert "rep 0" in err and json.loads(out)["n_success"] == 1
    assert "total_seconds" in json.loads((tmp_path / "t.json").read_text())


def test_simulate_sim3_flags(capsys):
    code, out, _ = run(capsys, "simulate", "--sim", "3", "--weights", "1,-0.5,0.2", "--varrho", "0.9",
                       "--reps", "1", "--rho-list", "0.9", "--methods", "KG", "-q")
    cfg = json.loads(out)["config"]
    assert code == 0 and cfg["weights"] == [1.0, -0.5, 0.2] and cfg["varrho"] == 0.9
    code, _, _ = run(capsys, "simulate", "--sim", "3", "--weights", "1,2", "--reps", "1")
    assert code == 2


def test_simulate_all_fail_exit(capsys, monkeypatch):
    from kgwdro import simulation

    def boom(cfg, rep):
        raise RuntimeError("no")

    monkeypatch.setattr(simulation, "run_one_rep", boom)
    code, _, _ = run(capsys, "simulate", "--sim", "1", "--reps", "2", "-q")
    assert code == 5


def test_jobs_env(capsys, monkeypatch):
    monkeypatch.setenv("KGWDRO_JOBS", "x")
    code, _, err = run(capsys, "simulate", "--sim", "1", "--reps", "1", "-q")
    assert code == 2 and "KGWDRO_JOBS" in err


# --- contour / penalty ---------------------------------------------------------------

def _curves(text):
    rows = [r.split(",") for r in text.strip().splitlines()[1:]]
    out = {}
    for label, a, k, i, x1, x2 in rows:
        out.setdefault(label, {}).setdefault(int(k), []).append((float(x1), float(x2)))
    return {lab: {k: np.array(v) for k, v in c.items()} for lab, c in out.items()}


def test_contour_three_curves(capsys):
    code, out, _ = run(capsys, "contour", "--theta", "2,1", "--a-list", "inf,0.5,10", "--level", 1)
    assert code == 0
    curves = _curves(out)
    assert list(curves) == ["inf", "0.5", "10"]
    u = np.array([2.0, 1.0]) / math.sqrt(5)
    perp = lambda P: np.abs(P @ np.array([-u[1], u[0]]))  # noqa: E731
    assert len(curves["inf"]) == 2
    for line in curves["inf"].values():
        assert perp(line) == pytest.approx(1.0)
    assert np.max(curves["0.5"][0] @ u) == pytest.approx(math.sqrt(5.5 / 0.5), rel=1e-6)


def test_contour_zero_level_and_circle(capsys):
    _, out, _ = run(capsys, "contour", "--theta", "2,1", "--a-list", "inf,0.5,10", "--level", 0)
    for c in _curves(out).values():
        assert c[0].tolist() == [[0.0, 0.0]]
    _, out, _ = run(capsys, "contour", "--theta", "2,1", "--a-list", "1e9", "--level", 1,
                    "--resolution", 2001)
    pts = _curves(out)["1e9"][0]
    # Hausdorff distance to the unit circle: radial gap plus chord sagitta
    assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 1)) < 1e-3
    assert 1 - math.cos(math.pi / 2000) < 1e-3


def test_contour_rejects_3d(capsys):
    assert run(capsys, "contour", "--theta", "1,2,3", "--a-list", "1")[0] == 2


def test_penalty_command(capsys):
    code, out, _ = run(capsys, "penalty", "--beta", "5,1,2", "--theta-vec", "1,0,0", "--p", "1")
    doc = json.loads(out)
    assert code == 0 and doc["value"] == 3 and doc["kappa"] == [5]
    _, out, _ = run(capsys, "penalty", "--beta", "1,0", "--theta-vec", "2,1", "--kind", "weak",
                    "--lambda-inv", "0")
    assert json.loads(out)["value"] == pytest.approx(math.sqrt(5) / 5)
    assert run(capsys, "penalty", "--beta", "1,0", "--theta-vec", "2,1,3")[0] == 2
