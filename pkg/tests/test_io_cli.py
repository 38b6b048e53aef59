import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from cate_forge import io
from cate_forge.aggregation import CatePredictionMatrix
from cate_forge.cli import EXIT_INPUT, EXIT_OK, main
from cate_forge.errors import InvalidInputError
from cate_forge.learners import SiteDataset


def write(path, text):
    path.write_text(text)
    return str(path)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# --- CSV readers and writers ----------------------------------------------------------

def test_site_csv_roundtrip(tmp_path):
    gen = np.random.default_rng(0)
    x = gen.normal(size=(12, 3))
    data = SiteDataset(gen.normal(size=12) / 3, np.tile([0, 1], 6), x)
    p = str(tmp_path / "site.csv")
    io.write_site_csv(p, data)
    back = io.load_site_csv(p)
    assert np.array_equal(back.outcomes, data.outcomes)
    assert np.array_equal(back.covariates, data.covariates)
    assert np.array_equal(back.treatments, data.treatments)


def test_site_csv_bad_treatment_reports_location(tmp_path):
    rows = ["y,a,x1"] + [f"{i}.0,{i % 2},0.{i}" for i in range(1, 11)]
    rows[7] = "7.0,2,0.7"
    p = write(tmp_path / "bad.csv", "\n".join(rows) + "\n")
    with pytest.raises(io.ParseError) as exc:
        io.load_site_csv(p)
    assert exc.value.row == 7
    assert exc.value.column == "a"
    assert "row 7" in str(exc.value)


@pytest.mark.parametrize("text, fragment", [
    ("", "empty"),
    ("y,a,x1\n", "no data rows"),
    ("y,a,x1\n1,0\n", "expected 3 fields"),
    ("y,a,x1\n1,0,abc\n", "non-numeric"),
    ("y,a,x1\n1,0,nan\n", "non-finite"),
    ("a,y,x1\n1,0,1\n", "header"),
    ("y,a,x2\n1,0,1\n", "x1"),
])
def test_site_csv_errors(tmp_path, text, fragment):
    p = write(tmp_path / "s.csv", text)
    with pytest.raises(io.ParseError, match=fragment):
        io.load_site_csv(p)


def test_missing_file(tmp_path):
    with pytest.raises(io.ParseError, match="cannot read"):
        io.load_predictions_csv(str(tmp_path / "nope.csv"))


def test_predictions_roundtrip_is_lossless(tmp_path):
    v = np.array([[0.1, 1 / 3], [np.pi, -2e-300]])
    p = str(tmp_path / "p.csv")
    io.write_predictions_csv(p, CatePredictionMatrix(v, ("north", "south")))
    back = io.load_predictions_csv(p)
    assert back.site_ids == ("north", "south")
    assert np.array_equal(back.values, v)


def test_predictions_duplicate_labels(tmp_path):
    p = write(tmp_path / "p.csv", "a,a\n1,2\n")
    with pytest.raises(io.ParseError):
        io.load_predictions_csv(p)


def test_weights_json_forms(tmp_path):
    a = write(tmp_path / "a.json", '{"weights": [0.25, 0.75]}')
    b = write(tmp_path / "b.json", "[1, 0]")
    np.testing.assert_array_equal(io.load_weights_json(a), [0.25, 0.75])
    np.testing.assert_array_equal(io.load_weights_json(b), [1.0, 0.0])


def test_covariates_and_polytope(tmp_path):
    x = np.arange(6.0).reshape(3, 2)
    p = str(tmp_path / "x.csv")
    io.write_covariates_csv(p, x)
    assert np.array_equal(io.load_covariates_csv(p), x)
    poly = io.load_polytope_csv(write(tmp_path / "v.csv", "s1,s2\n1,0\n0.5,0.5\n"))
    assert poly.matrix.shape == (2, 2)
    with pytest.raises(InvalidInputError):
        io.load_polytope_csv(write(tmp_path / "w.csv", "s1,s2\n1,1\n"))


# --- weights ----------------------------------------------------------------------------

def test_weights_single_site(tmp_path):
    preds = write(tmp_path / "p.csv", "site_1\n1\n2\n3\n")
    out = str(tmp_path / "w.json")
    assert main(["weights", "--predictions", preds, "--out", out]) == EXIT_OK
    w = read_json(out)
    assert w["weights"] == [1.0]
    assert w["worst_case_regret"] == 0.0
    assert w["site_ids"] == ["site_1"]


def test_weights_oracle_check(tmp_path):
    gen = np.random.default_rng(4)
    v = gen.normal(size=(200, 3)) + [0.5, -0.5, 1.0]
    p = str(tmp_path / "p.csv")
    io.write_predictions_csv(p, CatePredictionMatrix(v))
    out = str(tmp_path / "w.json")
    assert main(["weights", "--predictions", p, "--oracle-check", "--out", out]) == EXIT_OK
    w = read_json(out)
    assert w["oracle_gap"] <= 1e-6
    assert sum(w["weights"]) == pytest.approx(1.0)
    assert w["converged"] is True


def test_weights_relative_risk_with_baseline(tmp_path):
    gen = np.random.default_rng(1)
    v = gen.normal(size=(100, 3))
    p = str(tmp_path / "p.csv")
    io.write_predictions_csv(p, CatePredictionMatrix(v))
    base = str(tmp_path / "b.csv")
    io.write_vector_csv(base, "cate", v[:, 1])
    out = str(tmp_path / "w.json")
    code = main(["weights", "--predictions", p, "--method", "relative-risk", "--baseline", base,
                 "--oracle-check", "--out", out])
    assert code == EXIT_OK
    np.testing.assert_allclose(read_json(out)["weights"], [0, 1, 0], atol=1e-6)


def test_weights_risk_2site_and_pooled(tmp_path, capsys):
    # mean squared gap between the columns is (4 + 0) / 2 = 2
    p = write(tmp_path / "p.csv", "s1,s2\n2,0\n0,0\n")
    assert main(["weights", "--predictions", p, "--method", "risk-2site",
                 "--sigma1-sq", "1", "--sigma2-sq", "0"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["weights"] == [0.75, 0.25]
    assert main(["weights", "--predictions", p, "--method", "pooled", "--sample-sizes", "30,10"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["weights"] == [0.75, 0.25]
    assert main(["weights", "--predictions", p, "--method", "risk-2site"]) == EXIT_INPUT


def test_weights_malformed_csv(tmp_path, capsys):
    p = write(tmp_path / "p.csv", "s1,s2\n1,0\n0,oops\n")
    assert main(["weights", "--predictions", p]) == EXIT_INPUT
    assert "row 2" in capsys.readouterr().err


def test_weights_polytope_shape_checked(tmp_path):
    p = write(tmp_path / "p.csv", "s1,s2\n1,0\n0,1\n")
    v = write(tmp_path / "v.csv", "a,b,c\n1,0,0\n")
    assert main(["weights", "--predictions", p, "--polytope", v]) == EXIT_INPUT


# --- simulate -----------------------------------------------------------------------------

SMALL_SIM = ["simulate", "--setting", "A", "--reps", "2", "--sites", "4", "--n-total", "400",
             "--n-target", "300", "--seed", "3", "--threads", "2"]


def test_simulate_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(SMALL_SIM + ["--out", str(a / "study.csv")]) == EXIT_OK
    assert main(SMALL_SIM + ["--threads", "1", "--out", str(b / "study.csv")]) == EXIT_OK
    assert (a / "study.csv").read_bytes() == (b / "study.csv").read_bytes()
    assert (a / "plotdata.csv").read_bytes() == (b / "plotdata.csv").read_bytes()


def test_simulate_csv_layout(tmp_path):
    out = tmp_path / "study.csv"
    assert main(SMALL_SIM + ["--allocation", "balanced", "--allocation", "one-large:2",
                             "--out", str(out)]) == EXIT_OK
    header, *rows = out.read_text().splitlines()
    assert header == ",".join(io.STUDY_HEADER)
    # two scenarios x three methods x (four sites + worst case)
    assert len(rows) == 2 * 3 * 5
    assert {r.split(",")[0] for r in rows} == {"balanced", "one-large:2"}


def test_simulate_figures(tmp_path):
    out = tmp_path / "study.csv"
    assert main(SMALL_SIM + ["--allocation", "half-first", "--figures", "--out", str(out)]) == EXIT_OK
    names = sorted(os.listdir(tmp_path))
    assert "study_per_site_half-first.png" in names
    assert "study_worst_case.png" in names
    assert (tmp_path / "study_worst_case.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_simulate_smoke_default_size(tmp_path):
    start = time.perf_counter()
    code = main(["simulate", "--reps", "1", "--seed", "0", "--out", str(tmp_path / "s.csv")])
    assert code == EXIT_OK
    assert time.perf_counter() - start < 60


def test_simulate_bad_setting_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--setting", "C", "--out", str(tmp_path / "s.csv")])
    assert exc.value.code == 2


def test_simulate_bad_method(tmp_path):
    assert main(SMALL_SIM + ["--methods", "regret,average", "--out", str(tmp_path / "s.csv")]) == EXIT_INPUT


def test_threads_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("CATE_FORGE_THREADS", "3")
    out = tmp_path / "study.csv"
    args = SMALL_SIM[:-2]
    assert main(args + ["--out", str(out)]) == EXIT_OK
    monkeypatch.setenv("CATE_FORGE_THREADS", "1")
    out1 = tmp_path / "one" / "study.csv"
    assert main(args + ["--out", str(out1)]) == EXIT_OK
    assert out.read_bytes() == out1.read_bytes()
    monkeypatch.setenv("CATE_FORGE_THREADS", "many")
    assert main(args + ["--out", str(out)]) == EXIT_INPUT


# --- evaluate -------------------------------------------------------------------------------

def test_evaluate_identical_files(tmp_path, capsys):
    p = write(tmp_path / "m.csv", "cate\n1\n2\n3\n")
    assert main(["evaluate", "--model-preds", p, "--truth-preds", p]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"mse": 0.0}


def test_evaluate_hand_computed(tmp_path):
    m = write(tmp_path / "m.csv", "cate\n0\n1\n2\n3\n4\n")
    t = write(tmp_path / "t.csv", "s1,s2\n0,1\n1,1\n2,1\n3,1\n6,1\n")
    out = str(tmp_path / "e.json")
    assert main(["evaluate", "--model-preds", m, "--truth-preds", t, "--out", out]) == EXIT_OK
    r = read_json(out)
    # s1: residuals 0,0,0,0,-2 -> 4/5; s2: -1,0,1,2,3 -> 15/5
    assert r["per_column_mse"] == {"s1": 0.8, "s2": 3.0}
    assert r["worst_case_mse"] == 3.0


def test_evaluate_vertex_mixture(tmp_path, capsys):
    m = write(tmp_path / "m.csv", "cate\n0\n1\n2\n3\n4\n")
    t = write(tmp_path / "t.csv", "s1,s2\n0,1\n1,1\n2,1\n3,1\n6,1\n")
    w = write(tmp_path / "w.json", '{"weights": [0, 1]}')
    assert main(["evaluate", "--model-preds", m, "--truth-preds", t, "--mixture", w]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["mse"] == 3.0


def test_evaluate_length_mismatch(tmp_path):
    m = write(tmp_path / "m.csv", "cate\n0\n1\n")
    t = write(tmp_path / "t.csv", "s1\n0\n1\n2\n")
    assert main(["evaluate", "--model-preds", m, "--truth-preds", t]) == EXIT_INPUT


# --- aggregate -------------------------------------------------------------------------------

def test_aggregate_end_to_end(tmp_path):
    from cate_forge.simulation import DgpConfig, generate_site, generate_target_covariates
    cfg = DgpConfig(setting="A", n_sites=3, n_total=900, n_target=200, seed=8)
    paths = []
    for s in range(3):
        p = str(tmp_path / f"site{s}.csv")
        io.write_site_csv(p, generate_site(cfg, s))
        paths.append(p)
    target = str(tmp_path / "target.csv")
    io.write_covariates_csv(target, generate_target_covariates(cfg))
    out = tmp_path / "out"
    assert main(["aggregate", "--sites", *paths, "--target", target, "--out-dir", str(out)]) == EXIT_OK
    w = read_json(out / "weights.json")
    assert sum(w["weights"]) == pytest.approx(1.0)
    preds = io.load_predictions_csv(str(out / "predictions.csv"))
    ens = io.load_vector_csv(str(out / "ensemble.csv"))
    np.testing.assert_allclose(ens, preds.values @ np.array(w["weights"]), atol=1e-12)


def test_module_entry_point(tmp_path):
    p = write(tmp_path / "p.csv", "site_1\n1\n2\n")
    res = subprocess.run([sys.executable, "-m", "cate_forge", "weights", "--predictions", p],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert json.loads(res.stdout)["weights"] == [1.0]
