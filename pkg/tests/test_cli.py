import json

import numpy as np
import pytest

from splinesae.cli import main
from splinesae.sim import SimScenario, generate_dataset


def write_units(path, model="M2", m=30, seed=0, sigma_e=1.0):
    data, _ = generate_dataset(SimScenario(model, m=m, sigma_e=sigma_e, base_seed=seed), 0)
    lines = ["area_id,y,x,z"]
    for a, y, x, z in zip(data.area_id, data.y, data.x[:, 1], data.z):
        lines.append(f"A{a},{float(y)!r},{float(x)!r},{float(z)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def units(tmp_path):
    return write_units(tmp_path / "units.csv")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_fit_report(capsys, units):
    code, out, _ = run(capsys, "fit", "--input", str(units))
    assert code == 0
    rep = json.loads(out)
    assert [c["name"] for c in rep["coefficients"]] == ["(intercept)", "x", "z"]
    assert set(rep["variance_components"]) == {"sigma_gamma_sq", "sigma_sq", "lambda"}
    assert rep["config"]["knots_resolved"] == rep["K"]
    assert len(rep["input_sha256"]) == 64 and rep["version"]
    assert rep["convergence"]["converged"]


def test_fit_is_byte_identical(tmp_path, units):
    out = tmp_path / "out"
    assert main(["fit", "--input", str(units), "--out", str(out)]) == 0
    first = (out / "fit.json").read_bytes()
    assert main(["fit", "--input", str(units), "--out", str(out)]) == 0
    assert (out / "fit.json").read_bytes() == first


def test_empty_file(capsys, tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    code, _, err = run(capsys, "fit", "--input", str(p))
    assert code == 2 and "no-records" in err
    p.write_text("area_id,y,x,z\n")
    code, _, err = run(capsys, "fit", "--input", str(p))
    assert code == 2 and "no-records" in err


@pytest.mark.parametrize(
    "body,fragment",
    [
        ("area_id,y,x,z\nA,1,2,3\nA,oops,2,3\n", "line 3"),
        ("area_id,y,x,z\nA,1,2\n", "line 2"),
        ("id,y,x,z\nA,1,2,3\n", "line 1"),
        ("area_id,y,x,z\nA,1,,3\n", "line 2"),
    ],
)
def test_malformed_csv(capsys, tmp_path, body, fragment):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    code, _, err = run(capsys, "fit", "--input", str(p))
    assert code == 2 and fragment in err


def test_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "fit", "--input", str(tmp_path / "nope.csv"))
    assert code == 2


def test_bad_flags(capsys, units):
    assert run(capsys, "fit", "--input", str(units), "--knots", "zero")[0] == 2
    assert run(capsys, "fit", "--input", str(units), "--alpha", "2")[0] == 2
    assert run(capsys, "fit", "--input", str(units), "--method", "bayes")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


def test_varcomp_failure_exit_3(capsys, tmp_path):
    rng = np.random.default_rng(0)
    lines = ["area_id,y,x,z"]
    for a in range(10):
        for _ in range(3):
            x = rng.uniform()
            lines.append(f"{a},{1 + 2 * x + 0.5 * a / 10},{x},{a / 10}")
    p = tmp_path / "exact.csv"
    p.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "fit", "--input", str(p))
    assert code == 3 and "degenerate-response" in err


def test_predict_sample_mean_fallback(capsys, units):
    code, out, _ = run(capsys, "predict", "--input", str(units))
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "area_id,estimate,mse_fixed,mse_gamma,mse_correction,mse_total,rmse,flags"
    assert len(lines) == 31
    assert all("sample-mean-auxiliary" in ln for ln in lines[1:])


def test_predict_with_targets(capsys, tmp_path, units):
    t = tmp_path / "targets.csv"
    t.write_text("area_id,x\nA0,1.5\nA3,2.0\n")
    code, out, _ = run(capsys, "predict", "--input", str(units), "--targets", str(t))
    assert code == 0
    rows = {ln.split(",")[0]: ln for ln in out.strip().splitlines()[1:]}
    assert "sample-mean-auxiliary" not in rows["A0"]
    assert "sample-mean-auxiliary" in rows["A1"]


def test_predict_unknown_target_area(capsys, tmp_path, units):
    t = tmp_path / "targets.csv"
    t.write_text("area_id,x\nZZ,1.5\n")
    code, _, err = run(capsys, "predict", "--input", str(units), "--targets", str(t))
    assert code == 2 and "unknown-area" in err


def test_predict_single_area(capsys, tmp_path):
    p = tmp_path / "one.csv"
    p.write_text("area_id,y,x,z\nA,1,2,3\nA,2,3,3\nA,3,1,3\n")
    code, _, err = run(capsys, "predict", "--input", str(p))
    assert code == 2 and "insufficient-distinct-areas" in err


def test_predict_writes_files(tmp_path, units):
    out = tmp_path / "out"
    assert main(["predict", "--input", str(units), "--out", str(out)]) == 0
    assert (out / "predictions.csv").exists()
    meta = json.loads((out / "predict.json").read_text())
    assert meta["config"]["command"] == "predict" and len(meta["predictions"]) == 30


def test_test_command_alpha(capsys, tmp_path):
    units = write_units(tmp_path / "m2.csv", "M2", 60, seed=1, sigma_e=0.5)
    code, out, _ = run(capsys, "test", "--input", str(units), "--alpha", "0.01")
    assert code == 0
    rep = json.loads(out)
    assert rep["h1"]["alpha"] == 0.01
    assert rep["h1"]["reject"] == (rep["h1"]["p_value"] < 0.01)
    assert rep["h1"]["reject"] and not rep["h2"]["reject"]
    assert rep["h2"]["df_or_mixture"] == "0.5*chi2_0+0.5*chi2_1"
    assert -1 <= rep["diagnostic"]["corr_with_z"] <= 1


def test_diagnose(capsys, units):
    code, out, _ = run(capsys, "diagnose", "--input", str(units))
    assert code == 0
    rep = json.loads(out)
    assert len(rep["areas"]) == 30 and "beta1_within" in rep


def test_simulate_single_replicate(capsys, tmp_path):
    out = tmp_path / "sim"
    code, _, err = run(capsys, "simulate", "--model", "M5", "--m", "30", "--replicates", "1", "--out", str(out))
    assert code == 0 and "RB and CV" in err
    rep = json.loads((out / "simulate_M5_m30.json").read_text())
    assert rep["metrics"]["rb"] is None and rep["metrics"]["cv"] is None
    rows = (out / "simulate_M5_m30_replicates.csv").read_text().splitlines()
    assert rows[0] == "rep,area,estimate,truth,mse,reject_h1,reject_h2"
    assert len(rows) == 31


def test_simulate_deterministic(tmp_path):
    args = ["simulate", "--model", "M1", "--m", "30", "--replicates", "3", "--seed", "9"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("simulate_M1_m30.json", "simulate_M1_m30_replicates.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_invalid(capsys):
    assert run(capsys, "simulate", "--model", "M7")[0] == 2
    assert run(capsys, "simulate", "--replicates", "0")[0] == 2
    assert run(capsys, "simulate", "--sigma-e", "-1")[0] == 2
