import json

import numpy as np
import pytest

from clusteriv.cli import main

TEST_KEYS = {"method", "kernel", "estimator", "beta", "statistic", "threshold", "p_value",
             "p_value_normal", "reject", "alpha", "variance", "k", "G", "n", "warnings"}
CI_KEYS = {"method", "kernel", "estimator", "alpha", "intervals", "unbounded", "grid",
           "refined", "empty", "warnings"}


@pytest.fixture
def data_csv(tmp_path):
    rng = np.random.default_rng(5)
    n, G = 200, 40
    reign = np.repeat(np.arange(G), n // G)
    fbm, sis = rng.standard_normal((2, n))
    queen = 0.8 * fbm + 0.5 * sis + rng.standard_normal(n)
    war = 0.4 * queen + rng.standard_normal(n)
    path = tmp_path / "d.csv"
    rows = ["war,queen,fbm,sis,dup,reign,age"]
    age = rng.standard_normal(n)
    for i in range(n):
        rows.append(f"{war[i]},{queen[i]},{fbm[i]},{sis[i]},{2 * fbm[i]},r{reign[i]},{age[i]}")
    path.write_text("\n".join(rows) + "\n")
    return path


def base(data_csv, *extra):
    return ["--data", str(data_csv), "--y", "war", "--x", "queen", "--z", "fbm,sis",
            "--cluster", "reign", *extra]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_test_command_json_schema(data_csv, capsys):
    code, out, _ = run(["test", *base(data_csv, "--method", "clj-ar", "--beta", "0",
                                      "--alpha", "0.05")], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["schema_version"] == 1 and doc["command"] == "test"
    assert set(doc["result"]) == TEST_KEYS
    assert isinstance(doc["result"]["reject"], bool)
    assert "max_leverage" in doc["validation"]


@pytest.mark.parametrize("method", ["cluster-ar", "clj-score", "clmi-ar"])
def test_test_command_methods(data_csv, capsys, method):
    code, out, _ = run(["test", *base(data_csv, "--method", method, "--beta", "0.4")], capsys)
    assert code == 0 and json.loads(out)["result"]["method"] == method


def test_text_format_and_out_file(data_csv, tmp_path, capsys):
    code, out, _ = run(["test", *base(data_csv, "--format", "text")], capsys)
    assert code == 0 and out.startswith("clj-ar: beta=")
    target = tmp_path / "res.json"
    code, out, err = run(["test", *base(data_csv, "--out", str(target))], capsys)
    assert code == 0 and out == "" and "clj-ar" in err
    assert json.loads(target.read_text())["command"] == "test"


def test_controls_and_many_controls(data_csv, capsys):
    for kernel in ("plain", "many-controls"):
        code, out, _ = run(["test", *base(data_csv, "--controls", "age", "--kernel", kernel)],
                           capsys)
        assert code == 0, out


def test_usage_errors(data_csv, capsys):
    argv = ["test", "--data", str(data_csv), "--y", "war", "--x", "queen", "--z", "fbm"]
    assert run(argv, capsys)[0] == 1
    assert run(["test", *base(data_csv, "--method", "nope")], capsys)[0] == 1
    assert run([], capsys)[0] == 1
    assert run(["simulate", "size", "--zeta", "1.5", "--reps", "1"], capsys)[0] == 1


def test_data_errors(data_csv, tmp_path, capsys):
    code, _, err = run(["test", "--data", str(data_csv), "--y", "war", "--x", "queen",
                        "--z", "fbm,dup", "--cluster", "reign"], capsys)
    assert code == 2 and "RankDeficient" in err
    assert run(["test", *base(tmp_path / "missing.csv")], capsys)[0] == 2
    code, _, err = run(["test", "--data", str(data_csv), "--y", "war", "--x", "nope",
                        "--z", "fbm", "--cluster", "reign"], capsys)
    assert code == 2 and "MissingColumn" in err


def test_ci_command(data_csv, tmp_path, capsys):
    grid_file = tmp_path / "grid.csv"
    code, out, _ = run(["ci", *base(data_csv, "--method", "cluster-ar", "--grid", "-1:2:0.05",
                                    "--dump-grid", str(grid_file))], capsys)
    assert code == 0
    doc = json.loads(out)
    assert set(doc["result"]) == CI_KEYS
    lo, hi = doc["result"]["intervals"][0]
    assert lo < 0.4 < hi
    lines = grid_file.read_text().splitlines()
    assert lines[0] == "beta,statistic,p_value,reject" and len(lines) == 62


def test_ci_empty_and_unbounded(data_csv, capsys):
    code, out, _ = run(["ci", *base(data_csv, "--method", "cluster-ar",
                                    "--grid", "5:6:0.5")], capsys)
    res = json.loads(out)["result"]
    assert code == 0 and res["intervals"] == [] and "empty confidence set" in res["warnings"]
    code, out, _ = run(["ci", *base(data_csv, "--grid", "0.39:0.41:0.01")], capsys)
    assert json.loads(out)["result"]["unbounded"] == [{"lower": True, "upper": True}]


def test_diagnose(data_csv, capsys):
    code, out, _ = run(["diagnose", *base(data_csv)], capsys)
    stats = json.loads(out)["result"]["statistics"]
    assert code == 0 and [s["flavor"] for s in stats] == ["homoskedastic", "robust", "effective"]


def test_simulate_deterministic(tmp_path, capsys):
    argv = ["simulate", "size", "--n", "120", "--G", "30", "--k", "1,3",
            "--methods", "clj-ar,clmi-ar", "--reps", "20", "--seed", "7"]
    code1, out1, _ = run(argv, capsys)
    code2, out2, _ = run(argv + ["--threads", "2"], capsys)
    assert code1 == code2 == 0 and out1 == out2
    assert out1.splitlines()[0] == "method,k_or_beta,rate,se,reps,errors"
    assert len(out1.splitlines()) == 5


def test_simulate_power_grid(capsys):
    code, out, _ = run(["simulate", "power", "--n", "60", "--G", "20", "--k", "2",
                        "--methods", "clj-ar", "--reps", "3", "--beta-grid", "-1:1:0.1",
                        "--format", "json"], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["schema_version"] == 1 and len(doc["rows"]) == 21


def test_config_file_merges_under_flags(data_csv, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"method": "cluster-ar", "beta": [0.1], "alpha": 0.1}))
    code, out, _ = run(["--config", str(cfg), "test", *base(data_csv, "--alpha", "0.2")], capsys)
    res = json.loads(out)["result"]
    assert code == 0 and res["method"] == "cluster-ar" and res["alpha"] == 0.2
    assert res["beta"] == [0.1]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run(["--config", str(bad), "test", *base(data_csv)], capsys)[0] == 1
