import json

import numpy as np
import pytest

from qlandscape.cli import main
from qlandscape.dynamics import ControlField, ControlSystem
from qlandscape.io import matrix_to_json, save_field, save_system
from qlandscape.landscape import Objective


@pytest.fixture
def files(tmp_path):
    paths = {name: tmp_path / f"{name}.json" for name in ("diag", "sys", "field", "full", "ffield", "obj")}
    save_system(paths["diag"], ControlSystem(np.diag([1j, -2j, 1j]), (np.diag([2j, -1j, -1j]),)))
    system = ControlSystem.random(2, 1)
    save_system(paths["sys"], system)
    save_field(paths["field"], ControlField.random(2.0, 8, 1.0, 2))
    save_system(paths["full"], ControlSystem.fully_actuated(2))
    save_field(paths["ffield"], ControlField.random(1.0, 4, 1.0, 3, num_generators=3))
    paths["obj"].write_text(json.dumps(Objective.random_gate(2, 4).to_dict()))
    paths["tmp"] = tmp_path
    paths["system"] = system
    return paths


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_larc_diagonal_not_controllable(files, capsys):
    code, out, _ = run(capsys, "larc", "--system", files["diag"])
    assert code == 0
    assert "NOT controllable" in out
    dim = int(out.split("dimension")[1].split()[0])
    assert dim <= 2


def test_larc_controllable(files, capsys):
    code, out, _ = run(capsys, "larc", "--system", files["sys"])
    assert code == 0 and "NOT" not in out and "3 of 3" in out


def test_missing_file_exit_one_with_path(files, capsys):
    missing = files["tmp"] / "nowhere.json"
    code, _, err = run(capsys, "propagate", "--system", missing, "--field", files["field"])
    assert code == 1
    assert str(missing) in err


def test_usage_errors_exit_one(files, capsys):
    assert run(capsys, "larc", "--system", files["sys"], "--bogus")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "reproduce", "no-such-preset")[0] == 1


def test_propagate_and_corank(files, capsys):
    code, out, _ = run(capsys, "propagate", "--system", files["sys"], "--field", files["field"],
                       "--objective", files["obj"])
    doc = json.loads(out)
    assert code == 0 and 0 <= doc["normalized"] <= 1 and "U_T" in doc
    code, out, _ = run(capsys, "corank", "--system", files["sys"], "--field", files["field"], "--tol-rank-factor", "1e-6")
    doc = json.loads(out)
    assert code == 0 and doc["corank"] + doc["rank"] == 3
    assert doc["exp_margin_violations"] == []


def test_optimize_writes_output(files, capsys):
    out_path = files["tmp"] / "run.json"
    code, _, _ = run(capsys, "optimize", "--system", files["sys"], "--objective", files["obj"], "--T", 4,
                     "--p", 16, "--max-iters", 20, "--seed", 5, "--out", out_path)
    assert code == 0
    doc = json.loads(out_path.read_text())
    assert doc["final_value"] >= doc["trace"][0]


def test_synth_singular_degenerate_seed_exit_two(files, capsys):
    b = files["system"].generators[0]
    code, out, err = run(capsys, "synth-singular", "--system", files["sys"], "--raw", "--steps", 200,
                         "--B", json.dumps(matrix_to_json(b)))
    assert code == 2 and "numerical failure" in err
    code, out, _ = run(capsys, "synth-singular", "--system", files["sys"], "--steps", 200)
    assert code == 0 and not json.loads(out)["diagnostics"]["non_singular_seed"]


def test_scan_and_cascade(files, capsys):
    code, out, _ = run(capsys, "scan-fix", "--system", files["full"], "--field", files["ffield"], "--num", 5,
                       "--format", "csv")
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "K,corank,residual" and len(lines) == 6
    code, out, _ = run(capsys, "cascade", "--system", files["full"], "--field", files["ffield"],
                       "--fixes", "[[0, 0, 0.1], [1, 2, 0.0]]")
    assert code == 0 and len(json.loads(out)["steps"]) == 2
    code, _, err = run(capsys, "cascade", "--system", files["full"], "--field", files["ffield"], "--fixes", "[[0, 0, 5]]")
    assert code == 1 and "outside" in err


def test_search_singular_runs(files, capsys):
    code, out, _ = run(capsys, "search-singular", "--system", files["sys"], "--T", 1, "--p", 10, "--kappa", 5,
                       "--restarts", 1, "--iters", 2)
    assert code == 0 and "best_value" in json.loads(out)


def test_reproduce_and_run_config(files, capsys):
    out_dir = files["tmp"] / "rep"
    code, out, _ = run(capsys, "reproduce", "optimize-small", "--out", out_dir)
    assert code == 0 and json.loads(out)["success_fraction"] >= 0.96
    assert (out_dir / "optimize_batch.json").exists() and (out_dir / "optimize_batch.csv").exists()
    cfg = files["tmp"] / "cfg.json"
    cfg.write_text(json.dumps({"kind": "larc_census", "n": 3, "num_systems": 3}))
    code, out, _ = run(capsys, "run", cfg, "--format", "csv")
    assert code == 0
    cfg.write_text(json.dumps({"kind": "larc_census", "num_systems": 0}))
    code, _, err = run(capsys, "run", cfg)
    assert code == 1 and "num_systems" in err
