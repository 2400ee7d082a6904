import csv
import json

import numpy as np
import pytest

from yamabe_fem.cli import EXIT_ACCEPT, EXIT_INPUT, EXIT_OK, EXIT_SOLVER, main
from yamabe_fem.mesh import load_mesh


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gallery_writes_loadable_mesh(tmp_path, capsys):
    out = tmp_path / "c.json"
    code, stdout, _ = run(capsys, "gallery", "--case", "const", "--level", "1", "--param",
                          "s0=-2", "--out", str(out))
    assert code == EXIT_OK
    mesh = load_mesh(out)
    assert np.all(mesh.fields["S"] == -2.0)
    meta = json.loads(out.read_text())["gallery_case"]
    assert meta == {"name": "const", "level": 1, "params": {"s0": -2.0, "h0": 0.0}}
    assert json.loads(stdout)["vertices"] == mesh.n_vertices


def test_classify_from_case_and_mesh(tmp_path, capsys):
    code, stdout, _ = run(capsys, "classify", "--case", "const", "--level", "1")
    assert code == EXIT_OK
    data = json.loads(stdout)
    assert data["case"] == "NEG" and data["eta1"] == pytest.approx(-6.0, abs=1e-8)
    mesh = tmp_path / "m.json"
    run(capsys, "gallery", "--case", "ball", "--level", "1", "--out", str(mesh))
    code, stdout, _ = run(capsys, "classify", "--mesh", str(mesh))
    assert code == EXIT_OK and json.loads(stdout)["case"] == "ZERO"


def test_solve_outputs_and_verify_round_trip(tmp_path, capsys):
    out = tmp_path / "sol.json"
    code, stdout, _ = run(capsys, "solve", "--case", "const", "--level", "1", "--out", str(out))
    assert code == EXIT_OK and json.loads(stdout)["accepted"]
    data = json.loads(out.read_text())
    assert data["lambda"] == pytest.approx(-3.0, abs=1e-8) and data["config"]["seed"] == 42
    rows = read_csv(tmp_path / "sol.csv")
    assert rows[0] == ["iter", "delta_inf", "chain_violations"] and len(rows) > 2
    assert all(r[2] == "0" for r in rows[1:])
    code, stdout, _ = run(capsys, "verify", "--case", "const", "--level", "1", "--solution",
                          str(out))
    assert code == EXIT_OK and json.loads(stdout)["accepted"]
    bare = tmp_path / "u.json"
    bare.write_text(json.dumps(data["u"]))
    code, stdout, _ = run(capsys, "verify", "--case", "const", "--level", "1", "--solution",
                          str(bare), "--lambda", "-2.5")
    assert code == EXIT_ACCEPT and not json.loads(stdout)["accepted"]
    code, _, err = run(capsys, "verify", "--case", "const", "--level", "1", "--solution", str(bare))
    assert code == EXIT_INPUT and "lambda" in err


def test_solve_positive_csv_has_continuation_columns(tmp_path, capsys):
    out = tmp_path / "pos.json"
    code, _, _ = run(capsys, "solve", "--case", "cap-negative", "--level", "1", "--out", str(out))
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "pos.csv")
    assert rows[0] == ["iter", "delta_inf", "chain_violations", "beta", "lambda_beta"]
    betas = [float(r[3]) for r in rows[1:]]
    assert all(b < 0 for b in betas) and betas == sorted(betas)


def test_solve_is_deterministic(tmp_path, capsys):
    outs = [tmp_path / f"r{i}.json" for i in range(2)]
    for o in outs:
        assert run(capsys, "solve", "--case", "const", "--level", "1", "--out", str(o))[0] == 0
    a, b = (json.loads(o.read_text()) for o in outs)
    assert a["config"].pop("out") != b["config"].pop("out")
    assert a == b
    assert (tmp_path / "r0.csv").read_bytes() == (tmp_path / "r1.csv").read_bytes()


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"case": "const", "level": 1, "param": {"s0": -12}, "tol": 1e-9}))
    out = tmp_path / "a.json"
    assert run(capsys, "solve", "--config", str(cfg), "--out", str(out))[0] == EXIT_OK
    data = json.loads(out.read_text())
    assert data["lambda"] == pytest.approx(-6.0, abs=1e-8) and data["config"]["tol"] == 1e-9
    assert run(capsys, "solve", "--config", str(cfg), "--param", "s0=-6", "--tol", "1e-7",
               "--out", str(out))[0] == EXIT_OK
    data = json.loads(out.read_text())
    assert data["lambda"] == pytest.approx(-3.0, abs=1e-8) and data["config"]["tol"] == 1e-7


@pytest.mark.parametrize("argv, fragment", [
    (["classify", "--case", "const", "--level", "9"], "level"),
    (["classify", "--case", "const", "--level", "1", "--param", "radius=1"], "no parameter"),
    (["classify", "--case", "const", "--level", "1", "--param", "s0"], "KEY=VALUE"),
    (["classify", "--case", "const", "--level", "1", "--tol", "-1"], "positive"),
    (["classify", "--case", "const", "--level", "1", "--beta0", "0.5"], "negative"),
    (["classify"], "--mesh"),
    (["classify", "--mesh", "/nonexistent/m.json"], "cannot"),
    (["gallery", "--case", "ball", "--level", "1"], "--out"),
    (["verify", "--case", "const", "--level", "1"], "--solution"),
    (["convergence", "--case", "ball"], "no reference"),
    (["convergence", "--case", "manufactured", "--levels", "1"], "two levels"),
    (["solve", "--case", "const", "--level", "1", "--out", "/nonexistent/dir/x.json"], "writable"),
])
def test_input_errors_exit_2(capsys, argv, fragment):
    code, _, err = run(capsys, *argv)
    assert code == EXIT_INPUT and fragment in err


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"case": "const", "colour": "red"}))
    code, _, err = run(capsys, "classify", "--config", str(cfg))
    assert code == EXIT_INPUT and "colour" in err
    cfg.write_text("[1, 2]")
    assert run(capsys, "classify", "--config", str(cfg))[0] == EXIT_INPUT


def test_solver_failure_exit_3_leaves_no_output(tmp_path, capsys):
    out = tmp_path / "fail.json"
    code, _, err = run(capsys, "solve", "--case", "const", "--level", "1", "--max-iter", "1",
                       "--tol", "1e-14", "--out", str(out))
    assert code == EXIT_SOLVER and "solver failure" in err
    assert list(tmp_path.iterdir()) == []


def test_argparse_rejects_unknown_case(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["classify", "--case", "torus"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_convergence_manufactured(tmp_path, capsys):
    out = tmp_path / "conv.csv"
    code, stdout, _ = run(capsys, "convergence", "--case", "manufactured", "--levels", "1,2",
                          "--out", str(out))
    assert code == EXIT_OK
    rows = read_csv(out)
    assert rows[0] == ["level", "h", "interior_l2_error_vs_reference", "ratio"]
    assert float(rows[2][3]) >= 3.0
    assert stdout.splitlines()[0] == ",".join(rows[0])
