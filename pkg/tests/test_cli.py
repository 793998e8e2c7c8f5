import csv
import json
import subprocess
import sys

import pytest

from certbound.bounds import moment_constraints_from_mean_cov
from certbound.cli import CSV_COLUMNS, InputError, ProblemFile, load_problem_file, main


def write(tmp_path, data, name="p.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return str(path)


def small_vdp(**overrides):
    data = load_problem_file("vdp.json").to_dict()
    data["degree"] = 4
    data.update(overrides)
    return data


def run(args, capsys):
    code = main(args)
    out, err = capsys.readouterr()
    return code, out, err


# --- problem files ---------------------------------------------------------------------

def test_bundled_files_load():
    vdp = load_problem_file("vdp.json")
    assert vdp.variables == ["x1", "x2"] and vdp.field[0] == "x2"
    assert vdp.degree == 8 and vdp.horizon == 1.0
    lorenz = load_problem_file("lorenz.json").to_problem()
    assert lorenz.field.n_states == 3 and len(lorenz.constraints) == 9


def test_round_trip_dict():
    pf = load_problem_file("vdp.json")
    again = ProblemFile.from_dict(json.loads(json.dumps(pf.to_dict())))
    assert again == pf
    assert again.to_problem() == pf.to_problem()


def test_round_trip_from_instance():
    problem = load_problem_file("lorenz.json").to_problem()
    rendered = ProblemFile.from_problem(problem)
    assert rendered.to_problem() == problem
    assert ProblemFile.from_dict(rendered.to_dict()).to_problem() == problem


def test_moment_list_and_shorthand():
    pf = load_problem_file("vdp.json")
    shorthand = pf.to_dict()
    shorthand["moments"] = {"mean": pf.mean, "cov": pf.cov}
    assert ProblemFile.from_dict(shorthand).to_problem() == pf.to_problem()
    listed = pf.to_dict()
    cons = moment_constraints_from_mean_cov(pf.mean, pf.cov, pf.state_space)
    listed["moments"] = {"list": [{"h": str(c.h), "c": c.c, "kind": "equality"} for c in cons]}
    assert ProblemFile.from_dict(listed).to_problem() == pf.to_problem()


def test_both_moment_forms_rejected():
    data = small_vdp()
    data["moments"]["list"] = []
    with pytest.raises(InputError, match="exactly one"):
        ProblemFile.from_dict(data)


def test_parse_error_position(tmp_path, capsys):
    data = small_vdp(field=["x2", "(1 - 9*x1^2)*x2 - 2x1"])
    code, _, err = run(["bound", write(tmp_path, data)], capsys)
    assert code == 1
    assert "field[1]" in err and "position 19" in err


def test_json_error_line_and_column(tmp_path, capsys):
    code, _, err = run(["bound", write(tmp_path, '{\n  "variables": ["x1",\n}')], capsys)
    assert code == 1
    assert ":3:1:" in err


def test_missing_file(capsys):
    code, _, err = run(["bound", "no_such_problem.json"], capsys)
    assert code == 1 and "no such file" in err


def test_usage_error_exit_code(tmp_path, capsys):
    code, _, _ = run(["sweep", write(tmp_path, small_vdp()), "--omegas", ""], capsys)
    assert code == 1
    with pytest.raises(SystemExit) as info:
        main(["bound"])
    assert info.value.code == 1


# --- commands -------------------------------------------------------------------------

def test_bound_constant_observable(tmp_path, capsys):
    code, out, _ = run(["bound", write(tmp_path, small_vdp(observable="5")), "--quiet"], capsys)
    assert code == 0
    assert "LB=5 " in out and "UB=5 " in out


def test_bound_single_direction_and_export(tmp_path, capsys):
    out_path = tmp_path / "prog.dat-s"
    code, out, _ = run(["bound", write(tmp_path, small_vdp()), "--direction", "upper", "--export-sdpa", str(out_path)],
                       capsys)
    assert code == 0 and "UB=" in out and "LB=" not in out
    assert out_path.read_text().startswith('"certbound export')


def test_bound_failure_exit_code(tmp_path, capsys):
    data = small_vdp(solver={"max_iter": 1})
    code, out, _ = run(["bound", write(tmp_path, data)], capsys)
    assert code == 3


def test_global_flags_after_subcommand(tmp_path, capsys):
    code, _, _ = run(["bound", write(tmp_path, small_vdp(observable="5")), "--tol", "1e-7", "--quiet"], capsys)
    assert code == 0
    code, _, _ = run(["--tol", "1e-7", "bound", write(tmp_path, small_vdp(observable="5"))], capsys)
    assert code == 0


def test_sweep_csv(tmp_path, capsys):
    path = tmp_path / "out.csv"
    args = ["sweep", write(tmp_path, small_vdp(observable="2")), "--omegas", "2,4", "--horizons", "0.5,1",
            "--csv", str(path), "--jobs", "1"]
    code, out, _ = run(args, capsys)
    assert code == 0
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    rows = list(csv.DictReader(lines))
    assert [(r["T"], r["omega"]) for r in rows] == [("0.5", "2"), ("0.5", "4"), ("1", "2"), ("1", "4")]
    assert {r["lb"] for r in rows} == {"2"} and {r["ub"] for r in rows} == {"2"}
    assert all(r["lb_cert"] == "certified" for r in rows)
    # header is stable across runs
    run(args, capsys)
    assert path.read_text().splitlines()[0] == lines[0]


def test_sweep_parallel_matches_serial(tmp_path, capsys):
    f = write(tmp_path, small_vdp())
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(["sweep", f, "--omegas", "2,4", "--csv", str(a), "--jobs", "1"], capsys)
    run(["sweep", f, "--omegas", "2,4", "--csv", str(b), "--jobs", "2"], capsys)
    strip = lambda p: [r[:-1] for r in csv.reader(p.read_text().splitlines())]
    assert strip(a) == strip(b)


def test_validate_and_negative_control(tmp_path, capsys):
    f = write(tmp_path, small_vdp(degree=6))
    code, out, _ = run(["validate", f, "--count", "4000", "--seed", "3"], capsys)
    assert code == 0 and "consistent" in out
    code, out, _ = run(["validate", f, "--count", "4000", "--seed", "3", "--dist", "uniform"], capsys)
    assert code == 0
    code, out, _ = run(["validate", f, "--count", "4000", "--seed", "3", "--swap-bounds"], capsys)
    assert code == 1 and "INCONSISTENT" in out


def test_large_moment_warning(tmp_path, capsys, caplog):
    data = small_vdp(observable="1", horizon=0.0, degree=2)
    data["moments"] = {"mean_cov": {"mean": [40.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]}}
    code, _, _ = run(["bound", write(tmp_path, data)], capsys)
    assert code == 0 and "rescaling" in caplog.text


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "certbound.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep" in proc.stdout
