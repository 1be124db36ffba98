import json
from pathlib import Path

import numpy as np
import pytest

from smcforge.cli import (
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_USAGE,
    ProblemError,
    emit_plot_data,
    parse_problem,
    problem_from_dict,
    run,
)
from smcforge.sim import Trajectory

PROBLEMS = Path(__file__).resolve().parents[1] / "problems"


def example_dict(**changes):
    d = json.loads((PROBLEMS / "example1.json").read_text())
    d.update(changes)
    return d


def toy_dict(f1, mode="roa"):
    return {"n": 2, "m": 1, "state_names": ["z1", "z2"], "f1": [f1], "f2": ["0"], "L": [["1"]],
            "phi1": "0.5", "mode": mode}


def write(tmp_path, d, name="problem.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


class TestProblemFile:
    def test_parenthesized_dynamics(self):
        f1 = ["x3 - 2*x1 - x1^3 - 2*x2^4*x1", "x3 - x2*(x1^2 + x2^4)"]
        a = problem_from_dict(example_dict(f1=f1))
        b = parse_problem(PROBLEMS / "example1.json")
        assert a.system.f1 == b.system.f1

    def test_dimension_error(self):
        with pytest.raises(ProblemError, match="f1"):
            problem_from_dict(example_dict(f1=["x3"]))

    def test_unknown_symbol_named(self):
        with pytest.raises(ProblemError, match="y9"):
            problem_from_dict(example_dict(phi1="0.5 + y9"))

    def test_unknown_setting(self):
        with pytest.raises(ProblemError, match="synthesis.speed"):
            problem_from_dict(example_dict(synthesis={"speed": 1}))

    def test_non_equilibrium(self):
        with pytest.raises(ProblemError, match="equilibrium"):
            problem_from_dict(toy_dict("z1 + 1"))

    def test_shape_must_be_over_z1(self):
        d = toy_dict("-z1")
        d["synthesis"] = {"shape_poly": "z1^2 + z2^2"}
        with pytest.raises(ProblemError, match="shape_poly"):
            problem_from_dict(d)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ProblemError):
            parse_problem(tmp_path / "absent.json")

    @pytest.mark.parametrize("name", ["example1.json", "finite_toy.json", "unstable.json"])
    def test_round_trip(self, name):
        first = parse_problem(PROBLEMS / name).to_dict()
        second = problem_from_dict(json.loads(json.dumps(first))).to_dict()
        assert first == second


class TestPlotData:
    def test_files_and_columns(self, tmp_path):
        traj = Trajectory(np.array([0.0, 0.1]), np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((2, 1)))
        files = emit_plot_data(traj, tmp_path)
        assert sorted(f.name for f in files) == ["control_sliding.csv", "states.csv"]
        assert (tmp_path / "states.csv").read_text().splitlines()[0] == "t,x1,x2,x3"
        assert (tmp_path / "control_sliding.csv").read_text().splitlines()[0] == "t,u1,S1"

    def test_empty_trajectory(self, tmp_path):
        traj = Trajectory(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 1)))
        with pytest.raises(ValueError):
            emit_plot_data(traj, tmp_path)


class TestExitCodes:
    def test_usage(self):
        assert run([]) == EXIT_USAGE
        assert run(["synth"]) == EXIT_USAGE

    def test_bad_problem_is_usage(self, tmp_path):
        p = write(tmp_path, {"n": 2})
        assert run(["synth", str(p), "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_infeasible(self, tmp_path):
        assert run(["synth", str(PROBLEMS / "unstable.json"), "--out", str(tmp_path)]) == EXIT_INFEASIBLE
        assert json.loads((tmp_path / "result.json").read_text())["status"] == "infeasible-from-init"

    def test_stable_toy_pipeline(self, tmp_path):
        p = write(tmp_path, {**toy_dict("-z1", "global"), "sim": {"x0": [0.5, 0.2], "tf": 2.0}})
        out = tmp_path / "run"
        assert run(["synth", str(p), "--out", str(out), "--samples", "5000"]) == EXIT_OK
        assert run(["sim", str(p), "--certificate", str(out / "result.json")]) == EXIT_OK
        assert run(["report", str(out)]) == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert {"result.json", "check.json", "states.csv", "sim.json"} <= set(report["artifacts"])

    def test_report_refuses_unverified(self, tmp_path):
        (tmp_path / "result.json").write_text("{}")
        assert run(["report", str(tmp_path)]) != EXIT_OK
        assert not (tmp_path / "report.json").exists()

    def test_check_reference_pair(self, tmp_path):
        cert = write(tmp_path, {"mode": "global", "V": "0.08*x1^2 - 0.06*x1*x2 + 0.76*x2^2",
                                "S": ["x3 + 0.66*x1 + 0.35*x2"]}, "cert.json")
        out = tmp_path / "check"
        code = run(["check", str(PROBLEMS / "example1.json"), "--certificate", str(cert), "--out", str(out),
                    "--samples", "20000"])
        assert code == EXIT_OK
        check = json.loads((out / "check.json").read_text())
        assert check["ok"] and check["decrease_violations"] == 0

    def test_finite_toy_first_entry(self, tmp_path):
        out = tmp_path / "ft"
        code = run(["check", str(PROBLEMS / "finite_toy.json"), "--certificate",
                    str(PROBLEMS / "finite_toy_candidate.json"), "--out", str(out), "--samples", "5000"])
        assert code == EXIT_OK
        assert run(["sim", str(PROBLEMS / "finite_toy.json"), "--certificate", str(out / "certified.json"),
                    "--tf", "1.6"]) == EXIT_OK
        states = np.genfromtxt(out / "states.csv", delimiter=",", names=True)
        inside = np.abs(states["x1"]) <= 1e-3
        assert inside.any() and states["t"][np.argmax(inside)] <= 1.5 + 0.01
