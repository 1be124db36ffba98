"""Command-line front end: problem files in, certificates, reports and trajectories out.

Exit codes: 0 success, 1 usage or input error, 2 infeasible (no certificate),
3 solver or verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .polynomial import IndeterminateSet, ParseError, Polynomial, StructureError, format_polynomial
from .sim import KINDS, PerturbationModel, SimulationAborted, Trajectory, reaching_metrics, settling_time, simulate
from .smc import RegularFormSystem
from .synthesis import (
    INFEASIBLE_FROM_INIT,
    ITERATION_CAP,
    MARGINAL,
    SOLVER_FAILURE,
    SUCCESS,
    SynthesisConfig,
    SynthesisResult,
    certify_fixed,
    synthesize,
    verify_result,
)

log = logging.getLogger("smcforge")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_FAILURE = 0, 1, 2, 3
MODES = ("roa", "global", "finite", "finite-global")

_INT_KEYS = {"deg_V", "deg_S", "deg_q", "deg_s1", "deg_s2", "deg_s3", "deg_K", "deg_s0", "deg_sM",
             "l_degree", "max_iter", "p_exp", "r_exp", "deg_q_finite"}
_FLOAT_KEYS = {"beta_init", "beta_lo", "beta_hi", "beta_tol", "eps_Q", "eps_s0", "cert_tol", "eig_tol"}
_BOOL_KEYS = {"slack_in_S", "normalize_S"}
_POLY_KEYS = {"shape_poly", "init_s2"}
_VECTOR_KEYS = {"init_q", "w"}


class ProblemError(ValueError):
    """Schema, parse or dimension error in a problem or certificate file."""


@dataclass
class SimSettings:
    x0: list[float] | None = None
    tf: float = 20.0
    dt: float = 1e-3
    delta: float = 0.03
    perturbation: dict = field(default_factory=lambda: {"kind": "zero"})

    def model(self, state: IndeterminateSet) -> PerturbationModel:
        p = self.perturbation
        amp = p.get("amplitude", 0.0)
        if isinstance(amp, str):
            amp = Polynomial.parse(amp, state)
        return PerturbationModel(p.get("kind", "zero"), amp, float(p.get("omega", 1.0)), float(p.get("phase", 0.0)))


@dataclass
class ProblemFile:
    name: str
    system: RegularFormSystem
    mode: str
    config: SynthesisConfig
    sim: SimSettings
    overrides: dict

    def to_dict(self) -> dict:
        s = self.system
        d = {
            "name": self.name,
            "n": s.n,
            "m": s.m,
            "state_names": list(s.vars.names),
            "f1": [format_polynomial(p) for p in s.f1],
            "f2": [format_polynomial(p) for p in s.f2],
            "L": [[format_polynomial(p) for p in row] for row in s.L],
            "phi1": format_polynomial(s.phi1),
            "eta": s.eta,
            "mode": self.mode,
            "synthesis": {},
            "sim": {
                "x0": self.sim.x0,
                "tf": self.sim.tf,
                "dt": self.sim.dt,
                "delta": self.sim.delta,
                "perturbation": dict(self.sim.perturbation),
            },
        }
        for key in sorted(self.overrides):
            value = getattr(self.config, key)
            if key in _POLY_KEYS:
                value = format_polynomial(value)
            elif key in _VECTOR_KEYS:
                value = [format_polynomial(p) for p in value]
            elif isinstance(value, np.ndarray):
                value = value.tolist()
            d["synthesis"][key] = value
        return d


def _need(d: dict, key: str, where: str = "problem"):
    if key not in d:
        raise ProblemError(f"{where}: missing key {key!r}")
    return d[key]


def _poly(text, vars: IndeterminateSet, key: str) -> Polynomial:
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return Polynomial.constant(vars, float(text))
    if not isinstance(text, str):
        raise ProblemError(f"{key}: expected a polynomial expression string, got {type(text).__name__}")
    try:
        return Polynomial.parse(text, vars)
    except ParseError as exc:
        raise ProblemError(f"{key}: {exc}") from None


def _poly_list(items, vars, key: str, length: int | None = None) -> list[Polynomial]:
    if not isinstance(items, list):
        raise ProblemError(f"{key}: expected an array of expressions")
    if length is not None and len(items) != length:
        raise ProblemError(f"{key}: expected {length} entries, got {len(items)}")
    return [_poly(t, vars, f"{key}[{i}]") for i, t in enumerate(items)]


def _z1_only(p: Polynomial, system_vars: IndeterminateSet, m: int, key: str) -> Polynomial:
    z1 = IndeterminateSet(system_vars.names[: system_vars.count - m])
    try:
        return p.restrict(z1)
    except StructureError:
        raise ProblemError(f"{key}: may only involve {list(z1.names)}") from None


def problem_from_dict(d: dict, default_name: str = "problem") -> ProblemFile:
    if not isinstance(d, dict):
        raise ProblemError("problem: top level must be an object")
    n, m = _need(d, "n"), _need(d, "m")
    if not isinstance(n, int) or not isinstance(m, int):
        raise ProblemError("n, m: must be integers")
    names = d.get("state_names") or [f"x{i + 1}" for i in range(n)]
    if len(names) != n:
        raise ProblemError(f"state_names: expected {n} names, got {len(names)}")
    if len(set(names)) != n:
        raise ProblemError("state_names: names must be distinct")
    if not 0 < m < n:
        raise ProblemError(f"m: need 0 < m < n, got n={n}, m={m}")
    X = IndeterminateSet(tuple(names))
    f1 = _poly_list(_need(d, "f1"), X, "f1", n - m)
    f2 = _poly_list(_need(d, "f2"), X, "f2", m)
    L_raw = _need(d, "L")
    if not isinstance(L_raw, list) or len(L_raw) != m:
        raise ProblemError(f"L: expected a {m}x{m} matrix")
    L = [_poly_list(row, X, f"L[{i}]", m) for i, row in enumerate(L_raw)]
    phi1 = _poly(_need(d, "phi1"), X, "phi1")
    eta = float(d.get("eta", 0.1))
    try:
        system = RegularFormSystem(X, m, f1, f2, L, phi1, eta)
    except (StructureError, ValueError) as exc:
        raise ProblemError(f"system: {exc}") from None
    mode = d.get("mode", "global")
    if mode not in MODES:
        raise ProblemError(f"mode: expected one of {MODES}, got {mode!r}")

    overrides = dict(d.get("synthesis") or {})
    known = {f.name for f in fields(SynthesisConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in overrides.items():
        if key not in known:
            raise ProblemError(f"synthesis.{key}: unknown setting")
        where = f"synthesis.{key}"
        if key in _INT_KEYS:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ProblemError(f"{where}: expected an integer")
            kwargs[key] = value
        elif key in _FLOAT_KEYS:
            kwargs[key] = float(value)
        elif key in _BOOL_KEYS:
            kwargs[key] = bool(value)
        elif key == "eps_l":
            kwargs[key] = value if isinstance(value, (int, float)) else np.asarray(value, dtype=float)
        elif key == "shape_poly":
            kwargs[key] = _z1_only(_poly(value, X, where), X, m, where)
        elif key == "init_s2":
            kwargs[key] = _poly(value, X, where)
        elif key == "init_q":
            kwargs[key] = _poly_list(value, X, where, m)
        elif key == "w":
            kwargs[key] = [_z1_only(p, X, m, f"{where}[{i}]").lift(X) for i, p in enumerate(_poly_list(value, X, where))]
        else:
            raise ProblemError(f"{where}: not settable from a problem file")
    config = SynthesisConfig(**kwargs)
    try:
        config.validate(system, finite=mode.startswith("finite"))
    except ValueError as exc:
        raise ProblemError(f"synthesis: {exc}") from None

    sim_raw = dict(d.get("sim") or {})
    pert = dict(sim_raw.get("perturbation") or {"kind": "zero"})
    if pert.get("kind", "zero") not in KINDS:
        raise ProblemError(f"sim.perturbation.kind: expected one of {KINDS}")
    x0 = sim_raw.get("x0")
    if x0 is not None and (not isinstance(x0, list) or len(x0) != n):
        raise ProblemError(f"sim.x0: expected {n} numbers")
    sim = SimSettings(
        x0=None if x0 is None else [float(v) for v in x0],
        tf=float(sim_raw.get("tf", 20.0)),
        dt=float(sim_raw.get("dt", 1e-3)),
        delta=float(sim_raw.get("delta", 0.03)),
        perturbation=pert,
    )
    if isinstance(pert.get("amplitude"), str):
        _poly(pert["amplitude"], X, "sim.perturbation.amplitude")
    return ProblemFile(str(d.get("name", default_name)), system, mode, config, sim, overrides)


def parse_problem(path) -> ProblemFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProblemError(f"{path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return problem_from_dict(data, path.stem)


def load_certificate(path, problem: ProblemFile) -> SynthesisResult:
    """Read a result document, or a minimal ``{"mode", "V" | "Q", "S"}`` one."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ProblemError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ProblemError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    system = problem.system
    d.setdefault("mode", problem.mode)
    d.setdefault("state_names", list(system.vars.names))
    d.setdefault("m", system.m)
    d.setdefault("status", "unchecked")
    d.setdefault("objective", None)
    if tuple(d["state_names"]) != system.vars.names:
        raise ProblemError(f"{path}: state_names do not match the problem")
    try:
        if d.get("V") is None and d.get("Q") is not None and d.get("w") is not None:
            w = [Polynomial.parse(s, system.vars) for s in d["w"]]
            Q = np.asarray(d["Q"], dtype=float)
            V = sum((w[i] * w[j] * float(Q[i, j]) for i in range(len(w)) for j in range(len(w))), Polynomial.zero(system.vars))
            d["V"] = format_polynomial(V)
        _need(d, "S", str(path))
        _need(d, "V", str(path))
        return SynthesisResult.from_dict(d)
    except (ParseError, StructureError) as exc:
        raise ProblemError(f"{path}: {exc}") from None


def emit_plot_data(traj: Trajectory, out_dir) -> list[Path]:
    """Write ``states.csv`` (t, x) and ``control_sliding.csv`` (t, u, S)."""
    if len(traj) == 0:
        raise ValueError("cannot emit plot data for an empty trajectory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [traj.to_csv(out / "states.csv", "states"), traj.to_csv(out / "control_sliding.csv", "control")]


def _write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(args, problem: ProblemFile) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        out = Path("out") / problem.name / stamp
    out.mkdir(parents=True, exist_ok=True)
    return out


def _status_code(status: str) -> int:
    if status == SUCCESS:
        return EXIT_OK
    if status in (INFEASIBLE_FROM_INIT, ITERATION_CAP, MARGINAL):
        return EXIT_INFEASIBLE
    return EXIT_FAILURE


def cmd_synth(args) -> int:
    problem = parse_problem(args.problem)
    mode = args.mode or problem.mode
    if args.mode and args.mode != problem.mode:
        problem = problem_from_dict({**problem.to_dict(), "mode": mode}, problem.name)
    config = problem.config
    if args.max_iter is not None:
        config.max_iter = args.max_iter
    out = _out_dir(args, problem)
    result = synthesize(problem.system, mode, config)
    _write_json(out / "result.json", result.to_dict())
    print(f"status: {result.status}; objective: {result.objective}")
    if result.status != SUCCESS:
        print(result.message, file=sys.stderr)
        return _status_code(result.status)
    report = verify_result(problem.system, result, samples=args.samples, seed=args.seed)
    _write_json(out / "check.json", report)
    print(f"check: {'ok' if report['ok'] else 'FAILED'} ({report['decrease_violations']} decrease violations)")
    print(f"artifacts: {out}")
    if not report["ok"]:
        print("synthesized certificate failed independent verification", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_check(args) -> int:
    problem = parse_problem(args.problem)
    given = load_certificate(args.certificate, problem)
    out = _out_dir(args, problem)
    # certificates are always re-derived for the supplied pair rather than trusted
    result = certify_fixed(problem.system, given.V, given.S, given.mode, problem.config, Q=given.Q)
    _write_json(out / "certified.json", result.to_dict())
    if result.status != SUCCESS:
        print(f"status: {result.status}; {result.message}", file=sys.stderr)
        return _status_code(result.status)
    report = verify_result(problem.system, result, samples=args.samples, seed=args.seed)
    _write_json(out / "check.json", report)
    print(f"objective: {result.objective}; check: {'ok' if report['ok'] else 'FAILED'}")
    print(f"artifacts: {out}")
    return EXIT_OK if report["ok"] else EXIT_INFEASIBLE


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _first_entry(traj: Trajectory, tol: float, components) -> float | None:
    """First sample time with ``|z1|_inf <= tol``; unlike settling, later exits are ignored."""
    inside = np.max(np.abs(traj.states[:, components]), axis=1) <= tol
    return float(traj.times[np.argmax(inside)]) if inside.any() else None


def cmd_sim(args) -> int:
    problem = parse_problem(args.problem)
    result = load_certificate(args.certificate, problem)
    settings = problem.sim
    x0 = args.x0 if args.x0 is not None else settings.x0
    if x0 is None:
        raise ProblemError("sim: no initial state (set sim.x0 or pass --x0)")
    if len(x0) != problem.system.n:
        raise ProblemError(f"--x0: expected {problem.system.n} numbers")
    tf = args.tf if args.tf is not None else settings.tf
    dt = args.dt if args.dt is not None else settings.dt
    delta = args.delta if args.delta is not None else settings.delta
    if args.perturbation:
        settings.perturbation = {**settings.perturbation, "kind": args.perturbation}
    pert = settings.model(problem.system.vars)
    law = result.control_law(delta)
    out = Path(args.out) if args.out else Path(args.certificate).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    V = result.V if result.V is not None and result.V.vars.count <= problem.system.n else None
    try:
        traj = simulate(problem.system, law, pert, x0, tf, dt, V)
        code = EXIT_OK
    except SimulationAborted as exc:
        print(str(exc), file=sys.stderr)
        traj, code = exc.trajectory, EXIT_FAILURE
        if len(traj) == 0:
            return code
    traj.to_csv(out / "trajectory.csv")
    emit_plot_data(traj, out)
    metrics = reaching_metrics(traj, delta, problem.system.eta)
    z1 = problem.system.z1_idx
    summary = {
        "x0": [float(v) for v in x0],
        "tf": tf,
        "dt": dt,
        "delta": delta,
        "perturbation": settings.perturbation,
        "samples": len(traj),
        "final_state_norm": float(np.linalg.norm(traj.states[-1])),
        "settling_time_z1": settling_time(traj, 1e-3, z1),
        "first_entry_z1": _first_entry(traj, 1e-3, z1),
        "reaching": metrics.to_dict(),
        "aborted": code != EXIT_OK,
        "files": ["trajectory.csv", "states.csv", "control_sliding.csv"],
    }
    _write_json(out / "sim.json", summary)
    print(f"final |x| = {summary['final_state_norm']:.6g}; t_reach = {metrics.t_reach}")
    print(f"artifacts: {out}")
    return code


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if not run.is_dir():
        raise ProblemError(f"{run}: not a directory")
    docs = {}
    for name in ("result.json", "certified.json", "check.json", "sim.json"):
        p = run / name
        if p.exists():
            docs[name] = json.loads(p.read_text())
    if "check.json" not in docs:
        print("no check.json: refusing to report an unverified result", file=sys.stderr)
        return EXIT_FAILURE
    if not docs["check.json"].get("ok"):
        print("check.json records a failed verification: refusing to report", file=sys.stderr)
        return EXIT_FAILURE
    artifacts = sorted(p.name for p in run.iterdir() if p.is_file() and p.name != "report.json")
    for doc in docs.values():
        for f in doc.get("files", []) if isinstance(doc, dict) else []:
            if f not in artifacts:
                print(f"missing artifact {f}", file=sys.stderr)
                return EXIT_FAILURE
    report = {
        "result": docs.get("result.json") or docs.get("certified.json"),
        "check": docs["check.json"],
        "simulation": docs.get("sim.json"),
        "artifacts": {name: hashlib.sha256((run / name).read_bytes()).hexdigest() for name in artifacts},
    }
    _write_json(run / "report.json", report)
    print(f"report: {run / 'report.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smcforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log iteration progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("problem", help="problem JSON file")
        p.add_argument("--out", help="output directory (default ./out/<name>/<timestamp>)")
        p.add_argument("--seed", type=int, default=0, help="seed for all sampling (default 0)")

    p = sub.add_parser("synth", help="synthesize S and V, then verify")
    common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--samples", type=int, default=100_000, help="verification samples")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("check", help="verify a user-supplied (V, S)")
    common(p)
    p.add_argument("--certificate", required=True, help="result or certificate JSON")
    p.add_argument("--samples", type=int, default=100_000)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sim", help="closed-loop simulation with a certificate's manifold")
    common(p)
    p.add_argument("--certificate", required=True)
    p.add_argument("--x0", type=_floats)
    p.add_argument("--tf", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--perturbation", choices=KINDS)
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("report", help="consolidate a verified run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ProblemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
