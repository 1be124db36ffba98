"""Acceptance criteria for the package, one test (or group) per criterion.

Each check prints a single ``PASS``/``FAIL`` line; the lines are repeated in
the terminal summary. Two sub-criteria are known to be unattainable and are
marked ``xfail(strict=True)`` with their assertions unchanged.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from smcforge.cli import run
from smcforge.polynomial import IndeterminateSet, Polynomial, monomials_up_to
from smcforge.sim import (
    PerturbationModel,
    Trajectory,
    integrate,
    reaching_metrics,
    settling_time,
    simulate,
)
from smcforge.smc import ControlLaw, RegularFormSystem, sliding_dynamics
from smcforge.sosprog import INFEASIBLE, check_certificate, is_sos
from smcforge.synthesis import SUCCESS, SynthesisConfig, certify_fixed, maximize_beta, synthesize_global, verify_result

from conftest import REFERENCE_S

PROBLEMS = Path(__file__).resolve().parents[1] / "problems"
RESULTS: list[str] = []


def record(label: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


# shared expensive fixtures


@pytest.fixture(scope="module")
def fixed_reference(example1, reference_pair):
    V, S = reference_pair
    result, secs = timed(certify_fixed, example1, V, S, "global")
    return result, secs


@pytest.fixture(scope="module")
def synthesized(example1):
    X = example1.vars
    cfg = SynthesisConfig(init_q=[Polynomial.parse("x1 + x2 + x3", X)], beta_init=-100.0)
    return timed(synthesize_global, example1, cfg)


@pytest.fixture(scope="module")
def finite_candidate(double_integrator):
    X = double_integrator.vars
    cfg = SynthesisConfig(p_exp=2, r_exp=3, w=[Polynomial.parse("z1", X)])
    S = [Polynomial.parse("z2^3 + z1", X)]
    return timed(certify_fixed, double_integrator, None, S, "finite-global", cfg, Q=np.eye(1))


# 1. SOS discrimination

X2 = IndeterminateSet(("x1", "x2"))


@pytest.mark.parametrize(
    "text,expect_sos",
    [("(x1^2 + x2^2)^2", True), ("(x1 - x2)^2", True), ("x1^4*x2^2 + x1^2*x2^4 - 3*x1^2*x2^2 + 1", False)],
    ids=["square-of-norm", "perfect-square", "motzkin"],
)
def test_c1_sos_discrimination(text, expect_sos):
    p = Polynomial.parse(text, X2)
    sol, secs = timed(is_sos, p)
    if expect_sos:
        cert = sol.certificates["p"]
        ok = sol.ok and cert.residual <= 1e-7 and check_certificate(p, cert, 1e-7)
        detail = f"{text} status={sol.status} residual={cert.residual:.2e} time={secs:.3f}s"
    else:
        ok = sol.status == INFEASIBLE
        detail = f"{text} status={sol.status} time={secs:.3f}s"
    ok = ok and secs < 1.0
    assert record("C1 SOS discrimination", ok, detail)


# 2. Certificate validation for the reference_pair (V, S)


@pytest.mark.xfail(
    strict=True,
    reason="with V and S fixed the exponential rate is capped at the generalized eigenvalue "
    "0.01184 of the linearization restricted to S = 0, below the required 0.1",
)
def test_c2_reference_rate(fixed_reference):
    result, secs = fixed_reference
    ok = result.status == SUCCESS and result.objective >= 0.1 and secs < 30
    assert record("C2 reference pair rate", ok, f"beta={result.objective:.5f} (need >= 0.1) time={secs:.2f}s")


def test_c2_reference_rate_matches_linear_bound(fixed_reference):
    # companion check to the xfail above: the SOS value sits at the analytic cap
    result, _ = fixed_reference
    A = np.array([[-2.66, -0.35], [-0.66, -0.35]])
    P = np.array([[0.08, -0.03], [-0.03, 0.76]])
    cap = float(np.min(scipy.linalg.eigh(-(A.T @ P + P @ A), P, eigvals_only=True)))
    ok = result.status == SUCCESS and 0 < result.objective <= cap + 1e-6 and result.objective >= cap - 1e-3
    assert record("C2 reference pair feasible", ok, f"beta={result.objective:.5f} analytic cap={cap:.5f}")


def test_c2_reference_sampling(example1, fixed_reference):
    result, cert_secs = fixed_reference
    rep, secs = timed(verify_result, example1, result, samples=100_000, seed=0, region="sublevel")
    ok = rep["decrease_violations"] == 0 and rep["decrease_samples"] == 100_000 and rep["root_failures"] == 0
    ok = ok and cert_secs + secs < 30
    detail = f"{rep['decrease_violations']} violations in {rep['decrease_samples']} points, time={cert_secs + secs:.2f}s"
    assert record("C2 reference pair sampling", ok, detail)


# 3. End-to-end synthesis


def test_c3_synthesis(example1, synthesized):
    result, secs = synthesized
    rep = verify_result(example1, result, samples=100_000, seed=0, region="sublevel")
    ok = (
        result.status == SUCCESS
        and result.objective > 0
        and len(result.log) <= 5
        and rep["ok"]
        and rep["decrease_violations"] == 0
        and secs < 300
    )
    detail = (
        f"status={result.status} beta={result.objective:.4f} iterations={len(result.log)} "
        f"violations={rep['decrease_violations']}/{rep['decrease_samples']} time={secs:.2f}s"
    )
    assert record("C3 end-to-end synthesis", ok, detail)


def test_c3_synthesized_s_is_affine(synthesized):
    result, _ = synthesized
    ok = all(s.degree == 1 and s.coeff((0, 0, 1)) != 0 for s in result.S)
    assert record("C3 affine manifold", ok, f"S = {result.S[0]}")


# 4. Closed-loop behaviour


@pytest.fixture(scope="module")
def reference_law(example1):
    return ControlLaw((Polynomial.parse(REFERENCE_S, example1.vars),), delta=0.03)


def test_c4_closed_loop(example1, reference_pair, reference_law):
    V, _ = reference_pair
    x0 = [1.0, -1.0, 0.5]
    t0 = time.perf_counter()
    sine = simulate(example1, reference_law, PerturbationModel("sinusoid", 0.5, 5.0), x0, 20.0, 1e-3, V)
    worst = simulate(example1, reference_law, PerturbationModel("worst-case"), x0, 20.0, 1e-3, V)
    secs = time.perf_counter() - t0
    final = float(np.linalg.norm(sine.states[-1]))
    m_sine = reaching_metrics(sine, 0.03, example1.eta)
    m_worst = reaching_metrics(worst, 0.03, example1.eta)
    ok_final = record("C4 final state", final <= 0.05, f"|x(20)| = {final:.4f} (need <= 0.05)")
    ok_layer = record(
        "C4 boundary layer",
        m_sine.t_reach is not None and m_sine.max_post_reach_excursion <= 0.06,
        f"t_reach={m_sine.t_reach} max |S| after reaching = {m_sine.max_post_reach_excursion:.4f} (need <= 0.06)",
    )
    ok_reach = record(
        "C4 worst-case reaching",
        m_worst.reaching_violations == 0,
        f"{m_worst.reaching_violations} reaching violations outside the layer",
    )
    ok_time = record("C4 runtime", secs < 10, f"two 20 s runs took {secs:.2f}s")
    assert ok_final and ok_layer and ok_reach and ok_time


# 5. Containment oracle


def test_c5_beta_oracle():
    X = IndeterminateSet(("z1", "z2", "z3"))
    P = lambda s: Polynomial.parse(s, X)
    sys_ = RegularFormSystem(X, 1, [P("-z1"), P("-z2")], [P("0")], [[P("1")]], P("0.5"))
    Z1 = sys_.z1_vars
    cfg = SynthesisConfig(shape_poly=Polynomial.parse("z1^2 + z2^2", Z1))
    step, secs = timed(maximize_beta, sys_, cfg, Polynomial.parse("4*z1^2 + 4*z2^2", Z1), [P("z3")])
    ok = abs(step.value - 0.25) <= 2e-3 and secs < 10
    assert record("C5 beta oracle", ok, f"beta*={step.value:.5f} (need 0.25 +- 2e-3) time={secs:.2f}s")


# 6. Finite-time suite


def test_c6_rate(finite_candidate):
    result, secs = finite_candidate
    ok = result.status == SUCCESS and 1.8 <= result.objective <= 2.0 and secs < 60
    assert record("C6 finite-time rate", ok, f"c*={result.objective:.5f} (need [1.8, 2.0]) time={secs:.2f}s")


def _reduced_settling(double_integrator, z1_0, tf=3.0):
    law = ControlLaw((Polynomial.parse("z2^3 + z1", double_integrator.vars),))
    dyn = sliding_dynamics(law, double_integrator)
    t, x = integrate(lambda t, z: dyn(z), [z1_0], tf, 1e-3)
    return settling_time(Trajectory.from_states(t, x), 1e-3)


@pytest.mark.xfail(
    strict=True,
    reason="at tol 1e-3 the exact crossing of dz1 = -cbrt(z1) from z1 = 1 is 1.5 (1 - 1e-3^(2/3)) = 1.485, "
    "which lies below the required window [1.49, 1.5]",
)
def test_c6_settling_window(double_integrator):
    ts = _reduced_settling(double_integrator, 1.0)
    assert record("C6 settling window", ts is not None and 1.49 <= ts <= 1.5, f"t*={ts} (need [1.49, 1.5])")


def test_c6_settling_closed_form(double_integrator):
    # companion check to the xfail above: the measured value matches the exact crossing time
    ts = _reduced_settling(double_integrator, 1.0)
    exact = 1.5 * (1.0 - 1e-3 ** (2.0 / 3.0))
    ok = ts is not None and abs(ts - exact) <= 2e-3 and ts <= 1.5
    assert record("C6 settling closed form", ok, f"t*={ts} exact crossing={exact:.4f}, finite-time limit 1.5")


def test_c6_bound(double_integrator, finite_candidate):
    result, _ = finite_candidate
    rng = np.random.default_rng(0)
    law = ControlLaw((Polynomial.parse("z2^3 + z1", double_integrator.vars),))
    dyn = sliding_dynamics(law, double_integrator)
    worst = -np.inf
    t0 = time.perf_counter()
    for z1 in rng.uniform(-1.0, 1.0, size=20):
        x0 = dyn.state([z1])
        measured = _reduced_settling(double_integrator, z1)
        bound = result.settling_bound(x0)
        worst = max(worst, measured - bound)
    secs = time.perf_counter() - t0
    ok = worst <= 0 and secs < 60
    assert record("C6 settling bound", ok, f"max(measured - bound) over 20 starts = {worst:.4f} time={secs:.2f}s")


# 7. Numerical infrastructure


def test_c7_rk4_order():
    errs = [abs(integrate(lambda t, z: -z, [1.0], 1.0, dt)[1][-1, 0] - np.exp(-1)) for dt in (0.1, 0.05)]
    ratio = errs[0] / errs[1]
    assert record("C7 RK4 order", 12 <= ratio <= 20, f"error ratio {ratio:.2f} (need [12, 20])")


VARS4 = IndeterminateSet(("a", "b", "c", "d"))
MONOS = monomials_up_to(4, 4)


def _random_poly(rng, max_deg=4):
    monos = [m for m in MONOS if sum(m) <= max_deg]
    k = rng.integers(0, 7)
    idx = rng.integers(0, len(monos), size=k)
    return Polynomial(VARS4, {monos[i]: float(c) for i, c in zip(idx, rng.uniform(-10, 10, size=k))})


def _scale(*ps):
    return max(1.0, *(p.max_abs_coeff() for p in ps))


def test_c7_property_suites():
    rng = np.random.default_rng(2024)
    ring = deriv = subst = 0
    for _ in range(1000):
        a, b, c = (_random_poly(rng) for _ in range(3))
        if (a * (b + c)).allclose(a * b + a * c, 1e-12 * _scale(a) * _scale(b, c) * 36):
            ring += 1
        i = int(rng.integers(0, 4))
        if (a * b).diff(i).allclose(a.diff(i) * b + a * b.diff(i), 1e-12 * _scale(a) * _scale(b) * 400):
            deriv += 1
        p, e = _random_poly(rng, 3), _random_poly(rng, 2)
        e = Polynomial(VARS4, {m: v for m, v in e.items() if m[i] == 0})
        x = rng.uniform(-2, 2, size=4)
        y = x.copy()
        y[i] = e(x)
        magnitude = Polynomial(VARS4, {m: abs(v) for m, v in p.items()})(np.abs(y))
        if abs(p.substitute(i, e)(x) - p(y)) <= 1e-9 * max(1.0, magnitude):
            subst += 1
    ok = ring == deriv == subst == 1000
    assert record("C7 property suites", ok, f"ring {ring}/1000, derivative {deriv}/1000, substitution {subst}/1000")


# 8. Determinism


def test_c8_determinism(tmp_path):
    problem = str(PROBLEMS / "example1.json")
    runs = []
    codes = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        codes.append(run(["synth", problem, "--out", str(out), "--seed", "7"]))
        codes.append(run(["sim", problem, "--certificate", str(out / "result.json"), "--seed", "7"]))
        runs.append(out)
    names = ["result.json", "check.json", "sim.json", "trajectory.csv", "states.csv", "control_sliding.csv"]
    same = [n for n in names if (runs[0] / n).read_bytes() == (runs[1] / n).read_bytes()]
    ok = codes == [0, 0, 0, 0] and same == names
    assert record("C8 determinism", ok, f"exit codes {codes}; identical: {', '.join(same)}")
