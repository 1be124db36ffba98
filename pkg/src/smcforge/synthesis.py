"""Alternating SOS synthesis of a sliding manifold S and Lyapunov certificate V.

Each mode alternates two convex steps:

* a certificate step that solves for ``V`` (or the Gram matrix ``Q`` of
  ``V = w^T Q w``) and ``S`` with the multipliers held fixed, and
* an objective step that holds ``V`` and ``S`` fixed and bisects on the rate
  or region size over the multipliers.

Decrease constraints are written so that success certifies dV/dt < 0 on the
manifold, e.g. ``-(dV/dz1 f1) - (1 - V) s2 + q^T S - l2`` is SOS. With the
decrease term entering positively the same constraint would certify growth.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .polynomial import IndeterminateSet, Polynomial, PolyMap, StructureError, format_polynomial
from .smc import (
    ControlLaw,
    RegularFormSystem,
    SlackDefinition,
    UnsolvableManifold,
    manifold_well_posed,
    sliding_dynamics,
)
from .sosprog import (
    CERT_TOL,
    EIG_TOL,
    FAILURE,
    INFEASIBLE,
    OPTIMAL,
    ClarabelSolver,
    GramCertificate,
    ParametricPolynomial,
    SolverHandle,
    SosProgram,
    SosSolution,
    check_certificate,
    check_psd_certificate,
    is_sos,
)

log = logging.getLogger(__name__)

SUCCESS = "success"
INFEASIBLE_FROM_INIT = "infeasible-from-init"
ITERATION_CAP = "iteration-cap"
SOLVER_FAILURE = "solver-failure"
MARGINAL = "marginal"

SLACK_NAME = "M"


class SolverFailure(RuntimeError):
    pass


class BracketError(ValueError):
    """The upper end of the bisection bracket is already feasible."""


class Infeasible(RuntimeError):
    pass


@dataclass
class SynthesisConfig:
    deg_V: int = 2
    deg_S: int = 1
    deg_q: int = 2
    deg_q_finite: int | None = None
    deg_s1: int = 2
    deg_s2: int = 2
    deg_s3: int = 2
    deg_K: int = 2
    deg_s0: int = 4
    deg_sM: int = 2
    eps_l: float | np.ndarray = 1e-4
    l_degree: int = 1
    shape_poly: Polynomial | None = None
    init_q: list[Polynomial] | None = None
    init_s2: Polynomial | None = None
    beta_init: float = -100.0
    beta_lo: float = -100.0
    beta_hi: float = 100.0
    beta_tol: float = 1e-3
    max_iter: int = 20
    w: list[Polynomial] | None = None
    p_exp: int = 2
    r_exp: int = 3
    eps_Q: float = 1e-4
    eps_s0: float = 1e-2
    slack_in_S: bool = True
    normalize_S: bool = False
    cert_tol: float = CERT_TOL
    eig_tol: float = EIG_TOL

    def validate(self, system: RegularFormSystem, finite: bool = False) -> None:
        if self.beta_lo >= self.beta_hi:
            raise ValueError("beta_lo must be below beta_hi")
        if self.beta_tol <= 0 or self.max_iter < 1:
            raise ValueError("beta_tol must be positive and max_iter at least 1")
        if finite and not self.r_exp > self.p_exp > 0:
            raise ValueError(f"need r_exp > p_exp > 0, got p={self.p_exp}, r={self.r_exp}")
        if self.init_q is not None:
            if len(self.init_q) != system.m:
                raise ValueError("init_q needs one polynomial per sliding variable")
            for q in self.init_q:
                if abs(q.coeff((0,) * q.vars.count)) > 0:
                    raise ValueError("init_q must vanish at the origin")
        if self.shape_poly is not None:
            p = self.shape_poly
            if abs(p.coeff((0,) * p.vars.count)) > 0:
                raise ValueError("shape_poly must vanish at the origin")
            # SOS gives p >= 0; positivity on sampled spheres rules out flat directions
            try:
                sol = is_sos(p)
                definite = sol.ok and all(c.accepted() for c in sol.certificates.values())
            except StructureError:
                definite = False
            if definite:
                u = np.random.default_rng(0).standard_normal((512, p.vars.count))
                u /= np.linalg.norm(u, axis=1, keepdims=True)
                u = np.vstack([u, np.eye(p.vars.count), -np.eye(p.vars.count)])
                definite = all(np.min(p(r * u)) > 1e-12 for r in (1e-2, 1.0))
            if not definite:
                raise ValueError("shape_poly is not certifiably positive definite")


@dataclass
class IterationRecord:
    iteration: int
    objective: float | None
    certificate_status: str
    objective_status: str
    probes: list[tuple[float, str]] = field(default_factory=list)
    beta: float | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "objective": self.objective,
            "certificate_status": self.certificate_status,
            "objective_status": self.objective_status,
            "probes": [[float(b), s] for b, s in self.probes],
            "beta": self.beta,
        }


@dataclass
class SynthesisResult:
    mode: str
    status: str
    state_names: tuple[str, ...]
    m: int
    objective: float | None
    V: Polynomial | None
    S: list[Polynomial]
    beta: float | None = None
    Q: np.ndarray | None = None
    w: list[Polynomial] | None = None
    p_exp: int | None = None
    r_exp: int | None = None
    multipliers: dict[str, list[Polynomial]] = field(default_factory=dict)
    certificates: dict[str, GramCertificate] = field(default_factory=dict)
    certified: dict[str, Polynomial | np.ndarray] = field(default_factory=dict)
    log: list[IterationRecord] = field(default_factory=list)
    shape_poly: Polynomial | None = None
    l2: Polynomial | None = None
    message: str = ""

    @property
    def alpha(self) -> float | None:
        if self.p_exp is None or self.r_exp is None:
            return None
        return self.p_exp / self.r_exp

    @property
    def settling_coefficient(self) -> float | None:
        """``k`` in ``T(x0) <= k * V(x0)^(1 - alpha)``."""
        if self.Q is None or not self.objective or self.objective <= 0:
            return None
        lam = float(np.linalg.eigvalsh(self.Q)[-1])
        if lam <= 1e-10:
            return None
        a = self.alpha
        return 1.0 / (self.objective * (1.0 / lam) ** a * (1.0 - a))

    def settling_bound(self, z) -> float | None:
        k = self.settling_coefficient
        if k is None or self.V is None:
            return None
        v = max(float(self.V(np.asarray(z, dtype=float)[: self.V.vars.count])), 0.0)
        return k * v ** (1.0 - self.alpha)

    @property
    def slack(self) -> SlackDefinition | None:
        if self.w is None:
            return None
        return SlackDefinition(tuple(self.w), self.p_exp, self.r_exp)

    def control_law(self, delta: float = 0.03) -> ControlLaw:
        slack = self.slack if self.S and self.S[0].vars.count > len(self.state_names) else None
        return ControlLaw(tuple(self.S), delta=delta, slack=slack)

    def to_dict(self) -> dict:
        state = IndeterminateSet(self.state_names)
        ext_names = list(self.state_names) + ([SLACK_NAME] if self.S and self.S[0].vars.count > state.count else [])
        d = {
            "mode": self.mode,
            "status": self.status,
            "state_names": list(self.state_names),
            "S_vars": ext_names,
            "m": self.m,
            "objective": self.objective,
            "beta": self.beta,
            "V": format_polynomial(self.V) if self.V is not None else None,
            "S": [format_polynomial(s) for s in self.S],
            "Q": None if self.Q is None else np.asarray(self.Q).tolist(),
            "w": None if self.w is None else [format_polynomial(x) for x in self.w],
            "p_exp": self.p_exp,
            "r_exp": self.r_exp,
            "alpha": self.alpha,
            "settling_coefficient": self.settling_coefficient,
            "shape_poly": None if self.shape_poly is None else format_polynomial(self.shape_poly),
            "multiplier_vars": None,
            "multipliers": {k: [format_polynomial(p) for p in v] for k, v in sorted(self.multipliers.items())},
            "certificates": {k: c.to_dict() for k, c in sorted(self.certificates.items())},
            "l2": None if self.l2 is None else format_polynomial(self.l2),
            "log": [r.to_dict() for r in self.log],
            "message": self.message,
        }
        if self.multipliers:
            first = next(iter(self.multipliers.values()))
            if first:
                d["multiplier_vars"] = list(first[0].vars.names)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisResult":
        names = tuple(d["state_names"])
        state = IndeterminateSet(names)
        s_names = tuple(d.get("S_vars") or names)
        s_vars = IndeterminateSet(s_names, slack={SLACK_NAME} if SLACK_NAME in s_names and SLACK_NAME not in names else ())
        m = int(d["m"])
        z1 = IndeterminateSet(names[: len(names) - m])
        V = None
        if d.get("V") is not None:
            V = Polynomial.parse(d["V"], state)
            try:
                V = V.restrict(z1)
            except StructureError:
                pass
        mult = {}
        if d.get("multiplier_vars"):
            mv = IndeterminateSet(tuple(d["multiplier_vars"]), slack={SLACK_NAME} if SLACK_NAME in d["multiplier_vars"] else ())
            mult = {k: [Polynomial.parse(s, mv) for s in v] for k, v in d.get("multipliers", {}).items()}
        certs = {
            k: GramCertificate([tuple(b) for b in c["basis"]], np.array(c["gram"], dtype=float).reshape(len(c["basis"]), -1) if c["basis"] else np.array(c["gram"], dtype=float), c["residual"], c["min_eig"])
            for k, c in d.get("certificates", {}).items()
        }
        return cls(
            mode=d["mode"],
            status=d["status"],
            state_names=names,
            m=m,
            objective=d.get("objective"),
            V=V,
            S=[Polynomial.parse(s, s_vars) for s in d["S"]],
            beta=d.get("beta"),
            Q=None if d.get("Q") is None else np.array(d["Q"], dtype=float),
            w=None if d.get("w") is None else [Polynomial.parse(s, state) for s in d["w"]],
            p_exp=d.get("p_exp"),
            r_exp=d.get("r_exp"),
            multipliers=mult,
            certificates=certs,
            shape_poly=None if d.get("shape_poly") is None else Polynomial.parse(d["shape_poly"], state),
            l2=None if d.get("l2") is None else Polynomial.parse(d["l2"], state),
            log=[
                IterationRecord(
                    r["iteration"], r.get("objective"), r.get("certificate_status", ""),
                    r.get("objective_status", ""), [(float(b), st) for b, st in r.get("probes", [])], r.get("beta"),
                )
                for r in d.get("log", [])
            ],
            message=d.get("message", ""),
        )


# ---------------------------------------------------------------------------
# building blocks


def build_l(vars: IndeterminateSet, d: int, eps, indices: Sequence[int] | None = None) -> Polynomial:
    """``sum_i sum_j eps[i, j] * z_i^(2j)`` for the chosen indeterminates.

    ``eps`` is a scalar (used for every entry) or an array of shape
    ``(len(indices), d)``. Each row needs a positive sum and no negative entry.
    """
    indices = list(range(vars.count)) if indices is None else list(indices)
    E = np.asarray(eps, dtype=float)
    if E.ndim == 0:
        E = np.full((len(indices), d), float(E))
    if E.shape != (len(indices), d):
        raise ValueError(f"eps must have shape {(len(indices), d)}, got {E.shape}")
    if np.any(E < 0) or np.any(E.sum(axis=1) <= 0):
        raise ValueError("every row of eps must be non-negative with a positive sum")
    out = Polynomial.zero(vars)
    for r, i in enumerate(indices):
        for j in range(1, d + 1):
            mono = [0] * vars.count
            mono[i] = 2 * j
            out = out + Polynomial.monomial(vars, mono, E[r, j - 1])
    return out


def _lie(V: Polynomial | ParametricPolynomial, f1: Sequence[Polynomial], z1_idx: Sequence[int]):
    out = None
    for j, f in zip(z1_idx, f1):
        term = V.diff(j) * f
        out = term if out is None else out + term
    return out


def _sum_sq(vars: IndeterminateSet, indices: Sequence[int]) -> Polynomial:
    out = Polynomial.zero(vars)
    for i in indices:
        v = Polynomial.variable(vars, i)
        out = out + v * v
    return out


@dataclass
class _Setup:
    """System data lifted to the synthesis indeterminates."""

    system: RegularFormSystem
    X: IndeterminateSet
    f1: list[Polynomial]
    z1: list[int]
    z: list[int]
    S_idx: list[int]
    shape: Polynomial
    l1: Polynomial
    l2: Polynomial
    slack: int | None = None


def _setup(system: RegularFormSystem, cfg: SynthesisConfig, finite: bool = False) -> _Setup:
    X = system.vars.extended([SLACK_NAME], slack=[SLACK_NAME]) if finite else system.vars
    z1 = system.z1_idx
    z = list(range(system.n))
    shape = cfg.shape_poly.lift(X) if cfg.shape_poly is not None else _sum_sq(X, z1)
    l1 = build_l(X, cfg.l_degree, cfg.eps_l, z1)
    l2 = build_l(X, cfg.l_degree, cfg.eps_l, z)
    slack = system.n if finite else None
    S_idx = z + ([slack] if finite and cfg.slack_in_S else [])
    return _Setup(system, X, [f.lift(X) for f in system.f1], z1, z, S_idx, shape, l1, l2, slack)


def _default_q(setup: _Setup, cfg: SynthesisConfig) -> list[Polynomial]:
    if cfg.init_q is not None:
        return [q.lift(setup.X) for q in cfg.init_q]
    q = Polynomial.zero(setup.X)
    for i in setup.z:
        q = q + Polynomial.variable(setup.X, i)
    return [q] * setup.system.m


def _default_s2(setup: _Setup, cfg: SynthesisConfig) -> Polynomial:
    if cfg.init_s2 is not None:
        return cfg.init_s2.lift(setup.X)
    return _sum_sq(setup.X, setup.z)


def _q_degree(cfg: SynthesisConfig, other_degree: int, s_degree: int) -> int:
    """deg_q, lowered so that q^T S does not push the constraint to odd degree."""
    top = other_degree + other_degree % 2
    return max(1, min(cfg.deg_q, top - s_degree))


def _q_unknowns(prog: SosProgram, setup: _Setup, cfg: SynthesisConfig, degree: int, idx=None):
    idx = setup.S_idx if idx is None else idx
    return [prog.new_poly(f"q{i}", idx, degree, min_degree=1) for i in range(setup.system.m)]


def _S_unknowns(prog: SosProgram, setup: _Setup, cfg: SynthesisConfig, normalize: bool):
    S = [prog.new_poly(f"S{i}", setup.S_idx, cfg.deg_S, min_degree=1) for i in range(setup.system.m)]
    if normalize:
        zero = [0] * setup.X.count
        for i, s in enumerate(S):
            for j, col in enumerate(setup.system.z2_idx):
                mono = list(zero)
                mono[col] = 1
                target = 1.0 if i == j else 0.0
                coeff = ParametricPolynomial(
                    Polynomial.constant(setup.X, -target),
                    {k: Polynomial.constant(setup.X, shape.coeff(mono)) for k, shape in s.lin.items() if shape.coeff(mono)},
                )
                prog.add_equality(coeff)
    return S


def _dot(q: Sequence, S: Sequence):
    out = None
    for a, b in zip(q, S):
        out = a * b if out is None else out + a * b
    return out


def _solve(prog: SosProgram, solver: SolverHandle | None, cfg: SynthesisConfig) -> SosSolution:
    return prog.solve(solver or ClarabelSolver(), cfg.cert_tol, cfg.eig_tol)


def bisect(
    probe: Callable[[float], SosSolution],
    lo: float,
    hi: float,
    tol: float,
) -> tuple[float, SosSolution, list[tuple[float, str]]]:
    """Largest ``b`` in [lo, hi] with a certified-feasible probe, to within ``tol``.

    Probes that end in numerical failure count as not certified (the bracket
    shrinks from above) and are recorded as such. Failure or infeasibility
    at ``lo`` is raised.
    """
    probes: list[tuple[float, str]] = []
    sol_lo = probe(lo)
    probes.append((lo, sol_lo.status))
    if sol_lo.status == FAILURE:
        raise SolverFailure(f"solver failed at the lower bracket end {lo}: {sol_lo.info}")
    if sol_lo.status != OPTIMAL:
        raise Infeasible(f"infeasible at the lower bracket end {lo}")
    sol_hi = probe(hi)
    probes.append((hi, sol_hi.status))
    if sol_hi.status == OPTIMAL:
        raise BracketError(f"still feasible at the upper bracket end {hi}; widen beta_hi")
    best = sol_lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        sol = probe(mid)
        probes.append((mid, sol.status))
        if sol.status == OPTIMAL:
            lo, best = mid, sol
        else:
            hi = mid
    return lo, best, probes


def _well_posed(S: list[Polynomial], system: RegularFormSystem) -> bool:
    lin = all(p.degree <= 1 for p in S)
    return not lin or manifold_well_posed(S, system) >= 1e-6


# ---------------------------------------------------------------------------
# region-of-attraction mode


@dataclass
class CertificateStep:
    V: Polynomial
    S: list[Polynomial]
    extra: dict[str, Polynomial]
    solution: SosSolution


@dataclass
class ObjectiveStep:
    value: float
    multipliers: dict[str, list[Polynomial]]
    solution: SosSolution
    probes: list[tuple[float, str]]
    beta: float | None = None
    beta_solution: SosSolution | None = None


def solve_certificate_step(
    system: RegularFormSystem,
    config: SynthesisConfig,
    s2: Polynomial,
    q: Sequence[Polynomial],
    beta_prev: float,
    solver: SolverHandle | None = None,
) -> CertificateStep:
    """Find V, S, s1 with s2, q and beta fixed (ROA mode).

    Raises :class:`Infeasible` or :class:`SolverFailure`.
    """
    setup = _setup(system, config)
    s2 = s2.lift(setup.X)
    q = [p.lift(setup.X) for p in q]

    def attempt(normalize):
        prog = SosProgram(setup.X)
        V = prog.new_poly("V", setup.z1, config.deg_V, min_degree=2)
        S = _S_unknowns(prog, setup, config, normalize)
        s1 = prog.new_sos_poly("s1", setup.z1, config.deg_s1)
        prog.add_sos(V - setup.l1, "lyapunov")
        Vdot = _lie(V, setup.f1, setup.z1)
        prog.add_sos(-Vdot - (1.0 - V) * s2 + _dot(q, S) - setup.l2, "decrease")
        prog.add_sos(-((beta_prev - setup.shape) * s1 + (V - 1.0)), "containment")
        sol = _solve(prog, solver, config)
        return sol, V, S, s1

    return _certificate_with_retry(attempt, system, config, lambda sol, V, S, s1: {"s1": sol.value(s1)})


def _certificate_with_retry(attempt, system, config, extras) -> CertificateStep:
    normalize = config.normalize_S
    while True:
        sol, V, S, *rest = attempt(normalize)
        if sol.status == FAILURE:
            raise SolverFailure(f"certificate step: {sol.info}")
        if sol.status != OPTIMAL:
            raise Infeasible(f"certificate step {sol.status}")
        Sv = [sol.value(s) for s in S]
        if _well_posed(Sv, system) or normalize:
            if not _well_posed(Sv, system):
                raise Infeasible("manifold is not well posed (singular dS/dz2 at the origin)")
            Vv = sol.value(V) if isinstance(V, ParametricPolynomial) else V
            return CertificateStep(Vv, Sv, extras(sol, V, S, *rest), sol)
        log.info("dS/dz2 singular at origin; re-solving with normalized manifold")
        normalize = True


def maximize_beta(
    system: RegularFormSystem,
    config: SynthesisConfig,
    V: Polynomial,
    S: Sequence[Polynomial],
    lo: float | None = None,
    solver: SolverHandle | None = None,
) -> ObjectiveStep:
    """Bisection for the largest beta with ``{p <= beta}`` certified inside ``{V <= 1}``."""
    setup = _setup(system, config)
    V = V.lift(setup.X)
    S = [s.lift(setup.X) for s in S]
    Vdot = _lie(V, setup.f1, setup.z1)
    other = max(Vdot.degree, V.degree + config.deg_s2, setup.l2.degree)
    dq = _q_degree(config, other, max(s.degree for s in S))
    holder = {}

    def probe(beta):
        prog = SosProgram(setup.X)
        q = _q_unknowns(prog, setup, config, dq)
        s2 = prog.new_sos_poly("s2", setup.z, config.deg_s2, min_degree=2)
        s3 = prog.new_sos_poly("s3", setup.z1, config.deg_s3)
        prog.add_sos(V - setup.l1, "lyapunov")
        prog.add_sos(-Vdot - (1.0 - V) * s2 + _dot(q, S) - setup.l2, "decrease")
        prog.add_sos(-((beta - setup.shape) * s3 + (V - 1.0)), "containment")
        sol = _solve(prog, solver, config)
        holder[id(sol)] = (q, s2, s3)
        return sol

    start = config.beta_lo if lo is None else lo
    beta, sol, probes = bisect(probe, start, config.beta_hi, config.beta_tol)
    q, s2, s3 = holder[id(sol)]
    mult = {"q": [sol.value(p) for p in q], "s2": [sol.value(s2)], "s3": [sol.value(s3)]}
    return ObjectiveStep(beta, mult, sol, probes)


def _finish(result: SynthesisResult, sol: SosSolution) -> SynthesisResult:
    result.certificates = dict(sol.certificates)
    result.certified = dict(sol.certified)
    return result


def _stop(result: SynthesisResult, status: str, message: str) -> SynthesisResult:
    result.status = status
    result.message = message
    return result


def _stalled(result: SynthesisResult, config: SynthesisConfig, why: str) -> SynthesisResult:
    best = result.objective
    if best is not None and abs(best) <= config.beta_tol:
        return _stop(result, MARGINAL, f"{why}; objective converged to zero (decay certified only sub-exponentially)")
    return _stop(result, INFEASIBLE_FROM_INIT, f"{why}; no positive objective reachable from this initialization")


def _alternate(
    result: SynthesisResult,
    config: SynthesisConfig,
    certify: Callable[[float], CertificateStep],
    optimize: Callable[[CertificateStep, float], ObjectiveStep],
    accept: Callable[[CertificateStep, ObjectiveStep], None],
) -> SynthesisResult:
    """Shared alternation loop.

    Stops on a positive objective (success), on infeasibility in the first
    iteration, or when the objective stops improving while non-positive.
    """
    prev = config.beta_init
    for it in range(1, config.max_iter + 1):
        rec = IterationRecord(it, None, "", "")
        result.log.append(rec)
        try:
            step = certify(prev)
        except Infeasible as exc:
            rec.certificate_status = INFEASIBLE
            if it == 1:
                return _stop(result, INFEASIBLE_FROM_INIT, str(exc))
            return _stalled(result, config, f"certificate step infeasible at level {prev:.6g}")
        except SolverFailure as exc:
            rec.certificate_status = FAILURE
            if it == 1:
                return _stop(result, SOLVER_FAILURE, str(exc))
            # the previous level sits on the feasibility frontier, where the
            # interior-point solver commonly stops short of optimality
            return _stalled(result, config, f"certificate step failed at the previous level {prev:.6g}")
        rec.certificate_status = OPTIMAL
        try:
            obj = optimize(step, max(prev, config.beta_lo))
        except Infeasible as exc:
            rec.objective_status = INFEASIBLE
            if it == 1:
                return _stop(result, INFEASIBLE_FROM_INIT, str(exc))
            return _stalled(result, config, str(exc))
        except SolverFailure as exc:
            rec.objective_status = FAILURE
            if it == 1:
                return _stop(result, SOLVER_FAILURE, str(exc))
            return _stalled(result, config, f"objective step failed at the previous level {prev:.6g}")
        except BracketError as exc:
            rec.objective_status = FAILURE
            return _stop(result, SOLVER_FAILURE, str(exc))
        rec.objective_status = OPTIMAL
        rec.objective = obj.value
        rec.probes = obj.probes
        result.objective = obj.value
        _finish(result, obj.solution)
        accept(step, obj)
        log.info("%s iteration %d: objective = %.6g", result.mode, it, obj.value)
        if obj.value > config.beta_tol:
            return _stop(result, SUCCESS, "")
        if it > 1 and obj.value - prev <= config.beta_tol:
            return _stalled(result, config, f"objective stalled at {obj.value:.6g}")
        prev = obj.value
    return _stop(result, ITERATION_CAP, f"no positive objective after {config.max_iter} iterations")


def synthesize_roa(
    system: RegularFormSystem, config: SynthesisConfig | None = None, solver: SolverHandle | None = None
) -> SynthesisResult:
    """Alternate certificate/beta steps until the shape level beta is positive."""
    config = config or SynthesisConfig()
    config.validate(system)
    setup = _setup(system, config)
    state = {"q": _default_q(setup, config), "s2": _default_s2(setup, config)}
    result = SynthesisResult("roa", ITERATION_CAP, system.vars.names, system.m, None, None, [], shape_poly=setup.shape, l2=setup.l2)

    def certify(prev):
        return solve_certificate_step(system, config, state["s2"], state["q"], prev, solver)

    def optimize(step, lo):
        return maximize_beta(system, config, step.V, step.S, lo=lo, solver=solver)

    def accept(step, obj):
        result.V = step.V.restrict(system.z1_vars)
        result.S = step.S
        result.beta = result.log[-1].beta = obj.value
        result.multipliers = obj.multipliers
        state["q"], state["s2"] = obj.multipliers["q"], obj.multipliers["s2"][0]

    return _alternate(result, config, certify, optimize, accept)


# ---------------------------------------------------------------------------
# global exponential mode


def certificate_step_global(
    system: RegularFormSystem,
    config: SynthesisConfig,
    q: Sequence[Polynomial],
    beta_prev: float,
    solver: SolverHandle | None = None,
) -> CertificateStep:
    setup = _setup(system, config)
    q = [p.lift(setup.X) for p in q]

    def attempt(normalize):
        prog = SosProgram(setup.X)
        V = prog.new_poly("V", setup.z1, config.deg_V, min_degree=2)
        S = _S_unknowns(prog, setup, config, normalize)
        prog.add_sos(V - setup.l1, "lyapunov")
        prog.add_sos(-_lie(V, setup.f1, setup.z1) + _dot(q, S) - beta_prev * V, "decrease")
        return _solve(prog, solver, config), V, S

    return _certificate_with_retry(attempt, system, config, lambda sol, V, S: {})


def maximize_beta_global(
    system: RegularFormSystem,
    config: SynthesisConfig,
    V: Polynomial,
    S: Sequence[Polynomial],
    lo: float | None = None,
    solver: SolverHandle | None = None,
) -> ObjectiveStep:
    """Largest rate beta with ``-dV/dz1 f1 + q^T S - beta V`` SOS (dV/dt <= -beta V on S = 0)."""
    setup = _setup(system, config)
    V = V.lift(setup.X)
    S = [s.lift(setup.X) for s in S]
    Vdot = _lie(V, setup.f1, setup.z1)
    dq = _q_degree(config, max(Vdot.degree, V.degree), max(s.degree for s in S))
    holder = {}

    def probe(beta):
        prog = SosProgram(setup.X)
        q = _q_unknowns(prog, setup, config, dq)
        prog.add_sos(V - setup.l1, "lyapunov")
        prog.add_sos(-Vdot + _dot(q, S) - beta * V, "decrease")
        sol = _solve(prog, solver, config)
        holder[id(sol)] = q
        return sol

    start = config.beta_lo if lo is None else lo
    beta, sol, probes = bisect(probe, start, config.beta_hi, config.beta_tol)
    q = holder[id(sol)]
    return ObjectiveStep(beta, {"q": [sol.value(p) for p in q]}, sol, probes)


def synthesize_global(
    system: RegularFormSystem, config: SynthesisConfig | None = None, solver: SolverHandle | None = None
) -> SynthesisResult:
    """Alternation certifying dV/dt <= -beta V on S = 0 with beta > 0."""
    config = config or SynthesisConfig()
    config.validate(system)
    setup = _setup(system, config)
    state = {"q": _default_q(setup, config)}
    result = SynthesisResult("global", ITERATION_CAP, system.vars.names, system.m, None, None, [], l2=setup.l2)

    def certify(prev):
        return certificate_step_global(system, config, state["q"], prev, solver)

    def optimize(step, lo):
        return maximize_beta_global(system, config, step.V, step.S, lo=lo, solver=solver)

    def accept(step, obj):
        result.V = step.V.restrict(system.z1_vars)
        result.S = step.S
        result.multipliers = obj.multipliers
        state["q"] = obj.multipliers["q"]

    return _alternate(result, config, certify, optimize, accept)


# ---------------------------------------------------------------------------
# finite-time mode


@dataclass
class _FiniteSetup:
    base: _Setup
    w: list[Polynomial]
    T: Polynomial
    tie: Polynomial
    M: Polynomial
    s0_norm: Polynomial


def _finite_setup(system: RegularFormSystem, cfg: SynthesisConfig) -> _FiniteSetup:
    base = _setup(system, cfg, finite=True)
    X = base.X
    if cfg.w is None:
        w = [Polynomial.variable(X, i) for i in base.z1]
    else:
        w = [p.lift(X) for p in cfg.w]
    T = Polynomial.zero(X)
    for wi in w:
        T = T + wi * wi
    M = Polynomial.variable(X, base.slack)
    tie = M**cfg.r_exp - T**cfg.p_exp
    k = math.ceil((cfg.r_exp - 1) / 2)
    return _FiniteSetup(base, w, T, tie, M, cfg.eps_s0 * M ** (2 * max(k, 1)))


def _quad(w: Sequence[Polynomial], Q) -> Polynomial | ParametricPolynomial:
    out = None
    k = len(w)
    for i in range(k):
        for j in range(k):
            qij = Q[i][j]
            if isinstance(qij, (int, float, np.floating)):
                if qij == 0:
                    continue
                term = w[i] * w[j] * float(qij)
            else:
                term = qij * (w[i] * w[j])
            out = term if out is None else out + term
    return out if out is not None else Polynomial.zero(w[0].vars)


def certificate_step_finite(
    system: RegularFormSystem,
    config: SynthesisConfig,
    q: Sequence[Polynomial],
    s0: Polynomial,
    c_prev: float,
    s2: Polynomial | None = None,
    beta_prev: float | None = None,
    solver: SolverHandle | None = None,
) -> CertificateStep:
    """Find Q, S (and s1 for the regional variant) with the multipliers fixed."""
    fs = _finite_setup(system, config)
    st = fs.base
    q = [p.lift(st.X) for p in q]
    s0 = s0.lift(st.X)
    regional = s2 is not None
    k = len(fs.w)
    all_idx = st.z + [st.slack]

    def attempt(normalize):
        prog = SosProgram(st.X)
        Q = prog.new_symmetric("Q", k, psd_shift=config.eps_Q)
        V = _quad(fs.w, Q)
        S = _S_unknowns(prog, st, config, normalize)
        K = prog.new_poly("K", all_idx, config.deg_K)
        sM = prog.new_sos_poly("sM", all_idx, config.deg_sM)
        Vdot = _lie(V, st.f1, st.z1)
        dec = (-Vdot - c_prev * fs.M) * s0 + K * fs.tie + _dot(q, S) - sM * fs.M
        s1 = None
        if regional:
            dec = dec - (1.0 - V) * s2.lift(st.X)
            s1 = prog.new_sos_poly("s1", st.z1, config.deg_s1)
            prog.add_sos(-((beta_prev - st.shape) * s1 + (V - 1.0)), "containment")
        prog.add_sos(dec, "decrease")
        sol = _solve(prog, solver, config)
        return sol, V, S, Q, s1

    def extras(sol, V, S, Q, s1):
        Qv = np.array([[sol.scalar(Q[i][j]) for j in range(k)] for i in range(k)])
        out = {"Q": Qv}
        if s1 is not None:
            out["s1"] = sol.value(s1)
        return out

    return _certificate_with_retry(attempt, system, config, extras)


def maximize_c(
    system: RegularFormSystem,
    config: SynthesisConfig,
    Q: np.ndarray,
    S: Sequence[Polynomial],
    regional: bool = False,
    lo: float | None = None,
    solver: SolverHandle | None = None,
) -> ObjectiveStep:
    """Largest c with dV/dt <= -c M certified on ``{M^r = (w^T w)^p, M >= 0, S = 0}``.

    The decrease condition is multiplied by an SOS weight ``s0`` bounded below
    by ``eps_s0 * M^(2k)``: without it no polynomial multiplier of the tie can
    compensate ``-c M`` near ``z = 0, M > 0`` and every ``c > 0`` is
    infeasible. ``s0 > 0`` wherever ``M > 0`` on the tie, so the weighted
    condition implies the unweighted one there.
    """
    fs = _finite_setup(system, config)
    st = fs.base
    S = [s.lift(st.X) for s in S]
    V = _quad(fs.w, np.asarray(Q, dtype=float))
    Vdot = _lie(V, st.f1, st.z1)
    all_idx = st.z + [st.slack]
    other = max(config.deg_s0 + max(Vdot.degree, 1), config.deg_K + fs.tie.degree)
    s_deg = max(s.degree for s in S)
    if config.deg_q_finite is None:
        dq = max(1, other + other % 2 - s_deg)
    else:
        dq = _q_degree(replace(config, deg_q=config.deg_q_finite), other, s_deg)
    holder = {}

    def probe(c):
        prog = SosProgram(st.X)
        q = _q_unknowns(prog, st, config, dq, idx=all_idx)
        K = prog.new_poly("K", all_idx, config.deg_K)
        sM = prog.new_sos_poly("sM", all_idx, config.deg_sM)
        s0 = prog.new_sos_poly("s0", all_idx, config.deg_s0)
        prog.add_sos(s0 - fs.s0_norm, "weight")
        dec = s0 * (-Vdot - c * fs.M) + K * fs.tie + _dot(q, S) - sM * fs.M
        s2 = None
        if regional:
            s2 = prog.new_sos_poly("s2", st.z, config.deg_s2, min_degree=2)
            dec = dec - (1.0 - V) * s2
        prog.add_sos(dec, "decrease")
        sol = _solve(prog, solver, config)
        holder[id(sol)] = (q, K, sM, s0, s2)
        return sol

    start = config.beta_lo if lo is None else lo
    c, sol, probes = bisect(probe, start, config.beta_hi, config.beta_tol)
    q, K, sM, s0, s2 = holder[id(sol)]
    mult = {"q": [sol.value(p) for p in q], "K": [sol.value(K)], "sM": [sol.value(sM)], "s0": [sol.value(s0)]}
    if s2 is not None:
        mult["s2"] = [sol.value(s2)]
    return ObjectiveStep(c, mult, sol, probes)


def maximize_beta_finite(
    system: RegularFormSystem,
    config: SynthesisConfig,
    Q: np.ndarray,
    solver: SolverHandle | None = None,
) -> ObjectiveStep:
    """Largest beta with ``{p <= beta}`` inside ``{w^T Q w <= 1}``."""
    fs = _finite_setup(system, config)
    st = fs.base
    V = _quad(fs.w, np.asarray(Q, dtype=float))
    holder = {}

    def probe(beta):
        prog = SosProgram(st.X)
        s3 = prog.new_sos_poly("s3", st.z1, config.deg_s3)
        prog.add_sos(-((beta - st.shape) * s3 + (V - 1.0)), "containment")
        sol = _solve(prog, solver, config)
        holder[id(sol)] = s3
        return sol

    beta, sol, probes = bisect(probe, config.beta_lo, config.beta_hi, config.beta_tol)
    return ObjectiveStep(beta, {"s3": [sol.value(holder[id(sol)])]}, sol, probes)


def synthesize_finite_time(
    system: RegularFormSystem,
    config: SynthesisConfig | None = None,
    global_: bool = True,
    solver: SolverHandle | None = None,
) -> SynthesisResult:
    """Finite-time variant: V = w^T Q w with dV/dt <= -c (w^T w)^(p/r) on the manifold."""
    config = config or SynthesisConfig()
    config.validate(system, finite=True)
    fs = _finite_setup(system, config)
    st = fs.base
    state = {
        "q": _default_q(st, config),
        "s0": fs.M ** (2 * max(math.ceil((config.r_exp - 1) / 2), 1)),
        # the decrease term is weighted by s0 = O(M^2), so a positive-definite
        # quadratic s2 cannot be absorbed; start from the global condition
        "s2": None if global_ else (config.init_s2.lift(st.X) if config.init_s2 is not None else Polynomial.zero(st.X)),
        "beta": config.beta_init,
    }
    mode = "finite-global" if global_ else "finite"
    state_w = [p.restrict(system.vars) for p in fs.w]
    result = SynthesisResult(
        mode, ITERATION_CAP, system.vars.names, system.m, None, None, [],
        w=state_w, p_exp=config.p_exp, r_exp=config.r_exp,
        shape_poly=None if global_ else st.shape,
    )
    z2_free = all(p.degree_in(j) <= 0 for p in state_w for j in system.z2_idx)

    def certify(prev):
        return certificate_step_finite(system, config, state["q"], state["s0"], prev, state["s2"], state["beta"], solver)

    def optimize(step, lo):
        obj = maximize_c(system, config, step.extra["Q"], step.S, regional=not global_, lo=lo, solver=solver)
        if not global_:
            roa = maximize_beta_finite(system, config, step.extra["Q"], solver)
            obj.multipliers["s3"] = roa.multipliers["s3"]
            obj.beta = roa.value
            obj.beta_solution = roa.solution
        return obj

    def accept(step, obj):
        Qv = step.extra["Q"]
        result.Q = Qv
        V = _quad(state_w, Qv)
        result.V = V.restrict(system.z1_vars) if z2_free else V
        result.S = step.S if config.slack_in_S else [s.restrict(system.vars) for s in step.S]
        result.multipliers = obj.multipliers
        state["q"], state["s0"] = obj.multipliers["q"], obj.multipliers["s0"][0]
        if not global_:
            state["s2"] = obj.multipliers["s2"][0]
            state["beta"] = result.beta = result.log[-1].beta = obj.beta
            for name, cert in obj.beta_solution.certificates.items():
                result.certificates[f"roa_{name}"] = cert
                result.certified[f"roa_{name}"] = obj.beta_solution.certified[name]

    return _alternate(result, config, certify, optimize, accept)


def synthesize(system: RegularFormSystem, mode: str, config: SynthesisConfig | None = None, solver=None) -> SynthesisResult:
    if mode == "roa":
        return synthesize_roa(system, config, solver)
    if mode == "global":
        return synthesize_global(system, config, solver)
    if mode == "finite":
        return synthesize_finite_time(system, config, global_=False, solver=solver)
    if mode == "finite-global":
        return synthesize_finite_time(system, config, global_=True, solver=solver)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# independent sampling checks


def _sublevel_box(V: Polynomial, level: float = 1.0, rng=None, rmax: float = 1e3) -> np.ndarray:
    """Half-widths of a box containing ``{V <= level}`` found by radial search."""
    n = V.vars.count
    rng = rng or np.random.default_rng(0)
    dirs = np.vstack([np.eye(n), -np.eye(n), rng.normal(size=(400, n))])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.logspace(-3, math.log10(rmax), 400)
    ext = np.zeros(n)
    for d in dirs:
        vals = V(radii[:, None] * d[None, :])
        inside = np.nonzero(vals <= level)[0]
        if len(inside) == 0:
            continue
        r = radii[min(inside[-1] + 1, len(radii) - 1)]
        ext = np.maximum(ext, np.abs(d) * r)
    return np.maximum(ext * 1.05, 1e-3)


def _l2_values(l2: Polynomial | None, Z: np.ndarray) -> np.ndarray:
    if l2 is None:
        return np.zeros(len(Z))
    return l2(Z[:, : l2.vars.count]) if l2.vars.count <= Z.shape[1] else np.zeros(len(Z))


def _slack_values(slack: SlackDefinition, Z: np.ndarray) -> np.ndarray:
    return slack.values(Z[:, : slack.w[0].vars.count])


def _sample_sublevel(V: Polynomial, half: np.ndarray, count: int, rng) -> np.ndarray:
    """``count`` uniform points of ``{V <= 1}`` by rejection from its bounding box."""
    kept, have = [np.zeros((0, len(half)))], 0
    for _ in range(1000):
        if have >= count:
            break
        pts = rng.uniform(-half, half, size=(max(count, 1024), len(half)))
        pts = pts[V(pts) <= 1.0]
        kept.append(pts)
        have += len(pts)
    return np.vstack(kept)[:count]


def verify_result(
    system: RegularFormSystem,
    result: SynthesisResult,
    samples: int = 100_000,
    seed: int = 0,
    box: float = 2.0,
    tol: float = 1e-6,
    region: str = "auto",
) -> dict:
    """Sampling checks of containment, decrease along the sliding dynamics, and certificates.

    Decrease is tested on ``{V <= 1, |z1| >= 1e-3}`` (``region="sublevel"``,
    the default for ROA and regional finite-time modes) or on
    ``|z1|_inf <= box`` (``region="box"``, the default for global modes). In
    the sublevel region ``samples`` points are drawn inside the set itself. The
    expected inequality depends on the mode: ``dV <= -l2`` (roa),
    ``dV <= -beta V`` (global), ``dV <= -c (w^T w)^(p/r)`` (finite-time).
    """
    if region not in ("auto", "sublevel", "box"):
        raise ValueError(f"unknown region {region!r}")
    rng = np.random.default_rng(seed)
    report = {
        "mode": result.mode,
        "samples": samples,
        "seed": seed,
        "containment_violations": 0,
        "decrease_violations": 0,
        "decrease_samples": 0,
        "root_failures": 0,
        "max_decrease_slack": None,
        "certificate_failures": [],
    }
    V = result.V
    nz1 = system.n - system.m
    z1_vars = system.z1_vars
    if V.vars != z1_vars:
        V = V.restrict(z1_vars)
    law = result.control_law()
    try:
        dyn = sliding_dynamics(law, system)
    except UnsolvableManifold as exc:
        report["root_failures"] = samples
        report["message"] = str(exc)
        report["ok"] = False
        return report

    regional = result.mode in ("roa", "finite") if region == "auto" else region == "sublevel"
    if regional:
        half = _sublevel_box(V, 1.0, rng)
        pts = _sample_sublevel(V, half, samples, rng)
    else:
        half = np.full(nz1, box if result.mode == "global" else 1.0)
        pts = rng.uniform(-half, half, size=(samples, nz1))

    if result.mode == "roa" and result.shape_poly is not None and result.beta is not None:
        p = result.shape_poly.restrict(z1_vars) if result.shape_poly.vars != z1_vars else result.shape_poly
        pbox = _sublevel_box(p, max(result.beta, 1e-12), rng) if result.beta > 0 else half
        cpts = rng.uniform(-pbox, pbox, size=(samples, nz1))
        pv = p(cpts)
        vv = V(cpts)
        report["containment_violations"] = int(np.sum((pv <= result.beta) & (vv > 1.0 + tol)))

    mask = np.linalg.norm(pts, axis=1) >= 1e-3
    Z, ok = dyn.states(pts[mask])
    report["root_failures"] = int(np.sum(~ok))
    Z = Z[ok]
    Z1 = Z[:, :nz1]
    grads = PolyMap([V.diff(j) for j in range(nz1)])(Z1)
    f1 = PolyMap(list(system.f1))(Z)
    vdot = np.einsum("ij,ij->i", grads, f1)
    if result.mode == "roa":
        bound = -_l2_values(result.l2, Z)
        slack_val = vdot - bound
        bad = (vdot >= 0) | (slack_val > tol)
    elif result.mode == "global":
        slack_val = vdot + result.objective * V(Z1)
        bad = slack_val > tol
    else:
        slack_val = vdot + result.objective * _slack_values(result.slack, Z)
        bad = slack_val > tol
    report["decrease_samples"] = int(np.sum(mask))
    report["decrease_violations"] = int(np.sum(bad))
    report["max_decrease_slack"] = float(np.max(slack_val)) if len(slack_val) else None

    for name, cert in sorted(result.certificates.items()):
        target = result.certified.get(name)
        if target is None:
            continue
        if isinstance(target, Polynomial):
            ok = check_certificate(target, cert)
        else:
            ok = check_psd_certificate(target, cert)
        if not ok:
            report["certificate_failures"].append(name)
    report["ok"] = (
        report["containment_violations"] == 0
        and report["decrease_violations"] == 0
        and report["root_failures"] == 0
        and not report["certificate_failures"]
    )
    return report


def certify_fixed(
    system: RegularFormSystem,
    V: Polynomial | None,
    S: Sequence[Polynomial],
    mode: str = "global",
    config: SynthesisConfig | None = None,
    Q: np.ndarray | None = None,
    solver: SolverHandle | None = None,
) -> SynthesisResult:
    """Check a user-supplied (V, S): the objective step of ``mode`` alone.

    Finite-time modes take the Gram matrix ``Q`` (with ``config.w``) instead
    of ``V``; ``S`` may then involve the trailing slack indeterminate.
    """
    config = config or SynthesisConfig()
    setup = _setup(system, config)
    result = SynthesisResult(mode, SUCCESS, system.vars.names, system.m, None, None, list(S), l2=setup.l2)
    try:
        if mode == "global":
            obj = maximize_beta_global(system, config, V, S, solver=solver)
        elif mode == "roa":
            obj = maximize_beta(system, config, V, S, solver=solver)
            result.beta = obj.value
            result.shape_poly = setup.shape
        elif mode in ("finite", "finite-global"):
            if Q is None:
                raise ValueError("finite-time checks need the Gram matrix Q")
            config.validate(system, finite=True)
            fs = _finite_setup(system, config)
            Q = np.atleast_2d(np.asarray(Q, dtype=float))
            state_w = [p.restrict(system.vars) for p in fs.w]
            V = _quad(state_w, Q)
            result.Q, result.w = Q, state_w
            result.p_exp, result.r_exp = config.p_exp, config.r_exp
            regional = mode == "finite"
            obj = maximize_c(system, config, Q, [s.lift(fs.base.X) for s in S], regional=regional, solver=solver)
            if regional:
                roa = maximize_beta_finite(system, config, Q, solver)
                result.beta = roa.value
                result.shape_poly = fs.base.shape
        else:
            raise ValueError(f"unknown mode {mode!r}")
    except Infeasible as exc:
        result.status, result.message = INFEASIBLE_FROM_INIT, str(exc)
        return result
    except (SolverFailure, BracketError) as exc:
        result.status, result.message = SOLVER_FAILURE, str(exc)
        return result
    if V.vars != system.z1_vars:
        try:
            V = V.restrict(system.z1_vars)
        except StructureError:
            pass
    result.V = V
    result.objective = obj.value
    result.multipliers = obj.multipliers
    result.log.append(IterationRecord(1, obj.value, "fixed", OPTIMAL, obj.probes, result.beta))
    if obj.value <= config.beta_tol:
        result.status = MARGINAL if abs(obj.value) <= config.beta_tol else INFEASIBLE_FROM_INIT
        result.message = f"objective {obj.value:.6g} is not positive"
    return _finish(result, obj.solution)
