"""Fixed-step closed-loop simulation and trajectory metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .polynomial import Polynomial
from .smc import ControlLaw, RegularFormSystem, SingularityError, control_with_values

DIVERGENCE_NORM = 1e6

ZERO = "zero"
SINUSOID = "sinusoid"
WORST_CASE = "worst-case"
KINDS = (ZERO, SINUSOID, WORST_CASE)


class SimulationAborted(RuntimeError):
    """Integration stopped early; ``trajectory`` holds the samples so far."""

    def __init__(self, message: str, trajectory: "Trajectory"):
        super().__init__(message)
        self.trajectory = trajectory


class DivergenceError(SimulationAborted):
    """State norm exceeded the divergence threshold."""


@dataclass(frozen=True)
class PerturbationModel:
    """Matched perturbation entering the z2 channel.

    ``sinusoid`` gives ``a(z) sin(omega t + phase)`` spread evenly over the m
    channels (so its norm is at most ``a(z)``). ``worst-case`` pushes S away
    from zero as hard as the bound allows: ``phi1(z) J2^T S / |J2^T S|`` with
    ``J2 = dS/dz2``.
    """

    kind: str = ZERO
    amplitude: Polynomial | float = 0.0
    omega: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")

    def _amp(self, z) -> float:
        a = self.amplitude
        return float(a(z)) if isinstance(a, Polynomial) else float(a)

    def __call__(
        self, t: float, z: np.ndarray, system: RegularFormSystem, law: ControlLaw, phi1: float | None = None
    ) -> np.ndarray:
        m = system.m
        if self.kind == ZERO:
            return np.zeros(m)
        bound = float(system.phi1(z)) if phi1 is None else phi1
        if self.kind == SINUSOID:
            a = self._amp(z)
            if abs(a) > bound + 1e-12:
                raise ValueError(f"perturbation amplitude {a} exceeds phi1 = {bound} at z={list(z)}")
            return np.full(m, a * np.sin(self.omega * t + self.phase) / np.sqrt(m))
        J2 = law.jacobian(z)[:, system.n - m :]
        d = J2.T @ law.S_at(z)
        nd = float(np.linalg.norm(d))
        if nd == 0.0:
            return np.zeros(m)
        return bound * d / nd


def _rows(a, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        if a.shape[0] != k:
            raise ValueError(f"expected {k} rows, got {a.shape[0]}")
        return a
    return a.reshape(k, -1) if k else a.reshape(0, 0)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    sliding: np.ndarray
    lyapunov: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        k = len(self.times)
        self.states = _rows(self.states, k)
        self.inputs = _rows(self.inputs, k)
        self.sliding = _rows(self.sliding, k)
        if self.lyapunov is not None:
            self.lyapunov = np.asarray(self.lyapunov, dtype=float).reshape(k)
        if k > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be increasing")

    @classmethod
    def from_states(cls, times, states) -> "Trajectory":
        k = len(times)
        return cls(times, states, np.zeros((k, 0)), np.zeros((k, 0)))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self) > 1 else 0.0

    def csv_text(self, columns: str = "all") -> str:
        """CSV with header ``t,x1..xn,u1..um,S1..Sm,V`` and 9 significant digits.

        ``columns`` selects ``all``, ``states`` (t and x) or ``control``
        (t, u and S). An absent V is written as an empty field.
        """
        n, m, k = self.states.shape[1], self.inputs.shape[1], self.sliding.shape[1]
        blocks = [("t", self.times[:, None])]
        if columns in ("all", "states"):
            blocks.append(([f"x{i + 1}" for i in range(n)], self.states))
        if columns in ("all", "control"):
            blocks.append(([f"u{i + 1}" for i in range(m)], self.inputs))
            blocks.append(([f"S{i + 1}" for i in range(k)], self.sliding))
        if columns == "all":
            V = self.lyapunov if self.lyapunov is not None else np.full(len(self), np.nan)
            blocks.append((["V"], V[:, None]))
        header = []
        for names, _ in blocks:
            header.extend([names] if isinstance(names, str) else names)
        data = np.hstack([b for _, b in blocks])
        out = io.StringIO()
        out.write(",".join(header) + "\n")
        for row in data:
            out.write(",".join("" if np.isnan(v) else "%.9g" % v for v in row) + "\n")
        return out.getvalue()

    def to_csv(self, path, columns: str = "all") -> Path:
        path = Path(path)
        path.write_text(self.csv_text(columns))
        return path


def rk4_step(rhs: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(t, x)
    k2 = rhs(t + dt / 2, x + dt / 2 * k1)
    k3 = rhs(t + dt / 2, x + dt / 2 * k2)
    k4 = rhs(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(rhs: Callable[[float, np.ndarray], np.ndarray], x0, tf: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Classical fixed-step RK4 on a uniform grid ``0, dt, ..., tf``."""
    if dt <= 0 or tf <= 0:
        raise ValueError("dt and tf must be positive")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    steps = int(round(tf / dt))
    times = np.arange(steps + 1) * dt
    out = np.empty((steps + 1, len(x)))
    out[0] = x
    for k in range(steps):
        x = rk4_step(rhs, times[k], x, dt)
        out[k + 1] = x
    return times, out


def simulate(
    system: RegularFormSystem,
    law: ControlLaw,
    perturbation: PerturbationModel,
    x0,
    tf: float,
    dt: float = 1e-3,
    V: Polynomial | None = None,
) -> Trajectory:
    """RK4 on ``dz1 = f1``, ``dz2 = f2 + L u + xi`` with u recomputed at every stage."""
    if dt <= 0 or tf <= 0:
        raise ValueError("dt and tf must be positive")
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.n,) or not np.all(np.isfinite(x)):
        raise ValueError(f"x0 must be a finite vector of length {system.n}")
    k1_ = system.n - system.m

    def rhs(t, z):
        values = system.evaluate(z)
        u = control_with_values(law, system, z, values)
        f1, f2, L, phi1 = values
        dz = np.empty(system.n)
        dz[:k1_] = f1
        dz[k1_:] = f2 + L @ u + perturbation(t, z, system, law, phi1)
        return dz, u

    steps = int(round(tf / dt))
    times = np.arange(steps + 1) * dt
    states = np.empty((steps + 1, system.n))
    inputs = np.empty((steps + 1, system.m))
    sliding = np.empty((steps + 1, system.m))

    def partial(k):
        lyap = None if V is None else _lyapunov(V, states[:k])
        return Trajectory(times[:k], states[:k], inputs[:k], sliding[:k], lyap)

    for k in range(steps + 1):
        t = times[k]
        try:
            d1, u = rhs(t, x)
            states[k], inputs[k], sliding[k] = x, u, law.S_at(x)
            if k == steps:
                break
            # classical RK4; the first stage doubles as the recorded control at t
            d2, _ = rhs(t + dt / 2, x + dt / 2 * d1)
            d3, _ = rhs(t + dt / 2, x + dt / 2 * d2)
            d4, _ = rhs(t + dt, x + dt * d3)
        except SingularityError as exc:
            raise SimulationAborted(f"control law undefined at t={t:.6g}: {exc}", partial(k)) from exc
        x = x + dt / 6 * (d1 + 2 * d2 + 2 * d3 + d4)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            raise DivergenceError(f"state norm exceeded {DIVERGENCE_NORM:g} at t={times[k + 1]:.6g}", partial(k + 1))
    lyap = None if V is None else _lyapunov(V, states)
    return Trajectory(times, states, inputs, sliding, lyap)


def _lyapunov(V: Polynomial, states: np.ndarray) -> np.ndarray:
    return np.asarray(V(states[:, : V.vars.count]), dtype=float).reshape(-1)


@dataclass
class ReachingMetrics:
    t_reach: float | None
    max_post_reach_excursion: float | None
    reaching_violations: int

    def to_dict(self) -> dict:
        return {
            "t_reach": self.t_reach,
            "max_post_reach_excursion": self.max_post_reach_excursion,
            "reaching_violations": self.reaching_violations,
        }


def reaching_metrics(traj: Trajectory, delta: float, eta: float) -> ReachingMetrics:
    """Reaching time into the layer ``|S| <= delta``, excursion after it, and
    count of samples outside the layer where the central-difference estimate of
    ``S^T dS/dt`` exceeds ``-eta |S| + 10 dt``."""
    s = traj.sliding
    norms = np.linalg.norm(s, axis=1)
    inside = np.nonzero(norms <= delta)[0]
    t_reach = float(traj.times[inside[0]]) if len(inside) else None
    excursion = float(np.max(norms[inside[0]:])) if len(inside) else None
    violations = 0
    if len(traj) >= 3:
        dt = traj.dt
        tol = 10 * dt
        sdot = (s[2:] - s[:-2]) / (2 * dt)
        mid = s[1:-1]
        nm = norms[1:-1]
        lhs = np.einsum("ij,ij->i", mid, sdot)
        violations = int(np.sum((nm > delta) & (lhs > -eta * nm + tol)))
    return ReachingMetrics(t_reach, excursion, violations)


def settling_time(traj: Trajectory, tol: float, components: Sequence[int] | None = None) -> float | None:
    """First time after which the selected state components stay within ``tol`` (2-norm)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = traj.states if components is None else traj.states[:, list(components)]
    outside = np.nonzero(np.linalg.norm(x, axis=1) > tol)[0]
    if len(outside) == 0:
        return float(traj.times[0])
    last = outside[-1]
    if last == len(traj) - 1:
        return None
    return float(traj.times[last + 1])


def roa_sample_report(
    V: Polynomial,
    beta: float,
    p: Polynomial,
    bounds,
    n_samples: int,
    seed: int = 0,
    spot_check: Callable[[np.ndarray], bool] | None = None,
    n_spot: int = 0,
    tol: float = 1e-6,
) -> dict:
    """Containment of ``{p <= beta}`` in ``{V <= 1}`` by uniform sampling.

    ``bounds`` is a sequence of (low, high) pairs, one per variable of V. With
    ``spot_check`` set, the first ``n_spot`` samples inside ``{V <= 1}`` are
    passed to it (typically a closed-loop simulation returning convergence).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    b = np.asarray(bounds, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(b[:, 0], b[:, 1], size=(n_samples, len(b)))
    pv = np.asarray(p(pts)).reshape(-1)
    vv = np.asarray(V(pts)).reshape(-1)
    report = {
        "samples": n_samples,
        "seed": seed,
        "beta": beta,
        "in_shape": int(np.sum(pv <= beta)),
        "containment_violations": int(np.sum((pv <= beta) & (vv > 1.0 + tol))),
        "spot_checks": 0,
        "spot_failures": 0,
    }
    if spot_check is not None and n_spot > 0:
        chosen = pts[vv <= 1.0][:n_spot]
        report["spot_checks"] = int(len(chosen))
        report["spot_failures"] = int(sum(not spot_check(z) for z in chosen))
    return report


def derived_seeds(seed: int, count: int) -> list[int]:
    """Independent per-run seeds derived deterministically from a master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]
