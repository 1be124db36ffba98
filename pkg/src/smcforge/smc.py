"""Plants in regular form and the sliding-mode control law built on a manifold S(z)."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .polynomial import IndeterminateSet, Polynomial, PolyMap, StructureError


def _fmt(x) -> str:
    return "(" + ", ".join("%.6g" % v for v in np.ravel(x)) + ")"


class SingularityError(ArithmeticError):
    def __init__(self, message: str, cond: float):
        super().__init__(message)
        self.cond = cond


class UnsolvableManifold(ValueError):
    """S(z1, z2) = 0 has no unique real solution for z2."""


@dataclass(frozen=True)
class RegularFormSystem:
    """``dz1 = f1(z)``, ``dz2 = f2(z) + L(z) u + xi1`` with ``|xi1| <= phi1(z)``.

    The first ``n - m`` indeterminates of ``vars`` are z1, the last ``m`` are z2.
    """

    vars: IndeterminateSet
    m: int
    f1: tuple[Polynomial, ...]
    f2: tuple[Polynomial, ...]
    L: tuple[tuple[Polynomial, ...], ...]
    phi1: Polynomial
    eta: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "f1", tuple(self.f1))
        object.__setattr__(self, "f2", tuple(self.f2))
        object.__setattr__(self, "L", tuple(tuple(r) for r in self.L))
        n, m = self.vars.count, self.m
        if not 0 < m < n:
            raise StructureError(f"need 0 < m < n, got n={n}, m={m}")
        if len(self.f1) != n - m:
            raise StructureError(f"f1 has {len(self.f1)} entries, expected n-m={n - m}")
        if len(self.f2) != m:
            raise StructureError(f"f2 has {len(self.f2)} entries, expected m={m}")
        if len(self.L) != m or any(len(r) != m for r in self.L):
            raise StructureError(f"L must be {m}x{m}")
        polys = list(self.f1) + list(self.f2) + [e for r in self.L for e in r] + [self.phi1]
        if any(p.vars != self.vars for p in polys):
            raise StructureError("all system polynomials must share the state indeterminates")
        origin = np.zeros(n)
        for i, f in enumerate(self.f1 + self.f2):
            if abs(f(origin)) > 1e-12:
                raise StructureError(f"origin is not an equilibrium (row {i} = {f(origin)})")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    @property
    def n(self) -> int:
        return self.vars.count

    @property
    def z1_idx(self) -> list[int]:
        return list(range(self.n - self.m))

    @property
    def z2_idx(self) -> list[int]:
        return list(range(self.n - self.m, self.n))

    @property
    def z1_vars(self) -> IndeterminateSet:
        return IndeterminateSet(self.vars.names[: self.n - self.m])

    @cached_property
    def _map(self) -> PolyMap:
        return PolyMap(list(self.f1) + list(self.f2) + [e for r in self.L for e in r] + [self.phi1])

    def evaluate(self, z) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        """``(f1, f2, L, phi1)`` at one point."""
        v = self._map(z)
        k, m = self.n - self.m, self.m
        return v[:k], v[k : k + m], v[k + m : k + m + m * m].reshape(m, m), float(v[-1])

    def f1_at(self, z) -> np.ndarray:
        return self.evaluate(z)[0]

    def f2_at(self, z) -> np.ndarray:
        return self.evaluate(z)[1]

    def L_at(self, z) -> np.ndarray:
        return self.evaluate(z)[2]


def identity_gamma(s: np.ndarray) -> np.ndarray:
    return s


@dataclass(frozen=True)
class SlackDefinition:
    """``M = (w(z1)^T w(z1))^(p/r)`` with ``w`` over the state indeterminates."""

    w: tuple[Polynomial, ...]
    p_exp: int
    r_exp: int

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(self.w))
        if not self.r_exp > self.p_exp > 0:
            raise ValueError(f"need r > p > 0, got p={self.p_exp}, r={self.r_exp}")

    @property
    def alpha(self) -> float:
        return self.p_exp / self.r_exp

    def value(self, z) -> float:
        T = sum(float(wi(z)) ** 2 for wi in self.w)
        return T**self.alpha

    def values(self, Z: np.ndarray) -> np.ndarray:
        """:meth:`value` over rows of states."""
        T = sum(np.asarray(wi(Z)) ** 2 for wi in self.w)
        return T**self.alpha

    def gradient(self, z) -> np.ndarray:
        n = len(z)
        wv = np.array([float(wi(z)) for wi in self.w])
        T = float(wv @ wv)
        if T == 0.0:
            return np.zeros(n)
        dw = np.array([[float(wi.diff(j)(z)) for j in range(n)] for wi in self.w])
        return self.alpha * T ** (self.alpha - 1.0) * 2.0 * (wv @ dw)


@dataclass(frozen=True)
class ControlLaw:
    """Sliding manifold plus boundary-layer switching.

    ``S`` is over the state indeterminates, or over the state plus one trailing
    slack indeterminate described by ``slack``.
    """

    S: tuple[Polynomial, ...]
    delta: float = 0.03
    gamma: Callable[[np.ndarray], np.ndarray] = identity_gamma
    slack: SlackDefinition | None = None

    def __post_init__(self):
        object.__setattr__(self, "S", tuple(self.S))
        if self.delta <= 0:
            raise ValueError("boundary layer width delta must be positive")

    @property
    def m(self) -> int:
        return len(self.S)

    def _point(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.slack is None:
            return z
        return np.append(z, self.slack.value(z))

    @cached_property
    def _map(self) -> PolyMap:
        k = self.S[0].vars.count
        return PolyMap(list(self.S) + [s.diff(j) for s in self.S for j in range(k)])

    @cached_property
    def _last(self) -> dict:
        return {}

    def evaluate(self, z) -> tuple[np.ndarray, np.ndarray]:
        """``(S, dS/dz)`` at one state, with the slack's dependence on z folded in."""
        z = np.asarray(z, dtype=float)
        key = z.tobytes()
        cache = self._last
        if cache.get("key") == key:
            return cache["value"]
        x = self._point(z)
        n, m = len(z), self.m
        v = self._map(x)
        S = v[:m]
        full = v[m:].reshape(m, len(x))
        J = full[:, :n]
        if self.slack is not None:
            J = J + np.outer(full[:, n], self.slack.gradient(z))
        cache["key"], cache["value"] = key, (S, J)
        return S, J

    def S_at(self, z) -> np.ndarray:
        return self.evaluate(z)[0]

    def jacobian(self, z) -> np.ndarray:
        """dS/dz (m x n), with the slack's dependence on z folded in."""
        return self.evaluate(z)[1]


def _split(J: np.ndarray, system: RegularFormSystem):
    k = system.n - system.m
    return J[:, :k], J[:, k:]


def _spectral_norm(J: np.ndarray) -> float:
    if J.shape[0] == 1:
        return float(np.sqrt(J[0] @ J[0]))
    return float(np.linalg.norm(J, 2))


def _cond(B: np.ndarray) -> float:
    if B.shape == (1, 1):
        return 1.0 if B[0, 0] != 0.0 else np.inf
    return float(np.linalg.cond(B))


def _input_matrix(law: ControlLaw, system: RegularFormSystem, z, L: np.ndarray | None = None):
    J1, J2 = _split(law.jacobian(z), system)
    B = J2 @ (system.L_at(z) if L is None else L)
    cond = _cond(B)
    if not np.isfinite(cond) or cond > 1e8 or not np.all(np.isfinite(B)):
        raise SingularityError(f"dS/dz2 * L is near-singular at z={_fmt(z)} (cond={cond:.3g})", cond)
    return J1, J2, B


def equivalent_control(law: ControlLaw, system: RegularFormSystem, z) -> np.ndarray:
    """Control keeping dS/dt = 0 when the perturbation vanishes."""
    f1, f2, L, _ = system.evaluate(z)
    J1, J2, B = _input_matrix(law, system, z, L)
    return -np.linalg.solve(B, J2 @ f2 + J1 @ f1)


def switching_gain(law: ControlLaw, system: RegularFormSystem, z) -> float:
    """Smallest admissible gain: ``||dS/dz2||_2 * phi1(z) + eta``."""
    _, J2 = _split(law.jacobian(z), system)
    return _spectral_norm(J2) * float(system.phi1(z)) + system.eta


def switching_direction(law: ControlLaw, s: np.ndarray) -> np.ndarray:
    """gamma(S)/|gamma(S)|, scaled by |S|/delta inside the boundary layer."""
    g = np.asarray(law.gamma(s), dtype=float)
    ng = float(np.sqrt(g @ g))
    if ng == 0.0:
        return np.zeros_like(g)
    unit = g / ng
    ns = float(np.sqrt(s @ s))
    if ns >= law.delta:
        return unit
    return unit * (ns / law.delta)


def control(law: ControlLaw, system: RegularFormSystem, z, t: float = 0.0) -> np.ndarray:
    """Boundary-layer sliding-mode control.

    The switching term is mapped through ``(dS/dz2 L)^-1`` so that it enters
    dS/dt as ``-rho * gamma/|gamma|``; with ``dS/dz2 L = I`` this is exactly
    ``-rho * gamma/|gamma| + u_eq``.
    """
    return control_with_values(law, system, z, system.evaluate(z))


def control_with_values(law: ControlLaw, system: RegularFormSystem, z, values) -> np.ndarray:
    """:func:`control` given ``system.evaluate(z)`` already computed."""
    f1, f2, L, phi1 = values
    J1, J2, B = _input_matrix(law, system, z, L)
    rho = _spectral_norm(J2) * phi1 + system.eta
    direction = switching_direction(law, law.S_at(z))
    rhs = J2 @ f2 + J1 @ f1 + rho * direction
    if B.shape == (1, 1):
        return rhs / -B[0, 0]
    return -np.linalg.solve(B, rhs)


@dataclass
class SlidingDynamics:
    """Reduced vector field ``dz1 = f1(z1, z2*(z1))`` on the manifold S = 0."""

    law: ControlLaw
    system: RegularFormSystem
    affine: bool
    _rows: list = field(default_factory=list, repr=False)

    def z2_star(self, z1) -> np.ndarray:
        z1 = np.asarray(z1, dtype=float)
        sys_ = self.system
        if self.affine:
            # S(z1, z2) = A(z1) z2 + b(z1)
            zero = np.concatenate([z1, np.zeros(sys_.m)])
            b = self.law.S_at(zero)
            A = np.empty((sys_.m, sys_.m))
            for j in range(sys_.m):
                e = zero.copy()
                e[sys_.n - sys_.m + j] = 1.0
                A[:, j] = self.law.S_at(e) - b
            if abs(np.linalg.det(A)) < 1e-12:
                raise UnsolvableManifold(f"dS/dz2 singular at z1={_fmt(z1)}")
            return np.linalg.solve(A, -b)
        return np.array([self._scalar_root(z1)])

    def _scalar_root(self, z1: np.ndarray) -> float:
        # m == 1: S(z1, z2) is a univariate polynomial in z2 once z1 (and M) are fixed
        S = self.law.S[0]
        n = self.system.n
        j = n - 1
        x = np.append(z1, 0.0)
        if self.law.slack is not None:
            x = np.append(x, self.law.slack.value(np.append(z1, 0.0)))
        deg = S.degree_in(j)
        coeffs = np.zeros(deg + 1)
        for mono, c in S.items():
            rest = list(mono)
            e = rest[j]
            rest[j] = 0
            coeffs[deg - e] += c * float(np.prod(x ** np.array(rest)))
        roots = np.roots(np.trim_zeros(coeffs, "f")) if np.any(coeffs) else np.array([])
        scale = max(1.0, float(np.max(np.abs(roots)))) if len(roots) else 1.0
        real = sorted(float(r.real) for r in roots if abs(r.imag) <= 1e-7 * scale)
        distinct = []
        for r in real:
            if not distinct or abs(r - distinct[-1]) > 1e-6 * scale:
                distinct.append(r)
        if not distinct:
            raise UnsolvableManifold(f"S = 0 has no real root in z2 at z1={_fmt(z1)}")
        if len(distinct) > 1:
            raise UnsolvableManifold(
                f"S = 0 has {len(distinct)} real roots in z2 at z1={_fmt(z1)}: ambiguous manifold"
            )
        return distinct[0]

    def states(self, Z1) -> tuple[np.ndarray, np.ndarray]:
        """Batch version of :meth:`state`: rows of full states plus a mask of solvable rows."""
        Z1 = np.atleast_2d(np.asarray(Z1, dtype=float))
        N, m, n = Z1.shape[0], self.system.m, self.system.n
        out = np.zeros((N, n))
        out[:, : n - m] = Z1
        ok = np.ones(N, dtype=bool)
        if self.affine and self.law.slack is None:
            smap = self.law._map
            base = smap(out)[:, :m]
            A = np.empty((N, m, m))
            for j in range(m):
                e = out.copy()
                e[:, n - m + j] = 1.0
                A[:, :, j] = smap(e)[:, :m] - base
            det = np.linalg.det(A)
            ok = np.abs(det) >= 1e-12
            A[~ok] = np.eye(m)
            out[:, n - m :] = np.linalg.solve(A, -base[:, :, None])[:, :, 0]
            return out, ok
        if m == 1:
            out[:, n - 1], ok = self._scalar_roots(Z1)
            return out, ok
        for i, z1 in enumerate(Z1):
            try:
                out[i, n - m :] = self.z2_star(z1)
            except UnsolvableManifold:
                ok[i] = False
        return out, ok

    def _scalar_roots(self, Z1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # batched real-root search via companion matrices; rows whose leading
        # coefficient vanishes fall back to the scalar path
        S = self.law.S[0]
        n = self.system.n
        j = n - 1
        deg = S.degree_in(j)
        N = Z1.shape[0]
        X = np.zeros((N, S.vars.count))
        X[:, : n - 1] = Z1
        if self.law.slack is not None:
            X[:, n] = self.law.slack.values(np.hstack([Z1, np.zeros((N, 1))]))
        groups = [{} for _ in range(deg + 1)]
        for mono, c in S.items():
            rest = list(mono)
            e = rest[j]
            rest[j] = 0
            groups[e][tuple(rest)] = groups[e].get(tuple(rest), 0.0) + c
        coeffs = PolyMap([Polynomial(S.vars, g) for g in groups])(X)  # (N, deg + 1), ascending
        roots = np.zeros(N)
        ok = np.zeros(N, dtype=bool)
        lead = coeffs[:, deg]
        scale = np.max(np.abs(coeffs), axis=1)
        fast = np.abs(lead) > 1e-9 * np.maximum(scale, 1e-300)
        if deg >= 1 and np.any(fast):
            C = coeffs[fast] / lead[fast, None]
            comp = np.zeros((C.shape[0], deg, deg))
            comp[:, 0, :] = -C[:, deg - 1 :: -1][:, :deg]
            comp[:, np.arange(1, deg), np.arange(deg - 1)] = 1.0
            eig = np.linalg.eigvals(comp)
            rscale = np.maximum(1.0, np.max(np.abs(eig), axis=1))
            real = np.abs(eig.imag) <= 1e-7 * rscale[:, None]
            vals = np.where(real, eig.real, np.nan)
            vals.sort(axis=1)
            counts = np.zeros(len(vals), dtype=int)
            first = np.full(len(vals), np.nan)
            for r in range(len(vals)):
                distinct = []
                for v in vals[r][~np.isnan(vals[r])]:
                    if not distinct or abs(v - distinct[-1]) > 1e-6 * rscale[r]:
                        distinct.append(v)
                counts[r] = len(distinct)
                if distinct:
                    first[r] = distinct[0]
            idx = np.nonzero(fast)[0]
            good = counts == 1
            roots[idx[good]] = first[good]
            ok[idx[good]] = True
        for i in np.nonzero(~fast)[0]:
            try:
                roots[i] = self._scalar_root(Z1[i])
                ok[i] = True
            except UnsolvableManifold:
                pass
        return roots, ok

    def state(self, z1) -> np.ndarray:
        return np.concatenate([np.asarray(z1, dtype=float), self.z2_star(z1)])

    def __call__(self, z1) -> np.ndarray:
        return self.system.f1_at(self.state(z1))


def sliding_dynamics(law: ControlLaw, system: RegularFormSystem) -> SlidingDynamics:
    """Reduced dynamics on S = 0; raises :class:`UnsolvableManifold` when S cannot be solved for z2."""
    z2 = set(system.z2_idx)
    affine = all(sum(m[j] for j in z2) <= 1 for s in law.S for m, _ in s.items())
    if not affine and system.m != 1:
        raise UnsolvableManifold("non-affine manifolds are only solvable for a single sliding variable")
    return SlidingDynamics(law, system, affine)


def manifold_well_posed(S: Sequence[Polynomial], system: RegularFormSystem, tol: float = 1e-6) -> float:
    """|det dS/dz2| at the origin (with any slack set to zero)."""
    nvars = S[0].vars.count
    x = np.zeros(nvars)
    J2 = np.array([[s.diff(j)(x) for j in system.z2_idx] for s in S])
    return abs(float(np.linalg.det(J2)))
