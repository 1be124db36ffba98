"""SOS programs compiled to semidefinite problems.

An :class:`SosProgram` holds scalar decision parameters, polynomials that are
affine in those parameters, and the requirement that some of them be sums of
squares. :meth:`SosProgram.compile` turns this into a :class:`ConicProblem`
(free variables, PSD blocks, affine equalities, linear objective) which any
:class:`SolverHandle` can solve. Returned Gram matrices are re-checked by
:func:`check_certificate`, independent of the solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .polynomial import (
    IndeterminateSet,
    Monomial,
    Polynomial,
    StructureError,
    grlex_key,
    monomials_up_to,
)

CERT_TOL = 1e-7
EIG_TOL = 1e-7

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
FAILURE = "numerical-failure"


class NotSosError(StructureError):
    """A constraint can never be SOS (e.g. its degree is odd)."""


class ParametricPolynomial:
    """Polynomial affine in decision parameters: ``const + sum_k x_k * lin[k]``."""

    __slots__ = ("vars", "const", "lin")

    def __init__(self, const: Polynomial, lin: dict[int, Polynomial] | None = None):
        self.vars = const.vars
        self.const = const
        self.lin = {k: v for k, v in (lin or {}).items() if not v.is_zero()}

    @classmethod
    def lift(cls, value, vars: IndeterminateSet) -> "ParametricPolynomial":
        if isinstance(value, ParametricPolynomial):
            return value
        if isinstance(value, Polynomial):
            return cls(value)
        return cls(Polynomial.constant(vars, float(value)))

    @property
    def params(self) -> list[int]:
        return sorted(self.lin)

    @property
    def degree(self) -> int:
        return max([self.const.degree] + [p.degree for p in self.lin.values()])

    def support(self) -> set[Monomial]:
        out = set(m for m, _ in self.const.items())
        for p in self.lin.values():
            out.update(m for m, _ in p.items())
        return out

    def __add__(self, other):
        other = ParametricPolynomial.lift(other, self.vars)
        lin = dict(self.lin)
        for k, v in other.lin.items():
            lin[k] = lin[k] + v if k in lin else v
        return ParametricPolynomial(self.const + other.const, lin)

    __radd__ = __add__

    def __neg__(self):
        return ParametricPolynomial(-self.const, {k: -v for k, v in self.lin.items()})

    def __sub__(self, other):
        return self + (-ParametricPolynomial.lift(other, self.vars))

    def __rsub__(self, other):
        return ParametricPolynomial.lift(other, self.vars) - self

    def __mul__(self, other):
        if isinstance(other, ParametricPolynomial):
            if other.lin and self.lin:
                raise StructureError("product of two parametric polynomials is not affine")
            if not other.lin:
                other = other.const
            else:
                return other * self.const
        if isinstance(other, (int, float, np.floating)):
            other = Polynomial.constant(self.vars, float(other))
        if not isinstance(other, Polynomial):
            return NotImplemented
        return ParametricPolynomial(self.const * other, {k: v * other for k, v in self.lin.items()})

    __rmul__ = __mul__

    def diff(self, var: int) -> "ParametricPolynomial":
        return ParametricPolynomial(self.const.diff(var), {k: v.diff(var) for k, v in self.lin.items()})

    def value(self, x: np.ndarray) -> Polynomial:
        out = self.const
        for k, v in self.lin.items():
            if x[k] != 0.0:
                out = out + v * float(x[k])
        return out


@dataclass
class GramCertificate:
    """Evidence that a polynomial equals ``basis^T gram basis`` with ``gram`` PSD.

    For a plain PSD matrix constraint ``basis`` is empty and the residual is
    the entrywise mismatch with the target matrix.
    """

    basis: list[Monomial]
    gram: np.ndarray
    residual: float
    min_eig: float

    @property
    def trace(self) -> float:
        return float(np.trace(self.gram))

    def accepted(self, eig_tol: float = EIG_TOL, cert_tol: float = CERT_TOL) -> bool:
        return self.residual <= cert_tol and self.min_eig >= -eig_tol * (1.0 + abs(self.trace))

    def to_dict(self) -> dict:
        return {
            "basis": [list(m) for m in self.basis],
            "gram": np.asarray(self.gram).tolist(),
            "residual": self.residual,
            "min_eig": self.min_eig,
        }


def gram_expansion(vars: IndeterminateSet, basis: Sequence[Monomial], gram: np.ndarray) -> Polynomial:
    terms: dict[Monomial, float] = {}
    k = len(basis)
    for i in range(k):
        for j in range(k):
            m = tuple(a + b for a, b in zip(basis[i], basis[j]))
            terms[m] = terms.get(m, 0.0) + float(gram[i, j])
    return Polynomial(vars, terms)


def gram_residual(p: Polynomial, basis: Sequence[Monomial], gram: np.ndarray) -> float:
    """Max absolute coefficient mismatch between ``p`` and the Gram expansion."""
    terms: dict[Monomial, float] = {}
    k = len(basis)
    for i in range(k):
        for j in range(k):
            m = tuple(a + b for a, b in zip(basis[i], basis[j]))
            terms[m] = terms.get(m, 0.0) + float(gram[i, j])
    for m, c in p.items():
        terms[m] = terms.get(m, 0.0) - c
    return max((abs(c) for c in terms.values()), default=0.0)


def _min_eig(gram: np.ndarray) -> float:
    if gram.size == 0:
        return 0.0
    sym = 0.5 * (gram + gram.T)
    return float(np.linalg.eigvalsh(sym)[0])


def make_certificate(p: Polynomial, basis: Sequence[Monomial], gram: np.ndarray) -> GramCertificate:
    gram = 0.5 * (np.asarray(gram, dtype=float) + np.asarray(gram, dtype=float).T)
    return GramCertificate(list(basis), gram, gram_residual(p, basis, gram), _min_eig(gram))


def check_certificate(
    p: Polynomial, cert: GramCertificate, cert_tol: float = CERT_TOL, eig_tol: float = EIG_TOL
) -> bool:
    """Re-derive residual and smallest eigenvalue from scratch and test both."""
    gram = np.asarray(cert.gram, dtype=float)
    if gram.shape != (len(cert.basis), len(cert.basis)):
        return False
    gram = 0.5 * (gram + gram.T)
    residual = gram_residual(p, cert.basis, gram)
    min_eig = _min_eig(gram)
    return residual <= cert_tol and min_eig >= -eig_tol * (1.0 + abs(float(np.trace(gram))))


def check_psd_certificate(
    target: np.ndarray, cert: GramCertificate, cert_tol: float = CERT_TOL, eig_tol: float = EIG_TOL
) -> bool:
    gram = np.asarray(cert.gram, dtype=float)
    gram = 0.5 * (gram + gram.T)
    residual = float(np.max(np.abs(gram - target))) if gram.size else 0.0
    return residual <= cert_tol and _min_eig(gram) >= -eig_tol * (1.0 + abs(float(np.trace(gram))))


def _embed(mono_sub: Monomial, idx: Sequence[int], n: int) -> Monomial:
    out = [0] * n
    for j, e in zip(idx, mono_sub):
        out[j] = e
    return tuple(out)


def gram_basis(constraint: ParametricPolynomial | Polynomial) -> list[Monomial]:
    """Full monomial basis up to half the degree, over the constraint's variables."""
    if isinstance(constraint, Polynomial):
        constraint = ParametricPolynomial(constraint)
    support = constraint.support()
    n = constraint.vars.count
    if not support:
        return []
    deg = max(sum(m) for m in support)
    if deg % 2:
        raise NotSosError(f"constraint has odd degree {deg}; it cannot be SOS")
    used = sorted({i for m in support for i, e in enumerate(m) if e})
    if not used:
        return [(0,) * n]
    sub = monomials_up_to(len(used), deg // 2)
    return [_embed(m, used, n) for m in sub]


def trim_basis(basis: list[Monomial], support: set[Monomial]) -> list[Monomial]:
    """Drop basis monomials whose diagonal Gram entry is forced to zero.

    ``b`` is removable when ``2b`` cannot occur in the polynomial and cannot be
    formed as a product of two other basis elements: its diagonal Gram entry
    is then zero and PSD-ness forces its whole row to vanish. Repeated until
    stable. The feasible set is unchanged.
    """
    current = list(basis)
    while True:
        sums: dict[Monomial, int] = {}
        for i, a in enumerate(current):
            for b in current[i + 1 :]:
                m = tuple(x + y for x, y in zip(a, b))
                sums[m] = sums.get(m, 0) + 1
        keep = []
        for b in current:
            sq = tuple(2 * e for e in b)
            if sq in support or sq in sums:
                keep.append(b)
        if len(keep) == len(current):
            return keep
        current = keep


@dataclass
class ConicProblem:
    """Maximize ``c @ x`` over free scalars and PSD blocks subject to ``A @ x == b``.

    ``x`` stacks the free scalars followed by the upper-triangular entries
    (row-major, ``i <= j``) of each block, in block order.
    """

    n_free: int
    block_dims: list[int]
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.n_free + sum(k * (k + 1) // 2 for k in self.block_dims)

    def fingerprint(self) -> bytes:
        A = self.A.tocsr()
        A.sort_indices()
        parts = [
            np.array([self.n_free] + list(self.block_dims), dtype=np.int64).tobytes(),
            A.indptr.astype(np.int64).tobytes(),
            A.indices.astype(np.int64).tobytes(),
            A.data.tobytes(),
            self.b.tobytes(),
            self.c.tobytes(),
        ]
        return b"".join(parts)


@dataclass
class ConicSolution:
    status: str
    free: np.ndarray
    blocks: list[np.ndarray]
    objective: float
    info: str = ""


class SolverHandle(Protocol):
    def solve(self, problem: ConicProblem) -> ConicSolution: ...


def triu_pairs(k: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(k) for j in range(i, k)]


class ClarabelSolver:
    """Interior-point solve via Clarabel's PSD-triangle cone."""

    def __init__(self, tol: float = 1e-9, max_iter: int = 200, **settings):
        self.tol = tol
        self.max_iter = max_iter
        self.settings = settings

    def _settings(self):
        import clarabel

        s = clarabel.DefaultSettings()
        s.verbose = False
        s.max_iter = self.max_iter
        s.tol_gap_abs = self.tol
        s.tol_gap_rel = self.tol
        s.tol_feas = self.tol
        s.tol_infeas_abs = self.tol
        s.tol_infeas_rel = self.tol
        s.tol_ktratio = 1e-7
        s.max_threads = 1
        for key, val in self.settings.items():
            setattr(s, key, val)
        return s

    def solve(self, problem: ConicProblem) -> ConicSolution:
        import clarabel

        n = problem.n_vars
        # Clarabel form: minimize q.x s.t. A x + s = b, s in cones
        rows = [problem.A.tocsc()]
        rhs = [problem.b]
        cones = []
        if problem.A.shape[0]:
            cones.append(clarabel.ZeroConeT(problem.A.shape[0]))
        offset = problem.n_free
        for k in problem.block_dims:
            pairs = triu_pairs(k)
            # Clarabel's triangle ordering is column-major upper triangle
            order = [(i, j) for j in range(k) for i in range(j + 1)]
            pos = {pair: offset + t for t, pair in enumerate(pairs)}
            data, ri, ci = [], [], []
            for r, (i, j) in enumerate(order):
                ri.append(r)
                ci.append(pos[(i, j)])
                data.append(-1.0 if i == j else -math.sqrt(2.0))
            rows.append(sp.csc_matrix((data, (ri, ci)), shape=(len(order), n)))
            rhs.append(np.zeros(len(order)))
            cones.append(clarabel.PSDTriangleConeT(k))
            offset += len(pairs)
        A = sp.vstack(rows).tocsc()
        A.sort_indices()
        b = np.concatenate(rhs)
        P = sp.csc_matrix((n, n))
        solver = clarabel.DefaultSolver(P, -problem.c, A, b, cones, self._settings())
        sol = solver.solve()
        status = str(sol.status)
        x = np.array(sol.x)
        if status == "Solved":
            mapped = OPTIMAL
        elif status == "PrimalInfeasible":
            mapped = INFEASIBLE
        elif status == "DualInfeasible":
            mapped = UNBOUNDED
        else:
            mapped = FAILURE
        free = x[: problem.n_free]
        blocks = []
        offset = problem.n_free
        for k in problem.block_dims:
            G = np.zeros((k, k))
            for t, (i, j) in enumerate(triu_pairs(k)):
                G[i, j] = G[j, i] = x[offset + t]
            blocks.append(G)
            offset += k * (k + 1) // 2
        obj = float(problem.c @ x) if mapped == OPTIMAL else float("nan")
        return ConicSolution(mapped, free, blocks, obj, status)


@dataclass
class _SosConstraint:
    name: str
    expr: ParametricPolynomial


@dataclass
class _PsdConstraint:
    name: str
    entries: list[list[ParametricPolynomial]]


@dataclass
class CompiledProgram:
    problem: ConicProblem
    bases: dict[str, list[Monomial]]
    block_names: list[str]


@dataclass
class SosSolution:
    status: str
    params: np.ndarray
    objective: float
    certificates: dict[str, GramCertificate] = field(default_factory=dict)
    certified: dict[str, Polynomial | np.ndarray] = field(default_factory=dict)
    info: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def value(self, expr) -> Polynomial:
        if isinstance(expr, ParametricPolynomial):
            return expr.value(self.params)
        return expr

    def scalar(self, expr: ParametricPolynomial) -> float:
        return self.value(expr).coeff((0,) * expr.vars.count)


class SosProgram:
    """Builder for SOS feasibility and optimization problems.

    Parameters
    ----------
    vars : IndeterminateSet
        Indeterminates shared by every constraint.
    trim : bool
        Remove Gram basis monomials whose diagonal entries are forced to zero
        before compiling (see :func:`trim_basis`).
    """

    def __init__(self, vars: IndeterminateSet, trim: bool = True):
        self.vars = vars
        self.trim = trim
        self.param_names: list[str] = []
        self.sos: list[_SosConstraint] = []
        self.psd: list[_PsdConstraint] = []
        self.equalities: list[ParametricPolynomial] = []
        self.objective: ParametricPolynomial | None = None

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def _new_param(self, name: str) -> int:
        self.param_names.append(name)
        return len(self.param_names) - 1

    def new_scalar(self, name: str) -> ParametricPolynomial:
        k = self._new_param(name)
        return ParametricPolynomial(Polynomial.zero(self.vars), {k: Polynomial.constant(self.vars, 1.0)})

    def new_poly(
        self, name: str, var_indices: Sequence[int], degree: int, min_degree: int = 0
    ) -> ParametricPolynomial:
        """Free polynomial in the given variables with one parameter per monomial."""
        lin = {}
        for mono in monomials_up_to(len(var_indices), degree, min_degree):
            full = _embed(mono, var_indices, self.vars.count)
            k = self._new_param(f"{name}[{','.join(map(str, full))}]")
            lin[k] = Polynomial.monomial(self.vars, full)
        return ParametricPolynomial(Polynomial.zero(self.vars), lin)

    def new_sos_poly(
        self, name: str, var_indices: Sequence[int], degree: int, min_degree: int = 0
    ) -> ParametricPolynomial:
        if degree % 2:
            raise NotSosError(f"SOS unknown {name} needs even degree, got {degree}")
        p = self.new_poly(name, var_indices, degree, min_degree)
        self.add_sos(p, name)
        return p

    def new_symmetric(self, name: str, k: int, psd_shift: float | None = None):
        """Symmetric ``k x k`` matrix of scalar parameters.

        With ``psd_shift`` set, ``M - psd_shift * I`` is constrained PSD.
        """
        M = [[None] * k for _ in range(k)]
        for i in range(k):
            for j in range(i, k):
                M[i][j] = M[j][i] = self.new_scalar(f"{name}[{i},{j}]")
        if psd_shift is not None:
            shifted = [
                [M[i][j] - (psd_shift if i == j else 0.0) for j in range(k)] for i in range(k)
            ]
            self.psd.append(_PsdConstraint(name, shifted))
        return M

    def add_sos(self, expr, name: str | None = None) -> str:
        expr = ParametricPolynomial.lift(expr, self.vars)
        if expr.vars != self.vars:
            raise StructureError("constraint over a different indeterminate set")
        self._check_registered(expr)
        name = name or f"sos{len(self.sos)}"
        if any(c.name == name for c in self.sos):
            raise StructureError(f"duplicate constraint name {name!r}")
        self.sos.append(_SosConstraint(name, expr))
        return name

    def add_equality(self, expr) -> None:
        """Require every coefficient of ``expr`` to vanish."""
        expr = ParametricPolynomial.lift(expr, self.vars)
        self._check_registered(expr)
        self.equalities.append(expr)

    def maximize(self, expr) -> None:
        expr = ParametricPolynomial.lift(expr, self.vars)
        self._check_registered(expr)
        if expr.degree > 0:
            raise StructureError("objective must be a scalar (degree-0) affine function")
        self.objective = expr

    def _check_registered(self, expr: ParametricPolynomial) -> None:
        bad = [k for k in expr.lin if not 0 <= k < self.n_params]
        if bad:
            raise StructureError(f"unregistered decision parameters {bad}")

    def compile(self) -> CompiledProgram:
        n_free = self.n_params
        rows: list[tuple[dict[int, float], float]] = []
        block_dims: list[int] = []
        bases: dict[str, list[Monomial]] = {}
        block_names: list[str] = []
        block_cols: list[int] = []
        col = n_free

        for con in self.sos:
            support = con.expr.support()
            basis = gram_basis(con.expr)
            if self.trim:
                basis = trim_basis(basis, support)
            bases[con.name] = basis
            block_names.append(con.name)
            block_dims.append(len(basis))
            block_cols.append(col)
            k = len(basis)
            entries: dict[Monomial, dict[int, float]] = {}
            for t, (i, j) in enumerate(triu_pairs(k)):
                m = tuple(a + b for a, b in zip(basis[i], basis[j]))
                entries.setdefault(m, {})[col + t] = 1.0 if i == j else 2.0
            col += k * (k + 1) // 2
            monos = sorted(set(entries) | support, key=grlex_key)
            for m in monos:
                row = dict(entries.get(m, {}))
                for p, shape in con.expr.lin.items():
                    c = shape.coeff(m)
                    if c:
                        row[p] = row.get(p, 0.0) - c
                rows.append((row, con.expr.const.coeff(m)))

        for con in self.psd:
            k = len(con.entries)
            block_names.append(con.name)
            block_dims.append(k)
            block_cols.append(col)
            zero = (0,) * self.vars.count
            for t, (i, j) in enumerate(triu_pairs(k)):
                e = con.entries[i][j]
                row = {col + t: 1.0}
                for p, shape in e.lin.items():
                    row[p] = row.get(p, 0.0) - shape.coeff(zero)
                rows.append((row, e.const.coeff(zero)))
            col += k * (k + 1) // 2

        for eq in self.equalities:
            for m in sorted(eq.support(), key=grlex_key):
                row = {p: shape.coeff(m) for p, shape in eq.lin.items() if shape.coeff(m)}
                rows.append((row, -eq.const.coeff(m)))

        ri, ci, data, b = [], [], [], []
        for r, (row, rhs) in enumerate(rows):
            for cidx in sorted(row):
                if row[cidx] != 0.0:
                    ri.append(r)
                    ci.append(cidx)
                    data.append(row[cidx])
            b.append(rhs)
        A = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), col))
        c = np.zeros(col)
        if self.objective is not None:
            for p, shape in self.objective.lin.items():
                c[p] = shape.coeff((0,) * self.vars.count)
        problem = ConicProblem(n_free, block_dims, A, np.array(b, dtype=float), c)
        return CompiledProgram(problem, bases, block_names)

    def solve(
        self,
        solver: SolverHandle | None = None,
        cert_tol: float = CERT_TOL,
        eig_tol: float = EIG_TOL,
    ) -> SosSolution:
        """Solve and attach a checked certificate to every SOS/PSD constraint.

        A solver-reported optimum whose certificates fail the independent
        check is returned with status ``numerical-failure``.
        """
        solver = solver or ClarabelSolver()
        compiled = self.compile()
        sol = solver.solve(compiled.problem)
        if sol.status != OPTIMAL:
            return SosSolution(sol.status, np.full(self.n_params, np.nan), float("nan"), info=sol.info)
        params = np.asarray(sol.free, dtype=float)
        certs: dict[str, GramCertificate] = {}
        certified: dict[str, Polynomial | np.ndarray] = {}
        ok = True
        for con, G in zip(self.sos, sol.blocks[: len(self.sos)]):
            p = con.expr.value(params)
            cert = make_certificate(p, compiled.bases[con.name], G)
            certs[con.name] = cert
            certified[con.name] = p
            ok &= check_certificate(p, cert, cert_tol, eig_tol)
        zero = (0,) * self.vars.count
        for con, G in zip(self.psd, sol.blocks[len(self.sos) :]):
            target = np.array([[e.value(params).coeff(zero) for e in row] for row in con.entries])
            G = 0.5 * (G + G.T)
            cert = GramCertificate([], G, float(np.max(np.abs(G - target))) if G.size else 0.0, _min_eig(G))
            certs[con.name] = cert
            certified[con.name] = target
            ok &= check_psd_certificate(target, cert, cert_tol, eig_tol)
        for eq in self.equalities:
            ok &= eq.value(params).max_abs_coeff() <= cert_tol
        objective = float(compiled.problem.c[: self.n_params] @ params) if self.objective else 0.0
        status = OPTIMAL if ok else FAILURE
        info = sol.info if ok else f"{sol.info}; certificate check failed"
        return SosSolution(status, params, objective, certs, certified, info)


def is_sos(p: Polynomial, solver: SolverHandle | None = None, trim: bool = True) -> SosSolution:
    """Feasibility test for a single fixed polynomial."""
    prog = SosProgram(p.vars, trim=trim)
    prog.add_sos(p, "p")
    return prog.solve(solver)
