"""Sparse multivariate polynomials with float coefficients.

Polynomials are immutable maps from exponent tuples to coefficients over a
fixed, ordered set of indeterminates. Every arithmetic result is pruned of
coefficients smaller than ``PRUNE_TOL`` in absolute value.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

PRUNE_TOL = 1e-12

Monomial = tuple[int, ...]

_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")


class StructureError(ValueError):
    """Raised when operands are structurally incompatible."""


class ParseError(ValueError):
    """Raised when an expression does not match the polynomial grammar."""


@dataclass(frozen=True)
class IndeterminateSet:
    """Ordered, duplicate-free indeterminate names.

    ``slack`` names the indeterminates that stand for recast non-polynomial
    quantities; they behave like any other variable algebraically.
    """

    names: tuple[str, ...]
    slack: frozenset[str] = frozenset()

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "slack", frozenset(self.slack))
        if not names:
            raise StructureError("an indeterminate set needs at least one name")
        if len(set(names)) != len(names):
            raise StructureError(f"duplicate indeterminate names in {names}")
        for name in names:
            if not _NAME_RE.match(name):
                raise StructureError(f"invalid indeterminate name {name!r}")
        unknown = self.slack - set(names)
        if unknown:
            raise StructureError(f"slack names {sorted(unknown)} are not indeterminates")

    @property
    def count(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise StructureError(f"unknown indeterminate {name!r}") from None

    def is_slack(self, name: str) -> bool:
        return name in self.slack

    def extended(self, extra: Sequence[str], slack: Iterable[str] = ()) -> "IndeterminateSet":
        return IndeterminateSet(self.names + tuple(extra), self.slack | frozenset(slack))


def _check_exponents(mono: Sequence[int], n: int) -> Monomial:
    mono = tuple(int(e) for e in mono)
    if len(mono) != n:
        raise StructureError(f"monomial {mono} has length {len(mono)}, expected {n}")
    if any(e < 0 for e in mono):
        raise StructureError(f"negative exponent in {mono}")
    return mono


def grlex_key(mono: Monomial) -> tuple:
    """Sort key for graded lexicographic order (x1 > x2 > ... within a degree)."""
    return (sum(mono), tuple(-e for e in mono))


def monomials_up_to(n: int, d: int, min_degree: int = 0) -> list[Monomial]:
    """All monomials in ``n`` variables with total degree in [min_degree, d].

    Ordered graded-lexicographically: ascending degree, then
    lexicographically descending exponents, so ``1, x1, x2, x1^2, x1*x2, ...``.
    """
    if d < 0:
        raise ValueError("degree must be non-negative")
    out: list[Monomial] = []
    for deg in range(max(min_degree, 0), d + 1):
        out.extend(_monomials_of_degree(n, deg))
    return out


def _monomials_of_degree(n: int, deg: int) -> list[Monomial]:
    if n == 1:
        return [(deg,)]
    out = []
    for first in range(deg, -1, -1):
        for rest in _monomials_of_degree(n - 1, deg - first):
            out.append((first,) + rest)
    return out


class Polynomial:
    """Immutable sparse polynomial over an :class:`IndeterminateSet`."""

    __slots__ = ("vars", "_terms", "_hash")

    def __init__(self, vars: IndeterminateSet, terms: Mapping[Sequence[int], float] | None = None):
        self.vars = vars
        clean: dict[Monomial, float] = {}
        if terms:
            n = vars.count
            for mono, coeff in terms.items():
                mono = _check_exponents(mono, n)
                c = float(coeff)
                if not math.isfinite(c):
                    raise ValueError(f"non-finite coefficient {c} for {mono}")
                c = clean.get(mono, 0.0) + c
                clean[mono] = c
            clean = {m: c for m, c in clean.items() if abs(c) >= PRUNE_TOL}
        self._terms = clean
        self._hash = None

    # construction helpers
    @classmethod
    def constant(cls, vars: IndeterminateSet, value: float) -> "Polynomial":
        return cls(vars, {(0,) * vars.count: value})

    @classmethod
    def variable(cls, vars: IndeterminateSet, name_or_index: str | int) -> "Polynomial":
        i = vars.index(name_or_index) if isinstance(name_or_index, str) else int(name_or_index)
        mono = [0] * vars.count
        mono[i] = 1
        return cls(vars, {tuple(mono): 1.0})

    @classmethod
    def monomial(cls, vars: IndeterminateSet, mono: Sequence[int], coeff: float = 1.0) -> "Polynomial":
        return cls(vars, {tuple(mono): coeff})

    @classmethod
    def zero(cls, vars: IndeterminateSet) -> "Polynomial":
        return cls(vars)

    @classmethod
    def parse(cls, text: str, vars: IndeterminateSet) -> "Polynomial":
        return _Parser(text, vars).parse()

    # read-only views
    @property
    def terms(self) -> dict[Monomial, float]:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def coeff(self, mono: Sequence[int]) -> float:
        return self._terms.get(tuple(mono), 0.0)

    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> int:
        """Largest total degree; -1 for the zero polynomial."""
        return max((sum(m) for m in self._terms), default=-1)

    @property
    def min_degree(self) -> int:
        return min((sum(m) for m in self._terms), default=-1)

    def degree_in(self, var: int) -> int:
        return max((m[var] for m in self._terms), default=-1)

    def support_vars(self) -> list[int]:
        used = set()
        for m in self._terms:
            used.update(i for i, e in enumerate(m) if e)
        return sorted(used)

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        return sorted(self._terms.items(), key=lambda kv: grlex_key(kv[0]))

    # arithmetic
    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.vars != self.vars:
                raise StructureError(
                    f"indeterminate sets differ: {self.vars.names} vs {other.vars.names}"
                )
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.vars, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        terms = dict(self._terms)
        for m, c in other._terms.items():
            terms[m] = terms.get(m, 0.0) + c
        return Polynomial(self.vars, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.vars, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return other - self

    def __mul__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        terms: dict[Monomial, float] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                terms[m] = terms.get(m, 0.0) + c1 * c2
        return Polynomial(self.vars, terms)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if not isinstance(scalar, (int, float, np.floating, np.integer)):
            return NotImplemented
        return Polynomial(self.vars, {m: c / scalar for m, c in self._terms.items()})

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("only non-negative integer powers are supported")
        result = Polynomial.constant(self.vars, 1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.vars == other.vars and self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.vars, frozenset(self._terms.items())))
        return self._hash

    def allclose(self, other: "Polynomial", tol: float = 1e-9) -> bool:
        return (self - other).max_abs_coeff() <= tol

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    # calculus and evaluation
    def diff(self, var: int | str) -> "Polynomial":
        i = self.vars.index(var) if isinstance(var, str) else int(var)
        if not 0 <= i < self.vars.count:
            raise StructureError(f"variable index {i} out of range")
        terms = {}
        for m, c in self._terms.items():
            e = m[i]
            if e:
                dm = m[:i] + (e - 1,) + m[i + 1 :]
                terms[dm] = terms.get(dm, 0.0) + c * e
        return Polynomial(self.vars, terms)

    def gradient(self, indices: Iterable[int]) -> list["Polynomial"]:
        return [self.diff(i) for i in indices]

    def _exponent_arrays(self):
        if not self._terms:
            return np.zeros((0, self.vars.count), dtype=np.int64), np.zeros(0)
        monos = np.array(list(self._terms.keys()), dtype=np.int64)
        coeffs = np.array(list(self._terms.values()))
        return monos, coeffs

    def __call__(self, point) -> float | np.ndarray:
        """Evaluate at one point (1-D) or a batch of points (2-D, one per row)."""
        x = np.asarray(point, dtype=float)
        n = self.vars.count
        if x.shape[-1:] != (n,) or x.ndim not in (1, 2):
            raise StructureError(f"point shape {x.shape} incompatible with {n} indeterminates")
        monos, coeffs = self._exponent_arrays()
        if x.ndim == 1:
            if not len(coeffs):
                return 0.0
            return float(np.sum(coeffs * np.prod(x[None, :] ** monos, axis=1)))
        if not len(coeffs):
            return np.zeros(x.shape[0])
        vals = np.ones((x.shape[0], len(coeffs)))
        for j in range(n):
            col = monos[:, j]
            if col.any():
                vals *= x[:, j : j + 1] ** col[None, :]
        return vals @ coeffs

    evaluate = __call__

    def substitute(self, var: int | str, expr: "Polynomial") -> "Polynomial":
        """Replace every occurrence of ``var`` by ``expr`` and expand."""
        i = self.vars.index(var) if isinstance(var, str) else int(var)
        expr = self._coerce(expr)
        if expr.degree_in(i) > 0:
            raise StructureError(
                f"substituted expression contains {self.vars.names[i]} itself"
            )
        powers = {0: Polynomial.constant(self.vars, 1.0)}
        result = Polynomial.zero(self.vars)
        for m, c in self.sorted_terms():
            e = m[i]
            if e not in powers:
                powers[e] = expr**e
            rest = Polynomial.monomial(self.vars, m[:i] + (0,) + m[i + 1 :], c)
            result = result + rest * powers[e]
        return result

    def lift(self, vars: IndeterminateSet) -> "Polynomial":
        """Re-express over a superset of indeterminates (matched by name)."""
        idx = [vars.index(name) for name in self.vars.names]
        terms = {}
        for m, c in self._terms.items():
            nm = [0] * vars.count
            for j, e in zip(idx, m):
                nm[j] = e
            terms[tuple(nm)] = c
        return Polynomial(vars, terms)

    def restrict(self, vars: IndeterminateSet) -> "Polynomial":
        """Re-express over a subset of indeterminates; absent ones must not occur."""
        keep = [self.vars.index(name) for name in vars.names]
        drop = set(range(self.vars.count)) - set(keep)
        terms = {}
        for m, c in self._terms.items():
            if any(m[j] for j in drop):
                raise StructureError(f"cannot restrict {self} to {vars.names}")
            terms[tuple(m[j] for j in keep)] = c
        return Polynomial(vars, terms)

    # printing
    def __str__(self):
        return format_polynomial(self)

    def __repr__(self):
        return f"Polynomial({format_polynomial(self)!r})"


def format_polynomial(p: Polynomial) -> str:
    """Canonical text form; parsing it back yields the identical polynomial."""
    if p.is_zero():
        return "0"
    parts = []
    for i, (m, c) in enumerate(p.sorted_terms()):
        mono = "*".join(
            name if e == 1 else f"{name}^{e}" for name, e in zip(p.vars.names, m) if e
        )
        mag = abs(c)
        if mono and mag == 1.0:
            body = mono
        elif mono:
            body = f"{_fmt_coeff(mag)}*{mono}"
        else:
            body = _fmt_coeff(mag)
        sign = "-" if c < 0 else "+"
        if i == 0:
            parts.append(body if sign == "+" else f"-{body}")
        else:
            parts.append(f" {sign} {body}")
    return "".join(parts)


def _fmt_coeff(x: float) -> str:
    return repr(float(x))


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z][A-Za-z0-9_]*)|(?P<op>[-+*^()]))"
)


class _Parser:
    """Recursive-descent parser for ``+ - * ^ ( )`` expressions with numeric literals."""

    def __init__(self, text: str, vars: IndeterminateSet):
        self.text = text
        self.vars = vars
        self.tokens = self._tokenize(text)
        self.pos = 0

    def _tokenize(self, text):
        tokens = []
        i = 0
        stripped = text.rstrip()
        while i < len(stripped):
            m = _TOKEN_RE.match(stripped, i)
            if not m or m.end() == i:
                raise ParseError(f"unexpected character {stripped[i]!r} at offset {i} in {text!r}")
            kind = m.lastgroup
            tokens.append((kind, m.group(kind), m.start(kind)))
            i = m.end()
        return tokens

    def _peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None, len(self.text))

    def _take(self):
        tok = self._peek()
        self.pos += 1
        return tok

    def _expect_op(self, op):
        kind, val, at = self._take()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r} at offset {at} in {self.text!r}")

    def parse(self) -> Polynomial:
        if not self.tokens:
            raise ParseError("empty expression")
        p = self._expr()
        kind, val, at = self._peek()
        if kind is not None:
            raise ParseError(f"unexpected {val!r} at offset {at} in {self.text!r}")
        return p

    def _expr(self) -> Polynomial:
        kind, val, _ = self._peek()
        if kind == "op" and val in "+-":
            self._take()
            p = self._term()
            if val == "-":
                p = -p
        else:
            p = self._term()
        while True:
            kind, val, _ = self._peek()
            if kind == "op" and val in "+-":
                self._take()
                t = self._term()
                p = p + t if val == "+" else p - t
            else:
                return p

    def _term(self) -> Polynomial:
        p = self._factor()
        while True:
            kind, val, _ = self._peek()
            if kind == "op" and val == "*":
                self._take()
                p = p * self._factor()
            else:
                return p

    def _factor(self) -> Polynomial:
        base = self._atom()
        kind, val, at = self._peek()
        if kind == "op" and val == "^":
            self._take()
            kind, val, at = self._take()
            if kind != "num" or not val.isdigit():
                raise ParseError(f"exponent must be a non-negative integer at offset {at} in {self.text!r}")
            base = base ** int(val)
        return base

    def _atom(self) -> Polynomial:
        kind, val, at = self._take()
        if kind == "num":
            return Polynomial.constant(self.vars, float(val))
        if kind == "name":
            if val not in self.vars.names:
                raise ParseError(f"unknown variable {val!r} at offset {at} in {self.text!r}")
            return Polynomial.variable(self.vars, val)
        if kind == "op" and val == "(":
            p = self._expr()
            self._expect_op(")")
            return p
        if kind == "op" and val == "-":
            return -self._factor()
        raise ParseError(f"unexpected {val!r} at offset {at} in {self.text!r}")


def poly_vector(vars: IndeterminateSet, exprs: Sequence[str | Polynomial | float]) -> list[Polynomial]:
    out = []
    for e in exprs:
        if isinstance(e, Polynomial):
            out.append(e)
        elif isinstance(e, str):
            out.append(Polynomial.parse(e, vars))
        else:
            out.append(Polynomial.constant(vars, float(e)))
    return out


def jacobian(polys: Sequence[Polynomial], indices: Sequence[int]) -> list[list[Polynomial]]:
    return [[p.diff(j) for j in indices] for p in polys]


def evaluate_matrix(entries: Sequence[Sequence[Polynomial]], point) -> np.ndarray:
    return np.array([[float(e(point)) for e in row] for row in entries])


def evaluate_vector(entries: Sequence[Polynomial], point) -> np.ndarray:
    return np.array([float(e(point)) for e in entries])


def quadratic_form(w: Sequence[Polynomial], Q: np.ndarray) -> Polynomial:
    """Return ``w^T Q w`` for a polynomial vector ``w`` and numeric matrix ``Q``."""
    Q = np.asarray(Q, dtype=float)
    vars = w[0].vars
    out = Polynomial.zero(vars)
    for i, j in itertools.product(range(len(w)), repeat=2):
        if Q[i, j]:
            out = out + w[i] * w[j] * float(Q[i, j])
    return out


class PolyMap:
    """Fast evaluation of several polynomials over one indeterminate set.

    The distinct monomials are stacked once so each evaluation is a single
    power/product pass followed by a matrix-vector product.
    """

    def __init__(self, polys: Sequence[Polynomial]):
        polys = list(polys)
        if not polys:
            raise StructureError("PolyMap needs at least one polynomial")
        vars = polys[0].vars
        if any(p.vars != vars for p in polys):
            raise StructureError("all polynomials must share the indeterminate set")
        self.vars = vars
        monos = sorted({m for p in polys for m, _ in p.items()}, key=grlex_key) or [(0,) * vars.count]
        col = {m: j for j, m in enumerate(monos)}
        self._E = np.array(monos, dtype=np.int64).reshape(len(monos), vars.count)
        self._C = np.zeros((len(polys), len(monos)))
        for i, p in enumerate(polys):
            for m, c in p.items():
                self._C[i, col[m]] = c

    def __len__(self) -> int:
        return self._C.shape[0]

    def __call__(self, point) -> np.ndarray:
        x = np.asarray(point, dtype=float)
        if x.ndim == 1:
            return self._C @ np.prod(x[None, :] ** self._E, axis=1)
        return (np.prod(x[:, None, :] ** self._E[None, :, :], axis=2)) @ self._C.T
