import numpy as np
import pytest

from smcforge.polynomial import IndeterminateSet, Polynomial
from smcforge.smc import RegularFormSystem

EXAMPLE_F1 = ["x3 - 2*x1 - x1^3 - 2*x2^4*x1", "x3 - x2*x1^2 - x2^5"]
REFERENCE_V = "0.08*x1^2 - 0.06*x1*x2 + 0.76*x2^2"
REFERENCE_S = "x3 + 0.66*x1 + 0.35*x2"


def two_state(f1: str, phi1: str = "0.5") -> RegularFormSystem:
    Y = IndeterminateSet(("z1", "z2"))
    P = lambda s: Polynomial.parse(s, Y)
    return RegularFormSystem(Y, 1, [P(f1)], [P("0")], [[P("1")]], P(phi1))


@pytest.fixture(scope="session")
def example1() -> RegularFormSystem:
    X = IndeterminateSet(("x1", "x2", "x3"))
    P = lambda s: Polynomial.parse(s, X)
    return RegularFormSystem(X, 1, [P(f) for f in EXAMPLE_F1], [P("0")], [[P("1")]], P("0.5"), 0.1)


@pytest.fixture(scope="session")
def reference_pair(example1):
    V = Polynomial.parse(REFERENCE_V, example1.z1_vars)
    S = [Polynomial.parse(REFERENCE_S, example1.vars)]
    return V, S


@pytest.fixture(scope="session")
def double_integrator() -> RegularFormSystem:
    return two_state("z2")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
