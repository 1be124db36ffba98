import numpy as np
import pytest

from smcforge.polynomial import IndeterminateSet, Polynomial, StructureError
from smcforge.smc import (
    ControlLaw,
    RegularFormSystem,
    SingularityError,
    SlackDefinition,
    UnsolvableManifold,
    control,
    equivalent_control,
    manifold_well_posed,
    sliding_dynamics,
    switching_gain,
)

from conftest import REFERENCE_S, two_state


@pytest.fixture
def law(example1):
    return ControlLaw((Polynomial.parse(REFERENCE_S, example1.vars),), delta=0.03)


class TestSystem:
    def test_dimensions_checked(self):
        Y = IndeterminateSet(("z1", "z2"))
        P = lambda s: Polynomial.parse(s, Y)
        with pytest.raises(StructureError):
            RegularFormSystem(Y, 1, [P("z2"), P("z1")], [P("0")], [[P("1")]], P("0.5"))
        with pytest.raises(StructureError):
            RegularFormSystem(Y, 1, [P("z2")], [P("0")], [[P("1"), P("0")]], P("0.5"))

    def test_equilibrium_required(self):
        with pytest.raises(StructureError):
            two_state("z2 + 1")

    def test_split(self, example1):
        assert example1.z1_idx == [0, 1] and example1.z2_idx == [2]
        assert example1.z1_vars.names == ("x1", "x2")


class TestControl:
    def test_equivalent_control_at_origin(self, law, example1):
        assert equivalent_control(law, example1, np.zeros(3)) == pytest.approx([0.0], abs=1e-15)

    def test_equivalent_control_by_hand(self, law, example1):
        # dx1 = -5, dx2 = -2 at (1, 1, 0)
        assert equivalent_control(law, example1, [1.0, 1.0, 0.0]) == pytest.approx([4.0], abs=1e-12)

    def test_switching_gain(self, law, example1):
        assert switching_gain(law, example1, [1.0, 1.0, 0.0]) == pytest.approx(0.6, abs=1e-12)

    def test_unperturbed_gain_is_eta(self, example1):
        sys0 = RegularFormSystem(example1.vars, 1, example1.f1, example1.f2, example1.L,
                                 Polynomial.zero(example1.vars), 0.1)
        law = ControlLaw((Polynomial.parse(REFERENCE_S, example1.vars),))
        assert switching_gain(law, sys0, [0.3, 0.2, 0.1]) == pytest.approx(0.1)

    def test_control_outside_layer(self, law, example1):
        assert control(law, example1, [1.0, 1.0, 0.0]) == pytest.approx([3.4], abs=1e-12)

    def test_control_on_manifold_is_equivalent(self, law, example1):
        z = np.array([0.4, -0.2, -0.66 * 0.4 + 0.35 * 0.2])
        assert abs(law.S_at(z)[0]) < 1e-15
        np.testing.assert_allclose(control(law, example1, z), equivalent_control(law, example1, z), atol=1e-12)

    def test_saturation_limit(self, law, example1):
        z = np.array([0.0, 0.0, -5.0])
        expected = equivalent_control(law, example1, z) + 0.6
        np.testing.assert_allclose(control(law, example1, z), expected, atol=1e-12)

    def test_inside_layer_is_linear(self, law, example1):
        z = np.array([0.0, 0.0, 0.015])
        expected = equivalent_control(law, example1, z) - 0.6 * 0.5
        np.testing.assert_allclose(control(law, example1, z), expected, atol=1e-12)

    def test_singularity_reported(self):
        sys_ = two_state("z2")
        law = ControlLaw((Polynomial.parse("z1", sys_.vars),))
        with pytest.raises(SingularityError, match=r"z=\(1, 1\)"):
            equivalent_control(law, sys_, [1.0, 1.0])

    def test_invalid_delta(self, example1):
        with pytest.raises(ValueError):
            ControlLaw((Polynomial.parse(REFERENCE_S, example1.vars),), delta=0.0)


class TestSlack:
    def test_value_and_gradient(self):
        Y = IndeterminateSet(("z1", "z2"))
        slack = SlackDefinition((Polynomial.parse("z1", Y),), 2, 3)
        assert slack.value([8.0, 0.0]) == pytest.approx(16.0)
        # d/dz1 |z1|^(4/3) = (4/3) z1^(1/3)
        np.testing.assert_allclose(slack.gradient([8.0, 0.0]), [8.0 / 3.0, 0.0])
        np.testing.assert_allclose(slack.values(np.array([[8.0, 1.0], [1.0, 0.0]])), [16.0, 1.0])

    def test_requires_r_above_p(self):
        Y = IndeterminateSet(("z1", "z2"))
        with pytest.raises(ValueError):
            SlackDefinition((Polynomial.parse("z1", Y),), 3, 3)

    def test_chain_rule_through_slack(self):
        sys_ = two_state("z2")
        X = sys_.vars.extended(["M"], slack=["M"])
        slack = SlackDefinition((Polynomial.parse("z1", sys_.vars),), 2, 3)
        law = ControlLaw((Polynomial.parse("z2 + M", X),), slack=slack)
        S, J = law.evaluate([8.0, 1.0])
        assert S == pytest.approx([17.0])
        np.testing.assert_allclose(J, [[8.0 / 3.0, 1.0]])


class TestSlidingDynamics:
    def test_affine_example(self, law, example1):
        dyn = sliding_dynamics(law, example1)
        z = dyn.state([0.5, -0.25])
        assert z[2] == pytest.approx(-0.66 * 0.5 + 0.35 * 0.25)

    def test_cube_root_manifold(self, double_integrator):
        law = ControlLaw((Polynomial.parse("z2^3 + z1", double_integrator.vars),))
        dyn = sliding_dynamics(law, double_integrator)
        for z1 in (1.0, -8.0, 0.001):
            assert dyn.z2_star([z1])[0] == pytest.approx(-np.cbrt(z1), rel=1e-9)
        Z, ok = dyn.states(np.array([[1.0], [-8.0], [0.001]]))
        assert ok.all()
        np.testing.assert_allclose(Z[:, 1], -np.cbrt([1.0, -8.0, 0.001]), rtol=1e-9)

    def test_ambiguous_manifold(self, double_integrator):
        law = ControlLaw((Polynomial.parse("z2^2 - z1", double_integrator.vars),))
        dyn = sliding_dynamics(law, double_integrator)
        with pytest.raises(UnsolvableManifold, match="2 real roots"):
            dyn.z2_star([1.0])
        with pytest.raises(UnsolvableManifold, match="no real root"):
            dyn.z2_star([-1.0])
        _, ok = dyn.states(np.array([[1.0], [-1.0]]))
        assert not ok.any()

    def test_well_posed(self, double_integrator):
        P = lambda s: Polynomial.parse(s, double_integrator.vars)
        assert manifold_well_posed([P("z2 + z1")], double_integrator) == pytest.approx(1.0)
        assert manifold_well_posed([P("z1")], double_integrator) == 0.0
