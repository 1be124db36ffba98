import math

import numpy as np
import pytest

from smcforge.polynomial import IndeterminateSet, Polynomial
from smcforge.sim import (
    DivergenceError,
    PerturbationModel,
    SimulationAborted,
    Trajectory,
    derived_seeds,
    integrate,
    reaching_metrics,
    roa_sample_report,
    rk4_step,
    settling_time,
    simulate,
)
from smcforge.smc import ControlLaw

from conftest import REFERENCE_S, two_state


def decay(t, z):
    return -z


class TestIntegrator:
    def test_rk4_order(self):
        errs = [abs(integrate(decay, [1.0], 1.0, dt)[1][-1, 0] - np.exp(-1)) for dt in (0.1, 0.05)]
        assert 12 <= errs[0] / errs[1] <= 20

    def test_grid(self):
        t, x = integrate(decay, [1.0, 2.0], 0.5, 0.1)
        np.testing.assert_allclose(t, np.linspace(0, 0.5, 6))
        assert x.shape == (6, 2)

    def test_single_step_exact_for_linear(self):
        # RK4 on dz = -z reproduces the degree-4 Taylor polynomial of exp(-dt)
        dt = 0.1
        taylor = sum((-dt) ** k / math.factorial(k) for k in range(5))
        assert rk4_step(decay, 0.0, np.array([1.0]), dt)[0] == pytest.approx(taylor, abs=1e-15)


class TestMetrics:
    def _sliding(self, s):
        t = np.arange(len(s)) * 1e-3
        return Trajectory(t, np.zeros((len(t), 2)), np.zeros((len(t), 1)), np.asarray(s)[:, None])

    def test_reaching_linear_decay(self):
        t = np.arange(0, 2.0001, 1e-3)
        m = reaching_metrics(self._sliding(np.maximum(1 - t, 0)), 0.03, 0.1)
        # one grid step of slack: 1 - 0.97 rounds just above 0.03
        assert m.t_reach == pytest.approx(0.97, abs=1e-3 + 1e-9)
        assert m.max_post_reach_excursion <= 0.03

    def test_already_on_manifold(self):
        m = reaching_metrics(self._sliding(np.zeros(100)), 0.03, 0.1)
        assert m.t_reach == 0.0 and m.reaching_violations == 0

    def test_never_reaches(self):
        m = reaching_metrics(self._sliding(np.ones(100)), 0.03, 0.1)
        assert m.t_reach is None and m.max_post_reach_excursion is None
        # constant S outside the layer violates the reaching condition everywhere
        assert m.reaching_violations == 98

    def test_settling_cube_root(self):
        t, x = integrate(lambda t, z: -np.cbrt(z), [1.0], 3.0, 1e-3)
        ts = settling_time(Trajectory.from_states(t, x), 1e-3)
        assert ts == pytest.approx(1.485, abs=1e-3)
        assert ts <= 1.5

    def test_settling_exponential(self):
        t, x = integrate(decay, [1.0], 15.0, 1e-3)
        traj = Trajectory.from_states(t, x)
        assert settling_time(traj, 1e-3) == pytest.approx(np.log(1000), abs=2e-3)
        assert settling_time(traj, 1e-5) > settling_time(traj, 1e-3) + 4.0

    def test_settling_zero(self):
        traj = Trajectory.from_states(np.arange(5) * 0.1, np.zeros((5, 1)))
        assert settling_time(traj, 1e-3) == 0.0

    def test_settling_absent(self):
        traj = Trajectory.from_states(np.arange(5) * 0.1, np.ones((5, 1)))
        assert settling_time(traj, 1e-3) is None


class TestRoaSampling:
    Y = IndeterminateSet(("z1", "z2"))

    def _report(self, beta):
        V = Polynomial.parse("4*z1^2 + 4*z2^2", self.Y)
        p = Polynomial.parse("z1^2 + z2^2", self.Y)
        return roa_sample_report(V, beta, p, [(-1, 1), (-1, 1)], 100_000, seed=0)

    def test_exact_level(self):
        assert self._report(0.25)["containment_violations"] == 0

    def test_slightly_too_large(self):
        assert self._report(0.26)["containment_violations"] > 0

    def test_vacuous(self):
        assert self._report(0.0)["containment_violations"] == 0


class TestPerturbation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PerturbationModel("gaussian")

    def test_sinusoid_bounded(self, example1):
        law = ControlLaw((Polynomial.parse(REFERENCE_S, example1.vars),))
        pert = PerturbationModel("sinusoid", 0.5, 5.0)
        z = np.array([0.1, 0.2, 0.3])
        assert pert(np.pi / 10, z, example1, law) == pytest.approx([0.5])
        with pytest.raises(ValueError):
            PerturbationModel("sinusoid", 0.7, 5.0)(0.1, z, example1, law)

    def test_worst_case_magnitude(self, example1):
        law = ControlLaw((Polynomial.parse(REFERENCE_S, example1.vars),))
        pert = PerturbationModel("worst-case")
        z = np.array([0.1, 0.2, 0.3])
        xi = pert(0.0, z, example1, law)
        assert abs(xi[0]) == pytest.approx(0.5)
        # same sign as S: drives S away from zero
        assert np.sign(xi[0]) == np.sign(law.S_at(z)[0])


class TestSimulate:
    def test_trajectory_shapes(self, example1, reference_pair):
        V, S = reference_pair
        law = ControlLaw(tuple(S), 0.03)
        traj = simulate(example1, law, PerturbationModel(), [1.0, -1.0, 0.5], 0.1, 1e-3, V)
        assert len(traj) == 101
        assert traj.states.shape == (101, 3) and traj.inputs.shape == (101, 1)
        assert traj.lyapunov[0] == pytest.approx(V([1.0, -1.0]))

    def test_csv_deterministic(self, example1, reference_pair):
        V, S = reference_pair
        law = ControlLaw(tuple(S), 0.03)
        runs = [
            simulate(example1, law, PerturbationModel("sinusoid", 0.5, 5.0), [1.0, -1.0, 0.5], 0.2, 1e-3, V).csv_text()
            for _ in range(2)
        ]
        assert runs[0] == runs[1]
        assert runs[0].splitlines()[0] == "t,x1,x2,x3,u1,S1,V"

    def test_divergence_carries_trajectory(self):
        sys_ = two_state("z1^3")
        law = ControlLaw((Polynomial.parse("z2", sys_.vars),))
        with pytest.raises(DivergenceError) as info:
            simulate(sys_, law, PerturbationModel(), [2.0, 0.0], 5.0, 1e-3)
        assert 0 < len(info.value.trajectory)

    def test_singularity_aborts(self, double_integrator):
        law = ControlLaw((Polynomial.parse("z2^3 + z1", double_integrator.vars),))
        with pytest.raises(SimulationAborted) as info:
            simulate(double_integrator, law, PerturbationModel(), [0.5, 0.0], 1.0, 1e-3)
        assert len(info.value.trajectory) == 0

    def test_csv_columns(self):
        traj = Trajectory(np.array([0.0, 0.5]), np.ones((2, 2)), np.zeros((2, 1)), np.zeros((2, 1)))
        assert traj.csv_text("states").splitlines() == ["t,x1,x2", "0,1,1", "0.5,1,1"]
        assert traj.csv_text("control").splitlines()[0] == "t,u1,S1"
        assert traj.csv_text().splitlines()[1] == "0,1,1,0,0,"


def test_derived_seeds_stable():
    assert derived_seeds(7, 3) == derived_seeds(7, 3)
    assert len(set(derived_seeds(7, 3))) == 3
