import numpy as np
import pytest

from rmps.dynamics import (
    CartPole,
    DisturbanceSpec,
    DynamicsModel,
    Equilibrium,
    HolonomicParticle,
    NonholonomicParticle,
    make_model,
)
from rmps.geometry import Box, SafeSet


def test_nonholonomic_fixed_point_at_rest():
    nh = NonholonomicParticle()
    z = np.zeros(4)
    assert np.array_equal(nh.step_nominal(z, np.zeros(2)), z)


def test_nonholonomic_unit_speed_step():
    nh = NonholonomicParticle(dt=0.1)
    out = nh.step_nominal([0, 0, 1, 0], [0, 0])
    # hand evaluation of z + dt * (v cos h, v sin h, a, v tan(steer)/radius)
    assert np.allclose(out, [0.1, 0, 1, 0])


def test_holonomic_matches_euler_double_integrator():
    ho = HolonomicParticle(dt=0.1)
    A_c = np.array([[0, 0, 1, 0], [0, 0, 0, 1], [0, 0, 0, 0], [0, 0, 0, 0]], dtype=float)
    B_c = np.array([[0, 0], [0, 0], [1, 0], [0, 1]], dtype=float)
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.normal(size=4)
        u = rng.normal(size=2)
        expect = z + 0.1 * (A_c @ z + B_c @ u)
        assert np.allclose(ho.step_nominal(z, u), expect, atol=1e-14)


def test_step_rejects_non_finite():
    ho = HolonomicParticle()
    with pytest.raises(ValueError):
        ho.step_nominal([np.nan, 0, 0, 0], [0, 0])


def test_degenerate_disturbance_is_zero():
    spec = DisturbanceSpec(np.zeros(4))
    rng = np.random.default_rng(0)
    assert np.array_equal(spec.sample(rng), np.zeros(4))


def test_cartpole_disturbance_dims():
    # noise enters velocity and angular velocity only, positions untouched
    cp = CartPole()
    rng = np.random.default_rng(1)
    draws = np.array([cp.sample_disturbance(rng) for _ in range(200)])
    assert np.all(draws[:, 0] == 0) and np.all(draws[:, 2] == 0)
    assert np.all(np.abs(draws[:, 1]) <= 0.01) and np.all(np.abs(draws[:, 3]) <= 0.01)
    assert np.abs(draws[:, 1]).max() > 0.001


def test_disturbance_mean_clt_bound():
    cp = CartPole()
    rng = np.random.default_rng(2)
    n = 10**5
    draws = cp.disturbance.sample_block(rng, n)
    bound = 3 * 0.01 / np.sqrt(3 * n)
    assert np.all(np.abs(draws.mean(axis=0)) <= bound)


def test_step_stochastic_additivity_and_determinism():
    ho = HolonomicParticle()
    rng = np.random.default_rng(3)
    hw = ho.disturbance.half_widths
    for _ in range(200):
        x = rng.normal(size=4)
        u = rng.normal(size=2)
        r1 = np.random.default_rng(99)
        r2 = np.random.default_rng(99)
        out1 = ho.step_stochastic(x, u, r1)
        out2 = ho.step_stochastic(x, u, r2)
        assert np.array_equal(out1, out2)
        diff = out1 - ho.step_nominal(x, u)
        assert np.all(np.abs(diff) <= hw + 1e-15)


def test_zero_noise_model_matches_nominal():
    ho = HolonomicParticle(noise_scale=0.0)
    rng = np.random.default_rng(4)
    x = np.array([1.0, 2.0, 0.3, -0.2])
    u = np.array([0.5, -0.5])
    assert np.array_equal(ho.step_stochastic(x, u, rng), ho.step_nominal(x, u))


def test_equilibrium_cartpole():
    cp = CartPole()
    eq = cp.equilibrium_near([2.0, 0.5, 0.3, -0.1])
    assert np.allclose(eq.x_e, [2.0, 0, 0, 0])
    assert np.allclose(eq.u_e, [0.0])
    assert np.max(np.abs(cp.step_nominal(eq.x_e, eq.u_e) - eq.x_e)) <= 1e-9


def test_equilibrium_holonomic_identity():
    ho = HolonomicParticle()
    eq = ho.equilibrium_near([1, 2, 0, 0])
    assert np.allclose(eq.x_e, [1, 2, 0, 0])


def test_equilibrium_nonholonomic_keeps_heading():
    nh = NonholonomicParticle()
    eq = nh.equilibrium_near([1, 1, 0.5, np.pi / 4])
    assert np.allclose(eq.x_e, [1, 1, 0, np.pi / 4])
    assert np.max(np.abs(nh.step_nominal(eq.x_e, eq.u_e) - eq.x_e)) <= 1e-9


def test_linearize_holonomic_exact():
    ho = HolonomicParticle(dt=0.1)
    eq = ho.equilibrium_near(np.zeros(4))
    A, B = ho.linearize(eq)
    A_c = np.array([[0, 0, 1, 0], [0, 0, 0, 1], [0, 0, 0, 0], [0, 0, 0, 0]], dtype=float)
    B_c = np.array([[0, 0], [0, 0], [1, 0], [0, 1]], dtype=float)
    assert np.allclose(A, np.eye(4) + 0.1 * A_c, atol=1e-8)
    assert np.allclose(B, 0.1 * B_c, atol=1e-8)


class _StubModel(DynamicsModel):
    """Zero dynamics f(x, u) = x."""

    name = "stub"

    def __init__(self):
        safe = SafeSet(2, (), (), ())
        super().__init__(2, 1, 1.0, [], Box([-1.0], [1.0]), safe, DisturbanceSpec(np.zeros(2)))

    def step_nominal(self, x, u):
        return np.asarray(x, dtype=float).copy()

    def _equilibrium_near(self, x):
        return Equilibrium(np.asarray(x, dtype=float), np.zeros(1))


def test_linearize_zero_dynamics_stub():
    stub = _StubModel()
    A, B = stub.linearize(stub.equilibrium_near([0.3, -0.7]))
    assert np.allclose(A, np.eye(2), atol=1e-10)
    assert np.allclose(B, 0, atol=1e-10)


def test_linearize_taylor_remainder_cartpole():
    cp = CartPole()
    eq = cp.equilibrium_near(np.zeros(4))
    A, _ = cp.linearize(eq)
    for eps in (1e-3, 1e-4):
        worst = 0.0
        for i in range(4):
            d = np.zeros(4)
            d[i] = eps
            err = np.linalg.norm(cp.step_nominal(eq.x_e + d, eq.u_e) - eq.x_e - A @ d)
            worst = max(worst, err)
        assert worst <= 50.0 * eps**2


def test_task_cost_examples():
    cp = CartPole(x_target=0.0)
    assert cp.task_cost([1, 0, 0.1, 0], [0.0]) == pytest.approx(1.01)
    assert cp.task_cost([0, 0, 0, 0], [0.0]) == 0.0
    ho = HolonomicParticle(goal=(1.0, 2.0))
    assert ho.task_cost([1.0, 2.0, 0, 0], np.zeros(2)) == 0.0


def test_task_cost_penalizes_obstacle_proximity():
    # equal goal distance, different obstacle clearance
    hob = HolonomicParticle(goal=(3.0, 3.0), obstacles=[((1.0, 1.0), 0.4)])
    goal = np.array([3.0, 3.0])
    radius = np.linalg.norm(np.array([1.2, 1.2]) - goal)
    near = np.array([1.2, 1.2])  # close to the obstacle
    far = goal + radius * np.array([1.0, 0.0])  # same goal distance, clear
    c_near = hob.task_cost([near[0], near[1], 0, 0], np.zeros(2))
    c_far = hob.task_cost([far[0], far[1], 0, 0], np.zeros(2))
    assert c_near > c_far


def test_step_nominal_determinism_bytes():
    nh = NonholonomicParticle()
    x = np.array([0.1, -0.2, 0.8, 1.1])
    u = np.array([0.3, -0.2])
    a = nh.step_nominal(x, u)
    b = nh.step_nominal(x.copy(), u.copy())
    assert a.tobytes() == b.tobytes()


def test_cartpole_energy_drift_scales_with_dt_squared():
    x0 = np.array([0.0, 0.1, 0.05, 0.0])
    drifts = {}
    for dt in (0.02, 0.01):
        cp = CartPole(dt=dt, noise_scale=0.0)
        x = x0.copy()
        worst = 0.0
        e_prev = cp.mechanical_energy(x)
        for _ in range(20):
            x = cp.step_nominal(x, np.zeros(1))
            e = cp.mechanical_energy(x)
            worst = max(worst, abs(e - e_prev))
            e_prev = e
        drifts[dt] = worst
    ratio = drifts[0.02] / drifts[0.01]
    assert 2.5 <= ratio <= 6.0


def test_make_model_dispatch():
    assert make_model("cartpole").name == "cartpole"
    assert make_model("holonomic").name == "holonomic"
    assert make_model("nonholonomic").name == "nonholonomic"
    with pytest.raises(ValueError):
        make_model("pendulum")
