import numpy as np
import pytest
import scipy.linalg as sla

from rmps import _kernels
from rmps.dynamics import CartPole, HolonomicParticle, NonholonomicParticle
from rmps.geometry import Box
from rmps.trajopt import (
    CostWeights,
    LqrSolution,
    Stabilizer,
    StabilizabilityError,
    TrackingContext,
    design_stabilizer,
    plan_reference,
    plan_reference_linear,
    solve_dare,
    stabilizing_control,
    track_step,
    _safe_set_arrays,
)

GOLDEN_RATIO = (1 + np.sqrt(5)) / 2


def _riccati_residual(A, B, Q, R, P):
    BtP = B.T @ P
    return np.max(np.abs(P - (Q + A.T @ (P - P @ B @ np.linalg.solve(R + BtP @ B, BtP)) @ A)))


def test_dare_scalar_closed_form():
    sol = solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert abs(sol.P[0, 0] - GOLDEN_RATIO) <= 1e-9
    assert abs(sol.K[0, 0] - GOLDEN_RATIO / (1 + GOLDEN_RATIO)) <= 1e-9


def test_dare_zero_dynamics_gives_q():
    Q = np.diag([2.0, 3.0])
    sol = solve_dare(np.zeros((2, 2)), np.eye(2), Q, np.eye(2))
    assert np.allclose(sol.P, Q, atol=1e-12)


def test_dare_matches_scipy_and_plugs_back():
    cp = CartPole()
    ho = HolonomicParticle()
    w1 = CostWeights.default(4, 1)
    w2 = CostWeights.default(4, 2)
    for model, w in ((cp, w1), (ho, w2)):
        eq = model.equilibrium_near(np.zeros(4))
        A, B = model.linearize(eq)
        sol = solve_dare(A, B, w.Q, w.R)
        assert _riccati_residual(A, B, w.Q, w.R, sol.P) <= 1e-8
        P_ref = sla.solve_discrete_are(A, B, w.Q, w.R)
        assert np.max(np.abs(sol.P - P_ref)) <= 1e-6
        assert np.max(np.abs(np.linalg.eigvals(A - B @ sol.K))) < 1.0


def test_dare_unstabilizable_raises():
    # uncontrollable neutrally stable mode carrying cost
    A = np.array([[1.0, 0.0], [0.0, 0.5]])
    B = np.array([[0.0], [1.0]])
    with pytest.raises(StabilizabilityError):
        solve_dare(A, B, np.eye(2), np.eye(1))


def test_nonholonomic_reduced_stabilizer_plugs_back():
    nh = NonholonomicParticle()
    w = CostWeights.default(4, 2)
    eq = nh.equilibrium_near([0.5, -0.5, 0.2, 0.9])
    stab = design_stabilizer(nh, eq, w)
    basis = nh.stabilizer_basis(eq)
    A, B = nh.linearize(eq)
    A_r, B_r = basis @ A @ basis.T, basis @ B
    assert _riccati_residual(A_r, B_r, basis @ w.Q @ basis.T, w.R, stab.lqr.P) <= 1e-8
    assert np.max(np.abs(np.linalg.eigvals(A_r - B_r @ stab.lqr.K))) < 1.0


def test_cost_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(np.diag([1.0, -1.0]), np.eye(1))
    with pytest.raises(ValueError):
        CostWeights(np.eye(2), np.zeros((1, 1)))


def test_stabilizing_control_at_equilibrium(holonomic_free, weights4x2):
    eq = holonomic_free.equilibrium_near([1.0, 1.0, 0, 0])
    stab = design_stabilizer(holonomic_free, eq, weights4x2)
    assert np.allclose(stabilizing_control(stab, holonomic_free, eq.x_e), eq.u_e)


def test_stabilizing_control_identity_gain():
    ho = HolonomicParticle(accel_limit=100.0)
    eq = ho.equilibrium_near(np.zeros(4))
    lqr = LqrSolution(np.eye(4), np.eye(4)[:2])  # K = [I 0]
    stab = Stabilizer(eq, lqr, np.eye(4), np.eye(4)[:2], np.eye(4))
    d = np.array([0.3, -0.4, 0.0, 0.0])
    assert np.allclose(stab.control(ho, eq.x_e + d), -d[:2])


def test_closed_loop_contraction_linearized():
    # the slow cart-position mode (spectral radius ~0.979 at dt=0.02) makes
    # the transient grow for ~1s before contracting
    cp = CartPole()
    w = CostWeights.default(4, 1)
    eq = cp.equilibrium_near(np.zeros(4))
    A, B = cp.linearize(eq)
    stab = design_stabilizer(cp, eq, w)
    closed = A - B @ stab.K_full
    assert np.max(np.abs(np.linalg.eigvals(closed))) < 1.0
    for dev0 in (np.array([0.05, 0, 0.02, 0]), np.array([0, 0.01, 0.02, 0.05])):
        dev = dev0.copy()
        for _ in range(250):
            dev = closed @ dev
        assert np.linalg.norm(dev) < 0.1 * np.linalg.norm(dev0)


def test_plan_from_equilibrium_is_constant(holonomic_free, weights4x2):
    eq = holonomic_free.equilibrium_near([1.0, 1.0, 0, 0])
    ref = plan_reference(holonomic_free, eq.x_e, eq, 10, holonomic_free.safe_set, weights4x2)
    assert ref is not None
    assert np.max(np.abs(ref.states - eq.x_e)) <= 1e-9
    assert np.max(np.abs(ref.controls - eq.u_e)) <= 1e-9


def test_plan_cartpole_recovery(cartpole, weights4x1):
    x0 = np.array([0.5, 0.0, 0.05, 0.0])
    eq = cartpole.equilibrium_near(x0)
    ref = plan_reference(cartpole, x0, eq, 40, cartpole.safe_set, weights4x1)
    assert ref is not None
    assert np.max(np.abs(ref.states[-1] - eq.x_e)) <= 1e-4
    assert np.max(np.abs(ref.states[:, 2])) <= 0.2 + 1e-9
    # dynamic feasibility of the shooting solution
    for k in range(40):
        step = cartpole.step_nominal(ref.states[k], ref.controls[k])
        assert np.max(np.abs(step - ref.states[k + 1])) <= 1e-6
    # control bounds hold
    assert np.max(np.abs(ref.controls)) <= 10.0 + 1e-4


def test_plan_infeasible_inside_obstacle(holonomic, weights4x2):
    x0 = np.array([1.5, 1.5, 0.0, 0.0])  # obstacle center
    eq = holonomic.equilibrium_near(x0)
    ref = plan_reference(holonomic, x0, eq, 20, holonomic.safe_set, weights4x2)
    assert ref is None


def test_plan_determinism(holonomic_free, weights4x2):
    x0 = np.array([0.0, 0.0, 0.8, -0.4])
    eq = holonomic_free.equilibrium_near(x0)
    a = plan_reference(holonomic_free, x0, eq, 20, holonomic_free.safe_set, weights4x2)
    b = plan_reference(holonomic_free, x0, eq, 20, holonomic_free.safe_set, weights4x2)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.controls.tobytes() == b.controls.tobytes()


def _track_setup(model, weights, x0, T):
    eq = model.equilibrium_near(x0)
    ref = plan_reference(model, x0, eq, T, model.safe_set, weights)
    stab = design_stabilizer(model, eq, weights)
    return eq, ref, stab


def test_track_on_reference_returns_reference_control(cartpole, weights4x1):
    T = 40
    eq, ref, stab = _track_setup(cartpole, weights4x1, np.array([0.5, 0.0, 0.05, 0.0]), T)
    for t in (0, 5, 17):
        u = track_step(cartpole, ref.states[t], ref, t, T, stab, weights4x1, TrackingContext())
        assert np.max(np.abs(u - ref.controls[t])) <= 1e-6


def test_track_at_equilibrium_beyond_horizon(cartpole, weights4x1):
    T = 40
    eq, ref, stab = _track_setup(cartpole, weights4x1, np.array([0.5, 0.0, 0.05, 0.0]), T)
    u = track_step(cartpole, eq.x_e, ref, T + 3, T, stab, weights4x1, TrackingContext())
    assert np.max(np.abs(u - eq.u_e)) <= 1e-6


def test_track_perturbed_error_decays(cartpole, weights4x1):
    T = 40
    eq, ref, stab = _track_setup(cartpole, weights4x1, np.array([0.5, 0.0, 0.05, 0.0]), T)
    x = ref.states[0] + np.array([0.0, 0.01, 0.01, 0.0])
    ctx = TrackingContext()
    err0 = np.linalg.norm(x - ref.states[0])
    for t in range(T):
        u = track_step(cartpole, x, ref, t, T, stab, weights4x1, ctx)
        x = cartpole.step_nominal(x, u)
    errT = np.linalg.norm(x - eq.x_e)
    assert errT < 0.2 * err0
    assert ctx.fallback_events == 0


def test_track_gradient_certificate(cartpole, weights4x1):
    """Finite-difference stationarity of the tracking objective at the solve."""
    T = 20
    x0 = np.array([0.0, 0.1, 0.02, 0.0])
    eq = cartpole.equilibrium_near(np.zeros(4))
    ref = plan_reference(cartpole, np.zeros(4), eq, T, cartpole.safe_set, weights4x1)
    stab = design_stabilizer(cartpole, eq, weights4x1)
    Xref, Uref = ref.window(0, T)
    hs_n, hs_b, obc, obr, pd0, pd1 = _safe_set_arrays([cartpole.safe_set] * (T + 1), T, 4)
    X, U, J, grad, _ = _kernels.ilqr_solve(
        cartpole.tag, cartpole.params, x0, Xref, Uref, weights4x1.Q, weights4x1.R,
        stab.P_full, eq.x_e, np.zeros(4),
        hs_n, hs_b, obc, obr, pd0, pd1,
        cartpole.control_bounds.lo, cartpole.control_bounds.hi,
        1e4, 1e4, Uref.copy(), 60, 1e-9,
    )

    def objective(U_flat):
        # independent rollout + cost evaluation (no solver machinery)
        Useq = U_flat.reshape(T, 1)
        x = x0.copy()
        total = 0.0
        for k in range(T):
            dx = x - Xref[k]
            du = Useq[k] - Uref[k]
            total += dx @ weights4x1.Q @ dx + du @ weights4x1.R @ du
            x = cartpole.step_nominal(x, Useq[k])
        dT = x - eq.x_e
        total += dT @ stab.P_full @ dT
        return total

    # no constraint is active at this interior solution, so the plain
    # objective gradient must vanish
    assert np.max(np.abs(X[:, 2])) < 0.15
    assert np.max(np.abs(U)) < 9.0
    flat = U.ravel().copy()
    h = 1e-6
    for idx in range(0, T, 3):
        up = flat.copy()
        dn = flat.copy()
        up[idx] += h
        dn[idx] -= h
        g = (objective(up) - objective(dn)) / (2 * h)
        assert abs(g) <= 1e-3


def test_linear_plan_matches_on_linear_dynamics(holonomic_free, weights4x2):
    x0 = np.array([1.0, 1.0, 0.5, -0.3])
    eq = holonomic_free.equilibrium_near(x0)
    a = plan_reference(holonomic_free, x0, eq, 30, holonomic_free.safe_set, weights4x2)
    b = plan_reference_linear(holonomic_free, x0, eq, 30, holonomic_free.safe_set, weights4x2)
    assert np.max(np.abs(a.states - b.states)) <= 1e-6
    assert np.max(np.abs(a.controls - b.controls)) <= 1e-6


def test_linear_plan_zero_cost_at_equilibrium(holonomic_free, weights4x2):
    eq = holonomic_free.equilibrium_near([2.0, -1.0, 0, 0])
    ref = plan_reference_linear(holonomic_free, eq.x_e, eq, 10, holonomic_free.safe_set, weights4x2)
    assert np.max(np.abs(ref.states - eq.x_e)) <= 1e-9


def test_linear_plan_gap_far_from_upright(weights4x1):
    """The origin-linearized planner is wrong far from upright: executing its
    plan open-loop under the true dynamics misses the equilibrium badly where
    the nonlinear plan lands on it."""
    cp = CartPole()
    from rmps.geometry import Halfspace, SafeSet

    wide_open = SafeSet(4, (), (), (0,))
    x0 = np.array([0.0, 0.0, 0.5, 0.0])
    eq = cp.equilibrium_near(x0)
    nl = plan_reference(cp, x0, eq, 80, wide_open, weights4x1)
    assert nl is not None
    assert np.max(np.abs(nl.states[-1] - eq.x_e)) <= 1e-4
    lin = plan_reference_linear(cp, x0, eq, 80, wide_open, weights4x1)
    if lin is not None:
        x = x0.copy()
        for k in range(80):
            x = cp.step_nominal(x, cp.clamp(lin.controls[k]))
        assert np.max(np.abs(x - eq.x_e)) > 0.05


def test_ref_traj_indexing_past_horizon(holonomic_free, weights4x2):
    eq = holonomic_free.equilibrium_near([0.0, 0.0, 0, 0])
    ref = plan_reference(holonomic_free, np.array([0.5, 0.5, 0.2, 0.0]), eq, 10,
                         holonomic_free.safe_set, weights4x2)
    assert np.array_equal(ref.state(10 + 7), eq.x_e)
    assert np.array_equal(ref.control(10 + 7), eq.u_e)
    Xw, Uw = ref.window(8, 10)
    assert np.array_equal(Xw[4], eq.x_e)
