"""Backup-controller optimization stack.

Three pieces: a discrete-time Riccati solver for the stabilizing feedback and
terminal cost, a reference planner that drives the state to an equilibrium
under tightened safety constraints and a hard terminal equality, and a
receding-horizon tracking controller that follows the planned reference.

Both optimal-control problems are solved by direct single shooting with
finite-difference dynamics Jacobians and a Gauss-Newton backward pass
(_kernels.ilqr_solve). The planner wraps the solve in escalating quadratic
penalty rounds with terminal-equality multiplier updates; solves are
deterministic functions of their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _kernels, counters
from .dynamics import DynamicsModel, Equilibrium
from .geometry import SafeSet

PENALTY_SCHEDULE = (1e2, 1e3, 1e4, 1e5, 1e6)
SAFETY_PENALTY_FACTOR = 10.0  # keeps escalation from trading safety for terminal exactness
MULTIPLIER_REFINEMENTS = 4
REFINE_EXIT_VIOL = 1e-8
INFEASIBILITY_TOL = 1e-4
PLAN_MAX_ITER = 60
REFINE_MAX_ITER = 30
TRACK_MAX_ITER = 30
TRACK_PENALTY = 1e4
PLAN_GRAD_TOL = 1e-8
TRACK_GRAD_TOL = 1e-7
DARE_TOL = 1e-10
DARE_MAX_ITER = 10_000


class StabilizabilityError(RuntimeError):
    """Riccati iteration failed to converge for the given system."""


class SolverNumericsError(RuntimeError):
    """The shooting solver produced non-finite iterates."""


@dataclass(frozen=True)
class CostWeights:
    """Quadratic state/control weights; Q must be PSD and R PD."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if not np.allclose(Q, Q.T, atol=1e-12) or not np.allclose(R, R.T, atol=1e-12):
            raise ValueError("Q and R must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R must be positive definite")
        Q.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @staticmethod
    def default(n_x: int, n_u: int) -> "CostWeights":
        return CostWeights(np.eye(n_x), 0.1 * np.eye(n_u))

    def project(self, basis: np.ndarray) -> "CostWeights":
        return CostWeights(basis @ self.Q @ basis.T, self.R)


@dataclass(frozen=True)
class LqrSolution:
    """Riccati cost-to-go P and feedback gain K for the system it was built on."""

    P: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        K = np.asarray(self.K, dtype=float)
        P.setflags(write=False)
        K.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "K", K)


def solve_dare(A, B, Q, R, tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER) -> LqrSolution:
    """Fixed-point iteration of the discrete algebraic Riccati equation.

    Iterates P <- Q + A'(P - P B (R + B'PB)^-1 B'P) A from P = Q until the
    update moves by at most tol in the infinity norm; K = (R+B'PB)^-1 B'PA.
    Raises StabilizabilityError when the iteration fails to settle.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP)
        P_next = Q + A.T @ (P - P @ B @ gain) @ A
        P_next = 0.5 * (P_next + P_next.T)
        if not np.isfinite(P_next).all():
            raise StabilizabilityError("Riccati iteration diverged")
        if np.max(np.abs(P_next - P)) <= tol:
            P = P_next
            break
        P = P_next
    else:
        raise StabilizabilityError(
            f"Riccati iteration did not converge within {max_iter} iterations"
        )
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    closed = A - B @ K
    radius = np.max(np.abs(np.linalg.eigvals(closed)))
    if radius >= 1.0:
        raise StabilizabilityError(f"closed-loop spectral radius {radius:.6f} >= 1")
    return LqrSolution(P, K)


@dataclass(frozen=True)
class Stabilizer:
    """Equilibrium-holding feedback: u = u_e - K_full (x - x_e).

    The Riccati problem is solved on the stabilizable deviation subspace
    selected by the model (identity for most models); gains and the terminal
    cost matrix are embedded back into full state coordinates.
    """

    equilibrium: Equilibrium
    lqr: LqrSolution
    basis: np.ndarray
    K_full: np.ndarray
    P_full: np.ndarray

    def control(self, model: DynamicsModel, x) -> np.ndarray:
        dev = np.asarray(x, dtype=float) - self.equilibrium.x_e
        u = self.equilibrium.u_e - self.K_full @ dev
        return model.clamp(u)


def design_stabilizer(model: DynamicsModel, eq: Equilibrium, weights: CostWeights) -> Stabilizer:
    A, B = model.linearize(eq)
    basis = model.stabilizer_basis(eq)
    A_r = basis @ A @ basis.T
    B_r = basis @ B
    lqr = solve_dare(A_r, B_r, basis @ weights.Q @ basis.T, weights.R)
    K_full = lqr.K @ basis
    P_full = basis.T @ lqr.P @ basis
    return Stabilizer(eq, lqr, basis, K_full, P_full)


def stabilizing_control(stab: Stabilizer, model: DynamicsModel, x) -> np.ndarray:
    """Clamped linear feedback toward the stabilizer's equilibrium."""
    return stab.control(model, x)


@dataclass(frozen=True)
class RefTraj:
    """Planned nominal trajectory into an equilibrium, extended by repetition.

    states has T+1 rows, controls T+1 rows (the last one is u_e); indexing
    past the horizon returns the equilibrium pair, which is how the infinite
    reference tail is realized.
    """

    states: np.ndarray
    controls: np.ndarray
    equilibrium: Equilibrium
    horizon: int

    def state(self, k: int) -> np.ndarray:
        return self.states[k] if k <= self.horizon else self.equilibrium.x_e

    def control(self, k: int) -> np.ndarray:
        return self.controls[k] if k <= self.horizon else self.equilibrium.u_e

    @cached_property
    def padded(self):
        """Reference arrays long enough for any length-T window starting <= T."""
        T = self.horizon
        X_pad = np.vstack([self.states, np.tile(self.equilibrium.x_e, (T + 1, 1))])
        U_pad = np.vstack([self.controls, np.tile(self.equilibrium.u_e, (T + 1, 1))])
        return X_pad, U_pad

    def window(self, t: int, length: int):
        """Running reference rows for steps t..t+length-1."""
        X_pad, U_pad = self.padded
        if t + length <= X_pad.shape[0]:
            return X_pad[t : t + length], U_pad[t : t + length]
        Xw = np.array([self.state(t + k) for k in range(length)])
        Uw = np.array([self.control(t + k) for k in range(length)])
        return Xw, Uw


def _safe_set_arrays(sets: list[SafeSet], T: int, n: int):
    """Stack per-step safe sets into solver arrays.

    All steps must share half-space normals and obstacle centers (erosion
    only moves offsets and radii), which is what the planner's tightening
    produces.
    """
    base = sets[0]
    q = len(base.halfspaces)
    p = len(base.obstacles)
    hs_n = np.zeros((q, n))
    for j, h in enumerate(base.halfspaces):
        hs_n[j] = h.normal
    obc = np.zeros((p, 2))
    for o, ob in enumerate(base.obstacles):
        obc[o] = ob.center
    hs_b = np.zeros((T + 1, q))
    obr = np.zeros((T + 1, p))
    for t, s in enumerate(sets):
        if len(s.halfspaces) != q or len(s.obstacles) != p:
            raise ValueError("per-step safe sets must share structure")
        for j, h in enumerate(s.halfspaces):
            if not np.array_equal(h.normal, hs_n[j]):
                raise ValueError("per-step safe sets must share half-space normals")
            hs_b[t, j] = h.offset
        for o, ob in enumerate(s.obstacles):
            if not np.array_equal(ob.center, obc[o]):
                raise ValueError("per-step safe sets must share obstacle centers")
            obr[t, o] = ob.radius
    if p > 0:
        pd0, pd1 = base.position_dims[0], base.position_dims[1]
    else:
        pd0, pd1 = 0, 0
    return hs_n, hs_b, obc, obr, pd0, pd1


def _expand_sets(tightened, T: int) -> list[SafeSet]:
    if isinstance(tightened, SafeSet):
        return [tightened] * (T + 1)
    sets = list(tightened)
    if len(sets) != T + 1:
        raise ValueError(f"expected {T + 1} per-step safe sets, got {len(sets)}")
    return sets


def _plan_with_dynamics(tag, params, model, x, eq, T, tightened, weights):
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("non-finite planning state")
    n, m = model.n_x, model.n_u
    sets = _expand_sets(tightened, T)
    hs_n, hs_b, obc, obr, pd0, pd1 = _safe_set_arrays(sets, T, n)
    xe, ue = eq.x_e, eq.u_e
    Xref = np.tile(xe, (T, 1))
    Uref = np.tile(ue, (T, 1))
    u_lo, u_hi = model.control_bounds.lo, model.control_bounds.hi
    eye = np.eye(n)
    U = np.zeros((T, m))
    multipliers = np.zeros(n)
    X = None
    prev_viol = np.inf
    viol = np.inf

    def solve_round(mu, max_iter):
        nonlocal X, U, multipliers, viol
        X, U, J, _grad, _ = _kernels.ilqr_solve(
            tag, params, x, Xref, Uref, weights.Q, weights.R,
            mu * eye, xe, multipliers,
            hs_n, hs_b, obc, obr, pd0, pd1,
            u_lo, u_hi, mu * SAFETY_PENALTY_FACTOR, mu * SAFETY_PENALTY_FACTOR,
            U, max_iter, PLAN_GRAD_TOL,
        )
        if not np.isfinite(J):
            raise SolverNumericsError("planner produced a non-finite objective")
        multipliers = multipliers + 2.0 * mu * (X[T] - xe)
        viol = _kernels.max_violation(
            X, U, xe, hs_n, hs_b, obc, obr, pd0, pd1, u_lo, u_hi, True
        )

    for round_idx, mu in enumerate(PENALTY_SCHEDULE):
        solve_round(mu, PLAN_MAX_ITER)
        if viol <= 1e-6:
            break
        # stagnating high violation marks the problem infeasible early;
        # erring toward "infeasible" is conservative for the shield
        if round_idx >= 2 and viol > 0.08 and viol > 0.6 * prev_viol:
            return None
        if round_idx == len(PENALTY_SCHEDULE) - 1 and viol > 1e-3:
            return None
        prev_viol = viol
    # multiplier refinements at the final weight polish the terminal equality
    for _ in range(MULTIPLIER_REFINEMENTS):
        if viol <= REFINE_EXIT_VIOL:
            break
        solve_round(PENALTY_SCHEDULE[-1], REFINE_MAX_ITER)
    if viol > INFEASIBILITY_TOL:
        return None
    states = X.copy()
    # snap an almost-exact terminal onto the equilibrium so the repeated
    # tail is consistent; the introduced dynamics residual stays within the
    # per-step tolerance
    if np.max(np.abs(states[T] - xe)) <= 1e-6:
        states[T] = xe
    controls = np.vstack([U, ue[None, :]])
    return RefTraj(states, controls, eq, T)


def plan_reference(model, x, eq, T, tightened, weights) -> RefTraj | None:
    """Plan a safe nominal trajectory from x into eq over T steps.

    Minimizes the quadratic distance-to-equilibrium cost subject to the
    nominal dynamics, per-step tightened safe sets, control bounds, and the
    terminal equality x(T) = x_e. Returns None when no plan meets the
    feasibility tolerance.
    """
    counters.bump("plan_solves")
    return _plan_with_dynamics(model.tag, model.params, model, x, eq, T, tightened, weights)


def plan_reference_linear(model, x, eq, T, tightened, weights) -> RefTraj | None:
    """plan_reference with the dynamics frozen to the origin linearization."""
    counters.bump("plan_solves")
    tag, params = model.linear_origin()
    return _plan_with_dynamics(tag, params, model, x, eq, T, tightened, weights)


@dataclass
class TrackingContext:
    """Per-session warm-start state for the receding-horizon tracker."""

    warm: np.ndarray | None = None
    fallback_events: int = 0


def track_step(
    model: DynamicsModel,
    x_t,
    ref: RefTraj,
    t: int,
    T: int,
    stab: Stabilizer,
    weights: CostWeights,
    ctx: TrackingContext | None = None,
    safe_set: SafeSet | None = None,
    dynamics: tuple | None = None,
) -> np.ndarray:
    """One receding-horizon tracking solve; returns the first control.

    Tracks the reference window starting at step t with the stabilizer's
    cost-to-go as terminal cost, warm-started from the previous solution
    shifted by one step. On numerical failure the stabilizing feedback is
    returned and the event is recorded on the context. dynamics overrides
    the controller's internal model as a (tag, params) pair (used by the
    fixed-linearization baseline).
    """
    counters.bump("track_solves")
    x_t = np.asarray(x_t, dtype=float)
    safe = safe_set if safe_set is not None else model.safe_set
    n, m = model.n_x, model.n_u
    Xref, Uref = ref.window(t, T)
    hs_n, hs_b, obc, obr, pd0, pd1 = _safe_set_arrays([safe] * (T + 1), T, n)
    eq = ref.equilibrium
    if ctx is not None and ctx.warm is not None:
        U0 = ctx.warm
    else:
        U0 = Uref.copy()
    ctrl_tag, ctrl_params = dynamics if dynamics is not None else (model.tag, model.params)
    X, U, J, grad, _ = _kernels.ilqr_solve(
        ctrl_tag, ctrl_params, x_t, Xref, Uref, weights.Q, weights.R,
        stab.P_full, eq.x_e, np.zeros(n),
        hs_n, hs_b, obc, obr, pd0, pd1,
        model.control_bounds.lo, model.control_bounds.hi,
        TRACK_PENALTY, TRACK_PENALTY,
        U0, TRACK_MAX_ITER, TRACK_GRAD_TOL,
    )
    if not (np.isfinite(J) and np.isfinite(U).all()):
        if ctx is not None:
            ctx.fallback_events += 1
            ctx.warm = None
        return stab.control(model, x_t)
    if ctx is not None:
        ctx.warm = np.vstack([U[1:], eq.u_e[None, :]])
    return model.clamp(U[0])
