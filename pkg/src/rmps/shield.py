"""Runtime shield: certify-then-override around an arbitrary task policy.

Per step, the shield simulates the task policy's next state and checks that a
freshly initialized backup controller could still recover from it, robustly
with respect to a sampled uncertainty tube. If yes, the task policy runs; if
not, the backup controller (tracking a planned reference into a stabilized
equilibrium) takes over until certification succeeds again.

The recoverability check follows the certify-every-step discipline: it plans
a fresh backup from the queried state, erodes the safe set by the tube's
per-step deviation boxes, and requires the reference to stay inside the
eroded sets and to end inside the eroded invariant region of the stabilizer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counters
from .dynamics import DynamicsModel, Equilibrium
from .geometry import Box, SafeSet, box_contains, erode_box, erode_safe_set, safe_contains
from .trajopt import (
    CostWeights,
    RefTraj,
    Stabilizer,
    TrackingContext,
    design_stabilizer,
    plan_reference,
    plan_reference_linear,
    solve_dare,
    track_step,
)
from .tubes import (
    InvariantSet,
    Tube,
    epsilon_from_samples,
    estimate_invariant_set,
    estimate_reachable_sets,
    merge_tubes,
    precompute_tube,
    solve_sample_count,
)

TUBE_PRECOMPUTED = "precomputed"
TUBE_FRESH = "fresh"
PLANNER_NONLINEAR = "nonlinear"
PLANNER_LINEAR = "linear"

REASON_UNSAFE_STEP = "unsafe-step"
REASON_MISSES_INVARIANT = "misses-invariant"
REASON_PLAN_INFEASIBLE = "plan-infeasible"

SOURCE_LEARNED = "learned"
SOURCE_BACKUP_CONTINUED = "backup-continued"
SOURCE_BACKUP_INITIALIZED = "backup-initialized"

DEFAULT_HORIZONS = {"cartpole": 80, "holonomic": 40, "nonholonomic": 40}


@dataclass
class ShieldConfig:
    """Knobs for the backup controller and the recoverability certificate."""

    horizon: int | None = None  # per-environment default when None
    samples: int = 1500
    epsilon: float | None = None  # when set, overrides samples via the bound
    delta: float = 0.01
    tube_mode: str = TUBE_PRECOMPUTED
    planner: str = PLANNER_NONLINEAR
    robust: bool = True  # False: single-rollout baseline check
    invariant_horizon: int = 200
    invariant_samples: int = 1500
    tube_seed: int = 2024
    weights: CostWeights | None = None

    def horizon_for(self, model: DynamicsModel) -> int:
        if self.horizon is not None:
            return int(self.horizon)
        return DEFAULT_HORIZONS.get(model.name, 40)

    def samples_for(self, model: DynamicsModel) -> int:
        if self.epsilon is not None:
            return solve_sample_count(model.n_x, self.epsilon, self.delta)
        return int(self.samples)


@dataclass(frozen=True)
class RecoverabilityReport:
    """Outcome of one robust-recoverability check."""

    recoverable: bool
    failing_step: int | None
    failing_reason: str | None
    tube_source: str
    epsilon_total: float
    delta_total: float
    rollouts: int

    def __post_init__(self):
        expect_step = (not self.recoverable) and self.failing_reason != REASON_PLAN_INFEASIBLE
        if expect_step != (self.failing_step is not None):
            raise ValueError("failing_step must be present exactly for step-level failures")


@dataclass(frozen=True)
class ShieldDecision:
    action: np.ndarray
    source: str
    check_cost: int
    fault: bool = False


@dataclass
class ShieldState:
    """Cross-step shield memory: the active backup session, if any."""

    session: "BackupSession | None" = None


class BackupSession:
    """Stateful backup controller: tracking phase then stabilization.

    Internal state is the target equilibrium, its invariant region, the
    planned reference, the step counter t, and the tracker's warm start.
    While t < T each action is one receding-horizon tracking solve; from
    t = T on, only the stabilizing feedback is emitted.
    """

    def __init__(self, model, equilibrium, stab, invariant, ref, T, weights,
                 tracking_dynamics=None):
        self.model = model
        self.equilibrium = equilibrium
        self.stab = stab
        self.invariant = invariant
        self.ref = ref
        self.T = int(T)
        self.weights = weights
        self.tracking_dynamics = tracking_dynamics
        self.t = 0
        self.ctx = TrackingContext()
        self._pending = None

    def fresh_copy(self) -> "BackupSession":
        """Same planning products, reset tracking state (for rollouts)."""
        return BackupSession(
            self.model, self.equilibrium, self.stab, self.invariant,
            self.ref, self.T, self.weights, self.tracking_dynamics,
        )

    def _compute(self, x) -> np.ndarray:
        if self.t < self.T:
            return track_step(
                self.model, x, self.ref, self.t, self.T, self.stab, self.weights,
                self.ctx, dynamics=self.tracking_dynamics,
            )
        return self.stab.control(self.model, x)

    def peek_action(self, x) -> np.ndarray:
        """Next backup control without advancing the step counter."""
        x = np.asarray(x, dtype=float)
        u = self._compute(x)
        self._pending = (self.t, x.tobytes(), u)
        return u

    def step_action(self, x) -> np.ndarray:
        """Backup control for x, advancing the tracking step counter."""
        x = np.asarray(x, dtype=float)
        if self._pending is not None and self._pending[0] == self.t and self._pending[1] == x.tobytes():
            u = self._pending[2]
        else:
            u = self._compute(x)
        self._pending = None
        if self.t < self.T:
            self.t += 1
        return u


def backup_action(session: BackupSession, x) -> np.ndarray:
    """One backup-controller step (tracking while t < T, then stabilizing)."""
    return session.step_action(x)


class BackupAssets:
    """Per-environment runtime bundle: stabilizers, invariant set, tube.

    The expensive pieces are computed once (or loaded from a store) and
    shared across checks: the Riccati solution is cached per reduced system,
    the invariant region and the tube are estimated from canonical
    obstacle-free recoveries and reused in deviation coordinates.
    """

    def __init__(self, model: DynamicsModel, config: ShieldConfig, store=None,
                 enrich_invariant: bool = True):
        self.model = model
        self.config = config
        self.store = store
        self.enrich_invariant = enrich_invariant
        self.weights = config.weights or CostWeights.default(model.n_x, model.n_u)
        self.T = config.horizon_for(model)
        self.N = config.samples_for(model)
        self._lqr_cache: dict = {}
        self._invariant: InvariantSet | None = None
        self._tube: Tube | None = None
        self._tube_ready = False
        self._canonical_tubes: dict = {}
        self._tightened: list[SafeSet] | None = None
        self._check_arrays = None

    # -- stabilizers --------------------------------------------------------

    def stabilizer_for(self, eq: Equilibrium) -> Stabilizer:
        A, B = self.model.linearize(eq)
        basis = self.model.stabilizer_basis(eq)
        A_r = basis @ A @ basis.T
        B_r = basis @ B
        key = (np.round(A_r, 9).tobytes(), np.round(B_r, 9).tobytes())
        lqr = self._lqr_cache.get(key)
        if lqr is None:
            lqr = solve_dare(A_r, B_r, basis @ self.weights.Q @ basis.T, self.weights.R)
            self._lqr_cache[key] = lqr
        K_full = lqr.K @ basis
        P_full = basis.T @ lqr.P @ basis
        return Stabilizer(eq, lqr, basis, K_full, P_full)

    # -- canonical estimates --------------------------------------------------

    def _bare_model(self) -> DynamicsModel:
        bare = getattr(self.model, "without_obstacles", None)
        return bare() if bare is not None else self.model

    @property
    def invariant_set(self) -> InvariantSet:
        """Stay-in region of the stabilizer around the canonical equilibrium.

        Estimated once per environment (planner-independent): a base pass
        from disturbance-perturbed starts, then, unless disabled, two
        re-estimation passes whose starts also span the primary backup's
        terminal hand-off spread, so the region covers what the tracker
        actually delivers to the stabilizer.
        """
        if self._invariant is None:
            loaded = self._load("invariant") if self.store is not None else None
            if loaded is not None:
                self._invariant = loaded
                return self._invariant
            bare = self._bare_model()
            eq = bare.origin_equilibrium()
            stab = self.stabilizer_for(eq)
            cfg = self.config
            base = estimate_invariant_set(
                bare, eq, stab, horizon=cfg.invariant_horizon,
                N=cfg.invariant_samples, seed=cfg.tube_seed,
            )
            result = base
            if self.enrich_invariant:
                handoff = self._canonical_tube(PLANNER_NONLINEAR).boxes[-1]
                spread = Box(
                    np.minimum(base.box.lo, handoff.lo),
                    np.maximum(base.box.hi, handoff.hi),
                )
                grown = estimate_invariant_set(
                    bare, eq, stab, horizon=cfg.invariant_horizon,
                    N=cfg.invariant_samples, seed=cfg.tube_seed + 1,
                    start_box=spread,
                )
                spread2 = Box(
                    np.minimum(grown.box.lo, spread.lo),
                    np.maximum(grown.box.hi, spread.hi),
                )
                final = estimate_invariant_set(
                    bare, eq, stab, horizon=cfg.invariant_horizon,
                    N=cfg.invariant_samples, seed=cfg.tube_seed + 2,
                    start_box=spread2,
                )
                result = InvariantSet(
                    Box(np.minimum(final.box.lo, spread2.lo),
                        np.maximum(final.box.hi, spread2.hi)),
                    eq, cfg.invariant_horizon, cfg.invariant_samples,
                    base.unsafe_flag or grown.unsafe_flag or final.unsafe_flag,
                )
            self._invariant = result
            if self.store is not None:
                self._save("invariant", self._invariant)
        return self._invariant

    def _canonical_tube(self, planner: str) -> Tube:
        """Envelope tube over the model's canonical recoveries for a planner."""
        cached = self._canonical_tubes.get(planner)
        if cached is not None:
            return cached
        loaded = self._load(f"tube-{planner}") if self.store is not None else None
        if loaded is not None:
            self._canonical_tubes[planner] = loaded
            return loaded
        bare = self._bare_model()
        temp_cfg = ShieldConfig(
            horizon=self.T,
            samples=self.N,
            delta=self.config.delta,
            tube_mode=TUBE_FRESH,
            planner=planner,
            robust=True,
            weights=self.weights,
            tube_seed=self.config.tube_seed,
        )
        temp_assets = BackupAssets(bare, temp_cfg, enrich_invariant=False)
        pieces = []
        for x0 in bare.canonical_recovery_states():
            piece = precompute_tube(
                bare, x0, temp_assets.session_factory,
                self.N, self.T, self.config.tube_seed, self.config.delta,
            )
            if piece is None:
                raise RuntimeError("canonical tube precomputation was infeasible")
            pieces.append(piece)
        tube = merge_tubes(pieces) if len(pieces) > 1 else pieces[0]
        self._canonical_tubes[planner] = tube
        if self.store is not None:
            self._save(f"tube-{planner}", tube)
        return tube

    @property
    def tube(self) -> Tube | None:
        """Canonical precomputed tube (None in fresh or baseline modes)."""
        if not (self.config.robust and self.config.tube_mode == TUBE_PRECOMPUTED):
            return None
        if not self._tube_ready:
            self._tube = self._canonical_tube(self.config.planner)
            self._tube_ready = True
        return self._tube

    def _store_key(self, kind: str) -> str:
        import hashlib

        c = self.config
        starts = np.concatenate(self.model.canonical_recovery_states())
        tag = hashlib.sha256(np.round(starts, 9).tobytes()).hexdigest()[:8]
        base = (
            f"{self.model.fingerprint()}_T{self.T}_N{self.N}"
            f"_d{c.delta:g}_s{c.tube_seed}_c{tag}"
        )
        if kind == "invariant":
            suffix = f"_H{c.invariant_horizon}_M{c.invariant_samples}"
            if not self.enrich_invariant:
                suffix += "_base"
            return f"invariant_{base}{suffix}"
        return f"{kind}_{base}"

    def _load(self, kind: str):
        from . import tubes as _t

        data = self.store.get(self._store_key(kind))
        if data is None:
            return None
        if kind.startswith("tube"):
            return _t.tube_from_dict(data, expect_fingerprint=self.model.fingerprint())
        return _t.invariant_from_dict(data)

    def _save(self, kind: str, obj) -> None:
        from . import tubes as _t

        data = _t.tube_to_dict(obj) if kind.startswith("tube") else _t.invariant_to_dict(obj)
        self.store.put(self._store_key(kind), data)

    # -- planning -------------------------------------------------------------

    def tightened_sets(self) -> list[SafeSet]:
        """Per-step planning constraints: the safe set eroded by the tube."""
        if self._tightened is None:
            tube = self.tube
            if tube is None:
                self._tightened = [self.model.safe_set] * (self.T + 1)
            else:
                self._tightened = [
                    erode_safe_set(self.model.safe_set, tube.boxes[t]) for t in range(self.T + 1)
                ]
        return self._tightened

    def invariant_eroded_safe_set(self) -> SafeSet:
        """Safe set eroded by the invariant region (stabilized-future check)."""
        if self._check_arrays is None:
            self._check_arrays = erode_safe_set(self.model.safe_set, self.invariant_set.box)
        return self._check_arrays

    def plan(self, x, eq: Equilibrium, tightened=None) -> RefTraj | None:
        planner = plan_reference_linear if self.config.planner == PLANNER_LINEAR else plan_reference
        sets = tightened if tightened is not None else self.tightened_sets()
        return planner(self.model, x, eq, self.T, sets, self.weights)

    def tracking_dynamics(self):
        """Controller-internal model: the origin linearization for the
        linear baseline, the true dynamics otherwise."""
        if self.config.planner == PLANNER_LINEAR:
            return self.model.linear_origin()
        return None

    def session_factory(self, x) -> BackupSession | None:
        return initialize_backup(self.model, x, self)


def initialize_backup(
    model: DynamicsModel, x, assets: BackupAssets, tightened=None
) -> BackupSession | None:
    """Fresh backup session at x: equilibrium, stabilizer, invariant, plan.

    Returns None when no feasible reference exists (x is not recoverable by
    planning). Planning constraints are tightened by the precomputed tube
    when one is configured; pass tightened=... to override (the shield's
    marginal fallback plans against the raw safe set).
    """
    x = np.asarray(x, dtype=float)
    eq = model.equilibrium_near(x)
    stab = assets.stabilizer_for(eq)
    invariant = assets.invariant_set
    ref = assets.plan(x, eq, tightened)
    if ref is None:
        return None
    return BackupSession(
        model, eq, stab, invariant, ref, assets.T, assets.weights,
        tracking_dynamics=assets.tracking_dynamics(),
    )


def _zero_tube(model: DynamicsModel, devs: np.ndarray, T: int) -> Tube:
    boxes = tuple(Box(devs[t].copy(), devs[t].copy()) for t in range(T + 1))
    return Tube(
        boxes=boxes, epsilon=0.0, delta=0.0, samples_used=1,
        source="nominal-rollout", seed=0, model_fingerprint=model.fingerprint(),
    )


def _check_against_tube(
    model, assets, session, tube, rollouts: int, eroded_sets=None
) -> RecoverabilityReport:
    T = assets.T
    eps_tot = (T + 1) * tube.epsilon
    delta_tot = (T + 1) * tube.delta
    if len(tube.boxes) != T + 1:
        raise ValueError("tube horizon does not match the check horizon")

    def fail(step, reason):
        return RecoverabilityReport(
            False, step, reason, tube.source, eps_tot, delta_tot, rollouts
        )

    for t in range(T + 1):
        eroded = (
            eroded_sets[t] if eroded_sets is not None
            else erode_safe_set(model.safe_set, tube.boxes[t])
        )
        if not safe_contains(eroded, session.ref.state(t)):
            return fail(t, REASON_UNSAFE_STEP)
    inv = session.invariant
    x_e = session.equilibrium.x_e
    region = Box(x_e + inv.box.lo, x_e + inv.box.hi)
    shrunk = erode_box(region, tube.boxes[T])
    if shrunk is None or not box_contains(shrunk, session.ref.state(T)):
        return fail(T, REASON_MISSES_INVARIANT)
    # the stabilized future stays within the invariant region around this
    # equilibrium; require that whole region to be safe here
    if not safe_contains(assets.invariant_eroded_safe_set(), x_e):
        return fail(T, REASON_MISSES_INVARIANT)
    return RecoverabilityReport(True, None, None, tube.source, eps_tot, delta_tot, rollouts)


def is_recoverable(model: DynamicsModel, x, assets: BackupAssets) -> RecoverabilityReport:
    """Robust recoverability of x: plan fresh, erode by the tube, check.

    The reference must stay in the safe set eroded by the tube's deviation
    box at every step and end inside the invariant region eroded by the final
    box. Totals follow the union bound over the T+1 checked steps.
    """
    x = np.asarray(x, dtype=float)
    session = initialize_backup(model, x, assets)
    tube = assets.tube
    eps = epsilon_from_samples(model.n_x, assets.N, assets.config.delta)
    if session is None:
        src = tube.source if tube is not None else TUBE_FRESH
        return RecoverabilityReport(
            False, None, REASON_PLAN_INFEASIBLE, src,
            (assets.T + 1) * eps, (assets.T + 1) * assets.config.delta, 0,
        )
    rollouts = 0
    if tube is None:
        def factory(state):
            state = np.asarray(state, dtype=float)
            if np.array_equal(state, x):
                return session
            return assets.session_factory(state)

        tube = estimate_reachable_sets(
            model, x, factory, assets.N, assets.T, assets.config.tube_seed, assets.config.delta
        )
        if tube is None:
            return RecoverabilityReport(
                False, None, REASON_PLAN_INFEASIBLE, TUBE_FRESH,
                (assets.T + 1) * eps, (assets.T + 1) * assets.config.delta, 0,
            )
        rollouts = tube.samples_used
        return _check_against_tube(model, assets, session, tube, rollouts)
    # precomputed tube: the eroded sets are exactly the planner's tightened sets
    return _check_against_tube(
        model, assets, session, tube, rollouts, eroded_sets=assets.tightened_sets()
    )


def nonrobust_is_recoverable(model: DynamicsModel, x, assets: BackupAssets) -> RecoverabilityReport:
    """Baseline check: a single noise-free rollout stands in for the tube.

    Structurally identical to the robust check with point-sized deviation
    boxes; it carries no statistical certificate (epsilon and delta report
    as zero).
    """
    from .tubes import _rollout_deviations

    x = np.asarray(x, dtype=float)
    session = initialize_backup(model, x, assets)
    if session is None:
        return RecoverabilityReport(
            False, None, REASON_PLAN_INFEASIBLE, "nominal-rollout", 0.0, 0.0, 0
        )
    devs = _nominal_rollout_devs(model, session, x)
    tube = _zero_tube(model, devs, assets.T)
    return _check_against_tube(model, assets, session, tube, rollouts=1)


def _nominal_rollout_devs(model, session, x) -> np.ndarray:
    from . import _kernels
    from .trajopt import TRACK_GRAD_TOL, TRACK_MAX_ITER, TRACK_PENALTY, _safe_set_arrays

    counters.bump("tube_rollouts", 1)
    T = session.T
    ref_X_pad, ref_U_pad = session.ref.padded
    hs_n, hs_b, obc, obr, pd0, pd1 = _safe_set_arrays([model.safe_set], 0, model.n_x)
    starts = np.asarray(x, dtype=float)[None, :]
    noise = np.zeros((1, T, model.n_x))
    ctrl = session.tracking_dynamics
    ctrl_tag, ctrl_params = ctrl if ctrl is not None else (model.tag, model.params)
    devs = _kernels.tracked_rollouts(
        model.tag, model.params, ctrl_tag, ctrl_params,
        ref_X_pad, ref_U_pad, session.ref.states,
        session.weights.Q, session.weights.R, session.stab.P_full,
        session.equilibrium.x_e, session.equilibrium.u_e,
        hs_n, hs_b[0], obc, obr[0], pd0, pd1,
        model.control_bounds.lo, model.control_bounds.hi,
        TRACK_PENALTY, TRACK_PENALTY,
        T, starts, noise, TRACK_MAX_ITER, TRACK_GRAD_TOL,
    )
    return devs[0]


def shield_action(
    model: DynamicsModel,
    shield_state: ShieldState,
    x,
    learned_policy,
    assets: BackupAssets,
) -> ShieldDecision:
    """One shield decision: learned if certifiable, else backup.

    Branch 1: the nominal next state under the task policy is recoverable ->
    run the policy and drop any active backup session. Branch 2: an active
    session whose nominal next state is recoverable continues. Branch 3:
    initialize a fresh session at x and use it.

    Branch-3 fallbacks when tightened re-initialization is infeasible: an
    active session keeps holding its equilibrium (re-anchoring at the
    drifted state would walk the stop target toward the hazard); with no
    session, a marginal plan against the raw safe set is accepted; only when
    even that fails does the shield emit the bare stabilizing feedback for
    the nearest equilibrium and flag the episode.
    """
    x = np.asarray(x, dtype=float)
    check = is_recoverable if assets.config.robust else nonrobust_is_recoverable
    u_hat = model.clamp(learned_policy(x))
    next_learned = model.step_nominal(x, u_hat)
    rep1 = check(model, next_learned, assets)
    cost = rep1.rollouts
    if rep1.recoverable:
        shield_state.session = None
        return ShieldDecision(u_hat, SOURCE_LEARNED, cost)
    session = shield_state.session
    if session is not None:
        u_backup = session.peek_action(x)
        next_backup = model.step_nominal(x, model.clamp(u_backup))
        rep2 = check(model, next_backup, assets)
        cost += rep2.rollouts
        if rep2.recoverable:
            u = session.step_action(x)
            return ShieldDecision(model.clamp(u), SOURCE_BACKUP_CONTINUED, cost)
    fresh = initialize_backup(model, x, assets)
    if fresh is None and session is not None:
        u = session.step_action(x)
        return ShieldDecision(model.clamp(u), SOURCE_BACKUP_CONTINUED, cost)
    if fresh is None:
        untightened = [model.safe_set] * (assets.T + 1)
        fresh = initialize_backup(model, x, assets, tightened=untightened)
    if fresh is None:
        # last resort: no feasible plan from here; hold the nearest
        # equilibrium and flag the episode
        eq = model.equilibrium_near(x)
        stab = assets.stabilizer_for(eq)
        u = stab.control(model, x)
        shield_state.session = None
        return ShieldDecision(u, SOURCE_BACKUP_INITIALIZED, cost, fault=True)
    shield_state.session = fresh
    u = fresh.step_action(x)
    return ShieldDecision(model.clamp(u), SOURCE_BACKUP_INITIALIZED, cost)
