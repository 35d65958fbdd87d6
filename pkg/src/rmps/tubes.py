"""Sampled uncertainty tubes around backup references, with coverage bounds.

The per-step cross-sections are axis-aligned boxes fitted to Monte-Carlo
rollouts of the backup controller under sampled disturbances. A
distribution-free argument for boxes (whose binary membership classifiers
have VC dimension equal to the state dimension) converts the sample count
into a per-step coverage guarantee: with probability at least 1 - delta over
the sampling, a fresh rollout's deviation lands inside the fitted box with
probability at least 1 - epsilon.

Boxes are stored in deviation coordinates (state minus reference state),
which is what the recoverability checks consume and what makes a tube
precomputed from one start state reusable around other references.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels, counters
from .dynamics import DynamicsModel, Equilibrium
from .geometry import Box, SafeSet, box_from_points
from .trajopt import (
    TRACK_GRAD_TOL,
    TRACK_MAX_ITER,
    TRACK_PENALTY,
    _safe_set_arrays,
)

SERIAL_VERSION = 1

SOURCE_FRESH = "fresh"
SOURCE_PRECOMPUTED = "precomputed-from-x0"


def epsilon_from_samples(n: int, N: int, delta: float) -> float:
    """Coverage slack achieved by N samples for boxes in n dimensions.

    sqrt((n log(2eN/n) + log(4/delta)) / N), natural logarithms.
    """
    if not (1 <= n <= N):
        raise ValueError("need N >= n >= 1")
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt((n * math.log(2.0 * math.e * N / n) + math.log(4.0 / delta)) / N)


def _required_samples(n: int, N: int, epsilon: float, delta: float) -> float:
    return (n * math.log(2.0 * math.e * N / n) + math.log(4.0 / delta)) / epsilon**2


def solve_sample_count(n: int, epsilon: float, delta: float, max_iter: int = 1000) -> int:
    """Smallest sample count meeting the coverage bound, by fixed point.

    Iterates N <- ceil((n log(2eN/n) + log(4/delta)) / eps^2) from N = n; the
    map is monotone and the returned N satisfies the bound (verified).
    """
    if not (0.0 < epsilon < 1.0) or not (0.0 < delta < 1.0):
        raise ValueError("epsilon and delta must lie in (0, 1)")
    if n < 1:
        raise ValueError("dimension must be >= 1")
    N = n
    for _ in range(max_iter):
        N_next = max(n, math.ceil(_required_samples(n, N, epsilon, delta)))
        if N_next == N:
            break
        N = N_next
    else:
        raise RuntimeError("sample-count fixed point did not converge")
    if N < _required_samples(n, N, epsilon, delta):
        raise RuntimeError("sample-count plug-back check failed")
    return N


@dataclass(frozen=True)
class Tube:
    """Per-step deviation boxes plus the (epsilon, delta, N) certificate."""

    boxes: tuple[Box, ...]
    epsilon: float
    delta: float
    samples_used: int
    source: str
    seed: int
    model_fingerprint: str

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def horizon(self) -> int:
        return len(self.boxes) - 1


@dataclass(frozen=True)
class InvariantSet:
    """Estimated stay-in box (deviation coordinates) for the stabilizer."""

    box: Box
    equilibrium: Equilibrium
    horizon_used: int
    samples_used: int
    unsafe_flag: bool = False

    def __post_init__(self):
        if not (np.all(self.box.lo <= 0.0) and np.all(self.box.hi >= 0.0)):
            raise ValueError("invariant set must contain the zero deviation")


def _substream(seed: int, index: int) -> np.random.Generator:
    # per-rollout substream: master seed XOR rollout index, so serial and
    # parallel execution draw identical noise
    return np.random.Generator(np.random.PCG64(int(seed) ^ int(index)))


def _draw_rollout_noise(model: DynamicsModel, x, N: int, T: int, seed: int):
    n = model.n_x
    x = np.asarray(x, dtype=float)
    starts = np.empty((N, n))
    noise = np.empty((N, T, n))
    for i in range(N):
        gen = _substream(seed, i)
        starts[i] = x + model.disturbance.sample(gen)
        noise[i] = model.disturbance.sample_block(gen, T)
    return starts, noise


def estimate_reachable_sets(model, x, session_factory, N: int, T: int, seed: int, delta: float):
    """Monte-Carlo deviation boxes for a backup controller started at x.

    Plans one backup session at x, then rolls the tracking controller N times
    from x plus an initial disturbance draw with fresh per-step noise, and
    fits a box to the deviations from the session's reference at every step.
    Returns None when the session cannot be initialized (x not recoverable).
    """
    session = session_factory(x)
    if session is None:
        return None
    if session.T != T:
        raise ValueError("session horizon does not match requested tube horizon")
    devs = _rollout_deviations(model, session, x, N, T, seed)
    boxes = tuple(
        model.canonicalize_deviation_box(box_from_points(devs[:, t, :])) for t in range(T + 1)
    )
    return Tube(
        boxes=boxes,
        epsilon=epsilon_from_samples(model.n_x, N, delta),
        delta=delta,
        samples_used=N,
        source=SOURCE_FRESH,
        seed=int(seed),
        model_fingerprint=model.fingerprint(),
    )


def _rollout_deviations(model, session, x, N, T, seed):
    counters.bump("tube_rollouts", N)
    starts, noise = _draw_rollout_noise(model, x, N, T, seed)
    ref_X_pad, ref_U_pad = session.ref.padded
    safe = model.safe_set
    hs_n, hs_b, obc, obr, pd0, pd1 = _safe_set_arrays([safe], 0, model.n_x)
    ctrl = getattr(session, "tracking_dynamics", None)
    ctrl_tag, ctrl_params = ctrl if ctrl is not None else (model.tag, model.params)
    return _kernels.tracked_rollouts(
        model.tag, model.params, ctrl_tag, ctrl_params,
        ref_X_pad, ref_U_pad, session.ref.states,
        session.weights.Q, session.weights.R, session.stab.P_full,
        session.equilibrium.x_e, session.equilibrium.u_e,
        hs_n, hs_b[0], obc, obr[0], pd0, pd1,
        model.control_bounds.lo, model.control_bounds.hi,
        TRACK_PENALTY, TRACK_PENALTY,
        T, starts, noise, TRACK_MAX_ITER, TRACK_GRAD_TOL,
    )


def precompute_tube(model, x0, session_factory, N: int, T: int, seed: int, delta: float):
    """Tube from a fixed representative start, reusable around new references."""
    tube = estimate_reachable_sets(model, x0, session_factory, N, T, seed, delta)
    if tube is None:
        return None
    return Tube(
        boxes=tube.boxes,
        epsilon=tube.epsilon,
        delta=tube.delta,
        samples_used=tube.samples_used,
        source=SOURCE_PRECOMPUTED,
        seed=tube.seed,
        model_fingerprint=tube.model_fingerprint,
    )


def merge_tubes(tubes: list[Tube]) -> Tube:
    """Per-step envelope of several tubes (conservative certificate).

    The union box contains each member tube, so per-step coverage is at
    least that of any member; epsilon and delta report the worst member.
    """
    if not tubes:
        raise ValueError("need at least one tube to merge")
    first = tubes[0]
    for t in tubes[1:]:
        if t.horizon != first.horizon:
            raise ValueError("tubes must share a horizon to merge")
        if t.model_fingerprint != first.model_fingerprint:
            raise ValueError("tubes must come from the same model")
    boxes = []
    for k in range(first.horizon + 1):
        lo = np.min([t.boxes[k].lo for t in tubes], axis=0)
        hi = np.max([t.boxes[k].hi for t in tubes], axis=0)
        boxes.append(Box(lo, hi))
    return Tube(
        boxes=tuple(boxes),
        epsilon=max(t.epsilon for t in tubes),
        delta=max(t.delta for t in tubes),
        samples_used=min(t.samples_used for t in tubes),
        source=first.source,
        seed=first.seed,
        model_fingerprint=first.model_fingerprint,
    )


def estimate_invariant_set(
    model: DynamicsModel,
    eq: Equilibrium,
    stab,
    horizon: int = 200,
    N: int = 1500,
    seed: int = 0,
    start_box: Box | None = None,
) -> InvariantSet:
    """Envelope of stabilizer rollouts around an equilibrium.

    Rolls N noisy trajectories of the linear feedback from perturbed starts
    over the given horizon and returns the box of all visited deviations. By
    default starts are one disturbance draw off the equilibrium; passing
    start_box samples start deviations uniformly from it instead (used to
    cover tracker hand-off spread). Sampled safety violations set a flag but
    do not fail the estimate; the result is a heuristic, not a certificate.
    """
    counters.bump("invariant_rollouts", N)
    n = model.n_x
    all_devs = np.empty((N, horizon + 1, n))
    unsafe = False
    for i in range(N):
        gen = _substream(seed, i)
        if start_box is None:
            start = eq.x_e + model.disturbance.sample(gen)
        else:
            start = eq.x_e + gen.uniform(start_box.lo, start_box.hi)
        noise = model.disturbance.sample_block(gen, horizon)
        states = _kernels.lqr_closed_loop(
            model.tag, model.params, eq.x_e, eq.u_e, stab.K_full,
            model.control_bounds.lo, model.control_bounds.hi, start, noise,
        )
        all_devs[i] = states - eq.x_e
    flat = all_devs.reshape(-1, n)
    if not _states_all_safe(model.safe_set, flat + eq.x_e):
        unsafe = True
    box = model.canonicalize_deviation_box(box_from_points(flat))
    # the zero deviation is in the set by definition of an equilibrium region
    lo = np.minimum(box.lo, 0.0)
    hi = np.maximum(box.hi, 0.0)
    return InvariantSet(Box(lo, hi), eq, horizon, N, unsafe)


def _states_all_safe(safe: SafeSet, states: np.ndarray) -> bool:
    for h in safe.halfspaces:
        if np.any(states @ h.normal > h.offset + 1e-12):
            return False
    if safe.obstacles:
        pos = states[:, list(safe.position_dims)]
        for o in safe.obstacles:
            if np.any(np.linalg.norm(pos - o.center, axis=1) < o.radius - 1e-12):
                return False
    return True


# -- serialization ----------------------------------------------------------


def tube_to_dict(tube: Tube) -> dict:
    return {
        "version": SERIAL_VERSION,
        "kind": "tube",
        "lo": [list(b.lo) for b in tube.boxes],
        "hi": [list(b.hi) for b in tube.boxes],
        "epsilon": tube.epsilon,
        "delta": tube.delta,
        "samples_used": tube.samples_used,
        "source": tube.source,
        "seed": tube.seed,
        "model_fingerprint": tube.model_fingerprint,
    }


def tube_from_dict(data: dict, expect_fingerprint: str | None = None) -> Tube:
    if data.get("version") != SERIAL_VERSION or data.get("kind") != "tube":
        raise ValueError("unrecognized tube file format")
    if expect_fingerprint is not None and data["model_fingerprint"] != expect_fingerprint:
        raise ValueError("tube was computed for a different model (fingerprint mismatch)")
    boxes = tuple(Box(np.array(lo), np.array(hi)) for lo, hi in zip(data["lo"], data["hi"]))
    return Tube(
        boxes=boxes,
        epsilon=float(data["epsilon"]),
        delta=float(data["delta"]),
        samples_used=int(data["samples_used"]),
        source=str(data["source"]),
        seed=int(data["seed"]),
        model_fingerprint=str(data["model_fingerprint"]),
    )


def invariant_to_dict(inv: InvariantSet) -> dict:
    return {
        "version": SERIAL_VERSION,
        "kind": "invariant_set",
        "lo": list(inv.box.lo),
        "hi": list(inv.box.hi),
        "x_e": list(inv.equilibrium.x_e),
        "u_e": list(inv.equilibrium.u_e),
        "horizon_used": inv.horizon_used,
        "samples_used": inv.samples_used,
        "unsafe_flag": inv.unsafe_flag,
    }


def invariant_from_dict(data: dict) -> InvariantSet:
    if data.get("version") != SERIAL_VERSION or data.get("kind") != "invariant_set":
        raise ValueError("unrecognized invariant-set file format")
    return InvariantSet(
        box=Box(np.array(data["lo"]), np.array(data["hi"])),
        equilibrium=Equilibrium(np.array(data["x_e"]), np.array(data["u_e"])),
        horizon_used=int(data["horizon_used"]),
        samples_used=int(data["samples_used"]),
        unsafe_flag=bool(data["unsafe_flag"]),
    )


def save_tube(tube: Tube, path) -> None:
    Path(path).write_text(json.dumps(tube_to_dict(tube), indent=1) + "\n")


def load_tube(path, expect_fingerprint: str | None = None) -> Tube:
    return tube_from_dict(json.loads(Path(path).read_text()), expect_fingerprint)


def save_invariant(inv: InvariantSet, path) -> None:
    Path(path).write_text(json.dumps(invariant_to_dict(inv), indent=1) + "\n")


def load_invariant(path) -> InvariantSet:
    return invariant_from_dict(json.loads(Path(path).read_text()))


class TubeStore:
    """Keyed JSON store for serialized tubes and invariant sets.

    Keys map to <key>.json files under the directory (when given) with an
    in-memory cache in front; byte-stable output for reproducibility checks.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, dict] = {}

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str):
        if key in self._memory:
            return self._memory[key]
        if self.directory is not None:
            path = self._path(key)
            if path.exists():
                data = json.loads(path.read_text())
                self._memory[key] = data
                return data
        return None

    def put(self, key: str, data: dict) -> None:
        self._memory[key] = data
        if self.directory is not None:
            self._path(key).write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


# -- distribution-level coverage validation ---------------------------------


def validate_box_coverage(
    n: int,
    epsilon: float,
    delta: float,
    trials: int,
    holdout: int,
    seed: int,
    sampler=None,
) -> dict:
    """Empirical check of the coverage bound on a synthetic distribution.

    For each trial, fits a box to N = solve_sample_count(n, epsilon, delta)
    fresh draws and measures held-out coverage; reports the fraction of
    trials whose coverage reaches 1 - epsilon (the bound says this fraction
    should be at least 1 - delta).
    """
    N = solve_sample_count(n, epsilon, delta)
    rng = np.random.default_rng(seed)
    if sampler is None:
        sampler = lambda gen, count: gen.uniform(0.0, 1.0, size=(count, n))
    passed = 0
    coverages = []
    for _ in range(trials):
        train = sampler(rng, N)
        box = box_from_points(train)
        test = sampler(rng, holdout)
        inside = np.all((test >= box.lo) & (test <= box.hi), axis=1)
        cov = float(np.mean(inside))
        coverages.append(cov)
        if cov >= 1.0 - epsilon:
            passed += 1
    return {
        "sample_count": N,
        "trials": trials,
        "pass_fraction": passed / trials,
        "min_coverage": min(coverages),
        "mean_coverage": float(np.mean(coverages)),
    }
