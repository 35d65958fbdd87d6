"""Seeded benchmark harness: scenarios, episodes, metrics, and exports.

A benchmark run is a grid over environments, shield modes, seeds, and
scenario indices. Scenario content (obstacles, start, goal) depends only on
(environment, seed, scenario index), so every shield mode faces identical
scenarios; episode noise comes from a separate stream with the same key.
Episodes run in parallel across processes and aggregate deterministically.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import CartPole, DynamicsModel, make_model
from .geometry import safe_contains
from .policies import PolicyFault, default_policy
from .shield import (
    PLANNER_LINEAR,
    PLANNER_NONLINEAR,
    SOURCE_LEARNED,
    BackupAssets,
    ShieldConfig,
    ShieldState,
    _nominal_rollout_devs,
    initialize_backup,
    shield_action,
)
from .tubes import TubeStore

MODES = ("none", "nonrobust-mps", "rmps", "lrmps")
ENVIRONMENTS = ("cartpole", "holonomic", "nonholonomic")

METRICS_HEADER = "environment,mode,safety_rate,goal_rate,learned_fraction,backup_fraction,episodes"
SCAN_HEADER = "theta,omega,nmpc_ok,lmpc_ok"


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass
class ScenarioConfig:
    """Benchmark grid description; see README for the file format."""

    environments: tuple[str, ...] = ("nonholonomic",)
    modes: tuple[str, ...] = ("rmps",)
    episode_steps: int = 300
    scenarios: int = 50
    seeds: tuple[int, ...] = (0, 1, 2)
    horizon: int | None = None
    samples: int = 1500
    epsilon: float | None = None
    delta: float = 0.01
    tube_mode: str = "precomputed"
    tube_seed: int = 2024
    goal_radius: float = 0.2
    jobs: int = 1
    out_dir: str = "out"
    tube_dir: str | None = None
    write_traces: bool = True
    scan_resolution: int = 21
    scan_cart_speed: float = 0.5
    env_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.environments = _as_tuple(self.environments)
        self.modes = _as_tuple(self.modes)
        self.seeds = tuple(int(s) for s in _as_tuple(self.seeds))
        for env in self.environments:
            if env not in ENVIRONMENTS:
                raise ConfigError(f"unknown environment {env!r}")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown shield mode {mode!r}")
        for name in ("episode_steps", "scenarios", "samples", "jobs", "scan_resolution"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must lie in (0, 1)")
        if self.epsilon is not None and not (0.0 < self.epsilon < 1.0):
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.goal_radius <= 0:
            raise ConfigError("goal_radius must be positive")
        if self.tube_mode not in ("precomputed", "fresh"):
            raise ConfigError(f"unknown tube mode {self.tube_mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @staticmethod
    def from_dict(data: dict) -> "ScenarioConfig":
        known = {f for f in ScenarioConfig.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return ScenarioConfig(**data)

    @staticmethod
    def from_yaml(path) -> "ScenarioConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"could not parse config file {path}: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return ScenarioConfig.from_dict(data)

    def shield_config(self, mode: str) -> ShieldConfig:
        return ShieldConfig(
            horizon=self.horizon,
            samples=self.samples,
            epsilon=self.epsilon,
            delta=self.delta,
            tube_mode=self.tube_mode,
            planner=PLANNER_LINEAR if mode == "lrmps" else PLANNER_NONLINEAR,
            robust=mode in ("rmps", "lrmps"),
            tube_seed=self.tube_seed,
        )


def _as_tuple(value):
    if isinstance(value, (str, int)):
        return (value,)
    return tuple(value)


# -- scenario sampling ---------------------------------------------------------


def _scenario_rng(environment: str, seed: int, index: int) -> np.random.Generator:
    name_key = sum(ord(c) for c in environment)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index, name_key, 0))))


def _noise_rng(environment: str, seed: int, index: int) -> np.random.Generator:
    name_key = sum(ord(c) for c in environment)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index, name_key, 1))))


def sample_scenario(environment: str, seed: int, index: int, config: ScenarioConfig,
                    corridor_extra: float) -> dict:
    """Model kwargs plus start state for one seeded scenario.

    Scenario content depends only on (environment, seed, index) so all
    shield modes see the same worlds. Obstacles keep a corridor of at least
    twice the particle radius plus the tube's position footprint between each
    other and clear of the start and goal.
    """
    rng = _scenario_rng(environment, seed, index)
    ov = dict(config.env_overrides)
    noise_scale = float(ov.get("noise_scale", 1.0))
    if environment == "cartpole":
        if "x_target" in ov:
            x_target = float(ov["x_target"])
        else:
            sign = 1.0 if rng.random() < 0.5 else -1.0
            x_target = sign * rng.uniform(0.9, 1.6)
        start = np.array([0.0, 0.0, rng.uniform(-0.02, 0.02), 0.0])
        return {
            "environment": environment,
            "model_kwargs": {"x_target": x_target, "noise_scale": noise_scale},
            "start": start,
        }
    goal = np.asarray(ov.get("goal", (3.3, 3.3)), dtype=float)
    particle_radius = float(ov.get("particle_radius", 0.25))
    obstacle_radius = float(ov.get("obstacle_radius", 0.35))
    count = int(ov.get("obstacle_count", 2))
    spread = float(ov.get("obstacle_spread", 4.2))
    start_pos = np.array([rng.uniform(-3.8, -3.0), rng.uniform(-3.8, -3.0)])
    if "obstacles" in ov:
        obstacles = [(tuple(c), float(r)) for c, r in ov["obstacles"]]
    else:
        clearance = 2.0 * particle_radius + corridor_extra
        obstacles = []
        attempts = 0
        while len(obstacles) < count and attempts < 2000:
            attempts += 1
            c = rng.uniform(-spread, spread, size=2)
            r = obstacle_radius
            if np.linalg.norm(c - goal) < r + particle_radius + clearance + config.goal_radius:
                continue
            if np.linalg.norm(c - start_pos) < r + particle_radius + clearance:
                continue
            if any(
                np.linalg.norm(c - np.asarray(c2)) < r + r2 + clearance
                for c2, r2 in obstacles
            ):
                continue
            obstacles.append((tuple(c), r))
    if environment == "holonomic":
        start = np.array([start_pos[0], start_pos[1], 0.0, 0.0])
    else:
        bearing = math.atan2(goal[1] - start_pos[1], goal[0] - start_pos[0])
        heading = bearing + rng.uniform(-0.15, 0.15)
        start = np.array([start_pos[0], start_pos[1], 0.0, heading])
    return {
        "environment": environment,
        "model_kwargs": {
            "goal": tuple(goal),
            "obstacles": obstacles,
            "particle_radius": particle_radius,
            "noise_scale": noise_scale,
        },
        "start": start,
    }


def build_scenario_model(scenario: dict) -> DynamicsModel:
    return make_model(scenario["environment"], **scenario["model_kwargs"])


# -- episodes -------------------------------------------------------------------


@dataclass
class EpisodeResult:
    environment: str
    mode: str
    seed: int
    scenario: int
    steps: int
    safe: bool
    goal_reached: bool
    aborted: bool
    fault: bool
    sources: list
    check_rollouts: int
    states: np.ndarray
    controls: np.ndarray

    @property
    def learned_steps(self) -> int:
        return sum(1 for s in self.sources if s == SOURCE_LEARNED)


def _goal_reached(model: DynamicsModel, x, goal_radius: float) -> bool:
    goal = model.goal_position()
    if goal is None:
        return False
    if model.name == "cartpole":
        return abs(float(x[0]) - float(goal[0])) <= goal_radius
    return float(np.linalg.norm(np.asarray(x[:2]) - goal)) <= goal_radius


def run_episode(
    config: ScenarioConfig,
    environment: str,
    mode: str,
    seed: int,
    scenario_index: int,
    assets: BackupAssets | None = None,
    corridor_extra: float = 0.1,
    policy=None,
) -> EpisodeResult:
    """One seeded episode under the selected controller stack.

    The episode ends at the step limit, on reaching the goal region, on
    leaving the safe set, or on a shield/policy fault (recorded as aborted
    and counted unsafe).
    """
    scenario = sample_scenario(environment, seed, scenario_index, config, corridor_extra)
    model = build_scenario_model(scenario)
    if assets is None and mode != "none":
        assets = BackupAssets(model, config.shield_config(mode))
    if policy is None:
        policy = default_policy(model)
    noise = _noise_rng(environment, seed, scenario_index)
    x = scenario["start"].copy()
    states = [x.copy()]
    controls = []
    sources = []
    check_rollouts = 0
    shield_state = ShieldState()
    safe = bool(safe_contains(model.safe_set, x))
    goal_reached = _goal_reached(model, x, config.goal_radius)
    aborted = False
    fault = False
    if safe and not goal_reached:
        for _ in range(config.episode_steps):
            try:
                if mode == "none":
                    u = model.clamp(policy(x))
                    source = SOURCE_LEARNED
                else:
                    decision = shield_action(model, shield_state, x, policy, assets)
                    u = decision.action
                    source = decision.source
                    check_rollouts += decision.check_cost
                    if decision.fault:
                        fault = True
            except PolicyFault:
                aborted = True
                break
            x = model.step_stochastic(x, u, noise)
            states.append(x.copy())
            controls.append(np.asarray(u, dtype=float))
            sources.append(source)
            if fault:
                aborted = True
                break
            if not safe_contains(model.safe_set, x):
                safe = False
                break
            if _goal_reached(model, x, config.goal_radius):
                goal_reached = True
                break
    if aborted:
        safe = False
    return EpisodeResult(
        environment=environment,
        mode=mode,
        seed=seed,
        scenario=scenario_index,
        steps=len(controls),
        safe=safe,
        goal_reached=goal_reached,
        aborted=aborted,
        fault=fault,
        sources=sources,
        check_rollouts=check_rollouts,
        states=np.array(states),
        controls=np.array(controls) if controls else np.zeros((0, model.n_u)),
    )


# -- metrics ---------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    environment: str
    mode: str
    safety_rate: float
    goal_rate: float
    learned_fraction: float
    backup_fraction: float
    mean_check_cost: float
    episodes: int


def aggregate_metrics(results: list[EpisodeResult]) -> list[Metrics]:
    """Per (environment, mode) rates over the episode list."""
    grouped: dict[tuple[str, str], list[EpisodeResult]] = {}
    for r in results:
        grouped.setdefault((r.environment, r.mode), []).append(r)
    out = []
    for (env, mode), group in sorted(grouped.items()):
        episodes = len(group)
        safe = sum(1 for g in group if g.safe and not g.aborted)
        goal = sum(1 for g in group if g.goal_reached)
        total_steps = sum(g.steps for g in group)
        learned = sum(g.learned_steps for g in group)
        rollouts = sum(g.check_rollouts for g in group)
        learned_fraction = learned / total_steps if total_steps else 1.0
        out.append(
            Metrics(
                environment=env,
                mode=mode,
                safety_rate=safe / episodes,
                goal_rate=goal / episodes,
                learned_fraction=learned_fraction,
                backup_fraction=1.0 - learned_fraction,
                mean_check_cost=rollouts / total_steps if total_steps else 0.0,
                episodes=episodes,
            )
        )
    return out


# -- benchmark grid ----------------------------------------------------------------


_WORKER_CACHE: dict = {}


def _prepared_assets(environment: str, mode: str, config: ScenarioConfig,
                     model: DynamicsModel) -> BackupAssets:
    """Assets for one episode, sharing heavy pieces across a worker process."""
    store = TubeStore(_tube_directory(config))
    assets = BackupAssets(model, config.shield_config(mode), store=store)
    key = (environment, mode, model.fingerprint(), assets.T, assets.N, config.delta,
           config.tube_seed)
    cached = _WORKER_CACHE.get(key)
    if cached is None:
        cached = {
            "invariant": assets.invariant_set,
            "tube": assets.tube,
            "lqr": assets._lqr_cache,
        }
        _WORKER_CACHE[key] = cached
    else:
        assets._invariant = cached["invariant"]
        assets._tube = cached["tube"]
        assets._tube_ready = True
        assets._lqr_cache = cached["lqr"]
    return assets


def _tube_directory(config: ScenarioConfig) -> Path:
    if config.tube_dir is not None:
        return Path(config.tube_dir)
    return Path(config.out_dir) / "tubes"


def _corridor_extra(config: ScenarioConfig, environment: str) -> float:
    """Extra obstacle clearance: the canonical tube's position footprint."""
    if environment == "cartpole":
        return 0.0
    store = TubeStore(_tube_directory(config))
    model = make_model(environment)
    assets = BackupAssets(model, config.shield_config("rmps"), store=store)
    tube = assets.tube
    width = max(max(b.widths[0], b.widths[1]) for b in tube.boxes)
    return float(width)


def _episode_task(args) -> EpisodeResult:
    config, environment, mode, seed, scenario_index, corridor_extra = args
    scenario = sample_scenario(environment, seed, scenario_index, config, corridor_extra)
    model = build_scenario_model(scenario)
    assets = None
    if mode != "none":
        assets = _prepared_assets(environment, mode, config, model)
    return run_episode(
        config, environment, mode, seed, scenario_index,
        assets=assets, corridor_extra=corridor_extra,
    )


def prepare_caches(config: ScenarioConfig) -> None:
    """Precompute tubes and invariant sets into the store before the grid."""
    store = TubeStore(_tube_directory(config))
    for environment in config.environments:
        model = make_model(environment)
        for mode in config.modes:
            if mode == "none":
                continue
            assets = BackupAssets(model, config.shield_config(mode), store=store)
            assets.invariant_set
            assets.tube
        if environment != "cartpole" and any(m != "none" for m in config.modes):
            # corridor sizing uses the primary-mode tube even in baseline grids
            assets = BackupAssets(model, config.shield_config("rmps"), store=store)
            assets.tube


def run_benchmark(config: ScenarioConfig, progress=None):
    """Execute the scenario grid; returns (metrics rows, episode results).

    Episode failures (aborts) are recorded per episode and never interrupt
    the grid. Results are aggregated in a fixed order regardless of worker
    scheduling.
    """
    prepare_caches(config)
    corridor = {env: _corridor_extra(config, env) for env in config.environments}
    tasks = [
        (config, env, mode, seed, idx, corridor[env])
        for env in config.environments
        for mode in config.modes
        for seed in config.seeds
        for idx in range(config.scenarios)
    ]
    results: list[EpisodeResult] = []
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            for i, res in enumerate(pool.map(_episode_task, tasks, chunksize=4)):
                results.append(res)
                if progress is not None:
                    progress(i + 1, len(tasks), res)
    else:
        for i, task in enumerate(tasks):
            res = _episode_task(task)
            results.append(res)
            if progress is not None:
                progress(i + 1, len(tasks), res)
    results.sort(key=lambda r: (r.environment, r.mode, r.seed, r.scenario))
    return aggregate_metrics(results), results


# -- feasible-region scan -----------------------------------------------------------


def stabilizable_region_scan(config: ScenarioConfig):
    """Grid over pole angle and spin: which planners can recover the pole.

    For each cell, plans with the nonlinear and the origin-linearized
    dynamics from (0, fixed speed, angle, spin); a cell counts as feasible
    for a planner when the plan exists and the nominal closed-loop tracking
    rollout ends inside the stabilizer's invariant region.
    """
    model = CartPole(x_target=0.0, noise_scale=float(
        config.env_overrides.get("noise_scale", 1.0)))
    store = TubeStore(_tube_directory(config))
    res = config.scan_resolution
    speed = config.scan_cart_speed
    assets = {}
    for planner, mode in (("nonlinear", "rmps"), ("linear", "lrmps")):
        shield_cfg = config.shield_config(mode)
        shield_cfg.tube_mode = "fresh"  # scan uses untightened planning
        assets[planner] = BackupAssets(model, shield_cfg, store=store)
    rows = []
    thetas = np.linspace(-0.2, 0.2, res)
    omegas = np.linspace(-1.0, 1.0, res)
    for theta in thetas:
        for omega in omegas:
            x0 = np.array([0.0, speed, theta, omega])
            flags = {}
            for planner in ("nonlinear", "linear"):
                a = assets[planner]
                session = initialize_backup(model, x0, a)
                if session is None:
                    flags[planner] = 0
                    continue
                devs = _nominal_rollout_devs(model, session, x0)
                terminal = session.ref.state(a.T) + devs[a.T]
                dev_from_eq = terminal - session.equilibrium.x_e
                inv = a.invariant_set
                ok = bool(
                    np.all(dev_from_eq >= inv.box.lo) and np.all(dev_from_eq <= inv.box.hi)
                )
                flags[planner] = int(ok)
            rows.append((float(theta), float(omega), flags["nonlinear"], flags["linear"]))
    return rows


# -- output files ----------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def emit_metrics_csv(metrics: list[Metrics], path) -> None:
    lines = [METRICS_HEADER]
    for m in sorted(metrics, key=lambda m: (m.environment, m.mode)):
        lines.append(
            ",".join(
                [
                    m.environment,
                    m.mode,
                    _fmt(m.safety_rate),
                    _fmt(m.goal_rate),
                    _fmt(m.learned_fraction),
                    _fmt(m.backup_fraction),
                    str(m.episodes),
                ]
            )
        )
    _write_lines(path, lines)


def emit_trace_csv(result: EpisodeResult, path) -> None:
    n_x = result.states.shape[1]
    n_u = result.controls.shape[1] if result.controls.size else 0
    header = (
        ["step"]
        + [f"x{i}" for i in range(n_x)]
        + [f"u{i}" for i in range(n_u)]
        + ["source"]
    )
    lines = [",".join(header)]
    for k in range(result.states.shape[0]):
        row = [str(k)] + [_fmt(v) for v in result.states[k]]
        if k < result.controls.shape[0]:
            row += [_fmt(v) for v in result.controls[k]]
            row.append(result.sources[k])
        else:
            row += [""] * n_u
            row.append("")
        lines.append(",".join(row))
    _write_lines(path, lines)


def emit_scan_csv(rows, path) -> None:
    lines = [SCAN_HEADER]
    for theta, omega, nm, lm in rows:
        lines.append(f"{_fmt(theta)},{_fmt(omega)},{nm},{lm}")
    _write_lines(path, lines)


def _write_lines(path, lines) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"could not write output file {path}: {exc}") from exc


def trace_filename(result: EpisodeResult) -> str:
    return (
        f"{result.environment}_{result.mode}_seed{result.seed}"
        f"_sc{result.scenario:03d}.csv"
    )


def emit_outputs(metrics: list[Metrics], results: list[EpisodeResult], out_dir,
                 write_traces: bool = True) -> None:
    out = Path(out_dir)
    emit_metrics_csv(metrics, out / "metrics.csv")
    if write_traces:
        for r in results:
            emit_trace_csv(r, out / "traces" / trace_filename(r))
