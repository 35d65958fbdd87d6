"""Discrete-time stochastic dynamics models and the benchmark environments.

All models share the form x(k+1) = f(x(k), u(k)) + w(k) with f deterministic
and w zero-mean uniform noise on a per-dimension interval support. Three
environments are provided:

* cart-pole: keep the pole upright while moving the cart to a target,
* holonomic particle: a 2-D double integrator among disk obstacles,
* non-holonomic particle: bicycle-style kinematics among disk obstacles.

The compiled step functions live in _kernels; these classes carry parameters,
bounds, safe sets, and the equilibrium / linearization / cost helpers used by
the backup controller.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import Box, Halfspace, Obstacle, SafeSet

EQUILIBRIUM_TOL = 1e-9
_LIN_EPS = 1e-5


@dataclass(frozen=True)
class DisturbanceSpec:
    """Zero-mean uniform noise with per-dimension symmetric supports."""

    half_widths: np.ndarray
    family: str = "uniform"

    def __post_init__(self):
        hw = np.asarray(self.half_widths, dtype=float)
        if np.any(hw < 0):
            raise ValueError("disturbance half-widths must be non-negative")
        hw.setflags(write=False)
        object.__setattr__(self, "half_widths", hw)
        if self.family != "uniform":
            raise ValueError(f"unsupported disturbance family: {self.family}")

    @property
    def dim(self) -> int:
        return self.half_widths.shape[0]

    def support(self) -> Box:
        return Box(-self.half_widths, self.half_widths)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        # keep the draw count fixed even for degenerate dimensions so that
        # stream alignment does not depend on which dimensions are noisy
        unit = rng.uniform(-1.0, 1.0, size=self.dim)
        return unit * self.half_widths

    def sample_block(self, rng: np.random.Generator, count: int) -> np.ndarray:
        unit = rng.uniform(-1.0, 1.0, size=(count, self.dim))
        return unit * self.half_widths


@dataclass(frozen=True)
class Equilibrium:
    """A fixed point of the nominal dynamics: x_e = f(x_e, u_e)."""

    x_e: np.ndarray
    u_e: np.ndarray

    def __post_init__(self):
        xe = np.asarray(self.x_e, dtype=float)
        ue = np.asarray(self.u_e, dtype=float)
        xe.setflags(write=False)
        ue.setflags(write=False)
        object.__setattr__(self, "x_e", xe)
        object.__setattr__(self, "u_e", ue)


class DynamicsModel:
    """Base class: immutable after construction, shareable across threads."""

    name: str = "base"
    tag: int = -1

    def __init__(self, n_x, n_u, dt, params, control_bounds, safe_set, disturbance):
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.dt = float(dt)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self.params = np.asarray(params, dtype=float)
        self.params.setflags(write=False)
        self.control_bounds = control_bounds
        self.safe_set = safe_set
        self.disturbance = disturbance

    # -- stepping ---------------------------------------------------------

    def step_nominal(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if not (np.isfinite(x).all() and np.isfinite(u).all()):
            raise ValueError("non-finite state or control")
        return _kernels.step_one(self.tag, self.params, x, u)

    def sample_disturbance(self, rng: np.random.Generator) -> np.ndarray:
        return self.disturbance.sample(rng)

    def step_stochastic(self, x, u, rng: np.random.Generator) -> np.ndarray:
        return self.step_nominal(x, u) + self.sample_disturbance(rng)

    def clamp(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.control_bounds.lo, self.control_bounds.hi)

    # -- equilibria and linearization --------------------------------------

    def equilibrium_near(self, x) -> Equilibrium:
        """Nearest stop-and-hold equilibrium for the current state."""
        eq = self._equilibrium_near(np.asarray(x, dtype=float))
        residual = np.max(np.abs(self.step_nominal(eq.x_e, eq.u_e) - eq.x_e))
        if residual > EQUILIBRIUM_TOL:
            raise ValueError(f"equilibrium residual {residual:.3e} exceeds tolerance")
        return eq

    def _equilibrium_near(self, x) -> Equilibrium:
        raise NotImplementedError

    def linearize(self, at: Equilibrium):
        """Jacobians A = df/dx, B = df/du by central differences."""
        n, m = self.n_x, self.n_u
        A = np.empty((n, n))
        B = np.empty((n, m))
        for j in range(n):
            dx = np.zeros(n)
            dx[j] = _LIN_EPS
            A[:, j] = (
                self.step_nominal(at.x_e + dx, at.u_e) - self.step_nominal(at.x_e - dx, at.u_e)
            ) / (2 * _LIN_EPS)
        for j in range(m):
            du = np.zeros(m)
            du[j] = _LIN_EPS
            B[:, j] = (
                self.step_nominal(at.x_e, at.u_e + du) - self.step_nominal(at.x_e, at.u_e - du)
            ) / (2 * _LIN_EPS)
        return A, B

    def stabilizer_basis(self, at: Equilibrium) -> np.ndarray:
        """Orthonormal rows spanning the deviation subspace the LQR acts on.

        Identity for fully stabilizable linearizations; overridden where the
        equilibrium linearization has uncontrollable neutral modes.
        """
        return np.eye(self.n_x)

    def linear_origin(self):
        """(tag, params) of the fixed linearization at the origin equilibrium."""
        eq = self.origin_equilibrium()
        A, B = self.linearize(eq)
        params = np.concatenate([eq.x_e, eq.u_e, A.ravel(), B.ravel()])
        return _kernels.TAG_LINEAR, params

    def origin_equilibrium(self) -> Equilibrium:
        return self.equilibrium_near(np.zeros(self.n_x))

    # -- tube helpers -------------------------------------------------------

    def canonicalize_deviation_box(self, box: Box) -> Box:
        """Make a deviation box reusable across the model's equilibrium class."""
        return box

    def canonical_recovery_state(self) -> np.ndarray:
        """Representative off-equilibrium state used for tube precomputation."""
        return self.canonical_recovery_states()[0]

    def canonical_recovery_states(self) -> list[np.ndarray]:
        """Recovery starts whose deviation statistics envelope the model.

        Models whose tracking mismatch depends on orientation list several
        representative starts; the precomputed tube takes the envelope
        across all of them.
        """
        raise NotImplementedError

    # -- reporting ----------------------------------------------------------

    def task_cost(self, x, u) -> float:
        raise NotImplementedError

    def goal_position(self):
        return None

    def fingerprint(self) -> str:
        """Hash of the physics: step rule, bounds, and noise — not obstacles."""
        payload = {
            "name": self.name,
            "dt": self.dt,
            "params": list(np.asarray(self.params)),
            "u_lo": list(self.control_bounds.lo),
            "u_hi": list(self.control_bounds.hi),
            "noise": list(self.disturbance.half_widths),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class CartPole(DynamicsModel):
    """Frictionless cart-pole, explicit Euler at dt=0.02.

    State (cart position, cart velocity, pole angle, pole angular velocity);
    control is the horizontal force. Safety: |angle| <= 0.2 rad and
    |position| <= 2.4 m. Task: move the cart to x_target without dropping
    the pole.
    """

    name = "cartpole"
    tag = _kernels.TAG_CARTPOLE

    def __init__(
        self,
        x_target: float = 0.0,
        masscart: float = 1.0,
        masspole: float = 0.1,
        half_length: float = 0.5,
        gravity: float = 9.8,
        force_limit: float = 10.0,
        dt: float = 0.02,
        theta_limit: float = 0.2,
        x_limit: float = 2.4,
        noise_scale: float = 1.0,
        cost_angle_weight: float = 1.0,
    ):
        halfspaces = (
            Halfspace(np.array([1.0, 0.0, 0.0, 0.0]), x_limit),
            Halfspace(np.array([-1.0, 0.0, 0.0, 0.0]), x_limit),
            Halfspace(np.array([0.0, 0.0, 1.0, 0.0]), theta_limit),
            Halfspace(np.array([0.0, 0.0, -1.0, 0.0]), theta_limit),
        )
        safe = SafeSet(4, halfspaces, (), (0,))
        noise = DisturbanceSpec(noise_scale * np.array([0.0, 0.01, 0.0, 0.01]))
        bounds = Box(np.array([-force_limit]), np.array([force_limit]))
        super().__init__(
            4, 1, dt, [dt, masscart, masspole, half_length, gravity], bounds, safe, noise
        )
        self.x_target = float(x_target)
        self.masscart = masscart
        self.masspole = masspole
        self.half_length = half_length
        self.gravity = gravity
        self.theta_limit = theta_limit
        self.x_limit = x_limit
        self.cost_angle_weight = cost_angle_weight

    def _equilibrium_near(self, x) -> Equilibrium:
        return Equilibrium(np.array([x[0], 0.0, 0.0, 0.0]), np.zeros(1))

    def task_cost(self, x, u) -> float:
        return float((x[0] - self.x_target) ** 2 + self.cost_angle_weight * x[2] ** 2)

    def goal_position(self):
        return np.array([self.x_target])

    def canonical_recovery_states(self) -> list[np.ndarray]:
        # a mirrored pair of mid-recovery transients (moving cart, tipping
        # pole), representative of the states where a shield hands over
        return [
            np.array([0.0, 0.5, 0.05, 0.25]),
            np.array([0.0, -0.5, -0.05, -0.25]),
        ]

    def mechanical_energy(self, x) -> float:
        """Cart + pole kinetic and potential energy (uniform pole)."""
        _, v, theta, omega = x
        m, l = self.masspole, self.half_length
        kinetic = (
            0.5 * (self.masscart + m) * v * v
            + m * l * v * omega * math.cos(theta)
            + (2.0 / 3.0) * m * l * l * omega * omega
        )
        potential = m * self.gravity * l * math.cos(theta)
        return float(kinetic + potential)


def _particle_safe_set(workspace, obstacles, particle_radius):
    halfspaces = (
        Halfspace(np.array([1.0, 0.0, 0.0, 0.0]), workspace),
        Halfspace(np.array([-1.0, 0.0, 0.0, 0.0]), workspace),
        Halfspace(np.array([0.0, 1.0, 0.0, 0.0]), workspace),
        Halfspace(np.array([0.0, -1.0, 0.0, 0.0]), workspace),
    )
    obs = tuple(
        Obstacle(np.asarray(c, dtype=float), float(r) + particle_radius) for c, r in obstacles
    )
    return SafeSet(4, halfspaces, obs, (0, 1))


class HolonomicParticle(DynamicsModel):
    """2-D double integrator: state (x, y, vx, vy), control (ax, ay)."""

    name = "holonomic"
    tag = _kernels.TAG_HOLONOMIC

    def __init__(
        self,
        goal=(3.5, 3.5),
        obstacles=(),
        particle_radius: float = 0.25,
        workspace: float = 5.0,
        accel_limit: float = 1.0,
        dt: float = 0.1,
        noise_scale: float = 1.0,
        cost_obstacle_weight: float = 0.1,
    ):
        safe = _particle_safe_set(workspace, obstacles, particle_radius)
        noise = DisturbanceSpec(noise_scale * np.array([0.0, 0.0, 0.01, 0.01]))
        bounds = Box(-accel_limit * np.ones(2), accel_limit * np.ones(2))
        super().__init__(4, 2, dt, [dt], bounds, safe, noise)
        self.goal = np.asarray(goal, dtype=float)
        self.obstacles = tuple((np.asarray(c, dtype=float), float(r)) for c, r in obstacles)
        self.particle_radius = particle_radius
        self.workspace = workspace
        self.cost_obstacle_weight = cost_obstacle_weight

    def _equilibrium_near(self, x) -> Equilibrium:
        return Equilibrium(np.array([x[0], x[1], 0.0, 0.0]), np.zeros(2))

    def task_cost(self, x, u) -> float:
        return _particle_cost(self, x)

    def goal_position(self):
        return self.goal

    def canonical_recovery_states(self) -> list[np.ndarray]:
        return [np.array([0.0, 0.0, 0.6, 0.4])]


class NonholonomicParticle(DynamicsModel):
    """Bicycle-style kinematics: state (x, y, speed, heading), control
    (acceleration, steering angle), turn rate = speed * tan(steer) / radius."""

    name = "nonholonomic"
    tag = _kernels.TAG_NONHOLONOMIC

    def __init__(
        self,
        goal=(3.5, 3.5),
        obstacles=(),
        particle_radius: float = 0.25,
        workspace: float = 5.0,
        accel_limit: float = 1.0,
        steer_limit: float = 0.5,
        dt: float = 0.1,
        noise_scale: float = 1.0,
        cost_obstacle_weight: float = 0.1,
    ):
        safe = _particle_safe_set(workspace, obstacles, particle_radius)
        noise = DisturbanceSpec(noise_scale * np.array([0.0, 0.0, 0.01, 0.01]))
        bounds = Box(np.array([-accel_limit, -steer_limit]), np.array([accel_limit, steer_limit]))
        super().__init__(4, 2, dt, [dt, particle_radius], bounds, safe, noise)
        self.goal = np.asarray(goal, dtype=float)
        self.obstacles = tuple((np.asarray(c, dtype=float), float(r)) for c, r in obstacles)
        self.particle_radius = particle_radius
        self.workspace = workspace
        self.cost_obstacle_weight = cost_obstacle_weight

    def _equilibrium_near(self, x) -> Equilibrium:
        # stop in place, keep heading; any heading is a fixed point at v=0
        return Equilibrium(np.array([x[0], x[1], 0.0, x[3]]), np.zeros(2))

    def task_cost(self, x, u) -> float:
        return _particle_cost(self, x)

    def goal_position(self):
        return self.goal

    def stabilizer_basis(self, at: Equilibrium) -> np.ndarray:
        """Longitudinal position error and speed.

        At rest the steering input has no authority, so lateral position and
        heading are uncontrollable neutral modes; the stabilizer regulates the
        controllable (along-heading position, speed) pair.
        """
        heading = at.x_e[3]
        basis = np.zeros((2, 4))
        basis[0, 0] = math.cos(heading)
        basis[0, 1] = math.sin(heading)
        basis[1, 2] = 1.0
        return basis

    def canonicalize_deviation_box(self, box: Box) -> Box:
        """Symmetrize the position footprint across x/y.

        Deviation statistics rotate with the reference heading; taking the
        worst of the two position widths makes a box estimated at one heading
        a conservative stand-in at any other.
        """
        lo = box.lo.copy()
        hi = box.hi.copy()
        pos_lo = min(lo[0], lo[1])
        pos_hi = max(hi[0], hi[1])
        lo[0] = lo[1] = pos_lo
        hi[0] = hi[1] = pos_hi
        return Box(lo, hi)

    def canonical_recovery_states(self) -> list[np.ndarray]:
        # headings 0 and pi/4: tracking mismatch around a reference depends
        # on orientation (worst for planners blind to heading), so the tube
        # envelope spans both extremes
        return [np.array([0.0, 0.0, 0.7, 0.0]), np.array([0.0, 0.0, 0.7, np.pi / 4])]


def _particle_cost(model, x) -> float:
    """Squared goal distance minus a capped obstacle-distance bonus.

    The bonus term shrinks near obstacles, so proximity raises the cost; the
    cap (twice the obstacle radius) limits each obstacle's influence region.
    """
    pos = np.asarray(x[:2], dtype=float)
    cost = float(np.sum((pos - model.goal) ** 2))
    for center, radius in model.obstacles:
        d = float(np.linalg.norm(pos - center))
        cost -= model.cost_obstacle_weight * min(d, 2.0 * radius) ** 2
    return cost


_MODEL_CLASSES = {
    "cartpole": CartPole,
    "holonomic": HolonomicParticle,
    "nonholonomic": NonholonomicParticle,
}


def make_model(environment: str, **kwargs) -> DynamicsModel:
    try:
        cls = _MODEL_CLASSES[environment]
    except KeyError:
        raise ValueError(f"unknown environment: {environment!r}") from None
    return cls(**kwargs)
