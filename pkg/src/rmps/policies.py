"""Task policies the shield wraps: scripted stand-ins and an external bridge.

The scripted policies are deliberately goal-greedy and obstacle-blind so the
shield has real work to do; they stand in for a trained controller. The
external bridge evaluates any policy speaking a one-line-per-step ASCII
protocol over pipes:

    -> "S x1 x2 ... x_n\\n"   (state, decimal ASCII, space separated)
    <- "A u1 u2 ... u_m\\n"   (action)

Replies must arrive within 100 ms; malformed or non-finite replies raise
PolicyFault, which the harness records as an aborted episode.
"""
from __future__ import annotations

import math
import os
import selectors
import subprocess
import time

import numpy as np

from .dynamics import CartPole, DynamicsModel

PROTOCOL_TIMEOUT = 0.1


class PolicyFault(RuntimeError):
    """The external policy endpoint violated the protocol."""


class Policy:
    """Deterministic state-to-control map with metadata."""

    name = "policy"
    environment = "any"

    def __call__(self, x) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


class ZeroPolicy(Policy):
    name = "zero"

    def __init__(self, model: DynamicsModel):
        self._model = model

    def __call__(self, x) -> np.ndarray:
        return np.zeros(self._model.n_u)


class GreedyGoalPolicy(Policy):
    """Cruise toward the goal along the straight bearing, blind to obstacles.

    Both particle variants regulate speed toward a cruise setpoint along the
    goal direction and brake proportionally near the goal; nothing in the
    feedback knows about obstacles, so the straight-line path is driven at
    full cruise speed regardless of what is in the way.
    """

    name = "greedy-goal"

    def __init__(self, model: DynamicsModel, accel_gain=2.5, steer_gain=4.0,
                 cruise_speed=1.3, approach_gain=1.0):
        self._model = model
        self.environment = model.name
        self._accel_gain = accel_gain
        self._steer_gain = steer_gain
        self._cruise_speed = cruise_speed
        self._approach_gain = approach_gain

    def __call__(self, x) -> np.ndarray:
        model = self._model
        x = np.asarray(x, dtype=float)
        to_goal = model.goal - x[:2]
        dist = float(np.linalg.norm(to_goal))
        speed_setpoint = min(self._cruise_speed, self._approach_gain * dist)
        if model.name == "holonomic":
            if dist < 1e-9:
                v_des = np.zeros(2)
            else:
                v_des = speed_setpoint * to_goal / dist
            return model.clamp(self._accel_gain * (v_des - x[2:4]))
        # non-holonomic: bearing + speed regulation
        v, heading = x[2], x[3]
        if dist < 1e-9:
            return model.clamp(np.array([-self._accel_gain * v, 0.0]))
        bearing = math.atan2(to_goal[1], to_goal[0])
        err = math.atan2(math.sin(bearing - heading), math.cos(bearing - heading))
        accel = self._accel_gain * (speed_setpoint - v)
        steer = self._steer_gain * err
        return model.clamp(np.array([accel, steer]))


class AggressiveCartPolePolicy(Policy):
    """Near-bang-bang drive to the target with weak angle compensation.

    The position gain saturates the force away from the target; the angle
    gains are too weak to keep the pole up once the cart is moving fast.
    """

    name = "aggressive-cartpole"
    environment = "cartpole"

    def __init__(self, model: CartPole, position_gain=30.0, velocity_gain=4.0,
                 angle_gain=8.0, spin_gain=0.8):
        self._model = model
        self._position_gain = position_gain
        self._velocity_gain = velocity_gain
        self._angle_gain = angle_gain
        self._spin_gain = spin_gain

    def __call__(self, x) -> np.ndarray:
        m = self._model
        x = np.asarray(x, dtype=float)
        u = (
            self._position_gain * (m.x_target - x[0])
            - self._velocity_gain * x[1]
            - self._angle_gain * x[2]
            - self._spin_gain * x[3]
        )
        return m.clamp(np.array([u]))


def greedy_goal_policy(model: DynamicsModel, **gains) -> GreedyGoalPolicy:
    if model.name not in ("holonomic", "nonholonomic"):
        raise ValueError("greedy goal policy is for the particle environments")
    return GreedyGoalPolicy(model, **gains)


def aggressive_cartpole_policy(model: CartPole, **gains) -> AggressiveCartPolePolicy:
    if model.name != "cartpole":
        raise ValueError("aggressive cart-pole policy is for the cart-pole environment")
    return AggressiveCartPolePolicy(model, **gains)


def default_policy(model: DynamicsModel) -> Policy:
    if model.name == "cartpole":
        return aggressive_cartpole_policy(model)
    return greedy_goal_policy(model)


# -- wire protocol ------------------------------------------------------------


def encode_state_line(x) -> str:
    return "S " + " ".join(repr(float(v)) for v in x)


def encode_action_line(u) -> str:
    return "A " + " ".join(repr(float(v)) for v in u)


def decode_state_line(line: str) -> np.ndarray:
    return _decode_line(line, "S", None)


def decode_action_line(line: str, n_u: int) -> np.ndarray:
    return _decode_line(line, "A", n_u)


def _decode_line(line: str, sentinel: str, expect: int | None) -> np.ndarray:
    parts = line.strip().split(" ")
    if not parts or parts[0] != sentinel:
        raise PolicyFault(f"expected sentinel {sentinel!r} in line {line!r}")
    try:
        values = np.array([float(p) for p in parts[1:]], dtype=float)
    except ValueError as exc:
        raise PolicyFault(f"non-numeric field in line {line!r}") from exc
    if expect is not None and values.shape[0] != expect:
        raise PolicyFault(f"expected {expect} values, got {values.shape[0]}")
    if values.size and not np.isfinite(values).all():
        raise PolicyFault(f"non-finite value in line {line!r}")
    return values


class ExternalPolicy(Policy):
    """Policy evaluated by a child process over the line protocol.

    Each evaluation writes one state line and must read back one action line
    within the timeout. Any protocol violation raises PolicyFault; the
    endpoint is owned by a single episode and never shared.
    """

    name = "external"

    def __init__(self, model: DynamicsModel, command, timeout: float = PROTOCOL_TIMEOUT):
        self._model = model
        self._timeout = timeout
        self.environment = model.name
        self._proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=False,
        )
        self._buffer = b""
        self._selector = selectors.DefaultSelector()
        os.set_blocking(self._proc.stdout.fileno(), False)
        self._selector.register(self._proc.stdout, selectors.EVENT_READ)

    def __call__(self, x) -> np.ndarray:
        line = encode_state_line(x) + "\n"
        try:
            self._proc.stdin.write(line.encode("ascii"))
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise PolicyFault("external policy endpoint closed") from exc
        reply = self._read_line(deadline=time.monotonic() + self._timeout)
        action = decode_action_line(reply, self._model.n_u)
        return self._model.clamp(action)

    def _read_line(self, deadline: float) -> str:
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise PolicyFault("external policy timed out")
            if not self._selector.select(timeout=remaining):
                raise PolicyFault("external policy timed out")
            chunk = self._proc.stdout.read(4096)
            if chunk in (b"", None) and self._proc.poll() is not None:
                raise PolicyFault("external policy process exited")
            if chunk:
                self._buffer += chunk
        raw, self._buffer = self._buffer.split(b"\n", 1)
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise PolicyFault("non-ASCII reply from external policy") from exc

    def close(self) -> None:
        try:
            self._selector.close()
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.terminate()
            self._proc.wait(timeout=1.0)
        except Exception:
            self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_policy(model: DynamicsModel, command, timeout: float = PROTOCOL_TIMEOUT):
    return ExternalPolicy(model, command, timeout)
