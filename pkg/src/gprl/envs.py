"""Ground-truth benchmark dynamics: mountain car and cart-pole balancing.

Both environments are deterministic and vectorised: ``env.step(states,
actions)`` maps arrays of shape (B, state_dim) and (B, action_dim) to the next
states and rewards. Goal/failure absorption is a function of the state itself
(an absorbed state never leaves the goal/failure region), so no extra flag has
to be threaded through rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NONE, GOAL, FAILURE = "none", "goal", "failure"


def rk4_integrate(deriv: Callable[[np.ndarray], np.ndarray], s: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``ds/dt = deriv(s)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = deriv(s)
    k2 = deriv(s + 0.5 * dt * k1)
    k3 = deriv(s + 0.5 * dt * k2)
    k4 = deriv(s + dt * k3)
    return s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True)
class EnvState:
    values: tuple[float, ...]
    absorbed: str = NONE

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


class Environment:
    name: str
    state_dim: int
    action_dim: int
    state_names: tuple[str, ...]
    action_low: np.ndarray
    action_high: np.ndarray
    start_low: np.ndarray
    start_high: np.ndarray

    def step(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def absorption(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, next_states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def clamp_actions(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=float).reshape(-1, self.action_dim)
        return np.clip(a, self.action_low, self.action_high)

    def step_state(self, s: EnvState | Sequence[float], a) -> tuple[EnvState, float]:
        """Single-transition convenience wrapper around :meth:`step`."""
        x = np.asarray(s, dtype=float)[None, :]
        nxt, r = self.step(x, np.atleast_1d(np.asarray(a, dtype=float))[None, :])
        code = self.absorption(nxt)[0]
        return EnvState(tuple(float(v) for v in nxt[0]), code), float(r[0])

    def sample_starts(self, n: int, rng: np.random.Generator, low=None, high=None) -> np.ndarray:
        """Uniform start states in the box ``[low, high]`` (defaults per benchmark)."""
        if n < 1:
            raise ValueError("need n >= 1")
        low = self.start_low if low is None else np.asarray(low, dtype=float)
        high = self.start_high if high is None else np.asarray(high, dtype=float)
        return rng.uniform(low, high, size=(n, self.state_dim))

    def config(self) -> dict:
        return {"name": self.name}


@dataclass
class MountainCar(Environment):
    """Underpowered car in a valley; goal at position 0.6.

    Standard discrete update with velocity expressed per unit of time ``dt``::

        v' = clip(v + (force*a - gravity*cos(3 p)) / dt, +-max_speed/dt)
        p' = p + v' * dt

    With ``dt=1`` this is the textbook per-step form; the default ``dt=0.01``
    keeps the same trajectories but reports velocity per second, so that its
    magnitude is comparable to the action range.
    """

    dt: float = 0.01
    force: float = 0.001
    gravity: float = 0.0025
    max_speed: float = 0.07  # per step
    min_position: float = -1.2
    goal: float = 0.6

    name: str = field(default="mc", init=False)
    state_dim: int = field(default=2, init=False)
    action_dim: int = field(default=1, init=False)
    state_names: tuple = field(default=("rho", "rho_dot"), init=False)

    def __post_init__(self):
        self.action_low = np.array([-1.0])
        self.action_high = np.array([1.0])
        self.start_low = np.array([self.min_position, 0.0])
        self.start_high = np.array([self.goal, 0.0])

    @property
    def velocity_bound(self) -> float:
        return self.max_speed / self.dt

    def absorption(self, states):
        s = np.asarray(states, dtype=float).reshape(-1, 2)
        return np.where(s[:, 0] >= self.goal, GOAL, NONE)

    def reward(self, next_states):
        s = np.asarray(next_states, dtype=float).reshape(-1, 2)
        return np.where(s[:, 0] >= self.goal, 0.0, -1.0)

    def step(self, states, actions):
        s = np.asarray(states, dtype=float).reshape(-1, 2)
        a = self.clamp_actions(actions)[:, 0]
        p, v = s[:, 0], s[:, 1]
        vmax = self.max_speed / self.dt
        v2 = np.clip(v + (self.force * a - self.gravity * np.cos(3.0 * p)) / self.dt, -vmax, vmax)
        p2 = p + v2 * self.dt
        wall = p2 <= self.min_position
        p2 = np.where(wall, self.min_position, p2)
        v2 = np.where(wall, 0.0, v2)
        p2 = np.minimum(p2, self.goal)
        nxt = np.stack([p2, v2], axis=1)
        done = p >= self.goal
        nxt[done] = s[done]
        return nxt, self.reward(nxt)

    def config(self):
        return {"name": self.name, "dt": self.dt, "force": self.force, "gravity": self.gravity,
                "max_speed": self.max_speed}


@dataclass
class CartPole(Environment):
    """Frictionless cart-pole, state (theta, theta_dot, rho, rho_dot), RK4 with dt=0.025 s.

    Angle is measured from upright, positive towards +rho. Leaving
    ``|theta| <= 0.7`` or ``|rho| <= 2.4`` freezes the state for the rest of the
    episode with reward -1.
    """

    dt: float = 0.025
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    max_force: float = 10.0
    angle_limit: float = 0.7
    position_limit: float = 2.4

    name: str = field(default="cpb", init=False)
    state_dim: int = field(default=4, init=False)
    action_dim: int = field(default=1, init=False)
    state_names: tuple = field(default=("theta", "theta_dot", "rho", "rho_dot"), init=False)

    def __post_init__(self):
        self.action_low = np.array([-self.max_force])
        self.action_high = np.array([self.max_force])
        self.start_low = np.array([-self.angle_limit, 0.0, -self.position_limit, 0.0])
        self.start_high = np.array([self.angle_limit, 0.0, self.position_limit, 0.0])

    def derivatives(self, s: np.ndarray, force: np.ndarray) -> np.ndarray:
        th, thd, _, xd = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
        total = self.cart_mass + self.pole_mass
        ml = self.pole_mass * self.half_length
        sin, cos = np.sin(th), np.cos(th)
        tmp = (force + ml * thd**2 * sin) / total
        thdd = (self.gravity * sin - cos * tmp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos**2 / total))
        xdd = tmp - ml * thdd * cos / total
        return np.stack([thd, thdd, xd, xdd], axis=1)

    def failed(self, s: np.ndarray) -> np.ndarray:
        return (np.abs(s[:, 0]) > self.angle_limit) | (np.abs(s[:, 2]) > self.position_limit)

    def absorption(self, states):
        s = np.asarray(states, dtype=float).reshape(-1, 4)
        return np.where(self.failed(s), FAILURE, NONE)

    def reward(self, next_states):
        s = np.asarray(next_states, dtype=float).reshape(-1, 4)
        th, x = np.abs(s[:, 0]), np.abs(s[:, 2])
        r = np.where((th < 0.25) & (x < 0.5), 0.0, -0.1)
        return np.where(self.failed(s), -1.0, r)

    def step(self, states, actions):
        s = np.asarray(states, dtype=float).reshape(-1, 4)
        f = self.clamp_actions(actions)[:, 0]
        nxt = rk4_integrate(lambda y: self.derivatives(y, f), s, self.dt)
        done = self.failed(s)
        nxt[done] = s[done]
        return nxt, self.reward(nxt)

    def config(self):
        return {"name": self.name, "dt": self.dt, "gravity": self.gravity,
                "cart_mass": self.cart_mass, "pole_mass": self.pole_mass,
                "half_length": self.half_length, "max_force": self.max_force}


ENVIRONMENTS = {"mc": MountainCar, "cpb": CartPole}


def make_env(name: str, **params) -> Environment:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    return cls(**params)


def mc_step(s, a, env: MountainCar | None = None) -> tuple[EnvState, float]:
    return (env or MountainCar()).step_state(s, a)


def cpb_step(s, force, env: CartPole | None = None) -> tuple[EnvState, float]:
    return (env or CartPole()).step_state(s, force)


def sample_starts(env: Environment, n: int, rng: np.random.Generator) -> np.ndarray:
    return env.sample_starts(n, rng)


def history_window(observations: Sequence[Sequence[float]], H: int) -> np.ndarray:
    """Concatenate the last ``H + 1`` observations, oldest first."""
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if H < 0 or len(obs) < H + 1:
        raise ValueError(f"need at least {H + 1} observations, got {len(obs)}")
    return obs[len(obs) - H - 1:].reshape(-1)
