"""Deterministic scenario simulators with emulated faulty perception.

The simulator is ``(f_S, h_S, X_S^0)``: ``step_dynamics`` is ``f_S`` and the
emulators' ``perceive`` is ``h_S``.  Emulator noise comes from a seeded hash
of the quantised state rather than an RNG stream, so the perception output
is a function of the state alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (Box, ConfigError, EnvParams, ScenarioId, SimState, Trace,
                   ValidationError, layout)

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def hashfrac(seed: int, salt: int, values, quantum: float = 1e-3) -> float:
    """Uniform fraction in [0, 1) from a hash of quantised values."""
    h = splitmix64((seed & MASK64) ^ splitmix64(salt))
    for v in values:
        q = int(round(float(v) / quantum)) & MASK64
        h = splitmix64(h ^ q)
    return (h >> 11) * (1.0 / (1 << 53))


# --- scenario parameters -------------------------------------------------------

@dataclass(frozen=True)
class LaneParams:
    wheelbase: float = 2.9
    steer_max: float = 0.5


@dataclass(frozen=True)
class BrakeParams:
    u_max: float = 2.5
    # rear car: stops delta_stop behind a point rear_slot metres before the cones
    rear_delta_stop: float = 1.0
    rear_slot: float = 1.8
    # ego controller: the "optimal force" branch aims to stop this far from the cones
    standoff: float = 2.0
    eps_num: float = 1e-3


@dataclass(frozen=True)
class Scenario:
    """A built-in scenario.

    ``x0_box`` ranges over the free initial-condition parameters
    (``x0_names``); :meth:`initial_state` expands them to a full simulator
    state.  ``model_x0_box`` is the matching surrogate initial set.
    """

    id: ScenarioId
    x0_names: tuple[str, ...]
    x0_box: Box
    env_box: Box
    dt: float
    horizon: int
    control_bounds: Box
    params: LaneParams | BrakeParams

    def __post_init__(self):
        object.__setattr__(self, "id", ScenarioId.parse(self.id))
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1 step")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.x0_box.dim != len(self.x0_names):
            raise ConfigError("x0_box does not match x0_names")
        if self.env_box.dim != len(layout(self.id).env):
            raise ConfigError("env_box does not match the scenario's environment parameters")

    @property
    def search_box(self) -> Box:
        return Box(np.concatenate([self.x0_box.lo, self.env_box.lo]),
                   np.concatenate([self.x0_box.hi, self.env_box.hi]))

    @property
    def search_names(self) -> tuple[str, ...]:
        return self.x0_names + layout(self.id).env

    def split(self, point) -> tuple[SimState, EnvParams]:
        point = np.asarray(point, dtype=float)
        n = self.x0_box.dim
        env = EnvParams(point[n:])
        return self.initial_state(point[:n], env), env

    def initial_state(self, x0, env: EnvParams | None = None) -> SimState:
        env = env if env is not None else EnvParams(self.env_box.lo)
        x0 = np.asarray(x0, dtype=float)
        if self.id is ScenarioId.LANE_KEEPING:
            d0, th0, v0 = x0
            return SimState([0.0, d0, th0, 0.0, v0, d0], env)
        d0, v0, dcar0 = x0
        return SimState([d0, v0, dcar0, v0], env)

    @property
    def model_x0_box(self) -> Box:
        if self.id is ScenarioId.LANE_KEEPING:
            return self.x0_box  # (d, theta_delta, v) already
        return Box(self.x0_box.lo[:2], self.x0_box.hi[:2])


def default_scenario(scenario, **overrides) -> Scenario:
    sid = ScenarioId.parse(scenario)
    if sid is ScenarioId.LANE_KEEPING:
        kph = 1000.0 / 3600.0
        base = Scenario(
            id=sid,
            x0_names=("d0", "theta_delta0", "v0"),
            x0_box=Box([-0.4, -0.25, 15 * kph], [0.4, 0.25, 25 * kph]),
            env_box=Box([], []),
            dt=0.05,
            horizon=160,
            control_bounds=Box([-0.5], [0.5]),
            params=LaneParams(),
        )
    else:
        base = Scenario(
            id=sid,
            x0_names=("d0", "v0", "d_car0"),
            x0_box=Box([40.0, 8.0, 8.0], [60.0, 12.0, 15.0]),
            env_box=Box([0.0], [1.0]),
            dt=0.05,
            horizon=300,
            control_bounds=Box([0.0], [2.5]),
            params=BrakeParams(),
        )
    return replace(base, **overrides) if overrides else base


# --- perception emulators -----------------------------------------------------

@dataclass(frozen=True)
class LaneEmulator:
    """Lane-deviation estimate that is good near the lane centre only.

    Inside ``|d| <= near_d`` and ``|theta_delta| <= near_theta`` the estimate
    carries at most ``small_noise`` metres of error; elsewhere it is biased
    away from the centre by ``far_base + far_span * h`` with ``h`` in [0, 1).
    """

    seed: int = 0
    near_d: float = 0.3
    near_theta: float = 0.15
    small_noise: float = 0.03
    far_base: float = 0.25
    far_span: float = 0.5
    quantum: float = 1e-3

    def perceive(self, x_s, env=None) -> np.ndarray:
        x = [float(v) for v in (x_s.values if isinstance(x_s, SimState) else x_s)]
        v, d = x[4], x[5]
        th = x[2] - x[3]
        h = hashfrac(self.seed, 1, x, self.quantum)
        if abs(d) <= self.near_d and abs(th) <= self.near_theta:
            e = self.small_noise * (2.0 * h - 1.0)
        else:
            e = math.copysign(1.0, d) * (self.far_base + self.far_span * h) if d != 0.0 else 0.0
        return np.array([v, th, d + e])


@dataclass(frozen=True)
class BrakeEmulator:
    """Cone-distance estimate from bounding-box size.

    Beyond ``miss_range`` the cones are missed unless the hash gate falls
    below ``detect_prob``.  Between ``reliable_range`` and beyond, the
    relative error depends on how close the broken car's colour is to the
    cones'; below ``reliable_range`` it is small.
    """

    seed: int = 0
    miss_range: float = 35.2
    detect_prob: float = 0.3
    reliable_range: float = 16.5
    color_threshold: float = 0.7
    confused_eta: tuple[float, float] = (-0.6, -0.3)
    mid_eta: tuple[float, float] = (-0.2, 0.2)
    near_eta: tuple[float, float] = (-0.05, 0.05)
    quantum: float = 1e-3

    def perceive(self, x_s, env=None) -> np.ndarray:
        x = [float(v) for v in (x_s.values if isinstance(x_s, SimState) else x_s)]
        if env is None:
            env = x_s.env if isinstance(x_s, SimState) else EnvParams([0.0])
        c = float(np.asarray(env.values if isinstance(env, EnvParams) else env)[0])
        d, v = x[0], x[1]
        key = x + [c]
        if d > self.miss_range and hashfrac(self.seed, 2, key, self.quantum) >= self.detect_prob:
            return np.array([v, math.inf])
        if d >= self.reliable_range:
            lo, hi = self.confused_eta if c > self.color_threshold else self.mid_eta
        else:
            lo, hi = self.near_eta
        eta = lo + (hi - lo) * hashfrac(self.seed, 3, key, self.quantum)
        return np.array([v, d * (1.0 + eta)])


@dataclass(frozen=True)
class PerfectEmulator:
    """Reports the nominal output exactly (no perception error)."""

    scenario: ScenarioId = ScenarioId.LANE_KEEPING
    seed: int = 0

    def perceive(self, x_s, env=None) -> np.ndarray:
        x = np.asarray(x_s.values if isinstance(x_s, SimState) else x_s, dtype=float)
        if ScenarioId.parse(self.scenario) is ScenarioId.LANE_KEEPING:
            return np.array([x[4], x[2] - x[3], x[5]])
        return np.array([x[1], x[0]])


def default_emulator(scenario, seed: int = 0, **overrides):
    sid = ScenarioId.parse(scenario)
    cls = LaneEmulator if sid is ScenarioId.LANE_KEEPING else BrakeEmulator
    return cls(seed=seed, **overrides)


def perceive_lane(emulator: LaneEmulator, x_s) -> np.ndarray:
    return emulator.perceive(x_s)


def perceive_brake(emulator: BrakeEmulator, x_s, env=None) -> np.ndarray:
    return emulator.perceive(x_s, env)


# --- dynamics -------------------------------------------------------------------

def _lane_step(x, u, dt, wheelbase):
    px, py, th_av, th_r, v, d = x
    th_av = th_av + dt * (v / wheelbase) * math.tan(u)
    px = px + dt * v * math.cos(th_av)
    py = py + dt * v * math.sin(th_av)
    d = d + dt * v * math.sin(th_av - th_r)
    return [px, py, th_av, th_r, v, d]


def rear_car_policy(v_rear: float, dist_to_stop_point: float, delta_stop: float = 1.0,
                    u_max: float = 2.5) -> float:
    """Constant-deceleration braking that stops ``delta_stop`` short of the target."""
    room = dist_to_stop_point - delta_stop
    if room <= 0.0:
        return u_max
    return min(max(v_rear * v_rear / (2.0 * room), 0.0), u_max)


def _brake_step(x, u, dt, params: BrakeParams):
    d, v, d_car, v_rear = x
    u_rear = rear_car_policy(v_rear, d + d_car - params.rear_slot, params.rear_delta_stop,
                             params.u_max)
    return [d - dt * v,
            max(0.0, v - dt * u),
            d_car + dt * (v - v_rear),
            max(0.0, v_rear - dt * u_rear)]


def lane_keeping_dynamics(x_s, u, dt: float, params: LaneParams = LaneParams()) -> np.ndarray:
    """Kinematic bicycle on a straight road; speed is held constant."""
    x = np.asarray(x_s.values if isinstance(x_s, SimState) else x_s, dtype=float)
    return np.array(_lane_step(list(x), float(np.ravel(u)[0]), dt, params.wheelbase))


def braking_dynamics(x_s, u, dt: float, params: BrakeParams = BrakeParams()) -> np.ndarray:
    """Ego decelerates by the braking magnitude ``u``; the rear car by its own law."""
    x = np.asarray(x_s.values if isinstance(x_s, SimState) else x_s, dtype=float)
    return np.array(_brake_step(list(x), float(np.ravel(u)[0]), dt, params))


def step_dynamics(scenario: Scenario, x, u) -> np.ndarray:
    if scenario.id is ScenarioId.LANE_KEEPING:
        return lane_keeping_dynamics(x, u, scenario.dt, scenario.params)
    return braking_dynamics(x, u, scenario.dt, scenario.params)


# --- controllers ------------------------------------------------------------------

def controller_lane(p, y, steer_max: float = 0.5) -> float:
    """Linear steering law on measured heading error and deviation."""
    u = p[0] * y[1] + p[1] * y[2]
    return min(max(u, -steer_max), steer_max)


def controller_brake(p, y, u_max: float = 2.5, standoff: float = 0.0,
                     eps_num: float = 1e-3) -> float:
    """Cruise until cones are seen, slow toward ``p[1]``, stop once ``d_hat <= p[0]``."""
    v_hat, d_hat = float(y[0]), float(y[1])
    if d_hat == math.inf:
        return 0.0
    if d_hat <= p[0]:
        room = max(d_hat - standoff, eps_num)
        return min(max(v_hat * v_hat / (2.0 * room), 0.0), u_max)
    return min(max(v_hat - p[1], 0.0), u_max)


def policy_batch(scenario: Scenario, p, y: np.ndarray) -> np.ndarray:
    """Vectorised controller: ``y`` is ``(..., n_meas)``, returns ``(...)``."""
    if scenario.id is ScenarioId.LANE_KEEPING:
        steer_max = scenario.params.steer_max
        return np.clip(p[0] * y[..., 1] + p[1] * y[..., 2], -steer_max, steer_max)
    prm = scenario.params
    v_hat, d_hat = y[..., 0], y[..., 1]
    finite = np.isfinite(d_hat)
    safe_d = np.where(finite, d_hat, 1.0)
    room = np.maximum(safe_d - prm.standoff, prm.eps_num)
    stop = np.clip(v_hat * v_hat / (2.0 * room), 0.0, prm.u_max)
    slow = np.clip(v_hat - p[1], 0.0, prm.u_max)
    u = np.where(safe_d <= p[0], stop, slow)
    return np.where(finite, u, 0.0)


def policy(scenario: Scenario, p, y) -> float:
    if scenario.id is ScenarioId.LANE_KEEPING:
        return controller_lane(p, y, scenario.params.steer_max)
    prm = scenario.params
    return controller_brake(p, y, prm.u_max, prm.standoff, prm.eps_num)


# --- closed loop -------------------------------------------------------------------

class SimulationFault(RuntimeError):
    """Non-finite state during integration; carries the partial trace."""

    def __init__(self, message, trace: Trace | None = None):
        super().__init__(message)
        self.trace = trace


def _trace(scenario, states, meas, ctrl, env):
    return Trace(scenario.id, scenario.dt, np.array(states), np.array(meas),
                 np.array(ctrl, dtype=float).reshape(len(ctrl), 1), env)


def simulate(scenario: Scenario, emulator, p, x0: SimState | None = None,
             env: EnvParams | None = None, check_bounds: bool = True) -> Trace:
    """Run the closed loop ``y = h_S(x)``, ``u = pi(p, y)``, ``x' = f_S(u, x)``."""
    p = [float(v) for v in np.ravel(getattr(p, "values", p))]
    if x0 is None:
        x0 = scenario.initial_state(scenario.x0_box.lo)
    env = env if env is not None else x0.env
    x = [float(v) for v in x0.values]
    if len(x) != len(layout(scenario.id).sim):
        raise ValidationError("initial state has the wrong dimension")
    if check_bounds and not scenario.env_box.contains(env.values, tol=1e-12):
        raise ValidationError(f"environment {env.values} outside {scenario.env_box}")
    lane = scenario.id is ScenarioId.LANE_KEEPING
    prm = scenario.params
    lo, hi = float(scenario.control_bounds.lo[0]), float(scenario.control_bounds.hi[0])
    states, meas, ctrl = [x], [], []
    for i in range(scenario.horizon + 1):
        y = emulator.perceive(x, env)
        meas.append(y)
        if i == scenario.horizon:
            break
        u = min(max(policy(scenario, p, y), lo), hi)
        ctrl.append(u)
        x = _lane_step(x, u, scenario.dt, prm.wheelbase) if lane else _brake_step(x, u, scenario.dt, prm)
        if not all(math.isfinite(v) for v in x):
            meas.append(np.full(len(layout(scenario.id).measurement), math.nan))
            partial = _trace(scenario, states + [x], meas, ctrl, env)
            raise SimulationFault(f"non-finite state at step {i + 1}", partial)
        states.append(x)
    return _trace(scenario, states, meas, ctrl, env)


def simulate_point(scenario: Scenario, emulator, p, point) -> Trace:
    """Simulate from a search-space point (free x0 dims followed by env dims)."""
    x0, env = scenario.split(point)
    return simulate(scenario, emulator, p, x0, env)


@dataclass
class Simulator:
    """Bundle of scenario and emulator; the object the falsifier drives."""

    scenario: Scenario
    emulator: object = field(default=None)

    def __post_init__(self):
        if self.emulator is None:
            self.emulator = default_emulator(self.scenario.id)

    def run(self, p, point) -> Trace:
        return simulate_point(self.scenario, self.emulator, p, point)
