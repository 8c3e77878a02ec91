"""Shared value types and the simulator-to-model state projection."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for unknown scenarios, bad parameters or malformed configs."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class ScenarioId(str, enum.Enum):
    LANE_KEEPING = "lane_keeping"
    BRAKING = "braking"

    @classmethod
    def parse(cls, value) -> "ScenarioId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ConfigError(f"unknown scenario id {value!r}") from None


@dataclass(frozen=True)
class Layout:
    """Field names of every vector a scenario works with."""

    sim: tuple[str, ...]
    model: tuple[str, ...]
    measurement: tuple[str, ...]
    control: tuple[str, ...]
    env: tuple[str, ...]
    # measurement component -> model field used by the nominal output map
    h_star: tuple[str, ...]
    # measurement components whose error is learned, with the model dims
    # their error model is defined over
    error_dims: Mapping[int, tuple[str, ...]]
    # measurement components that may report "no detection" (+inf)
    missable: tuple[int, ...] = ()


LAYOUTS: dict[ScenarioId, Layout] = {
    ScenarioId.LANE_KEEPING: Layout(
        sim=("x", "y", "theta_av", "theta_r", "v", "d"),
        model=("d", "theta_delta", "v"),
        measurement=("v_hat", "theta_delta_hat", "d_hat"),
        control=("steer",),
        env=(),
        h_star=("v", "theta_delta", "d"),
        error_dims={2: ("d", "theta_delta")},
    ),
    ScenarioId.BRAKING: Layout(
        sim=("d", "v", "d_car", "v_rear"),
        model=("d", "v"),
        measurement=("v_hat", "d_hat"),
        control=("brake",),
        env=("car_color_similarity",),
        h_star=("v", "d"),
        error_dims={1: ("d",)},
        missable=(1,),
    ),
}


def layout(scenario) -> Layout:
    return LAYOUTS[ScenarioId.parse(scenario)]


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= x <= hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.lo)
        hi = _frozen(self.hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValidationError(f"box bounds have shapes {lo.shape} and {hi.shape}")
        if not np.all(lo <= hi):
            raise ValidationError(f"box has lo > hi: {lo} vs {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def from_unit(self, u) -> np.ndarray:
        return self.lo + np.asarray(u, dtype=float) * self.width

    def to_unit(self, x) -> np.ndarray:
        w = np.where(self.width > 0, self.width, 1.0)
        return (np.asarray(x, dtype=float) - self.lo) / w

    def corners(self) -> np.ndarray:
        grids = [np.unique([a, b]) for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*grids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @classmethod
    def bounding(cls, points) -> "Box":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(pts.min(axis=0), pts.max(axis=0))

    def to_dict(self) -> dict:
        return {"lo": [float(v) for v in self.lo], "hi": [float(v) for v in self.hi]}

    @classmethod
    def from_dict(cls, d) -> "Box":
        return cls(d["lo"], d["hi"])

    def __eq__(self, other):
        return (isinstance(other, Box) and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes()))


@dataclass(frozen=True)
class EnvParams:
    """Per-episode environment parameters, in the scenario's env order."""

    values: np.ndarray = field(default_factory=lambda: _frozen([]))

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class SimState:
    values: np.ndarray
    env: EnvParams = field(default_factory=EnvParams)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class ModelState:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class Measurement:
    # +inf marks "no detection" in missable components
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class ControlInput:
    values: np.ndarray
    bounds: Box

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if not self.bounds.contains(self.values):
            raise ValidationError(f"control {self.values} outside {self.bounds}")


@dataclass(frozen=True)
class ControllerParams:
    values: np.ndarray
    bounds: Box

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if not self.bounds.contains(self.values):
            raise ValidationError(f"parameters {self.values} outside {self.bounds}")


@dataclass(frozen=True)
class Trace:
    """A closed-loop run.

    ``states`` has H+1 rows, ``measurements`` H+1 rows (one output per
    visited state) and ``controls`` H rows.  ``space`` is ``"sim"`` for
    simulator traces and ``"model"`` for surrogate traces.
    """

    scenario: ScenarioId
    dt: float
    states: np.ndarray
    measurements: np.ndarray
    controls: np.ndarray
    env: EnvParams = field(default_factory=EnvParams)
    space: str = "sim"

    def __post_init__(self):
        object.__setattr__(self, "scenario", ScenarioId.parse(self.scenario))
        states = _frozen(self.states)
        meas = _frozen(self.measurements)
        ctrl = _frozen(self.controls)
        if states.ndim != 2 or states.shape[0] < 1:
            raise ValidationError("trace needs at least one state")
        if meas.ndim != 2 or meas.shape[0] != states.shape[0]:
            raise ValidationError("one measurement per state is required")
        if ctrl.size == 0:
            ctrl = ctrl.reshape(0, len(layout(self.scenario).control))
        if ctrl.ndim != 2 or ctrl.shape[0] != states.shape[0] - 1:
            raise ValidationError("controls must have exactly H rows")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "measurements", meas)
        object.__setattr__(self, "controls", ctrl)
        object.__setattr__(self, "env", self.env if isinstance(self.env, EnvParams)
                           else EnvParams(self.env))

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    def __len__(self) -> int:
        return self.horizon

    @property
    def steps(self) -> Iterator[tuple]:
        """Yield ``(state, measurement, control)``; the final control is None."""
        for i in range(self.states.shape[0]):
            u = self.controls[i] if i < self.horizon else None
            yield self.states[i], self.measurements[i], u

    def model_states(self) -> np.ndarray:
        if self.space == "model":
            return self.states
        return alpha_array(self.states, self.scenario)


def alpha_array(states, scenario) -> np.ndarray:
    """Vectorised projection of simulator states (..., n_sim) to model states."""
    sid = ScenarioId.parse(scenario)
    x = np.asarray(states, dtype=float)
    n_sim = len(LAYOUTS[sid].sim)
    if x.shape[-1] != n_sim:
        raise ValidationError(f"{sid.value} simulator states have {n_sim} entries, got {x.shape[-1]}")
    if sid is ScenarioId.LANE_KEEPING:
        return np.stack([x[..., 5], x[..., 2] - x[..., 3], x[..., 4]], axis=-1)
    return np.stack([x[..., 0], x[..., 1]], axis=-1)


def alpha(x_s: SimState | Sequence[float], scenario) -> ModelState:
    """Project a simulator state onto the surrogate state.

    Lane keeping keeps (d, theta_av - theta_r, v); braking keeps (d, v)
    and drops everything about the rear car.
    """
    values = x_s.values if isinstance(x_s, SimState) else x_s
    return ModelState(alpha_array(values, scenario))


def replay_check(trace: Trace, scenario=None, tol: float = 1e-9) -> bool:
    """Re-run the recorded inputs through the dynamics and compare states."""
    from .sim import default_scenario, step_dynamics

    if trace.space != "sim":
        raise ValidationError("only simulator traces can be replayed")
    if scenario is None or isinstance(scenario, (str, ScenarioId)):
        scenario = default_scenario(scenario or trace.scenario)
    n_sim = len(layout(scenario.id).sim)
    if trace.states.shape[1] != n_sim or trace.controls.shape[1] != len(layout(scenario.id).control):
        raise ValidationError("trace dimensions do not match the scenario")
    x = trace.states[0].copy()
    for i in range(trace.horizon):
        x = step_dynamics(scenario, x, trace.controls[i])
        if not np.all(np.abs(x - trace.states[i + 1]) <= tol):
            return False
    return True


def is_finite_or_inf(values) -> bool:
    return all(math.isfinite(v) or v == math.inf for v in np.asarray(values, dtype=float).ravel())
