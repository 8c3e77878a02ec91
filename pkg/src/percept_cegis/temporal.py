"""Bounded-horizon temporal formulas over linear predicates.

Formulas are trees of ``Pred``, ``And``, ``Always`` and ``Eventually``
with integer step windows.  Robustness uses the usual min/max semantics
and is computed for whole batches of traces at once: every function here
accepts state arrays shaped ``(..., T, n)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ConfigError, ScenarioId, Trace, ValidationError, alpha_array, layout


@dataclass(frozen=True)
class Pred:
    """``b - a.x >= 0`` over a simulator or model state."""

    a: tuple[float, ...]
    b: float
    target: str = "model"

    def __post_init__(self):
        if self.target not in ("sim", "model"):
            raise ValidationError(f"predicate target must be 'sim' or 'model', got {self.target!r}")
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", float(self.b))


@dataclass(frozen=True)
class And:
    children: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Always:
    lo: int
    hi: int
    child: "Formula"

    def __post_init__(self):
        _check_window(self.lo, self.hi)


@dataclass(frozen=True)
class Eventually:
    lo: int
    hi: int
    child: "Formula"

    def __post_init__(self):
        _check_window(self.lo, self.hi)


Formula = Union[Pred, And, Always, Eventually]
SafetyFormula = Formula


def _check_window(lo, hi):
    if int(lo) != lo or int(hi) != hi or not 0 <= lo <= hi:
        raise ValidationError(f"temporal window [{lo}, {hi}] must satisfy 0 <= lo <= hi")


def depth(f: Formula) -> int:
    """Number of future steps the formula looks at."""
    if isinstance(f, Pred):
        return 0
    if isinstance(f, And):
        return max((depth(c) for c in f.children), default=0)
    return f.hi + depth(f.child)


def predicates(f: Formula) -> list[Pred]:
    if isinstance(f, Pred):
        return [f]
    if isinstance(f, And):
        return [p for c in f.children for p in predicates(c)]
    return predicates(f.child)


def target_of(f: Formula) -> str | None:
    targets = {p.target for p in predicates(f)}
    if len(targets) > 1:
        raise ValidationError("formula mixes simulator and model predicates")
    return targets.pop() if targets else None


def signal(f: Formula, states) -> np.ndarray:
    """Robustness at every start index that fits the trace.

    ``states`` is ``(..., T, n)``; the result is ``(..., T - depth(f))``.
    """
    x = np.asarray(states, dtype=float)
    if isinstance(f, Pred):
        a = np.asarray(f.a)
        if a.shape[0] != x.shape[-1]:
            raise ValidationError(f"predicate has {a.shape[0]} coefficients, state has {x.shape[-1]}")
        return f.b - x @ a
    if isinstance(f, And):
        if not f.children:
            return np.full(x.shape[:-1], math.inf)
        parts = [signal(c, x) for c in f.children]
        n = min(p.shape[-1] for p in parts)
        return np.min(np.stack([p[..., :n] for p in parts]), axis=0)
    s = signal(f.child, x)
    n_out = s.shape[-1] - f.hi
    if n_out < 1:
        raise ValidationError("temporal window exceeds the trace")
    windows = sliding_window_view(s[..., f.lo:], f.hi - f.lo + 1, axis=-1)[..., :n_out, :]
    if isinstance(f, Always):
        return windows.min(axis=-1)
    return windows.max(axis=-1)


def _states_for(f: Formula, trace: Trace) -> np.ndarray:
    target = target_of(f)
    if target is None or target == trace.space:
        return trace.states
    if target == "model":
        return alpha_array(trace.states, trace.scenario)
    raise ValidationError("a simulator-state formula cannot be evaluated on a model trace")


def robustness(f: Formula, trace: Trace, at: int = 0) -> float:
    states = _states_for(f, trace)
    if at < 0 or at + depth(f) > states.shape[0] - 1:
        raise ValidationError(
            f"formula needs {depth(f)} steps after index {at}, trace has {states.shape[0] - 1}")
    return float(signal(f, states[at:at + depth(f) + 1])[0])


def evaluate_bool(f: Formula, trace: Trace) -> bool:
    # ties belong to the (closed) safe set
    return robustness(f, trace, 0) >= 0.0


def robustness_batch(f: Formula, states) -> np.ndarray:
    """Robustness at index 0 for a batch of state arrays ``(N, T, n)``."""
    x = np.asarray(states, dtype=float)
    if depth(f) > x.shape[-2] - 1:
        raise ValidationError("temporal window exceeds the trace")
    return signal(f, x[..., :depth(f) + 1, :])[..., 0]


# --- built-in specifications -------------------------------------------------

def _coef(names, **weights) -> tuple[float, ...]:
    return tuple(float(weights.get(n, 0.0)) for n in names)


def abs_le(names, target, bound, **weights) -> And:
    """``|w.x| <= bound`` as the conjunction of two half-spaces."""
    a = np.array(_coef(names, **weights))
    return And((Pred(tuple(a), bound, target), Pred(tuple(-a), bound, target)))


def builtin_specs(scenario, dt: float, horizon: int, eps1: float = 0.5, eps2: float = 0.25,
                  settle_time: float = 4.0, reach_and_stay: bool = True) -> tuple[Formula, Formula]:
    """Return ``(phi_S, phi_M)`` for a built-in scenario."""
    sid = ScenarioId.parse(scenario)
    lay = layout(sid)
    if horizon < 1:
        raise ConfigError("horizon must be at least 1 step")
    if sid is ScenarioId.LANE_KEEPING:
        k = int(round(settle_time / dt))
        if k > horizon:
            raise ConfigError(f"settle time {settle_time}s exceeds the horizon")

        def lane_formula(names, target, theta):
            bounded = Always(0, horizon, abs_le(names, target, 1.0, d=1.0))
            goal = And(abs_le(names, target, 0.1, **theta).children
                       + abs_le(names, target, 0.3, d=1.0).children)
            reach = Eventually(0, k, Always(0, horizon - k, goal)) if reach_and_stay \
                else Eventually(0, k, goal)
            return And((bounded, reach))

        phi_s = lane_formula(lay.sim, "sim", {"theta_av": 1.0, "theta_r": -1.0})
        phi_m = lane_formula(lay.model, "model", {"theta_delta": 1.0})
        return phi_s, phi_m
    # d >= eps1  <=>  -eps1 - (-d) >= 0
    phi_s = Always(0, horizon, And((
        Pred(_coef(lay.sim, d=-1.0), -eps1, "sim"),
        Pred(_coef(lay.sim, d_car=-1.0), -eps2, "sim"),
    )))
    phi_m = Always(0, horizon, Pred(_coef(lay.model, d=-1.0), -eps1, "model"))
    return phi_s, phi_m


# --- s-expression grammar -----------------------------------------------------
#
#   formula := (and formula*) | (always I J formula) | (eventually I J formula)
#            | (le expr expr) | (ge expr expr) | true
#   expr    := number | name | (+ expr*) | (- expr expr?) | (* number expr) | (abs expr)
#
# ``abs`` is accepted only as ``(le (abs e) c)``, which expands to two
# half-spaces.  Names are state fields of the chosen target; on lane-keeping
# simulator states ``theta_delta`` is an alias for ``theta_av - theta_r``.

_TOKEN = re.compile(r"\(|\)|[^\s()]+")

_ALIASES = {
    (ScenarioId.LANE_KEEPING, "sim"): {"theta_delta": {"theta_av": 1.0, "theta_r": -1.0}},
}


def _tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text)


def _read(tokens, pos):
    if pos >= len(tokens):
        raise ConfigError("unexpected end of formula")
    tok = tokens[pos]
    if tok == "(":
        items = []
        pos += 1
        while pos < len(tokens) and tokens[pos] != ")":
            item, pos = _read(tokens, pos)
            items.append(item)
        if pos >= len(tokens):
            raise ConfigError("unbalanced parentheses in formula")
        return items, pos + 1
    if tok == ")":
        raise ConfigError("unexpected ')' in formula")
    return tok, pos + 1


def _number(tok) -> float | None:
    try:
        return float(tok)
    except (TypeError, ValueError):
        return None


class _Parser:
    def __init__(self, scenario, target):
        self.sid = ScenarioId.parse(scenario)
        self.target = target
        lay = layout(self.sid)
        self.names = lay.sim if target == "sim" else lay.model
        self.aliases = _ALIASES.get((self.sid, target), {})

    def linear(self, e) -> tuple[dict[str, float], float]:
        if isinstance(e, str):
            num = _number(e)
            if num is not None:
                return {}, num
            if e in self.names:
                return {e: 1.0}, 0.0
            if e in self.aliases:
                return dict(self.aliases[e]), 0.0
            raise ConfigError(f"unknown state field {e!r} for {self.target} states")
        if not e:
            raise ConfigError("empty expression")
        op, args = e[0], e[1:]
        if op == "+":
            coef, const = {}, 0.0
            for arg in args:
                c, k = self.linear(arg)
                for n, v in c.items():
                    coef[n] = coef.get(n, 0.0) + v
                const += k
            return coef, const
        if op == "-":
            if len(args) == 1:
                c, k = self.linear(args[0])
                return {n: -v for n, v in c.items()}, -k
            if len(args) != 2:
                raise ConfigError("'-' takes one or two arguments")
            c1, k1 = self.linear(args[0])
            c2, k2 = self.linear(args[1])
            coef = dict(c1)
            for n, v in c2.items():
                coef[n] = coef.get(n, 0.0) - v
            return coef, k1 - k2
        if op == "*":
            if len(args) != 2 or _number(args[0]) is None:
                raise ConfigError("'*' takes a numeric constant and an expression")
            c, k = self.linear(args[1])
            s = float(args[0])
            return {n: s * v for n, v in c.items()}, s * k
        if op == "abs":
            raise ConfigError("'abs' is only allowed as (le (abs e) c)")
        raise ConfigError(f"unknown operator {op!r}")

    def halfspace(self, lhs, rhs) -> Pred:
        """``lhs <= rhs`` as a predicate."""
        c1, k1 = self.linear(lhs)
        c2, k2 = self.linear(rhs)
        coef = dict(c1)
        for n, v in c2.items():
            coef[n] = coef.get(n, 0.0) - v
        return Pred(_coef(self.names, **coef), k2 - k1, self.target)

    def formula(self, e) -> Formula:
        if e == "true":
            return And(())
        if not isinstance(e, list) or not e:
            raise ConfigError(f"expected a formula, got {e!r}")
        op, args = e[0], e[1:]
        if op == "and":
            return And(tuple(self.formula(a) for a in args))
        if op in ("always", "eventually"):
            if len(args) != 3:
                raise ConfigError(f"'{op}' takes two step bounds and a formula")
            lo, hi = _number(args[0]), _number(args[1])
            if lo is None or hi is None or lo != int(lo) or hi != int(hi):
                raise ConfigError(f"'{op}' bounds must be integers")
            cls = Always if op == "always" else Eventually
            try:
                return cls(int(lo), int(hi), self.formula(args[2]))
            except ValidationError as exc:
                raise ConfigError(str(exc)) from None
        if op in ("le", "ge"):
            if len(args) != 2:
                raise ConfigError(f"'{op}' takes two expressions")
            lhs, rhs = args if op == "le" else args[::-1]
            if isinstance(lhs, list) and lhs and lhs[0] == "abs":
                if op != "le" or len(lhs) != 2:
                    raise ConfigError("'abs' is only allowed as (le (abs e) c)")
                inner = lhs[1]
                return And((self.halfspace(inner, rhs), self.halfspace(["-", rhs], inner)))
            return self.halfspace(lhs, rhs)
        raise ConfigError(f"unknown formula operator {op!r}")


def parse_formula(text: str, scenario, target: str = "model") -> Formula:
    """Parse the prefix s-expression grammar documented above."""
    tokens = _tokenize(text)
    tree, pos = _read(tokens, 0)
    if pos != len(tokens):
        raise ConfigError("trailing tokens after formula")
    return _Parser(scenario, target).formula(tree)


def format_formula(f: Formula, scenario) -> str:
    """Inverse of :func:`parse_formula` (predicates print in expanded form)."""
    if isinstance(f, Pred):
        lay = layout(scenario)
        names = lay.sim if f.target == "sim" else lay.model
        terms = [f"(* {repr(a)} {n})" for a, n in zip(f.a, names) if a != 0.0]
        lhs = "(+ " + " ".join(terms) + ")" if terms else "0"
        return f"(le {lhs} {repr(f.b)})"
    if isinstance(f, And):
        if not f.children:
            return "true"
        return "(and " + " ".join(format_formula(c, scenario) for c in f.children) + ")"
    op = "always" if isinstance(f, Always) else "eventually"
    return f"({op} {f.lo} {f.hi} {format_formula(f.child, scenario)})"
