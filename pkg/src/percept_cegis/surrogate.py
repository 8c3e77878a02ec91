"""Surrogate model: expert dynamics plus a learned interval-valued perception relation.

Each measurement component is ``{h*_i(x)} (+) E_i(x)``: the nominal output
shifted by an error set.  ``E_i`` is a union of per-cluster intervals
``[low_j(x), up_j(x)]`` over the clusters whose box domain contains ``x``,
and ``{0}`` outside every domain.  Components that can miss a detection
also carry a ``miss_region`` box where ``+inf`` is a possible output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Box, ModelState, ScenarioId, Trace, ValidationError, layout
from .sim import Scenario, default_scenario, policy_batch
from .temporal import Formula, predicates, robustness_batch

TOL = 1e-9


@dataclass(frozen=True)
class Cluster:
    """One local error model: box ``domain`` over model dims ``dims`` with
    affine bounds ``a_low . x + b_low <= e <= a_up . x + b_up``."""

    component: int
    dims: tuple[int, ...]
    domain: Box
    a_low: np.ndarray
    b_low: float
    a_up: np.ndarray
    b_up: float

    def __post_init__(self):
        for name in ("a_low", "a_up"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "b_low", float(self.b_low))
        object.__setattr__(self, "b_up", float(self.b_up))
        if not (self.domain.dim == len(self.dims) == self.a_low.size == self.a_up.size):
            raise ValidationError("cluster dims, domain and coefficients disagree")

    def low(self, x_m) -> np.ndarray:
        return np.asarray(x_m, dtype=float)[..., self.dims] @ self.a_low + self.b_low

    def up(self, x_m) -> np.ndarray:
        return np.asarray(x_m, dtype=float)[..., self.dims] @ self.a_up + self.b_up

    def covers(self, x_m, tol: float = 0.0):
        return self.domain.contains(np.asarray(x_m, dtype=float)[..., self.dims], tol)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "A_low": [float(v) for v in self.a_low], "b_low": self.b_low,
            "A_up": [float(v) for v in self.a_up], "b_up": self.b_up,
        }


@dataclass(frozen=True)
class ComponentError:
    component: int
    dims: tuple[int, ...]
    clusters: tuple[Cluster, ...] = ()
    miss_region: Box | None = None

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    def in_miss_region(self, x_m, tol: float = TOL):
        x = np.asarray(x_m, dtype=float)
        if self.miss_region is None:
            return np.zeros(x.shape[:-1], dtype=bool)
        return self.miss_region.contains(x[..., self.dims], tol)


@dataclass(frozen=True)
class ErrorModel:
    """Per-component error sets; components absent here have zero error."""

    components: tuple[ComponentError, ...] = ()

    def __post_init__(self):
        comps = tuple(sorted(self.components, key=lambda c: c.component))
        object.__setattr__(self, "components", comps)

    def get(self, component: int) -> ComponentError | None:
        for c in self.components:
            if c.component == component:
                return c
        return None

    @property
    def n_clusters(self) -> dict[int, int]:
        return {c.component: len(c.clusters) for c in self.components}

    @classmethod
    def empty(cls, scenario) -> "ErrorModel":
        lay = layout(scenario)
        return cls(tuple(ComponentError(i, tuple(lay.model.index(n) for n in dims))
                         for i, dims in lay.error_dims.items()))


@dataclass(frozen=True)
class ComponentSet:
    """Possible values of one measurement component."""

    intervals: tuple[tuple[float, float], ...]
    may_miss: bool = False

    def contains(self, y: float, tol: float = TOL) -> bool:
        if y == math.inf:
            return self.may_miss
        if not math.isfinite(y):
            return False
        return any(lo - tol <= y <= hi + tol for lo, hi in self.intervals)


@dataclass(frozen=True)
class SurrogateModel:
    scenario: Scenario
    error: ErrorModel
    # model-state index feeding each measurement component
    h_star: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.h_star:
            lay = layout(self.scenario.id)
            object.__setattr__(self, "h_star", tuple(lay.model.index(n) for n in lay.h_star))

    @classmethod
    def expert(cls, scenario: Scenario) -> "SurrogateModel":
        """The initial guess: identity nominal output, zero error everywhere."""
        return cls(scenario, ErrorModel.empty(scenario.id))

    @property
    def x0_box(self) -> Box:
        return self.scenario.model_x0_box

    def with_error(self, error: ErrorModel) -> "SurrogateModel":
        return SurrogateModel(self.scenario, error, self.h_star)

    def nominal(self, x_m) -> np.ndarray:
        return np.asarray(x_m, dtype=float)[..., list(self.h_star)]

    # --- JSON -----------------------------------------------------------------
    def to_dict(self) -> dict:
        lay = layout(self.scenario.id)
        comps = []
        for c in self.error.components:
            comps.append({
                "index": c.component,
                "name": lay.measurement[c.component],
                "dims": [lay.model[d] for d in c.dims],
                "clusters": [cl.to_dict() for cl in c.clusters],
                "miss_region": c.miss_region.to_dict() if c.miss_region is not None else None,
            })
        return {
            "scenario": self.scenario.id.value,
            "h_star": [lay.model[i] for i in self.h_star],
            "x0_box": self.x0_box.to_dict(),
            "error": comps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict, scenario: Scenario | None = None) -> "SurrogateModel":
        sid = ScenarioId.parse(doc["scenario"])
        scenario = scenario or default_scenario(sid)
        if scenario.id is not sid:
            raise ValidationError("model document is for a different scenario")
        lay = layout(sid)
        h_star = tuple(lay.model.index(n) for n in doc["h_star"])
        comps = []
        for c in doc["error"]:
            dims = tuple(lay.model.index(n) for n in c["dims"])
            clusters = tuple(
                Cluster(c["index"], dims, Box.from_dict(cl["domain"]), cl["A_low"], cl["b_low"],
                        cl["A_up"], cl["b_up"])
                for cl in c["clusters"])
            miss = Box.from_dict(c["miss_region"]) if c["miss_region"] is not None else None
            comps.append(ComponentError(c["index"], dims, clusters, miss))
        return cls(scenario, ErrorModel(tuple(comps)), h_star)

    @classmethod
    def from_json(cls, text: str, scenario: Scenario | None = None) -> "SurrogateModel":
        return cls.from_dict(json.loads(text), scenario)


# --- dynamics and output relation -------------------------------------------------

def f_M_step(m: SurrogateModel, x_m, u, dt: float | None = None) -> np.ndarray:
    """Expert dynamics on model states; vectorised over leading axes."""
    sc = m.scenario
    x = np.asarray(getattr(x_m, "values", x_m), dtype=float)
    u = np.asarray(getattr(u, "values", u), dtype=float)
    if u.ndim and u.shape[-1:] == (1,) and x.ndim == 1:
        u = u[0]
    return _step(sc, x, u, sc.dt if dt is None else dt)


def _step(sc: Scenario, x, u, dt):
    out = np.empty_like(x)
    if sc.id is ScenarioId.LANE_KEEPING:
        v = x[..., 2]
        th = x[..., 1] + dt * (v / sc.params.wheelbase) * np.tan(u)
        out[..., 0] = x[..., 0] + dt * v * np.sin(th)
        out[..., 1] = th
        out[..., 2] = v
        return out
    out[..., 0] = x[..., 0] - dt * x[..., 1]
    out[..., 1] = np.maximum(0.0, x[..., 1] - dt * u)
    return out


def output_set(m: SurrogateModel, x_m) -> list[ComponentSet]:
    """The set-valued output ``h_M(x_m)``, one entry per measurement component."""
    x = np.asarray(getattr(x_m, "values", x_m), dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("model state must be finite")
    nominal = m.nominal(x)
    out = []
    for i, h in enumerate(nominal):
        comp = m.error.get(i)
        if comp is None:
            out.append(ComponentSet(((float(h), float(h)),)))
            continue
        hits = [c for c in comp.clusters if c.covers(x)]
        if hits:
            iv = tuple((float(h + c.low(x)), float(h + c.up(x))) for c in hits)
        else:
            iv = ((float(h), float(h)),)
        out.append(ComponentSet(iv, bool(comp.in_miss_region(x))))
    return out


def contains(m: SurrogateModel, x_m, y, tol: float = TOL) -> bool:
    """Is measurement ``y`` a possible output at ``x_m`` (interval tolerance ``tol``)?"""
    y = np.asarray(getattr(y, "values", y), dtype=float)
    sets = output_set(m, x_m)
    if y.shape != (len(sets),):
        raise ValidationError("measurement dimension does not match the model")
    return all(s.contains(float(v), tol) for s, v in zip(sets, y))


def contains_batch(m: SurrogateModel, x_m, y, tol: float = TOL) -> np.ndarray:
    """Vectorised :func:`contains` over rows of ``x_m`` and ``y``."""
    x = np.atleast_2d(np.asarray(x_m, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    nominal = m.nominal(x)
    ok = np.ones(x.shape[0], dtype=bool)
    for i in range(y.shape[1]):
        yi, hi = y[:, i], nominal[:, i]
        comp = m.error.get(i)
        inf = yi == math.inf
        if comp is None:
            ok &= ~inf & (np.abs(yi - hi) <= tol)
            continue
        tables = _tables(comp, x.shape[1])
        mask, low, up, miss = tables.evaluate(x)
        in_any = np.any(mask & (yi[:, None] >= hi[:, None] + low - tol)
                        & (yi[:, None] <= hi[:, None] + up + tol), axis=1)
        none = ~mask.any(axis=1)
        in_any |= none & (np.abs(yi - hi) <= tol)
        ok &= np.where(inf, miss, in_any & np.isfinite(yi))
    return ok


# --- batched adversarial rollouts ---------------------------------------------------

@dataclass(frozen=True)
class _Tables:
    dims: np.ndarray
    a_low: np.ndarray
    b_low: np.ndarray
    a_up: np.ndarray
    b_up: np.ndarray
    dom_lo: np.ndarray
    dom_hi: np.ndarray
    miss_lo: np.ndarray | None
    miss_hi: np.ndarray | None

    def evaluate(self, x):
        """Membership ``(N, K)``, low/up offsets ``(N, K)`` and miss flags ``(N,)``."""
        z = x[..., self.dims]
        mask = np.all((z[..., None, :] >= self.dom_lo) & (z[..., None, :] <= self.dom_hi), axis=-1)
        low = z @ self.a_low.T + self.b_low
        up = z @ self.a_up.T + self.b_up
        if self.miss_lo is None:
            miss = np.zeros(x.shape[:-1], dtype=bool)
        else:
            miss = np.all((z >= self.miss_lo - TOL) & (z <= self.miss_hi + TOL), axis=-1)
        return mask, low, up, miss


def _tables(comp: ComponentError, n_model: int) -> _Tables:
    k = len(comp.clusters)
    nd = len(comp.dims)
    get = lambda attr, shape: (np.array([getattr(c, attr) for c in comp.clusters], dtype=float)
                               .reshape(shape))
    return _Tables(
        dims=np.array(comp.dims, dtype=int),
        a_low=get("a_low", (k, nd)), b_low=get("b_low", (k,)),
        a_up=get("a_up", (k, nd)), b_up=get("b_up", (k,)),
        dom_lo=np.array([c.domain.lo for c in comp.clusters], dtype=float).reshape(k, nd),
        dom_hi=np.array([c.domain.hi for c in comp.clusters], dtype=float).reshape(k, nd),
        miss_lo=None if comp.miss_region is None else np.asarray(comp.miss_region.lo),
        miss_hi=None if comp.miss_region is None else np.asarray(comp.miss_region.hi),
    )


@dataclass(frozen=True)
class OutputSelector:
    """How a concrete output is picked from the output set at every step.

    kinds: ``random`` (uniform interior point of a uniformly chosen
    interval), ``endpoint`` (random interval endpoint), ``greedy`` (the
    endpoint whose constant-control lookahead has the lowest predicate
    margin), ``replay`` (a stored choice sequence).

    A choice is the triple ``(lam, mu, miss)``: ``lam`` picks the
    ``floor(lam * n)``-th of the ``n`` matching intervals, ``mu`` the
    position inside it and ``miss`` (0/1) selects ``+inf`` where allowed.
    Choices are realisable under any model, which is what lets stored
    adversaries be replayed against new parameters.
    """

    kind: str = "random"
    seed: int = 0
    choices: np.ndarray | None = None
    miss_prob: float = 0.5
    lookahead: int = 10

    def __post_init__(self):
        if self.kind not in ("random", "endpoint", "greedy", "replay"):
            raise ValidationError(f"unknown selector kind {self.kind!r}")
        if self.kind == "replay" and self.choices is None:
            raise ValidationError("a replay selector needs stored choices")

    @classmethod
    def constant(cls, lam: float, mu: float, miss: float, horizon: int, n_components: int):
        ch = np.empty((horizon + 1, n_components, 3))
        ch[...] = (lam, mu, miss)
        return cls("replay", choices=ch)

    def draw(self, horizon: int, n_components: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        ch = rng.random((horizon + 1, n_components, 3))
        if self.kind == "endpoint":
            ch[..., 1] = (ch[..., 1] < 0.5).astype(float)
        ch[..., 2] = (ch[..., 2] < self.miss_prob).astype(float)
        return ch


@dataclass
class RolloutBatch:
    states: np.ndarray        # (N, H+1, n_model)
    measurements: np.ndarray  # (N, H+1, n_meas)
    controls: np.ndarray      # (N, H)
    choices: np.ndarray       # (N, H+1, n_modeled, 3)
    robustness: np.ndarray    # (N,)

    def trace(self, i: int, scenario: Scenario) -> Trace:
        return Trace(scenario.id, scenario.dt, self.states[i], self.measurements[i],
                     self.controls[i][:, None], space="model")


def _resolve(choice, mask, low, up, miss, nominal):
    """Turn choices ``(N, 3)`` into concrete outputs ``(N,)``."""
    if mask.shape[1] == 0:
        return np.where(miss & (choice[:, 2] >= 0.5), math.inf, nominal)
    n = mask.sum(axis=1)
    idx = np.minimum(np.floor(choice[:, 0] * n), np.maximum(n - 1, 0)).astype(int)
    rank = np.cumsum(mask, axis=1) - 1
    pick = mask & (rank == idx[:, None])
    j = np.argmax(pick, axis=1)
    rows = np.arange(mask.shape[0])
    lo, hi = low[rows, j], up[rows, j]
    err = np.where(n > 0, lo + choice[:, 1] * (hi - lo), 0.0)
    y = nominal + err
    return np.where(miss & (choice[:, 2] >= 0.5), math.inf, y)


def _margins(ab, x):
    a, b = ab
    return np.min(b - x @ a, axis=-1)


def rollout_batch(m: SurrogateModel, p, x0, selectors: Sequence[OutputSelector],
                  spec: Formula | None = None) -> RolloutBatch:
    """Resolve one surrogate trace per ``(x0[k], selectors[k])`` pair."""
    sc = m.scenario
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, horizon = x0.shape[0], sc.horizon
    if len(selectors) != n:
        raise ValidationError("need one selector per initial state")
    p = np.asarray(getattr(p, "values", p), dtype=float)
    comps = list(m.error.components)
    tables = [_tables(c, x0.shape[1]) for c in comps]
    nc = len(comps)
    choices = np.zeros((n, horizon + 1, nc, 3))
    choices[..., :2] = 0.5
    greedy = np.zeros(n, dtype=bool)
    for k, sel in enumerate(selectors):
        if sel.kind == "greedy":
            greedy[k] = True
        elif sel.kind == "replay":
            ch = np.asarray(sel.choices, dtype=float)
            if ch.shape != (horizon + 1, nc, 3):
                raise ValidationError(f"stored choices have shape {ch.shape}")
            choices[k] = ch
        else:
            choices[k] = sel.draw(horizon, nc)
    preds = predicates(spec) if spec is not None else []
    ab = (np.array([q.a for q in preds], dtype=float).reshape(len(preds), -1).T,
          np.array([q.b for q in preds], dtype=float))
    lookahead = max((s.lookahead for s in selectors if s.kind == "greedy"), default=0)
    g_idx = np.flatnonzero(greedy)

    lo_u, hi_u = sc.control_bounds.lo[0], sc.control_bounds.hi[0]
    states = np.empty((n, horizon + 1, x0.shape[1]))
    meas = np.empty((n, horizon + 1, len(m.h_star)))
    ctrl = np.empty((n, horizon))
    x = x0.copy()
    for i in range(horizon + 1):
        states[:, i] = x
        y = m.nominal(x)
        evals = [t.evaluate(x) for t in tables]
        if g_idx.size and preds:
            picked = choices[g_idx, i]  # fancy indexing copies; written back below
            _greedy_choices(m, p, x[g_idx], y[g_idx], comps, tables,
                            [tuple(e[g_idx] for e in ev) for ev in evals],
                            ab, lookahead, picked)
            choices[g_idx, i] = picked
        for c, comp in enumerate(comps):
            mask, low, up, miss = evals[c]
            y[:, comp.component] = _resolve(choices[:, i, c], mask, low, up, miss,
                                            y[:, comp.component])
        meas[:, i] = y
        if i == horizon:
            break
        u = np.clip(policy_batch(sc, p, y), lo_u, hi_u)
        ctrl[:, i] = u
        x = _step(sc, x, u, sc.dt)
    rob = robustness_batch(spec, states) if spec is not None else np.full(n, math.nan)
    return RolloutBatch(states, meas, ctrl, choices, rob)


def _greedy_choices(m, p, x, y_nom, comps, tables, evals, ab, lookahead, out):
    """Fill ``out`` (G, n_modeled, 3) with per-step greedy endpoint choices."""
    sc = m.scenario
    lo_u, hi_u = sc.control_bounds.lo[0], sc.control_bounds.hi[0]
    g = x.shape[0]
    y_cur = y_nom.copy()
    for c, comp in enumerate(comps):
        mask, low, up, miss = evals[c]
        k = mask.shape[1]
        if k == 0 and not miss.any():
            out[:, c] = (0.5, 0.5, 0.0)
            continue
        n_match = mask.sum(axis=1)
        rank = np.cumsum(mask, axis=1) - 1
        # candidates: low/up of every cluster, the nominal value, +inf
        n_cand = 2 * k + 2
        vals = np.empty((g, n_cand))
        valid = np.zeros((g, n_cand), dtype=bool)
        codes = np.zeros((g, n_cand, 3))
        h = y_nom[:, comp.component]
        vals[:, :k] = h[:, None] + low
        vals[:, k:2 * k] = h[:, None] + up
        valid[:, :2 * k] = np.concatenate([mask, mask], axis=1)
        lam = (rank + 0.5) / np.maximum(n_match, 1)[:, None]
        codes[:, :k, 0] = lam
        codes[:, k:2 * k, 0] = lam
        codes[:, k:2 * k, 1] = 1.0
        vals[:, 2 * k] = h
        valid[:, 2 * k] = n_match == 0
        codes[:, 2 * k] = (0.5, 0.5, 0.0)
        vals[:, 2 * k + 1] = math.inf
        valid[:, 2 * k + 1] = miss
        codes[:, 2 * k + 1] = (0.5, 0.5, 1.0)

        vals = np.where(valid, vals, h[:, None])  # unused candidates still get simulated
        ycand = np.repeat(y_cur[:, None, :], n_cand, axis=1)
        ycand[:, :, comp.component] = vals
        xs = np.repeat(x[:, None, :], n_cand, axis=1)
        flat_codes = codes.reshape(g * n_cand, 3)
        score = np.full((g, n_cand), math.inf)
        # closed-loop lookahead: the candidate's choice is kept at every step
        for step in range(max(lookahead, 1)):
            if step > 0:
                flat = xs.reshape(g * n_cand, -1)
                ycand = m.nominal(flat)
                for c2, comp2 in enumerate(comps):
                    if c2 == c:
                        mk, lw, uw, ms = tables[c2].evaluate(flat)
                        ycand[:, comp2.component] = _resolve(flat_codes, mk, lw, uw, ms,
                                                             ycand[:, comp2.component])
                ycand = ycand.reshape(g, n_cand, -1)
            u = np.clip(policy_batch(sc, p, ycand), lo_u, hi_u)
            xs = _step(sc, xs, u, sc.dt)
            score = np.minimum(score, _margins(ab, xs))
        score = np.where(valid, score, math.inf)
        best = np.argmin(score, axis=1)
        rows = np.arange(g)
        out[:, c] = codes[rows, best]
        y_cur[:, comp.component] = vals[rows, best]


def rollout_adversarial(m: SurrogateModel, p, spec_m: Formula, x0,
                        selector: OutputSelector | None = None) -> tuple[Trace, float]:
    """One resolved surrogate trace and its robustness against ``spec_m``."""
    x0 = np.asarray(getattr(x0, "values", x0), dtype=float)
    if not m.x0_box.contains(x0, tol=1e-12):
        raise ValidationError(f"initial model state {x0} outside {m.x0_box}")
    batch = rollout_batch(m, p, x0[None, :], [selector or OutputSelector()], spec_m)
    return batch.trace(0, m.scenario), float(batch.robustness[0])
