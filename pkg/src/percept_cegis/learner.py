"""Learn the error model from counterexample traces.

Datapoints ``(x_M, e)`` are projected states and residuals against the
nominal output.  They are clustered in the joint (scaled) space, each
cluster's domain is the bounding box of its states, and linear lower/upper
residual bounds are fitted per cluster by linear programming.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

from .core import Box, Trace, layout
from .surrogate import Cluster, ComponentError, ErrorModel, SurrogateModel, contains_batch

log = logging.getLogger(__name__)

A_CAP = 10.0


@dataclass(frozen=True)
class Datapoint:
    x_m: np.ndarray
    e: float            # residual y_i - h*_i(x_M); +inf for missed detections
    source: tuple[int, int]

    @property
    def miss(self) -> bool:
        return self.e == math.inf


@dataclass
class ComponentData:
    """Array form of a component's datapoints (the learner works on these)."""

    component: int
    x_m: np.ndarray        # (n, n_model)
    e: np.ndarray          # (n,)
    y: np.ndarray          # (n,) raw measurement
    source: np.ndarray     # (n, 2) trace id, step
    miss_x_m: np.ndarray   # (n_miss, n_model)
    miss_source: np.ndarray

    def datapoints(self) -> list[Datapoint]:
        pts = [Datapoint(x, float(e), (int(s[0]), int(s[1])))
               for x, e, s in zip(self.x_m, self.e, self.source)]
        return pts


@dataclass(frozen=True)
class LearnConfig:
    k_init: int = 2
    k_max: int = 8
    width_threshold: float = 0.2
    kmeans_restarts: int = 5
    seed: int = 0
    # per joint-feature divisor; None means each dimension's standard deviation
    feature_scaling: tuple[float, ...] | None = None
    a_cap: float = A_CAP

    def __post_init__(self):
        if not 1 <= self.k_init <= self.k_max:
            raise ValueError("need 1 <= k_init <= k_max")


# --- datapoints ---------------------------------------------------------------

def component_data(traces: Sequence[Trace], component: int, h_star_index: int) -> ComponentData:
    xs, es, ys, src, mx, msrc = [], [], [], [], [], []
    for t_id, tr in enumerate(traces):
        x_m = tr.model_states()
        y = tr.measurements[:, component]
        miss = y == math.inf
        steps = np.arange(x_m.shape[0])
        keep = ~miss & np.isfinite(y)
        xs.append(x_m[keep])
        ys.append(y[keep])
        es.append(y[keep] - x_m[keep, h_star_index])
        src.append(np.stack([np.full(keep.sum(), t_id), steps[keep]], axis=1))
        mx.append(x_m[miss])
        msrc.append(np.stack([np.full(miss.sum(), t_id), steps[miss]], axis=1))
    n_model = traces[0].model_states().shape[1] if traces else 0
    cat = lambda parts, shape: np.concatenate(parts) if parts else np.empty(shape)
    return ComponentData(
        component,
        cat(xs, (0, n_model)), cat(es, (0,)), cat(ys, (0,)), cat(src, (0, 2)).astype(int),
        cat(mx, (0, n_model)), cat(msrc, (0, 2)).astype(int),
    )


def extract_datapoints(traces: Sequence[Trace], component: int,
                       h_star_index: int | None = None) -> tuple[list[Datapoint], list[Datapoint]]:
    """Return ``(datapoints, misses)`` for one measurement component."""
    if h_star_index is None:
        lay = layout(traces[0].scenario)
        h_star_index = lay.model.index(lay.h_star[component])
    data = component_data(traces, component, h_star_index)
    misses = [Datapoint(x, math.inf, (int(s[0]), int(s[1])))
              for x, s in zip(data.miss_x_m, data.miss_source)]
    return data.datapoints(), misses


# --- k-means --------------------------------------------------------------------

def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(x, centers, max_iter=100, tol=1e-8):
    for _ in range(max_iter):
        dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)
        new = centers.copy()
        for j in range(centers.shape[0]):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-served point
                far = int(np.argmax(dist[np.arange(x.shape[0]), labels]))
                new[j] = x[far]
        moved = np.max(np.abs(new - centers))
        centers = new
        if moved < tol:
            break
    dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(x.shape[0]), labels].sum())
    return labels, centers, inertia


def kmeans(points, k: int, seed: int = 0, restarts: int = 5) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by inertia.

    ``k`` is reduced to the number of distinct points when larger.  Labels
    are renumbered by first occurrence so equal partitions compare equal.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n_distinct = np.unique(x, axis=0).shape[0]
    if k > n_distinct:
        log.info("kmeans: k=%d exceeds %d distinct points, reducing", k, n_distinct)
        k = n_distinct
    if k <= 1:
        return np.zeros(x.shape[0], dtype=int)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(restarts, 1)):
        labels, _, inertia = _lloyd(x, _kmeans_pp(x, k, rng))
        if best is None or inertia < best[1] - 1e-12:
            best = (labels, inertia)
    return _canonical_labels(best[0])


def _canonical_labels(labels):
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(order.size, dtype=int)
    remap[np.unique(labels)[order]] = np.arange(order.size)
    return remap[labels]


# --- linear bounds ------------------------------------------------------------------

@dataclass(frozen=True)
class Affine:
    a: np.ndarray
    b: float

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.a + self.b


def _solve(c, a_ub, b_ub, bounds):
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    return res if res.status == 0 else None


def _tighten(a, x, e, lower):
    # tightest offset for this slope; exact feasibility regardless of solver tolerance
    a = np.asarray(a, dtype=float) + 0.0
    r = e - x @ a
    return Affine(a, float(r.min()) if lower else float(r.max()))


def _fit_side(x, e, lower: bool, cap: float):
    """Tightest one-sided affine bound, ties broken toward the smallest |A|."""
    n, m = x.shape
    sign = 1.0 if lower else -1.0
    # variables (A, B); lower: max sum(Ax+B) s.t. Ax+B <= e
    c = -sign * np.concatenate([x.sum(axis=0), [n]])
    a_ub = sign * np.hstack([x, np.ones((n, 1))])
    b_ub = sign * e
    bounds = [(-cap, cap)] * m + [(None, None)]
    first = _solve(c, a_ub, b_ub, bounds)
    if first is None:
        return None
    opt = float(first.fun)
    # second pass: same objective (within tolerance), minimise sum |A| via A = P - Q
    scale = 1e-9 * (1.0 + abs(opt))
    c2 = np.concatenate([np.zeros(m + 1), np.ones(2 * m)])
    eye = np.eye(m)
    rows = [np.hstack([a_ub, np.zeros((n, 2 * m))]),
            np.hstack([c[None, :], np.zeros((1, 2 * m))]),
            np.hstack([eye, np.zeros((m, 1)), -eye, eye]),
            np.hstack([-eye, np.zeros((m, 1)), eye, -eye])]
    rhs = np.concatenate([b_ub, [opt + scale], np.zeros(2 * m)])
    bounds2 = bounds + [(0, cap)] * (2 * m)
    second = _solve(c2, np.vstack(rows), rhs, bounds2)
    best = _tighten(first.x[:m], x, e, lower)
    if second is not None:
        a2 = second.x[:m].copy()
        a2[np.abs(a2) < 1e-7] = 0.0  # solver noise around the minimal-slope vertex
        alt = _tighten(a2, x, e, lower)
        gain = lambda f: sign * float(np.sum(f(x)))
        if gain(alt) >= gain(best) - 1e-12 * (1.0 + abs(gain(best))):
            best = alt
    return best


def fit_bounds(x, e, a_cap: float = A_CAP) -> tuple[Affine, Affine]:
    """LP-fitted ``low <= e <= up`` over the cluster's points.

    ``low`` maximises the summed bound subject to lying below every residual,
    ``up`` minimises it subject to lying above; ``|A| <= a_cap`` keeps both
    LPs bounded.  A failed solve falls back to constant bounds.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    e = np.asarray(e, dtype=float)
    if x.shape[0] < 1:
        raise ValueError("fit_bounds needs at least one point")
    m = x.shape[1]
    low = _fit_side(x, e, True, a_cap)
    up = _fit_side(x, e, False, a_cap)
    if low is None or up is None:
        log.warning("LP bound fit failed on %d points; using constant bounds", x.shape[0])
        low = low or Affine(np.zeros(m), float(e.min()))
        up = up or Affine(np.zeros(m), float(e.max()))
    return low, up


# --- error model ------------------------------------------------------------------------

@dataclass
class LearnResult:
    error: ErrorModel
    data: dict[int, ComponentData] = field(default_factory=dict)
    labels: dict[int, np.ndarray] = field(default_factory=dict)
    k: dict[int, int] = field(default_factory=dict)
    mean_width: dict[int, float] = field(default_factory=dict)


def _scales(features, given):
    if given is not None:
        s = np.asarray(given, dtype=float)
        if s.shape != (features.shape[1],):
            raise ValueError(f"feature_scaling needs {features.shape[1]} entries")
        return s
    s = features.std(axis=0)
    return np.where(s > 0, s, 1.0)


def _clusters_for(comp, z, e, labels, a_cap):
    clusters, widths = [], np.empty(e.size)
    for j in range(labels.max() + 1):
        members = labels == j
        zj, ej = z[members], e[members]
        low, up = fit_bounds(zj, ej, a_cap)
        clusters.append((Box.bounding(zj), low, up))
        widths[members] = up(zj) - low(zj)
    return clusters, widths


def learn(traces: Sequence[Trace], m_prev: SurrogateModel, cfg: LearnConfig = LearnConfig()) -> LearnResult:
    """Fit an error model to every modelled component of ``m_prev``."""
    if not traces:
        raise ValueError("the counterexample set is empty")
    result = LearnResult(m_prev.error)
    comps = []
    for prev in m_prev.error.components:
        i, dims = prev.component, prev.dims
        data = component_data(traces, i, m_prev.h_star[i])
        result.data[i] = data
        if data.e.size == 0 and data.miss_x_m.shape[0] == 0:
            comps.append(prev)
            continue
        clusters = []
        if data.e.size:
            z = data.x_m[:, list(dims)]
            feats = np.column_stack([z, data.e])
            scaled = feats / _scales(feats, cfg.feature_scaling)
            k = cfg.k_init
            while True:
                labels = kmeans(scaled, k, seed=cfg.seed, restarts=cfg.kmeans_restarts)
                found, widths = _clusters_for(i, z, data.e, labels, cfg.a_cap)
                mean_width = float(widths.mean())
                if mean_width <= cfg.width_threshold or k >= cfg.k_max or labels.max() + 1 < k:
                    break
                k += 1
            clusters = [Cluster(i, dims, box, lo.a, lo.b, up.a, up.b) for box, lo, up in found]
            result.labels[i] = labels
            result.k[i] = int(labels.max() + 1)
            result.mean_width[i] = mean_width
        miss = None
        if data.miss_x_m.shape[0]:
            miss = Box.bounding(data.miss_x_m[:, list(dims)])
        comps.append(ComponentError(i, dims, tuple(clusters), miss))
    result.error = ErrorModel(tuple(comps))
    _check_containment(m_prev.with_error(result.error), result)
    return result


def _check_containment(model, result):
    for i, data in result.data.items():
        if data.e.size == 0:
            continue
        lay_y = model.nominal(data.x_m)
        y = lay_y.copy()
        y[:, i] = data.y
        ok = contains_batch(model, data.x_m, y)
        if not ok.all():
            raise AssertionError(f"learned model misses {int((~ok).sum())} training points")


def build_error_model(traces: Sequence[Trace], m_prev: SurrogateModel,
                      cfg: LearnConfig = LearnConfig()) -> ErrorModel:
    return learn(traces, m_prev, cfg).error


def _canonical(clusters):
    return sorted(clusters, key=lambda c: tuple(c.domain.lo) + tuple(c.domain.hi))


def model_equal(m1: SurrogateModel, m2: SurrogateModel, tol: float = 1e-6) -> bool:
    """Same clusters (up to order) and miss regions, all numbers within ``tol``."""
    if m1.scenario.id is not m2.scenario.id:
        return False
    comps1 = {c.component: c for c in m1.error.components}
    comps2 = {c.component: c for c in m2.error.components}
    if comps1.keys() != comps2.keys():
        return False
    close = lambda a, b: np.shape(a) == np.shape(b) and bool(np.all(np.abs(np.asarray(a) - np.asarray(b)) <= tol))
    for i, c1 in comps1.items():
        c2 = comps2[i]
        if len(c1.clusters) != len(c2.clusters) or c1.dims != c2.dims:
            return False
        for a, b in zip(_canonical(c1.clusters), _canonical(c2.clusters)):
            if not (close(a.domain.lo, b.domain.lo) and close(a.domain.hi, b.domain.hi)
                    and close(a.a_low, b.a_low) and close(a.b_low, b.b_low)
                    and close(a.a_up, b.a_up) and close(a.b_up, b.b_up)):
                return False
        if (c1.miss_region is None) != (c2.miss_region is None):
            return False
        if c1.miss_region is not None and not (
                close(c1.miss_region.lo, c2.miss_region.lo) and close(c1.miss_region.hi, c2.miss_region.hi)):
            return False
    return True
