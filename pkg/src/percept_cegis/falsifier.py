"""Search initial conditions and environment parameters for unsafe traces.

The objective is the robustness of the simulator specification; every
sample with negative robustness is kept as a counterexample.  Proposals
come from Bayesian optimisation (GP with fixed squared-exponential kernel
and expected improvement toward lower robustness) after a Latin-hypercube
warm-up, or from plain uniform sampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm, qmc

from .core import Box, Trace, ValidationError
from .sim import Scenario, SimulationFault, simulate_point
from .temporal import Formula, robustness

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchSpace:
    box: Box
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.names and len(self.names) != self.box.dim:
            raise ValidationError("one name per search dimension is required")

    @classmethod
    def for_scenario(cls, scenario: Scenario) -> "SearchSpace":
        return cls(scenario.search_box, scenario.search_names)


@dataclass
class FalsifyResult:
    counterexamples: list[Trace] = field(default_factory=list)
    min_robustness: float = math.inf
    evaluations: int = 0
    history: list[tuple[tuple[float, ...], float]] = field(default_factory=list)
    # search point of each counterexample, same order
    points: list[tuple[float, ...]] = field(default_factory=list)
    faults: int = 0

    @property
    def found(self) -> bool:
        return bool(self.counterexamples)

    def first_counterexample_at(self) -> int | None:
        """1-based evaluation index of the first violation, if any."""
        for i, (_, r) in enumerate(self.history):
            if r < 0:
                return i + 1
        return None

    def to_dict(self) -> dict:
        return {
            "evaluations": self.evaluations,
            "min_robustness": _json_float(self.min_robustness),
            "n_counterexamples": len(self.counterexamples),
            "faults": self.faults,
            "history": [{"point": list(p), "robustness": _json_float(r)} for p, r in self.history],
        }


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


@dataclass(frozen=True)
class BOConfig:
    n_init: int = 10
    length_scale: float = 0.2
    noise: float = 1e-6
    n_candidates: int = 1000
    jitter: float = 1e-4


def _gp_fit(x, y, cfg: BOConfig):
    ls = cfg.length_scale
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
    k = np.exp(-0.5 * d2 / ls ** 2)
    for jitter in (cfg.noise, cfg.noise + cfg.jitter):
        try:
            factor = cho_factor(k + jitter * np.eye(x.shape[0]), lower=True)
            return factor, cho_solve(factor, y)
        except np.linalg.LinAlgError:
            continue
    return None


def bayesopt_propose(history: Sequence[tuple[Sequence[float], float]], box: Box, seed: int,
                     cfg: BOConfig = BOConfig()) -> np.ndarray:
    """Next point to evaluate.

    The first ``n_init`` proposals are the rows of one seeded Latin-hypercube
    design; later ones maximise expected improvement over ``n_candidates``
    seeded uniform candidates.  Inputs are normalised to the unit box, the
    kernel length scale is ``length_scale`` in those units.
    """
    n = len(history)
    dim = box.dim
    if n < cfg.n_init:
        design = qmc.LatinHypercube(d=max(dim, 1), seed=seed).random(cfg.n_init)[:, :dim]
        return box.from_unit(design[n])
    rng = np.random.default_rng([seed, n])
    pts = np.array([h[0] for h in history], dtype=float).reshape(n, dim)
    vals = np.array([h[1] for h in history], dtype=float)
    ok = np.isfinite(vals)
    cand = rng.random((cfg.n_candidates, dim))
    if ok.sum() < 2:
        return box.from_unit(cand[0])
    x = box.to_unit(pts[ok])
    y = vals[ok]
    mu_y, sd_y = y.mean(), y.std()
    sd_y = sd_y if sd_y > 0 else 1.0
    yn = (y - mu_y) / sd_y
    fit = _gp_fit(x, yn, cfg)
    if fit is None:
        log.warning("GP factorisation failed; proposing a uniform point")
        return box.from_unit(cand[0])
    factor, alpha = fit
    ls = cfg.length_scale
    ks = np.exp(-0.5 * np.sum((cand[:, None, :] - x[None, :, :]) ** 2, axis=2) / ls ** 2)
    mean = ks @ alpha
    v = cho_solve(factor, ks.T)
    var = np.maximum(1.0 - np.sum(ks * v.T, axis=1), 1e-12)
    sd = np.sqrt(var)
    best = yn.min()
    z = (best - mean) / sd
    ei = (best - mean) * norm.cdf(z) + sd * norm.pdf(z)
    return box.from_unit(cand[int(np.argmax(ei))])


def _evaluate(run: Callable[[np.ndarray], Trace], spec: Formula, point, result: FalsifyResult):
    try:
        trace = run(point)
        rob = robustness(spec, trace)
    except SimulationFault as exc:
        log.warning("simulation fault at %s: %s", point, exc)
        result.faults += 1
        trace, rob = None, math.inf
    result.evaluations += 1
    result.history.append((tuple(float(v) for v in point), rob))
    result.min_robustness = min(result.min_robustness, rob)
    if rob < 0:
        result.counterexamples.append(trace)
        result.points.append(tuple(float(v) for v in point))


def falsify_fn(run: Callable[[np.ndarray], Trace], spec: Formula, space: SearchSpace,
               budget: int, seed: int, method: str = "bo", early_stop_count: int | None = 20,
               bo: BOConfig = BOConfig()) -> FalsifyResult:
    """Drive ``run(point) -> Trace`` for up to ``budget`` points."""
    result = FalsifyResult()
    rng = np.random.default_rng(seed)
    for _ in range(max(budget, 0)):
        if method == "bo":
            point = bayesopt_propose(result.history, space.box, seed, bo)
        elif method == "random":
            point = space.box.from_unit(rng.random(space.box.dim))
        else:
            raise ValidationError(f"unknown falsification method {method!r}")
        _evaluate(run, spec, point, result)
        if early_stop_count and len(result.counterexamples) >= early_stop_count:
            break
    return result


def falsify(scenario: Scenario, emulator, p, spec: Formula, space: SearchSpace | None = None,
            budget: int = 300, seed: int = 0, early_stop_count: int | None = 20,
            method: str = "bo", bo: BOConfig = BOConfig()) -> FalsifyResult:
    """Look for simulator traces of controller ``p`` that violate ``spec``."""
    if budget < 0:
        raise ValidationError("budget must be non-negative")
    space = space or SearchSpace.for_scenario(scenario)
    run = lambda point: simulate_point(scenario, emulator, p, point)
    return falsify_fn(run, spec, space, budget, seed, method, early_stop_count, bo)


def random_search(scenario: Scenario, emulator, p, spec: Formula, space: SearchSpace | None = None,
                  budget: int = 300, seed: int = 0, early_stop_count: int | None = 20) -> FalsifyResult:
    return falsify(scenario, emulator, p, spec, space, budget, seed, early_stop_count, method="random")
