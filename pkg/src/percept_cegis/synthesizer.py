"""Controller synthesis against the surrogate model.

The objective ``J(p)`` is the worst robustness of ``phi_M`` over a fixed
set of surrogate rollouts: a grid of initial states, each resolved by a
few seeded random selectors and by the greedy selector, plus every stored
adversary in the bank.  ``J`` is ascended with projected central-difference
gradients; a candidate that clears the margin is then checked by fresh
random rollouts, whose violators join the bank before ascent resumes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .core import Box, ScenarioId, ValidationError
from .surrogate import OutputSelector, SurrogateModel, rollout_batch
from .temporal import Formula

log = logging.getLogger(__name__)


def default_param_bounds(scenario) -> Box:
    """Search box ``P`` for the built-in policies."""
    if ScenarioId.parse(scenario) is ScenarioId.LANE_KEEPING:
        return Box([-5.0, -5.0], [0.0, 0.0])  # (theta gain, deviation gain)
    return Box([0.0, 0.0], [40.0, 12.0])     # (trust threshold m, target speed m/s)


def default_p_init(scenario) -> np.ndarray:
    if ScenarioId.parse(scenario) is ScenarioId.LANE_KEEPING:
        return np.array([0.0, 0.0])
    return np.array([25.0, 7.0])


@dataclass(frozen=True)
class SynthConfig:
    restarts: int = 4
    max_gradient_steps: int = 25
    fd_epsilon: float = 1e-3       # fraction of each bound width
    step_size: float = 0.2         # initial step, in unit-box coordinates
    min_step: float = 1e-3
    n_adversarial: int = 4
    greedy_lookahead: int = 10
    margin: float = 0.02
    x0_grid: int = 4               # seeded points on top of the box corners
    n_verify: int = 200
    max_verify_rounds: int = 6
    bank_add: int = 8              # worst verification violators kept per round
    seed: int = 0
    stop_at_margin: bool = True

    def __post_init__(self):
        if self.restarts < 1:
            raise ValidationError("restarts must be at least 1")
        if self.margin < 0:
            raise ValidationError("margin must be non-negative")
        if self.max_gradient_steps < 0 or self.n_verify < 0 or self.n_adversarial < 0:
            raise ValidationError("step and rollout counts must be non-negative")


@dataclass(frozen=True)
class Adversary:
    """A stored output-selection sequence and where it was found."""

    x0: np.ndarray
    choices: np.ndarray
    p: np.ndarray
    robustness: float


@dataclass
class AdversaryBank:
    entries: list[Adversary] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, x0, choices, p, robustness: float) -> None:
        self.entries.append(Adversary(np.array(x0, dtype=float), np.array(choices, dtype=float),
                                      np.array(p, dtype=float), float(robustness)))

    def replay(self, m: SurrogateModel, spec: Formula, p=None) -> np.ndarray:
        """Robustness of every entry under ``p`` (default: the entry's own ``p``)."""
        out = np.empty(len(self.entries))
        for k, a in enumerate(self.entries):
            sel = OutputSelector("replay", choices=a.choices)
            out[k] = rollout_batch(m, a.p if p is None else p, a.x0[None, :], [sel], spec).robustness[0]
        return out


def x0_samples(box: Box, n_extra: int, seed: int) -> np.ndarray:
    """Box corners followed by ``n_extra`` seeded Latin-hypercube points."""
    pts = [box.corners()]
    if n_extra > 0:
        pts.append(box.from_unit(qmc.LatinHypercube(d=box.dim, seed=seed).random(n_extra)))
    return np.vstack(pts)


class Objective:
    """``J(p)`` with its rollout plan fixed at construction (common random numbers)."""

    def __init__(self, m: SurrogateModel, spec: Formula, cfg: SynthConfig, bank: AdversaryBank,
                 x0s: np.ndarray | None = None):
        self.m, self.spec, self.cfg, self.bank = m, spec, cfg, bank
        self.x0s = x0s if x0s is not None else x0_samples(m.x0_box, cfg.x0_grid, cfg.seed)
        self.evaluations = 0
        self.rollouts = 0
        sels, starts = [], []
        for i, x0 in enumerate(self.x0s):
            for j in range(cfg.n_adversarial):
                kind = "random" if j % 2 == 0 else "endpoint"
                sels.append(OutputSelector(kind, seed=_subseed(cfg.seed, 1, i, j)))
                starts.append(x0)
            sels.append(OutputSelector("greedy", lookahead=cfg.greedy_lookahead))
            starts.append(x0)
        self._sels, self._starts = sels, np.array(starts).reshape(len(starts), -1)

    def _plan(self):
        sels = list(self._sels)
        starts = [self._starts]
        for a in self.bank.entries:
            sels.append(OutputSelector("replay", choices=a.choices))
            starts.append(a.x0[None, :])
        return np.vstack(starts), sels

    def batch(self, p):
        x0, sels = self._plan()
        self.evaluations += 1
        self.rollouts += len(sels)
        return rollout_batch(self.m, p, x0, sels, self.spec)

    def __call__(self, p) -> float:
        rob = self.batch(p).robustness
        return float(rob.min()) if rob.size else math.inf


def objective(p, m: SurrogateModel, spec: Formula, cfg: SynthConfig = SynthConfig(),
              bank: AdversaryBank | None = None) -> float:
    return Objective(m, spec, cfg, bank or AdversaryBank())(p)


def _subseed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def fd_gradient(f, u: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``f`` at ``u`` (unit-box coordinates), clipped to [0, 1]."""
    g = np.zeros_like(u)
    for k in range(u.size):
        hi, lo = u.copy(), u.copy()
        hi[k] = min(u[k] + eps, 1.0)
        lo[k] = max(u[k] - eps, 0.0)
        if hi[k] > lo[k]:
            g[k] = (f(hi) - f(lo)) / (hi[k] - lo[k])
    return g


@dataclass
class SynthResult:
    success: bool
    p: np.ndarray | None
    J: float
    bank: AdversaryBank
    log: dict
    evaluations: int = 0
    rollouts: int = 0

    def to_json(self) -> str:
        return json.dumps(self.log, sort_keys=True, indent=1, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _jf(x: float):
    return x if math.isfinite(x) else str(x)


def _ascend(f, u, j, cfg: SynthConfig, traj):
    """Projected gradient ascent with step halving, in unit coordinates."""
    step = cfg.step_size
    for _ in range(cfg.max_gradient_steps):
        if cfg.stop_at_margin and j >= cfg.margin:
            break
        g = fd_gradient(f, u, cfg.fd_epsilon)
        norm = float(np.linalg.norm(g))
        if not math.isfinite(norm) or norm == 0.0:
            break
        d = g / norm
        improved = False
        while step >= cfg.min_step:
            cand = np.clip(u + step * d, 0.0, 1.0)
            jc = f(cand)
            if jc > j:
                u, j, improved = cand, jc, True
                traj.append((u.copy(), j))
                step = min(2.0 * step, 0.5)
                break
            step *= 0.5
        if not improved:
            break
    return u, j


def synthesize(m: SurrogateModel, spec: Formula, p_init=None, bounds: Box | None = None,
               cfg: SynthConfig = SynthConfig(), bank: AdversaryBank | None = None) -> SynthResult:
    """Search ``p`` with ``J(p) >= margin`` that survives a fresh verification pass."""
    sc = m.scenario
    bounds = bounds or default_param_bounds(sc.id)
    p_init = default_p_init(sc.id) if p_init is None else np.asarray(p_init, dtype=float)
    bank = bank if bank is not None else AdversaryBank()
    obj = Objective(m, spec, cfg, bank)
    to_p = bounds.from_unit
    f = lambda u: obj(to_p(u))
    rng = np.random.default_rng(_subseed(cfg.seed, 2))
    log_doc = {"restarts": [], "bank_events": []}
    verified = 0

    for r in range(cfg.restarts):
        u = bounds.to_unit(bounds.clip(p_init)) if r == 0 else rng.random(bounds.dim)
        j = f(u)
        traj = [(u.copy(), j)]
        rec = {"restart": r, "trajectory": traj, "outcome": "failure"}
        log_doc["restarts"].append(rec)
        for vr in range(cfg.max_verify_rounds):
            if not math.isfinite(j):
                rec["outcome"] = "non-finite objective"
                log.warning("restart %d abandoned: objective is %s", r, j)
                break
            u, j = _ascend(f, u, j, cfg, traj)
            if j < cfg.margin:
                break
            p = to_p(u)
            batch = _verify(m, spec, p, cfg, r, vr)
            verified += cfg.n_verify
            bad = np.flatnonzero(batch.robustness < 0)
            if bad.size == 0:
                rec["outcome"] = "success"
                _finish(rec)
                return SynthResult(True, p, j, bank, _log_json(log_doc, bounds),
                                   obj.evaluations, obj.rollouts + verified)
            order = bad[np.argsort(batch.robustness[bad], kind="stable")][:cfg.bank_add]
            for k in order:
                bank.add(batch.states[k, 0], batch.choices[k], p, batch.robustness[k])
            log_doc["bank_events"].append({"restart": r, "round": vr, "added": int(order.size),
                                           "bank_size": len(bank), "p": p})
            rec.setdefault("verify_rounds", 0)
            rec["verify_rounds"] += 1
            j = f(u)
            traj.append((u.copy(), j))
        _finish(rec)
    return SynthResult(False, None, -math.inf, bank, _log_json(log_doc, bounds),
                       obj.evaluations, obj.rollouts + verified)


def _finish(rec):
    rec["trajectory"] = [(u, _jf(float(j))) for u, j in rec["trajectory"]]


def _log_json(doc, bounds):
    for rec in doc["restarts"]:
        rec["trajectory"] = [{"p": bounds.from_unit(u).tolist(), "J": j} for u, j in rec["trajectory"]]
    for ev in doc["bank_events"]:
        ev["p"] = np.asarray(ev["p"]).tolist()
    return doc


def _verify(m, spec, p, cfg: SynthConfig, restart: int, rnd: int):
    """Fresh random rollouts from seeded uniform initial states."""
    n = cfg.n_verify
    rng = np.random.default_rng(_subseed(cfg.seed, 3, restart, rnd))
    x0 = m.x0_box.from_unit(rng.random((n, m.x0_box.dim)))
    sels = [OutputSelector("random" if k % 2 == 0 else "endpoint", seed=_subseed(cfg.seed, 4, restart, rnd, k))
            for k in range(n)]
    return rollout_batch(m, p, x0, sels, spec)
