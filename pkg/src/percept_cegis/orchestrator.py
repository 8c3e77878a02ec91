"""The outer counterexample-guided loop.

Each iteration synthesises ``p`` against the current surrogate, falsifies
it on the simulator, and, when counterexamples appear, adds them to the
cumulative set and relearns the error model.  The loop ends in one of
``success``, ``synth_failure``, ``model_stagnation`` or
``budget_exhausted``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Box, Trace, ValidationError, layout
from .falsifier import BOConfig, FalsifyResult, SearchSpace, falsify
from .io import ensure_dir, write_datapoints_csv, write_json, write_text, write_traces_csv
from .learner import LearnConfig, LearnResult, learn, model_equal
from .sim import Scenario
from .surrogate import SurrogateModel
from .synthesizer import SynthConfig, SynthResult, default_p_init, default_param_bounds, synthesize
from .temporal import Formula

log = logging.getLogger(__name__)

OUTCOMES = ("success", "synth_failure", "model_stagnation", "budget_exhausted")


def derive_seed(master_seed: int, label: str, index: int) -> int:
    """64-bit sub-seed from a little-endian byte encoding of the inputs."""
    msg = struct.pack("<Q", master_seed & 0xFFFFFFFFFFFFFFFF) + label.encode("utf-8") + b"\x00" \
        + struct.pack("<q", index)
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class LoopConfig:
    max_outer_iterations: int = 6
    falsify_budget: int = 300
    early_stop_count: int = 20
    learn: LearnConfig = LearnConfig()
    synth: SynthConfig = SynthConfig()
    master_seed: int = 0
    p_init: tuple[float, ...] | None = None
    param_bounds: Box | None = None
    falsify_method: str = "bo"
    bo: BOConfig = BOConfig()

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValidationError("max_outer_iterations must be at least 1")
        if self.falsify_budget < 0:
            raise ValidationError("falsify_budget must be non-negative")


@dataclass
class IterationRecord:
    iteration: int
    p: list[float] | None
    synth_success: bool
    J: float
    synth_evaluations: int
    synth_rollouts: int
    bank_size: int
    sim_evaluations: int = 0
    counterexamples: int = 0
    xi_size: int = 0
    min_robustness: float = math.nan
    n_clusters: dict[int, int] = field(default_factory=dict)
    wall_time_s: float = 0.0
    # not serialised
    synth: SynthResult | None = None
    falsify: FalsifyResult | None = None
    learned: LearnResult | None = None

    def to_dict(self, scenario) -> dict:
        lay = layout(scenario)
        return {
            "iteration": self.iteration,
            "p": self.p,
            "synth_success": self.synth_success,
            "J": self.J,
            "synth_evaluations": self.synth_evaluations,
            "synth_rollouts": self.synth_rollouts,
            "bank_size": self.bank_size,
            "sim_evaluations": self.sim_evaluations,
            "counterexamples": self.counterexamples,
            "xi_size": self.xi_size,
            "min_robustness": self.min_robustness,
            "n_clusters": {lay.measurement[k]: v for k, v in sorted(self.n_clusters.items())},
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class RunReport:
    scenario: Scenario
    outcome: str
    p: np.ndarray | None
    model: SurrogateModel
    iterations: list[IterationRecord]
    xi: list[Trace]
    xi_points: list[tuple[float, ...]]
    xi_iteration: list[int]
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def sim_evaluations(self) -> int:
        return sum(r.sim_evaluations for r in self.iterations)

    def to_dict(self) -> dict:
        sid = self.scenario.id
        return {
            "scenario": sid.value,
            "outcome": self.outcome,
            "p": None if self.p is None else [float(v) for v in self.p],
            "n_iterations": len(self.iterations),
            "sim_evaluations": self.sim_evaluations,
            "iterations": [r.to_dict(sid) for r in self.iterations],
            "counterexamples": {
                "count": len(self.xi),
                "search_names": list(self.scenario.search_names),
                "points": [list(pt) for pt in self.xi_points],
                "iteration": list(self.xi_iteration),
            },
            "model_clusters": {layout(sid).measurement[k]: v
                               for k, v in sorted(self.model.error.n_clusters.items())},
            "warnings": list(self.warnings),
            "error": self.error,
        }


def run_loop(scenario: Scenario, emulator, specs: tuple[Formula, Formula],
             cfg: LoopConfig = LoopConfig()) -> RunReport:
    """Alternate synthesis, falsification and model learning until an outcome is reached."""
    phi_s, phi_m = specs
    bounds = cfg.param_bounds or default_param_bounds(scenario.id)
    p = np.asarray(cfg.p_init, dtype=float) if cfg.p_init is not None else default_p_init(scenario.id)
    model = SurrogateModel.expert(scenario)
    space = SearchSpace.for_scenario(scenario)
    report = RunReport(scenario, "budget_exhausted", None, model, [], [], [], [])
    if cfg.falsify_budget == 0:
        report.warnings.append("falsify_budget is 0: success would be declared without any simulation")
    master = cfg.master_seed

    for it in range(1, cfg.max_outer_iterations + 1):
        t0 = time.perf_counter()
        rec = None
        try:
            synth_cfg = replace(cfg.synth, seed=derive_seed(master, "synth", it))
            sres = synthesize(model, phi_m, p, bounds, synth_cfg)
            rec = IterationRecord(it, None if sres.p is None else [float(v) for v in sres.p],
                                  sres.success, float(sres.J), sres.evaluations, sres.rollouts,
                                  len(sres.bank), synth=sres)
            report.iterations.append(rec)
            if not sres.success:
                report.outcome = "synth_failure"
                break
            p = sres.p
            report.p = p
            fres = falsify(scenario, emulator, p, phi_s, space, cfg.falsify_budget,
                           derive_seed(master, "falsify", it), cfg.early_stop_count,
                           cfg.falsify_method, cfg.bo)
            rec.falsify = fres
            rec.sim_evaluations = fres.evaluations
            rec.counterexamples = len(fres.counterexamples)
            rec.min_robustness = float(fres.min_robustness)
            if not fres.found:
                rec.xi_size = len(report.xi)
                report.outcome = "success"
                break
            report.xi.extend(fres.counterexamples)
            report.xi_points.extend(fres.points)
            report.xi_iteration.extend([it] * len(fres.counterexamples))
            rec.xi_size = len(report.xi)
            learn_cfg = replace(cfg.learn, seed=derive_seed(master, "learn", it))
            lres = learn(report.xi, model, learn_cfg)
            rec.learned = lres
            new_model = model.with_error(lres.error)
            rec.n_clusters = dict(new_model.error.n_clusters)
            stagnant = model_equal(new_model, model)
            model = new_model
            report.model = model
            if stagnant:
                report.outcome = "model_stagnation"
                break
        except Exception as exc:  # partial records are kept for the report
            log.exception("iteration %d failed", it)
            report.error = f"iteration {it}: {type(exc).__name__}: {exc}"
            report.outcome = "error"
            break
        finally:
            if rec is not None:
                rec.wall_time_s = time.perf_counter() - t0
    return report


def write_run_dir(report: RunReport, out_dir, config_echo: str | None = None) -> Path:
    """Write report, counterexamples, model and per-iteration plot data."""
    out = ensure_dir(out_dir)
    sc = report.scenario
    write_json(out / "run_report.json", report.to_dict())
    write_text(out / "surrogate_model.json", report.model.to_json())
    write_traces_csv(out / "counterexamples.csv", report.xi, sc.id)
    for rec in report.iterations:
        if rec.synth is not None:
            write_json(out / f"synth_log_iter{rec.iteration}.json", rec.synth.log)
        if rec.falsify is not None:
            write_json(out / f"falsify_iter{rec.iteration}.json", rec.falsify.to_dict())
        if rec.learned is not None:
            write_datapoints_csv(out / f"datapoints_iter{rec.iteration}.csv", rec.learned, sc.id)
    if config_echo is not None:
        write_text(out / "config.yaml", config_echo)
    return out
