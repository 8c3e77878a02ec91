"""Run configuration: YAML schema, defaults and validation.

Every key is checked against the schema before anything runs; unknown keys
and bad values are reported with the line they appear on.  ``to_yaml``
writes the fully defaulted configuration, which loads back to the same
run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace
from typing import Any

import numpy as np
import yaml

from . import sim
from .core import Box, ConfigError, ScenarioId
from .falsifier import BOConfig
from .learner import LearnConfig
from .orchestrator import LoopConfig
from .synthesizer import SynthConfig, default_p_init, default_param_bounds
from .temporal import builtin_specs, depth, parse_formula


@dataclass(frozen=True)
class SpecConfig:
    eps1: float = 0.5
    eps2: float = 0.25
    settle_time: float = 4.0
    reach_and_stay: bool = True
    phi_s: str | None = None  # s-expression overriding the built-in formula
    phi_m: str | None = None


@dataclass(frozen=True)
class ExportConfig:
    plots: bool = True
    grid: int = 40


@dataclass(frozen=True)
class RunConfig:
    scenario: sim.Scenario
    emulator: Any
    spec: SpecConfig
    loop: LoopConfig
    output_dir: str = "run"
    threads: int = 1
    export: ExportConfig = ExportConfig()

    def specs(self):
        sc = self.scenario
        phi_s, phi_m = builtin_specs(sc.id, sc.dt, sc.horizon, self.spec.eps1, self.spec.eps2,
                                     self.spec.settle_time, self.spec.reach_and_stay)
        if self.spec.phi_s is not None:
            phi_s = parse_formula(self.spec.phi_s, sc.id, "sim")
        if self.spec.phi_m is not None:
            phi_m = parse_formula(self.spec.phi_m, sc.id, "model")
        return phi_s, phi_m

    def to_dict(self) -> dict:
        sc = self.scenario
        loop = self.loop
        return {
            "scenario": sc.id.value,
            "output_dir": self.output_dir,
            "threads": self.threads,
            "simulation": {
                "dt": sc.dt,
                "horizon": sc.horizon,
                "x0_box": sc.x0_box.to_dict(),
                "env_box": sc.env_box.to_dict(),
                "control_bounds": sc.control_bounds.to_dict(),
                "params": _plain(dataclasses.asdict(sc.params)),
            },
            "emulator": _plain(dataclasses.asdict(self.emulator)),
            "spec": _plain(dataclasses.asdict(self.spec)),
            "loop": {
                "max_outer_iterations": loop.max_outer_iterations,
                "falsify_budget": loop.falsify_budget,
                "early_stop_count": loop.early_stop_count,
                "master_seed": loop.master_seed,
                "p_init": [float(v) for v in loop.p_init],
                "param_bounds": loop.param_bounds.to_dict(),
                "falsify_method": loop.falsify_method,
                "bo": _plain(dataclasses.asdict(loop.bo)),
                "learn": _plain({k: v for k, v in dataclasses.asdict(loop.learn).items() if k != "seed"}),
                "synth": _plain({k: v for k, v in dataclasses.asdict(loop.synth).items() if k != "seed"}),
            },
            "export": _plain(dataclasses.asdict(self.export)),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _plain(o):
    if isinstance(o, dict):
        return {k: _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.generic):
        return o.item()
    return o


# --- loading ----------------------------------------------------------------------

class _Node:
    """A parsed YAML value with the line it came from."""

    def __init__(self, value, line: int):
        self.value, self.line = value, line


def _tree(node) -> _Node:
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k)) if not isinstance(k, yaml.ScalarNode) else k.value
            if key in out:
                raise ConfigError(f"line {k.start_mark.line + 1}: duplicate key {key!r}")
            out[key] = _tree(v)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_tree(v) for v in node.value], line)
    return _Node(yaml.safe_load(yaml.serialize(node)), line)


class _Reader:
    def __init__(self, source: str):
        self.source = source

    def fail(self, node: _Node | None, path: str, msg: str):
        where = f"{self.source}:{node.line}" if node is not None else self.source
        raise ConfigError(f"{where}: {path}: {msg}")

    def mapping(self, node: _Node | None, path: str, allowed) -> dict[str, _Node]:
        if node is None:
            return {}
        if node.value is None:
            return {}
        if not isinstance(node.value, dict):
            self.fail(node, path, "expected a mapping")
        for k, v in node.value.items():
            if k not in allowed:
                self.fail(v, f"{path}.{k}" if path else str(k),
                          f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return node.value

    def number(self, node, path, kind=float, lo=None, hi=None, strict_lo=False):
        v = node.value
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(node, path, f"expected a number, got {v!r}")
        if kind is int and not (isinstance(v, int) or float(v).is_integer()):
            self.fail(node, path, f"expected an integer, got {v!r}")
        v = kind(v)
        if lo is not None and (v <= lo if strict_lo else v < lo):
            self.fail(node, path, f"must be {'>' if strict_lo else '>='} {lo}, got {v}")
        if hi is not None and v > hi:
            self.fail(node, path, f"must be <= {hi}, got {v}")
        return v

    def boolean(self, node, path):
        if not isinstance(node.value, bool):
            self.fail(node, path, f"expected true/false, got {node.value!r}")
        return node.value

    def string(self, node, path, choices=None):
        if not isinstance(node.value, str):
            self.fail(node, path, f"expected a string, got {node.value!r}")
        if choices and node.value not in choices:
            self.fail(node, path, f"must be one of {', '.join(choices)}")
        return node.value

    def vector(self, node, path, n=None):
        if not isinstance(node.value, list):
            self.fail(node, path, "expected a list of numbers")
        vals = [self.number(v, f"{path}[{i}]") for i, v in enumerate(node.value)]
        if n is not None and len(vals) != n:
            self.fail(node, path, f"expected {n} values, got {len(vals)}")
        return vals

    def box(self, node, path, n):
        m = self.mapping(node, path, {"lo", "hi"})
        if "lo" not in m or "hi" not in m:
            self.fail(node, path, "a box needs both lo and hi")
        lo, hi = self.vector(m["lo"], f"{path}.lo", n), self.vector(m["hi"], f"{path}.hi", n)
        if any(a > b for a, b in zip(lo, hi)):
            self.fail(node, path, "lo must not exceed hi")
        return Box(lo, hi)

    def dataclass_fields(self, node, path, cls, base, skip=(), special=None):
        """Override fields of dataclass instance ``base`` from a mapping node."""
        special = special or {}
        names = [f.name for f in fields(cls) if f.name not in skip]
        m = self.mapping(node, path, set(names))
        updates = {}
        for name, child in m.items():
            sub = f"{path}.{name}"
            if name in special:
                updates[name] = special[name](child, sub)
                continue
            current = getattr(base, name)
            if isinstance(current, bool):
                updates[name] = self.boolean(child, sub)
            elif isinstance(current, int):
                updates[name] = self.number(child, sub, int)
            elif isinstance(current, float):
                updates[name] = self.number(child, sub, float)
            elif isinstance(current, tuple):
                updates[name] = tuple(self.vector(child, sub, len(current)))
            elif isinstance(current, str) or current is None:
                updates[name] = None if child.value is None else self.string(child, sub)
            else:
                self.fail(child, sub, "unsupported field")
        try:
            return replace(base, **updates)
        except (ValueError, TypeError) as exc:
            self.fail(node, path, str(exc))


def load_config_text(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    if root is None:
        raise ConfigError(f"{source}: empty configuration")
    r = _Reader(source)
    top = r.mapping(_tree(root), "", {"scenario", "output_dir", "threads", "simulation", "emulator",
                                      "spec", "loop", "export"})
    if "scenario" not in top:
        r.fail(None, "scenario", "required key missing")
    try:
        sid = ScenarioId.parse(r.string(top["scenario"], "scenario"))
    except ConfigError as exc:
        r.fail(top["scenario"], "scenario", str(exc))

    sc = sim.default_scenario(sid)
    simm = r.mapping(top.get("simulation"), "simulation",
                     {"dt", "horizon", "x0_box", "env_box", "control_bounds", "params"})
    upd = {}
    if "dt" in simm:
        upd["dt"] = r.number(simm["dt"], "simulation.dt", float, 0.0, strict_lo=True)
    if "horizon" in simm:
        upd["horizon"] = r.number(simm["horizon"], "simulation.horizon", int, 1)
    if "x0_box" in simm:
        upd["x0_box"] = r.box(simm["x0_box"], "simulation.x0_box", sc.x0_box.dim)
    if "env_box" in simm:
        upd["env_box"] = r.box(simm["env_box"], "simulation.env_box", sc.env_box.dim)
    if "control_bounds" in simm:
        upd["control_bounds"] = r.box(simm["control_bounds"], "simulation.control_bounds", 1)
    if "params" in simm:
        upd["params"] = r.dataclass_fields(simm["params"], "simulation.params", type(sc.params), sc.params)
    try:
        sc = replace(sc, **upd)
    except ConfigError as exc:
        r.fail(top.get("simulation"), "simulation", str(exc))

    em = sim.default_emulator(sid)
    em = r.dataclass_fields(top.get("emulator"), "emulator", type(em), em)

    spec = r.dataclass_fields(top.get("spec"), "spec", SpecConfig, SpecConfig())

    loop_node = top.get("loop")
    lm = r.mapping(loop_node, "loop", {"max_outer_iterations", "falsify_budget", "early_stop_count",
                                       "master_seed", "p_init", "param_bounds", "falsify_method",
                                       "bo", "learn", "synth"})
    bounds = default_param_bounds(sid)
    if "param_bounds" in lm:
        bounds = r.box(lm["param_bounds"], "loop.param_bounds", bounds.dim)
    p_init = tuple(float(v) for v in default_p_init(sid))
    if "p_init" in lm:
        p_init = tuple(r.vector(lm["p_init"], "loop.p_init", len(p_init)))
        if not bounds.contains(np.array(p_init)):
            r.fail(lm["p_init"], "loop.p_init", "must lie inside loop.param_bounds")
    kw = {"p_init": p_init, "param_bounds": bounds}
    if "max_outer_iterations" in lm:
        kw["max_outer_iterations"] = r.number(lm["max_outer_iterations"], "loop.max_outer_iterations", int, 1)
    if "falsify_budget" in lm:
        kw["falsify_budget"] = r.number(lm["falsify_budget"], "loop.falsify_budget", int, 0)
    if "early_stop_count" in lm:
        kw["early_stop_count"] = r.number(lm["early_stop_count"], "loop.early_stop_count", int, 0)
    if "master_seed" in lm:
        kw["master_seed"] = r.number(lm["master_seed"], "loop.master_seed", int, 0)
    if "falsify_method" in lm:
        kw["falsify_method"] = r.string(lm["falsify_method"], "loop.falsify_method", ("bo", "random"))
    kw["bo"] = r.dataclass_fields(lm.get("bo"), "loop.bo", BOConfig, BOConfig())
    feat = lambda node, path: None if node.value is None else tuple(r.vector(node, path))
    kw["learn"] = r.dataclass_fields(lm.get("learn"), "loop.learn", LearnConfig, LearnConfig(),
                                     skip=("seed",), special={"feature_scaling": feat})
    kw["synth"] = r.dataclass_fields(lm.get("synth"), "loop.synth", SynthConfig, SynthConfig(), skip=("seed",))
    try:
        loop = LoopConfig(**kw)
    except ValueError as exc:
        r.fail(loop_node, "loop", str(exc))

    export = r.dataclass_fields(top.get("export"), "export", ExportConfig, ExportConfig())
    output_dir = r.string(top["output_dir"], "output_dir") if "output_dir" in top else "run"
    threads = r.number(top["threads"], "threads", int, 1) if "threads" in top else 1

    cfg = RunConfig(sc, em, spec, loop, output_dir, threads, export)
    try:
        for name, phi in zip(("phi_s", "phi_m"), cfg.specs()):
            if depth(phi) > sc.horizon:
                raise ConfigError(f"{name} looks {depth(phi)} steps ahead but the horizon is {sc.horizon}")
    except ValueError as exc:
        node = top.get("spec") or top.get("simulation")
        r.fail(node, "spec", str(exc))
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration: {exc.strerror}") from None
    return load_config_text(text, str(path), overrides)


def default_config(scenario, **overrides) -> RunConfig:
    """The fully defaulted configuration for a built-in scenario."""
    return load_config_text(f"scenario: {ScenarioId.parse(scenario).value}\n", "<default>", overrides or None)
