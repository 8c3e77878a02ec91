"""Command-line entry point.

Subcommands::

    run CONFIG [--output DIR] [--threads N]
    falsify CONFIG --params P1,P2 [--output DIR] [--budget N]
    learn-model CONFIG --counterexamples CSV [--output DIR]
    simulate CONFIG --params P1,P2 --point V1,V2,... [--output CSV]
    export-plots RUN_DIR [--grid N]

Exit codes: 0 success, 1 configuration/IO error, 2 synthesis failure or
model stagnation, 3 iteration budget exhausted, 4 counterexamples found.
The worker cap comes from ``--threads``, else ``PERCEPT_CEGIS_THREADS``,
else the config's ``threads`` key.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config
from .core import ConfigError, ValidationError, layout
from .falsifier import SearchSpace, falsify
from .io import (ensure_dir, read_csv, read_traces_csv, write_csv, write_datapoints_csv, write_json,
                 write_text, write_traces_csv)
from .learner import learn
from .orchestrator import derive_seed, run_loop, write_run_dir
from .sim import SimulationFault, simulate_point
from .surrogate import SurrogateModel, output_set
from .temporal import robustness

log = logging.getLogger("percept_cegis")

THREADS_ENV = "PERCEPT_CEGIS_THREADS"

EXIT_OK, EXIT_ERROR, EXIT_SYNTH, EXIT_BUDGET, EXIT_FALSIFIED = 0, 1, 2, 3, 4
OUTCOME_EXIT = {"success": EXIT_OK, "synth_failure": EXIT_SYNTH, "model_stagnation": EXIT_SYNTH,
                "budget_exhausted": EXIT_BUDGET, "error": EXIT_ERROR}


class CliError(Exception):
    pass


def _vector(text: str, name: str, n: int | None = None) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in text.split(",")], dtype=float)
    except ValueError:
        raise CliError(f"--{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and vals.size != n:
        raise CliError(f"--{name}: expected {n} values, got {vals.size}")
    if not np.all(np.isfinite(vals)):
        raise CliError(f"--{name}: values must be finite")
    return vals


def thread_count(flag: int | None, cfg: RunConfig) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise CliError(f"{THREADS_ENV} must be an integer") from None
    else:
        n = cfg.threads
    if n < 1:
        raise CliError("thread count must be at least 1")
    return n


# --- commands -----------------------------------------------------------------

def cmd_run(config_path, output=None, threads=None) -> int:
    cfg = load_config(config_path)
    if output is not None:
        cfg = replace(cfg, output_dir=str(output))
    out = ensure_dir(cfg.output_dir)
    with threadpool_limits(limits=thread_count(threads, cfg)):
        report = run_loop(cfg.scenario, cfg.emulator, cfg.specs(), cfg.loop)
    write_run_dir(report, out, cfg.to_yaml())
    if cfg.export.plots and report.outcome != "error":
        export_plots(out, cfg.export.grid)
    p = "none" if report.p is None else ", ".join(f"{v:.6g}" for v in report.p)
    print(f"outcome: {report.outcome}  iterations: {len(report.iterations)}  "
          f"sim evaluations: {report.sim_evaluations}  p: ({p})")
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
    return OUTCOME_EXIT[report.outcome]


def cmd_falsify(config_path, params, output=None, budget=None, threads=None) -> int:
    cfg = load_config(config_path)
    p = _vector(params, "params", cfg.loop.param_bounds.dim)
    phi_s, _ = cfg.specs()
    b = cfg.loop.falsify_budget if budget is None else budget
    if b < 0:
        raise CliError("--budget must be non-negative")
    out = ensure_dir(output if output is not None else cfg.output_dir)
    with threadpool_limits(limits=thread_count(threads, cfg)):
        res = falsify(cfg.scenario, cfg.emulator, p, phi_s, SearchSpace.for_scenario(cfg.scenario), b,
                      derive_seed(cfg.loop.master_seed, "falsify", 1), cfg.loop.early_stop_count,
                      cfg.loop.falsify_method, cfg.loop.bo)
    doc = res.to_dict()
    doc["p"] = [float(v) for v in p]
    doc["search_names"] = list(cfg.scenario.search_names)
    doc["counterexample_points"] = [list(pt) for pt in res.points]
    write_json(out / "falsify_result.json", doc)
    write_traces_csv(out / "counterexamples.csv", res.counterexamples, cfg.scenario.id)
    print(f"evaluations: {res.evaluations}  counterexamples: {len(res.counterexamples)}  "
          f"min robustness: {res.min_robustness:.6g}")
    return EXIT_FALSIFIED if res.found else EXIT_OK


def cmd_learn_model(config_path, counterexamples, output=None) -> int:
    cfg = load_config(config_path)
    traces = read_traces_csv(counterexamples, cfg.scenario.id, cfg.scenario.dt)
    out = ensure_dir(output if output is not None else cfg.output_dir)
    learn_cfg = replace(cfg.loop.learn, seed=derive_seed(cfg.loop.master_seed, "learn", 1))
    res = learn(traces, SurrogateModel.expert(cfg.scenario), learn_cfg)
    model = SurrogateModel.expert(cfg.scenario).with_error(res.error)
    write_text(out / "surrogate_model.json", model.to_json())
    write_datapoints_csv(out / "datapoints.csv", res, cfg.scenario.id)
    lay = layout(cfg.scenario.id)
    counts = ", ".join(f"{lay.measurement[k]}: {v}" for k, v in sorted(model.error.n_clusters.items()))
    print(f"traces: {len(traces)}  clusters: {counts or 'none'}")
    return EXIT_OK


def cmd_simulate(config_path, params, point, output=None) -> int:
    cfg = load_config(config_path)
    sc = cfg.scenario
    p = _vector(params, "params", cfg.loop.param_bounds.dim)
    x = _vector(point, "point", sc.search_box.dim)
    try:
        trace = simulate_point(sc, cfg.emulator, p, x)
    except SimulationFault as exc:
        if exc.trace is None:
            raise CliError(f"simulation failed: {exc}") from None
        log.warning("simulation fault: %s", exc)
        trace = exc.trace
    phi_s, _ = cfg.specs()
    rob = robustness(phi_s, trace) if trace.horizon == sc.horizon else -math.inf
    if output is not None:
        write_traces_csv(output, [trace], sc.id)
    print(f"robustness: {rob:.6g}")
    return EXIT_OK


# --- plot data ----------------------------------------------------------------

def _latest_datapoints(run_dir: Path) -> Path | None:
    files = sorted(run_dir.glob("datapoints_iter*.csv"),
                   key=lambda f: int(f.stem.removeprefix("datapoints_iter")))
    if files:
        return files[-1]
    single = run_dir / "datapoints.csv"
    return single if single.exists() else None


def band_rows(model: SurrogateModel, grid: int):
    """Grid over each learned component's error dimensions.

    Model dimensions outside the error dimensions sit at the midpoint of the
    initial-state box.  ``low``/``up`` are the hull of all covering intervals.
    """
    lay = layout(model.scenario.id)
    base = 0.5 * (model.x0_box.lo + model.x0_box.hi)
    rows = []
    for comp in model.error.components:
        boxes = [model.x0_box.lo[list(comp.dims)], model.x0_box.hi[list(comp.dims)]]
        for cl in comp.clusters:
            boxes += [cl.domain.lo, cl.domain.hi]
        if comp.miss_region is not None:
            boxes += [comp.miss_region.lo, comp.miss_region.hi]
        pts = np.array(boxes)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        axes = [np.linspace(a, b, grid) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        for cell in np.stack([m.ravel() for m in mesh], axis=-1):
            x = base.copy()
            x[list(comp.dims)] = cell
            h = float(model.nominal(x)[comp.component])
            s = output_set(model, x)[comp.component]
            covering = [c for c in comp.clusters if c.covers(x)]
            low = min(iv[0] for iv in s.intervals)
            up = max(iv[1] for iv in s.intervals)
            rows.append([lay.measurement[comp.component]] + list(x) + [h, low, up, len(covering),
                                                                      int(s.may_miss)])
    return rows


def export_plots(run_dir, grid: int = 40) -> tuple[Path, Path]:
    run_dir = Path(run_dir)
    model_path = run_dir / "surrogate_model.json"
    if not model_path.exists():
        raise CliError(f"{model_path} not found")
    model = SurrogateModel.from_json(model_path.read_text(encoding="utf-8"))
    lay = layout(model.scenario.id)
    dp = _latest_datapoints(run_dir)
    scatter = run_dir / "clusters_scatter.csv"
    header = ["component"] + list(lay.model) + ["residual", "label"]
    rows = []
    if dp is not None:
        h, body = read_csv(dp)
        want = ["component"] + list(lay.model) + ["residual"]
        if h[:len(want)] != want or "label" not in h:
            raise CliError(f"{dp}: unexpected header {h}")
        li = h.index("label")
        for r in body:
            if int(r[li]) < 0:
                continue  # missed detections have no residual to plot
            rows.append(r[:len(want)] + [r[li]])
    elif model.error.n_clusters and any(model.error.n_clusters.values()):
        raise CliError(f"{run_dir}: no datapoint dump found")
    write_csv(scatter, header, rows)
    bands = run_dir / "model_bands.csv"
    write_csv(bands, ["component"] + list(lay.model) + ["h_star", "low", "up", "n_intervals", "miss"],
              band_rows(model, grid))
    return scatter, bands


def cmd_export_plots(run_dir, grid: int = 40) -> int:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise CliError(f"{run_dir} is not a directory")
    scatter, bands = export_plots(run_dir, grid)
    print(f"wrote {scatter} and {bands}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="percept-cegis",
                                 description="Counterexample-guided controller synthesis with learned "
                                             "perception error models.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the full synthesis loop")
    r.add_argument("config")
    r.add_argument("--output", help="run directory (overrides output_dir)")
    r.add_argument("--threads", type=int, help=f"worker cap (default: ${THREADS_ENV} or config)")

    f = sub.add_parser("falsify", help="falsify a fixed controller on the simulator")
    f.add_argument("config")
    f.add_argument("--params", required=True, help="controller parameters, comma separated")
    f.add_argument("--output")
    f.add_argument("--budget", type=int, help="simulator evaluations (default: loop.falsify_budget)")
    f.add_argument("--threads", type=int)

    lm = sub.add_parser("learn-model", help="learn an error model from a counterexample CSV")
    lm.add_argument("config")
    lm.add_argument("--counterexamples", required=True)
    lm.add_argument("--output")

    s = sub.add_parser("simulate", help="one closed-loop simulator rollout")
    s.add_argument("config")
    s.add_argument("--params", required=True)
    s.add_argument("--point", required=True, help="initial-condition and environment values, comma separated")
    s.add_argument("--output", help="trace CSV path")

    e = sub.add_parser("export-plots", help="write scatter and band CSVs for a run directory")
    e.add_argument("run_dir")
    e.add_argument("--grid", type=int, default=40, help="grid points per error dimension")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.output, args.threads)
        if args.command == "falsify":
            return cmd_falsify(args.config, args.params, args.output, args.budget, args.threads)
        if args.command == "learn-model":
            return cmd_learn_model(args.config, args.counterexamples, args.output)
        if args.command == "simulate":
            return cmd_simulate(args.config, args.params, args.point, args.output)
        if args.grid < 2:
            raise CliError("--grid must be at least 2")
        return cmd_export_plots(args.run_dir, args.grid)
    except (ConfigError, ValidationError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        name = f" {exc.filename}" if getattr(exc, "filename", None) else ""
        print(f"error:{name} {exc.strerror or exc}", file=sys.stderr)
        return EXIT_ERROR
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
