"""CSV and JSON helpers shared by the loop driver and the command line.

CSV files use '.' decimals, LF line endings and a header row.  Floats are
written with ``repr`` so they read back bit-identically; infinities are
written as ``inf``/``-inf`` and empty cells mean "no value".
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import EnvParams, ScenarioId, Trace, ValidationError, layout


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    v = float(x)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    write_text(path, csv_text(header, rows))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty CSV file")
    return rows[0], rows[1:]


def json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def json_safe(o):
    """Replace non-finite floats by strings so the output is strict JSON."""
    if isinstance(o, dict):
        return {str(k): json_safe(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [json_safe(v) for v in o]
    if isinstance(o, np.ndarray):
        return json_safe(o.tolist())
    if isinstance(o, (float, np.floating)):
        v = float(o)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(o, np.integer):
        return int(o)
    return o


def write_json(path, doc) -> None:
    write_text(path, json.dumps(json_safe(doc), indent=2, sort_keys=True) + "\n")


# --- traces ---------------------------------------------------------------------

def trace_header(scenario, space: str = "sim") -> list[str]:
    lay = layout(scenario)
    states = lay.sim if space == "sim" else lay.model
    return (["trace_id", "step", "t"] + list(states) + list(lay.measurement)
            + list(lay.control) + list(lay.env))


def trace_rows(trace: Trace, trace_id: int = 0):
    for i, (x, y, u) in enumerate(trace.steps):
        u_cells = list(u) if u is not None else [None] * trace.controls.shape[1]
        yield [trace_id, i, round(i * trace.dt, 12)] + list(x) + list(y) + u_cells + list(trace.env.values)


def write_traces_csv(path, traces: Sequence[Trace], scenario=None, ids: Sequence[int] | None = None) -> None:
    if not traces and scenario is None:
        raise ValidationError("cannot infer the CSV layout without traces or a scenario")
    scenario = scenario if scenario is not None else traces[0].scenario
    space = traces[0].space if traces else "sim"
    ids = list(ids) if ids is not None else list(range(len(traces)))
    rows = (r for tid, tr in zip(ids, traces) for r in trace_rows(tr, tid))
    write_csv(path, trace_header(scenario, space), rows)


def _cell(s: str) -> float:
    return math.nan if s == "" else float(s)


def read_traces_csv(path, scenario, dt: float | None = None) -> list[Trace]:
    """Inverse of :func:`write_traces_csv` for simulator traces."""
    sid = ScenarioId.parse(scenario)
    lay = layout(sid)
    header, rows = read_csv(path)
    expected = trace_header(sid, "sim")
    if header != expected:
        raise ValidationError(f"{path}: header {header} does not match {expected}")
    n_s, n_y, n_u = len(lay.sim), len(lay.measurement), len(lay.control)
    groups: dict[int, list[list[float]]] = {}
    order: list[int] = []
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValidationError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
        try:
            vals = [_cell(c) for c in row]
        except ValueError as exc:
            raise ValidationError(f"{path}:{line_no}: {exc}") from None
        tid = int(vals[0])
        if tid not in groups:
            groups[tid] = []
            order.append(tid)
        groups[tid].append(vals)
    traces = []
    for tid in order:
        arr = np.array(sorted(groups[tid], key=lambda r: r[1]))
        if not np.array_equal(arr[:, 1], np.arange(arr.shape[0])):
            raise ValidationError(f"{path}: trace {tid} has missing or repeated steps")
        step_dt = dt if dt is not None else (arr[1, 2] - arr[0, 2] if arr.shape[0] > 1 else 1.0)
        s0 = 3
        states = arr[:, s0:s0 + n_s]
        meas = arr[:, s0 + n_s:s0 + n_s + n_y]
        ctrl = arr[:-1, s0 + n_s + n_y:s0 + n_s + n_y + n_u]
        env = arr[0, s0 + n_s + n_y + n_u:]
        traces.append(Trace(sid, float(step_dt), states, meas, ctrl, EnvParams(env)))
    return traces


def write_datapoints_csv(path, result, scenario) -> None:
    """One row per datapoint of every learned component, with its cluster label.

    Missed detections are included with residual ``inf`` and label ``-1``.
    """
    lay = layout(scenario)
    header = ["component"] + list(lay.model) + ["residual", "trace_id", "step", "label"]
    rows = []
    for comp in sorted(result.data):
        data = result.data[comp]
        labels = result.labels.get(comp)
        name = lay.measurement[comp]
        for k in range(data.e.size):
            lab = int(labels[k]) if labels is not None else 0
            rows.append([name] + list(data.x_m[k]) + [data.e[k], data.source[k, 0], data.source[k, 1], lab])
        for k in range(data.miss_x_m.shape[0]):
            rows.append([name] + list(data.miss_x_m[k]) + [math.inf, data.miss_source[k, 0],
                                                            data.miss_source[k, 1], -1])
    write_csv(path, header, rows)


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path
