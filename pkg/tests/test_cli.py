import csv
import json
import math
import os

import numpy as np
import pytest

from percept_cegis import cli, sim
from percept_cegis.config import default_config, load_config_text
from percept_cegis.core import Box, ConfigError
from percept_cegis.io import read_traces_csv, write_traces_csv
from percept_cegis.surrogate import Cluster, ComponentError, ErrorModel, SurrogateModel

FAST = """
loop:
  falsify_budget: 40
  synth: {restarts: 2, max_gradient_steps: 10, n_verify: 50, max_verify_rounds: 2}
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def csv_contract(path):
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows and all(c and not c[0].isdigit() for c in rows[0])  # header row
    for row in rows[1:]:
        for cell in row:
            assert "," not in cell
            if cell and cell[0].isdigit():
                float(cell)  # '.' decimal separator
    return rows


# --- configuration ---------------------------------------------------------------

def test_unknown_key_is_located():
    with pytest.raises(ConfigError, match=r"cfg.yaml:4: loop.synth.restartz"):
        load_config_text("scenario: braking\nloop:\n  synth:\n    restartz: 3\n", "cfg.yaml")


def test_zero_horizon_names_field(tmp_path, capsys):
    cfg = write(tmp_path, "c.yaml", "scenario: braking\nsimulation:\n  horizon: 0\n")
    assert cli.main(["run", str(cfg)]) == 1
    assert "simulation.horizon" in capsys.readouterr().err


def test_malformed_yaml_exit_1(tmp_path, capsys):
    cfg = write(tmp_path, "c.yaml", "scenario: [braking\n")
    assert cli.main(["run", str(cfg)]) == 1
    assert "c.yaml" in capsys.readouterr().err


def test_missing_config_exit_1(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.yaml")]) == 1


def test_unwritable_output_exit_1(tmp_path):
    cfg = write(tmp_path, "c.yaml", "scenario: lane_keeping\n" + FAST)
    blocker = write(tmp_path, "file", "x")
    assert cli.main(["run", str(cfg), "--output", str(blocker / "sub")]) == 1


def test_default_config_round_trip():
    for sid in ("lane_keeping", "braking"):
        cfg = default_config(sid)
        again = load_config_text(cfg.to_yaml())
        assert again.to_yaml() == cfg.to_yaml()


def test_spec_override_grammar():
    cfg = load_config_text('scenario: lane_keeping\nspec:\n  phi_m: "(always 0 160 (le (abs d) 1))"\n')
    _, phi_m = cfg.specs()
    assert phi_m.hi == 160
    with pytest.raises(ConfigError):
        load_config_text('scenario: lane_keeping\nspec:\n  phi_m: "(always 0 999 (le d 1))"\n')


def test_thread_count_precedence(monkeypatch):
    cfg = default_config("braking")
    monkeypatch.delenv(cli.THREADS_ENV, raising=False)
    assert cli.thread_count(None, cfg) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli.thread_count(None, cfg) == 3
    assert cli.thread_count(2, cfg) == 2


# --- commands ----------------------------------------------------------------------

def test_run_lane_and_rerun_from_echo(tmp_path):
    cfg = write(tmp_path, "c.yaml", "scenario: lane_keeping\n" + FAST)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    code = cli.main(["run", str(cfg), "--output", str(out1)])
    report = json.loads((out1 / "run_report.json").read_text())
    assert code == cli.OUTCOME_EXIT[report["outcome"]]
    assert cli.main(["run", str(out1 / "config.yaml"), "--output", str(out2)]) == code
    strip = lambda p: [ln for ln in p.read_text().splitlines() if "wall_time_s" not in ln]
    assert strip(out1 / "run_report.json") == strip(out2 / "run_report.json")
    assert (out1 / "surrogate_model.json").read_bytes() == (out2 / "surrogate_model.json").read_bytes()
    for name in ("counterexamples.csv", "model_bands.csv", "clusters_scatter.csv"):
        csv_contract(out1 / name)


def test_falsify_exit_codes_and_reproducibility(tmp_path):
    cfg = write(tmp_path, "c.yaml", "scenario: lane_keeping\n" + FAST)
    assert cli.main(["falsify", str(cfg), "--params", "0,0", "--output", str(tmp_path / "f1")]) == 4
    assert cli.main(["falsify", str(cfg), "--params", "0,0", "--output", str(tmp_path / "f2")]) == 4
    assert (tmp_path / "f1" / "falsify_result.json").read_bytes() == \
        (tmp_path / "f2" / "falsify_result.json").read_bytes()
    true_cfg = write(tmp_path, "t.yaml", 'scenario: lane_keeping\nspec:\n  phi_s: "true"\n' + FAST)
    assert cli.main(["falsify", str(true_cfg), "--params", "0,0", "--output", str(tmp_path / "f3")]) == 0


def test_bad_params_exit_1(tmp_path):
    cfg = write(tmp_path, "c.yaml", "scenario: lane_keeping\n")
    assert cli.main(["falsify", str(cfg), "--params", "1,2,3"]) == 1


def test_learn_model_and_simulate(tmp_path):
    cfg = write(tmp_path, "c.yaml", "scenario: lane_keeping\n" + FAST)
    cli.main(["falsify", str(cfg), "--params", "0,0", "--output", str(tmp_path / "f")])
    assert cli.main(["learn-model", str(cfg), "--counterexamples", str(tmp_path / "f" / "counterexamples.csv"),
                     "--output", str(tmp_path / "m")]) == 0
    model = SurrogateModel.from_json((tmp_path / "m" / "surrogate_model.json").read_text())
    assert model.error.n_clusters[2] >= 1
    out = tmp_path / "tr.csv"
    assert cli.main(["simulate", str(cfg), "--params=-2,-0.8", "--point", "0.3,0.1,5", "--output", str(out)]) == 0
    rows = csv_contract(out)
    assert len(rows) == 1 + 161 and rows[-1][-1] == ""


def test_trace_csv_round_trip(tmp_path, brake):
    em = sim.default_emulator("braking")
    traces = [sim.simulate_point(brake, em, [25.0, 7.0], [50.0, 10.0, 9.0, 0.9]),
              sim.simulate_point(brake, em, [25.0, 7.0], [41.0, 8.5, 12.0, 0.1])]
    path = tmp_path / "t.csv"
    write_traces_csv(path, traces, brake.id)
    back = read_traces_csv(path, "braking", brake.dt)
    for a, b in zip(traces, back):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.controls, b.controls)
        assert np.array_equal(a.measurements, b.measurements)  # includes inf round trip
    assert "inf" in path.read_text()


# --- plot export -------------------------------------------------------------------

def test_export_plots(tmp_path, brake):
    c1 = Cluster(1, (0,), Box([5.0], [15.0]), [0.0], -0.5, [0.0], 0.5)
    c2 = Cluster(1, (0,), Box([20.0], [30.0]), [0.0], -9.0, [0.0], -4.0)
    m = SurrogateModel.expert(brake).with_error(
        ErrorModel((ComponentError(1, (0,), (c1, c2), Box([36.0], [60.0])),)))
    (tmp_path / "surrogate_model.json").write_text(m.to_json())
    dp = "component,d,v,residual,trace_id,step,label\n" + "".join(
        f"d_hat,{d},10.0,{e},0,{k},{lab}\n"
        for k, (d, e, lab) in enumerate([(6.0, 0.1, 0), (12.0, -0.2, 0), (25.0, -5.0, 1), (40.0, "inf", -1)]))
    (tmp_path / "datapoints_iter1.csv").write_text(dp)
    assert cli.main(["export-plots", str(tmp_path), "--grid", "61"]) == 0
    scatter = csv_contract(tmp_path / "clusters_scatter.csv")
    assert {r[-1] for r in scatter[1:]} == {"0", "1"}
    bands = csv_contract(tmp_path / "model_bands.csv")
    head = bands[0]
    rows = [dict(zip(head, r)) for r in bands[1:]]
    free = [r for r in rows if 16.0 < float(r["d"]) < 19.0]
    assert free and all(r["low"] == r["up"] == r["h_star"] and r["n_intervals"] == "0" for r in free)
    far = [r for r in rows if float(r["d"]) > 37.0]
    assert far and all(r["miss"] == "1" for r in far)
    assert all(r["miss"] == "0" for r in rows if float(r["d"]) < 35.0)


def test_export_plots_missing_artifacts(tmp_path):
    assert cli.main(["export-plots", str(tmp_path)]) == 1
    assert cli.main(["export-plots", str(tmp_path / "missing")]) == 1
