import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lp_bound_grid
from percept_cegis import sim
from percept_cegis.core import Box, Trace
from percept_cegis.learner import (LearnConfig, build_error_model, component_data, extract_datapoints,
                                   fit_bounds, kmeans, learn, model_equal)
from percept_cegis.surrogate import (Cluster, ComponentError, ErrorModel, SurrogateModel, contains_batch,
                                     output_set)


def lane_trace(d, th, d_hat, v=5.0):
    n = len(d)
    states = np.zeros((n, 6))
    states[:, 5], states[:, 2], states[:, 4] = d, th, v
    meas = np.column_stack([np.full(n, v), th, d_hat])
    return Trace("lane_keeping", 0.05, states, meas, np.zeros((n - 1, 1)))


def test_datapoint_count_matches_steps(lane):
    em = sim.default_emulator("lane_keeping")
    traces = [sim.simulate_point(lane, em, [0.0, 0.0], [0.3, 0.2, 5.0 + 0.1 * k]) for k in range(11)]
    pts, misses = extract_datapoints(traces, 2)
    assert len(pts) == 11 * (lane.horizon + 1) and not misses
    # the spec counts transitions; one output per visited state adds one per trace
    assert 11 * lane.horizon == 1760


def test_exact_perception_has_zero_residuals():
    tr = lane_trace(np.linspace(0, 1, 10), np.zeros(10), np.linspace(0, 1, 10))
    pts, _ = extract_datapoints([tr], 2)
    assert all(p.e == 0.0 for p in pts)


def test_missed_detections_are_separated():
    n = 30
    states = np.column_stack([np.linspace(60, 30, n), np.full(n, 10.0), np.full(n, 10.0), np.full(n, 10.0)])
    d_hat = states[:, 0].copy()
    d_hat[:20] = math.inf
    tr = Trace("braking", 0.05, states, np.column_stack([states[:, 1], d_hat]), np.zeros((n - 1, 1)))
    pts, misses = extract_datapoints([tr], 1)
    assert len(misses) == 20 and len(pts) == 10
    assert all(math.isfinite(p.e) for p in pts)


def test_kmeans_separated_blobs():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.1, (30, 2))
    b = rng.normal(10, 0.1, (30, 2))
    labels = kmeans(np.vstack([a, b]), 2, seed=3)
    assert len(set(labels[:30])) == 1 and len(set(labels[30:])) == 1 and labels[0] != labels[30]
    assert np.all(kmeans(np.vstack([a, b]), 1, seed=3) == 0)
    assert np.array_equal(labels, kmeans(np.vstack([a, b]), 2, seed=3))


def test_fit_bounds_collinear():
    low, up = fit_bounds([0.0, 1.0, 2.0], [1.0, 2.0, 3.0])
    for f in (low, up):
        assert f.a[0] == pytest.approx(1.0, abs=1e-9) and f.b == pytest.approx(1.0, abs=1e-9)


def test_fit_bounds_single_point_prefers_zero_slope():
    low, up = fit_bounds([[0.7, -0.2]], [0.4])
    for f in (low, up):
        assert np.all(f.a == 0.0) and f.b == pytest.approx(0.4)


def test_fit_bounds_constant_residual():
    low, up = fit_bounds([0.0, 0.5, 3.0, 4.0], [0.2] * 4)
    for f in (low, up):
        assert f.a[0] == pytest.approx(0.0, abs=1e-12) and f.b == pytest.approx(0.2, abs=1e-12)


def test_fit_bounds_matches_grid_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(1, 11))
        x = rng.uniform(-2, 2, n)
        e = rng.normal(0, 1, n) + rng.uniform(-1, 1) * x
        low, up = fit_bounds(x, e)
        for f, lower in ((low, True), (up, False)):
            obj = float(np.sum(f(x[:, None])))
            ref = lp_bound_grid(x, e, lower)[0]
            assert obj == pytest.approx(ref, abs=1e-6)
        assert np.all(low(x[:, None]) <= e + 1e-9) and np.all(up(x[:, None]) >= e - 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(-5, 5)), min_size=1, max_size=25))
def test_fit_bounds_always_feasible(rows):
    arr = np.array(rows)
    low, up = fit_bounds(arr[:, :2], arr[:, 2])
    assert np.all(low(arr[:, :2]) <= arr[:, 2] + 1e-9)
    assert np.all(up(arr[:, :2]) >= arr[:, 2] - 1e-9)
    assert np.all(np.abs(low.a) <= 10 + 1e-9) and np.all(np.abs(up.a) <= 10 + 1e-9)


def test_zero_residuals_learn_a_trivial_cluster(lane):
    d = np.linspace(-0.4, 0.4, 40)
    tr = lane_trace(d, 0.1 * d, d)
    m = SurrogateModel.expert(lane)
    res = learn([tr], m, LearnConfig(k_init=1))
    comp = res.error.get(2)
    assert len(comp.clusters) == 1
    cl = comp.clusters[0]
    assert abs(cl.b_low) < 1e-12 and abs(cl.b_up) < 1e-12
    assert np.all(cl.a_low == 0) and np.all(cl.a_up == 0)
    x = np.array([0.1, 0.01, 5.0])
    assert output_set(m.with_error(res.error), x)[2].intervals == ((0.1, 0.1),)


def test_two_regime_data_gives_narrow_inner_cluster(lane):
    rng = np.random.default_rng(2)
    traces = []
    for _ in range(6):
        d = np.concatenate([rng.uniform(-0.2, 0.2, 40), rng.uniform(0.5, 1.0, 40)])
        th = rng.uniform(-0.05, 0.05, 80)
        err = np.where(np.abs(d) < 0.3, rng.uniform(-0.02, 0.02, 80), rng.uniform(0.3, 0.8, 80))
        traces.append(lane_trace(d, th, d + err))
    res = learn(traces, SurrogateModel.expert(lane), LearnConfig(seed=1))
    clusters = res.error.get(2).clusters
    assert len(clusters) >= 2
    inner = [c for c in clusters if c.domain.hi[0] <= 0.3]
    outer = [c for c in clusters if c.domain.lo[0] >= 0.3]
    assert inner and outer
    width = lambda c: np.mean([c.b_up - c.b_low + (c.a_up - c.a_low) @ c.domain.lo,
                               c.b_up - c.b_low + (c.a_up - c.a_low) @ c.domain.hi])
    assert max(width(c) for c in inner) < min(width(c) for c in outer)


def test_learned_model_contains_training_data(brake):
    em = sim.default_emulator("braking")
    traces = [sim.simulate_point(brake, em, [25.0, 7.0], [45.0 + k, 10.0, 10.0, 0.9]) for k in range(6)]
    m = SurrogateModel.expert(brake)
    res = learn(traces, m, LearnConfig(seed=4))
    model = m.with_error(res.error)
    data = component_data(traces, 1, 0)
    x = np.vstack([data.x_m, data.miss_x_m])
    y = np.vstack([np.column_stack([data.x_m[:, 1], data.y]),
                   np.column_stack([data.miss_x_m[:, 1], np.full(len(data.miss_x_m), math.inf)])])
    assert contains_batch(model, x, y, tol=1e-9).all()
    assert res.error.get(1).miss_region is not None


def test_learning_is_deterministic(brake):
    em = sim.default_emulator("braking")
    traces = [sim.simulate_point(brake, em, [25.0, 7.0], [50.0, 10.0, 9.0 + k, 0.8]) for k in range(4)]
    m = SurrogateModel.expert(brake)
    a = m.with_error(build_error_model(traces, m, LearnConfig(seed=9)))
    b = m.with_error(build_error_model(traces, m, LearnConfig(seed=9)))
    assert a.to_json() == b.to_json()


def test_model_equal(brake):
    c1 = Cluster(1, (0,), Box([0.0], [10.0]), [0.0], -1.0, [0.0], 1.0)
    c2 = Cluster(1, (0,), Box([10.0], [20.0]), [0.1], -2.0, [0.1], 2.0)
    base = SurrogateModel.expert(brake)
    m1 = base.with_error(ErrorModel((ComponentError(1, (0,), (c1, c2)),)))
    m2 = base.with_error(ErrorModel((ComponentError(1, (0,), (c2, c1)),)))
    shifted = Cluster(1, (0,), Box([10.0], [20.0]), [0.1], -2.0, [0.1], 3.0)
    m3 = base.with_error(ErrorModel((ComponentError(1, (0,), (c1, shifted)),)))
    assert model_equal(m1, m1) and model_equal(m1, m2) and not model_equal(m1, m3)
