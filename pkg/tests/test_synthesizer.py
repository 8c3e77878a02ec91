from dataclasses import replace

import numpy as np
import pytest

from percept_cegis import synthesizer
from percept_cegis.core import Box
from percept_cegis.surrogate import (Cluster, ComponentError, ErrorModel, OutputSelector, SurrogateModel,
                                     rollout_batch)
from percept_cegis.synthesizer import (AdversaryBank, Objective, SynthConfig, default_param_bounds, fd_gradient,
                                       objective, synthesize)
from percept_cegis.temporal import builtin_specs, parse_formula

FAST = SynthConfig(restarts=2, max_gradient_steps=15, n_verify=100, max_verify_rounds=3)


def noisy_lane(lane, half_width=0.05):
    cl = Cluster(2, (0, 1), Box([-3.0, -3.0], [3.0, 3.0]), [0.0, 0.0], -half_width, [0.0, 0.0], half_width)
    return SurrogateModel.expert(lane).with_error(ErrorModel((ComponentError(2, (0, 1), (cl,)),)))


def test_constant_true_objective_is_flat(lane):
    m = SurrogateModel.expert(lane)
    spec = parse_formula("(le 0 1)", "lane_keeping", "model")
    vals = {objective(p, m, spec, FAST) for p in ([0.0, 0.0], [-3.0, -1.0], [-5.0, -5.0])}
    assert vals == {1.0}


def test_bank_witness_makes_objective_negative(lane):
    m = noisy_lane(lane, 0.3)
    _, phi_m = builtin_specs("lane_keeping", lane.dt, lane.horizon)
    p = np.array([-0.2, -0.2])
    x0 = np.array([[0.4, 0.25, 5.0]])
    batch = rollout_batch(m, p, x0, [OutputSelector("greedy")], phi_m)
    assert batch.robustness[0] < 0
    bank = AdversaryBank()
    bank.add(x0[0], batch.choices[0], p, batch.robustness[0])
    cfg = replace(FAST, n_adversarial=0, x0_grid=0)
    assert Objective(m, phi_m, cfg, bank, x0s=np.array([[0.0, 0.0, 5.0]]))(p) < 0


def test_larger_bank_never_raises_objective(lane):
    m = noisy_lane(lane, 0.2)
    _, phi_m = builtin_specs("lane_keeping", lane.dt, lane.horizon)
    rng = np.random.default_rng(0)
    bank = AdversaryBank()
    p = np.array([-1.5, -0.7])
    last = objective(p, m, phi_m, FAST, bank)
    for k in range(5):
        x0 = m.x0_box.from_unit(rng.random(3))
        b = rollout_batch(m, rng.uniform(-2, 0, 2), x0[None], [OutputSelector("endpoint", seed=k)], phi_m)
        bank.add(x0, b.choices[0], p, b.robustness[0])
        now = objective(p, m, phi_m, FAST, bank)
        assert now <= last
        last = now


def test_zero_error_lane_synthesis_succeeds(lane):
    m = SurrogateModel.expert(lane)
    _, phi_m = builtin_specs("lane_keeping", lane.dt, lane.horizon)
    res = synthesize(m, phi_m, [0.0, 0.0], default_param_bounds("lane_keeping"), FAST)
    assert res.success and res.J >= FAST.margin
    assert default_param_bounds("lane_keeping").contains(res.p)


def test_unsatisfiable_spec_fails(lane):
    m = SurrogateModel.expert(lane)
    spec = parse_formula("(le 1 0)", "lane_keeping", "model")
    res = synthesize(m, spec, None, None, FAST)
    assert not res.success and res.p is None
    assert len(res.log["restarts"]) == FAST.restarts


def test_margin_monotonicity(lane):
    m = noisy_lane(lane, 0.05)
    _, phi_m = builtin_specs("lane_keeping", lane.dt, lane.horizon)
    strict = synthesize(m, phi_m, [0.0, 0.0], None, replace(FAST, margin=0.05))
    if strict.success:
        assert objective(strict.p, m, phi_m, replace(FAST, margin=0.0)) >= 0.0


def test_success_is_sound_and_bank_realizable(lane):
    m = noisy_lane(lane, 0.08)
    _, phi_m = builtin_specs("lane_keeping", lane.dt, lane.horizon)
    res = synthesize(m, phi_m, [0.0, 0.0], None, FAST)
    assert res.success
    if len(res.bank):
        assert np.all(res.bank.replay(m, phi_m, res.p) >= 0)
        own = res.bank.replay(m, phi_m)
        assert np.allclose(own, [a.robustness for a in res.bank.entries], atol=1e-9)
    rng = np.random.default_rng(12345)
    x0 = m.x0_box.from_unit(rng.random((1000, 3)))
    sels = [OutputSelector("random" if k % 2 else "endpoint", seed=10_000 + k) for k in range(1000)]
    rob = rollout_batch(m, res.p, x0, sels, phi_m).robustness
    assert np.mean(rob >= 0) >= 0.999


def test_every_evaluated_p_is_in_bounds(lane, monkeypatch):
    seen = []

    class Recording(Objective):
        def batch(self, p):
            seen.append(np.array(p))
            return super().batch(p)

    monkeypatch.setattr(synthesizer, "Objective", Recording)
    m = noisy_lane(lane, 0.1)
    _, phi_m = builtin_specs("lane_keeping", lane.dt, lane.horizon)
    bounds = Box([-3.0, -2.0], [-0.5, 0.0])
    synthesize(m, phi_m, [-0.5, 0.0], bounds, FAST)
    assert seen and all(bounds.contains(p) for p in seen)


def test_fd_gradient_on_quadratic():
    q = np.array([[2.0, 0.3], [0.3, 1.0]])
    c = np.array([0.4, 0.6])
    f = lambda u: float(-(u - c) @ q @ (u - c))
    grad = lambda u: -2.0 * q @ (u - c)
    rng = np.random.default_rng(4)
    for _ in range(20):
        u = rng.uniform(0.1, 0.9, 2)
        g = fd_gradient(f, u, 1e-3)
        assert np.linalg.norm(g - grad(u)) <= 1e-4 * max(np.linalg.norm(grad(u)), 1e-12) + 1e-10


def test_synthesis_log_records_trajectories(lane):
    m = SurrogateModel.expert(lane)
    _, phi_m = builtin_specs("lane_keeping", lane.dt, lane.horizon)
    res = synthesize(m, phi_m, [0.0, 0.0], None, FAST)
    traj = res.log["restarts"][0]["trajectory"]
    assert traj[0]["p"] == [0.0, 0.0] and all(set(t) == {"p", "J"} for t in traj)
    assert isinstance(res.to_json(), str)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(restarts=0)
    with pytest.raises(ValueError):
        SynthConfig(margin=-0.1)
