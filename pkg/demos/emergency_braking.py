"""Emergency braking: watch the learned distance-error model grow.

The initial controller is synthesised against perfect perception, so the
first falsification finds rear-end collisions caused by late braking on
distance estimates that are missed or badly off.  Each iteration adds those
traces to the training set and refits the error clusters.

    python3 demos/emergency_braking.py [iterations]
"""

import sys
from dataclasses import replace

import numpy as np

from percept_cegis.config import default_config
from percept_cegis.orchestrator import run_loop

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 3
cfg = default_config("braking")
loop = replace(cfg.loop, max_outer_iterations=iterations)
rep = run_loop(cfg.scenario, cfg.emulator, cfg.specs(), loop)

eps1, eps2 = cfg.spec.eps1, cfg.spec.eps2
for rec in rep.iterations:
    print(f"iter {rec.iteration}: p = {np.round(rec.p, 2).tolist()}  "
          f"counterexamples {rec.counterexamples}/{rec.sim_evaluations}")
    if rec.falsify is not None and rec.falsify.counterexamples:
        # state columns: d, v, d_car, v_rear
        worst_d = min(t.states[:, 0].min() for t in rec.falsify.counterexamples)
        worst_car = min(t.states[:, 2].min() for t in rec.falsify.counterexamples)
        print(f"  closest obstacle gap {worst_d:.2f} (needs >= {eps1}), "
              f"closest rear gap {worst_car:.2f} (needs >= {eps2})")

comp = rep.model.error.components[0] if rep.model.error.components else None
if comp is not None:
    print("learned d_hat error clusters (domain in d, interval at the domain ends):")
    for cl in comp.clusters:
        lo, hi = cl.domain.lo[0], cl.domain.hi[0]
        ends = [f"[{cl.a_low[0] * d + cl.b_low:+.2f}, {cl.a_up[0] * d + cl.b_up:+.2f}]" for d in (lo, hi)]
        print(f"  d in [{lo:6.2f}, {hi:6.2f}]: {ends[0]} .. {ends[1]}")
    if comp.miss_region is not None:
        print(f"  missed detections possible for d in "
              f"[{comp.miss_region.lo[0]:.2f}, {comp.miss_region.hi[0]:.2f}]")
print(f"outcome: {rep.outcome}")
