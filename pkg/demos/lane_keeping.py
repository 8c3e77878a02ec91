"""Lane keeping: synthesise a steering controller against learned perception error.

Runs the full loop with the default configuration and then re-checks the
result with a fresh falsification at twice the budget.

    python3 demos/lane_keeping.py [master_seed]
"""

import sys
from dataclasses import replace

from percept_cegis.config import default_config
from percept_cegis.falsifier import falsify
from percept_cegis.orchestrator import derive_seed, run_loop

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = default_config("lane_keeping")
loop = replace(cfg.loop, master_seed=seed)
phi_s, phi_m = cfg.specs()

print(f"lane keeping, master seed {seed}, p_init {loop.p_init}")
rep = run_loop(cfg.scenario, cfg.emulator, (phi_s, phi_m), loop)
for rec in rep.iterations:
    p = "none" if rec.p is None else ", ".join(f"{v:.3f}" for v in rec.p)
    print(f"  iter {rec.iteration}: p = ({p})  J = {rec.J:.3f}  "
          f"counterexamples {rec.counterexamples}/{rec.sim_evaluations}  clusters {rec.n_clusters}")
print(f"outcome: {rep.outcome} after {rep.sim_evaluations} simulations")

if rep.outcome == "success":
    check = falsify(cfg.scenario, cfg.emulator, rep.p, phi_s, budget=2 * loop.falsify_budget,
                    seed=derive_seed(seed, "confirm", 0), early_stop_count=None)
    print(f"independent check: {check.evaluations} simulations, "
          f"{len(check.counterexamples)} counterexamples, min robustness {check.min_robustness:.3f}")
