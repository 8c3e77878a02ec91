"""Bayesian optimisation against random search on a rarely failing controller.

Counts simulations until the first lane departure for ten paired seeds.  A
search that finds nothing within the budget is counted as budget + 1.

    python3 demos/falsifier_comparison.py
"""

import numpy as np

from percept_cegis import sim
from percept_cegis.config import default_config
from percept_cegis.falsifier import falsify, random_search
from percept_cegis.orchestrator import derive_seed

sc = sim.default_scenario("lane_keeping")
em = sim.default_emulator("lane_keeping")
phi_s = default_config("lane_keeping").specs()[0]
p, budget = (-0.5, -0.8), 300

bo, rnd = [], []
for s in range(10):
    seed = derive_seed(s, "benchmark", 0)
    a = falsify(sc, em, p, phi_s, budget=budget, seed=seed, early_stop_count=1)
    b = random_search(sc, em, p, phi_s, budget=budget, seed=seed, early_stop_count=1)
    bo.append(a.first_counterexample_at() or budget + 1)
    rnd.append(b.first_counterexample_at() or budget + 1)
    print(f"seed {s}: BO {bo[-1]:4d}   random {rnd[-1]:4d}")
print(f"median: BO {np.median(bo)}   random {np.median(rnd)}")
