"""
Naive arm means versus matched potential outcomes
=================================================

A simulated cohort where sicker patients both accumulate more EA and do worse.
Raw outcome rates per burden level exaggerate the harm of EA; learnt-metric
matching on the covariates brings the estimates back to the simulated truth.
"""
import logging

import numpy as np

from eacause.burden import E_MAX_EDGES, LEVELS
from eacause.matching import MatchingSettings, MatchSpace, arm_code, estimate_apo
from eacause.simulator import COVARIATES, ScenarioConfig, simulate, true_apo

logging.basicConfig(level=logging.WARNING)

res = simulate(ScenarioConfig.preset("default", n_patients=2000, seed=11))
a = res.truth.analyzed
x = res.cohort.covariate_matrix()[a]
y = res.cohort.outcomes()[a].astype(float)
level = np.searchsorted(E_MAX_EDGES, res.e_max[a], side="right")
arms = arm_code(level, res.treated[a])
print(f"{a.sum()} analyzed patients, {res.treated[a].mean():.0%} treated")

space = MatchSpace.from_raw(x, COVARIATES.names, np.array(res.cohort.ids)[a])
est, reps, _ = estimate_apo(space, y, arms, 8, MatchingSettings(), seed=11, n_boot=200)

print()
print("level        n   truth  naive  matched  95% CI")
for lv in range(4):
    e = est[lv]
    truth = true_apo(res.truth, "e_max", lv)
    naive = y[arms == lv].mean()
    print(f"{LEVELS[lv]:11s} {np.sum(arms == lv):4d}  {truth:.3f}  {naive:.3f}  {e.estimate:.3f}"
          f"   [{e.ci_low:.3f}, {e.ci_high:.3f}]")

w = np.mean([r.metric.weights for r in reps], axis=0)
print()
print("mean learnt weight per covariate")
for name, wi in sorted(zip(COVARIATES.names, w), key=lambda t: -t[1]):
    print(f"  {name:12s} {wi:.2f}")
