"""Fly the two-tower scene once with each predictor and print how coverage
grows over time."""
import numpy as np

from scancov.scenarios import builtin_scenario
from scancov.simulator import MissionConfig, run_mission

sc = builtin_scenario("two_tower")
for pred in ("oracle_gt", "noisy", "observed_only"):
    rec, _ = run_mission(sc, pred, MissionConfig(mode="deterministic"), seed=0)
    t, c = np.array(rec.completeness_trace).T
    marks = [f"{c[np.searchsorted(t, s, side='right') - 1]:5.1f}" for s in (5, 10, 20, 40) if s <= t[-1]]
    print(f"{pred:<14} {rec.flight_time:6.1f} s  {rec.completeness:5.1f}%  at 5/10/20/40 s: {' '.join(marks)}")
