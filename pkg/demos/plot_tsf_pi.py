"""
Gain-scheduled PI with a Takagi-Sugeno-style fuzzy blend
========================================================

The same reference sequence as for the fixed controllers, plus input
voltage steps at a 17 V reference.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tlbc import scenario
from tlbc.control import FuzzyPartition, membership_weights

OUT = Path(__file__).with_name("out")
OUT.mkdir(exist_ok=True)

# %%
# Trapezoidal memberships overlap by 1 V on each side of every edge and
# always sum to one.
part = FuzzyPartition()
v = np.linspace(10, 60, 2001)
w = np.array([membership_weights(x, part) for x in v])
print("largest |sum(w) - 1|:", np.max(np.abs(w.sum(axis=1) - 1)))

builtins = scenario.builtin_scenarios()
runs = scenario.run_batch([builtins["fig11"], builtins["fig12"]])
for name, ts in runs.items():
    print(name)
    for ev in scenario.scenario_metrics(builtins[name], ts):
        m = ev.metrics
        print(f"  {ev.time:4.2f} s  {ev.kind:5s} -> {ev.level:5.1f}"
              f"  ts={1e3 * m.settling_time_s:6.1f} ms  overshoot={m.overshoot_percent:.2f}%")

fig, axes = plt.subplots(3, 1, figsize=(8, 8))
axes[0].plot(v, w)
axes[0].set_xlabel("scheduling voltage [V]")
axes[0].set_ylabel("membership")
ts = runs["fig12"]
axes[1].plot(ts.t_s, ts.v_ref, "k--", lw=0.8)
axes[1].plot(ts.t_s, ts.v_o)
axes[1].set_ylabel("v_o [V]")
ts = runs["fig11"]
axes[2].plot(ts.t_s, ts.v_o)
axes[2].set_ylabel("v_o at 17 V [V]")
axes[2].set_xlabel("time [s]")
fig.tight_layout()
fig.savefig(OUT / "tsf_pi.png", dpi=120)
