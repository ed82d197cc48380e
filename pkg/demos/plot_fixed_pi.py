"""
Fixed PI controllers inside and outside their subinterval
=========================================================

Each local PI handles input steps and a small reference step in its own
subinterval. Used over the whole range, PI1 loses the high references and
PI4 is slow on the low ones.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from tlbc import scenario

OUT = Path(__file__).with_name("out")
OUT.mkdir(exist_ok=True)

builtins = scenario.builtin_scenarios()
names = ["fig7_s1", "fig7_s2", "fig7_s3", "fig7_s4", "fig7_s5", "fig8a", "fig8b"]
runs = scenario.run_batch([builtins[n] for n in names])


def report(name):
    sc, ts = builtins[name], runs[name]
    print(name)
    for ev in scenario.scenario_metrics(sc, ts):
        m = ev.metrics
        print(f"  {ev.time:5.2f} s  {ev.kind:5s} -> {ev.level:5.1f}  settled={m.settled}"
              f"  ts={1e3 * m.settling_time_s:7.1f} ms  error={m.steady_state_error_v:+.4f} V")


for n in names:
    report(n)

# %%
fig, axes = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
for ax, n in zip(axes, ("fig8a", "fig8b")):
    ts = runs[n]
    ax.plot(ts.t_s, ts.v_ref, "k--", lw=0.8)
    ax.plot(ts.t_s, ts.v_o)
    ax.set_ylabel(f"{n} v_o [V]")
axes[-1].set_xlabel("time [s]")
fig.savefig(OUT / "fixed_pi.png", dpi=120)
