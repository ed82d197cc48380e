"""
Static characteristic of the three-level boost converter
========================================================

Sweep the duty cycle, find the periodic steady state of the switched
circuit at each point and compare it with the lossy averaged formula.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tlbc import circuit
from tlbc.circuit import ConverterParams

OUT = Path(__file__).with_name("out")
OUT.mkdir(exist_ok=True)

params = ConverterParams()
grid = np.linspace(0.0, 0.85, 18)
points = circuit.operating_characteristic(params, grid)

# %%
# The averaged model with inductor resistance r gives
# v_o = v_in (1 - d) / ((1 - d)^2 + r / R); the switched circuit sits within
# a few millivolts of it until the ripple grows at high duty.
oracle = [circuit.ideal_gain_with_esr(params, d) for d in grid]
for p, o in zip(points, oracle):
    print(f"d = {p.d:.3f}   switched {p.v_o:8.4f} V   averaged {o:8.4f} V")

# %%
# The five operating subintervals used for gain scheduling cover 12 V to 57 V.
edges = (12, 18, 24, 31, 40, 57)
fig, ax = plt.subplots()
ax.plot(grid, [p.v_o for p in points], "o-", label="switched circuit")
ax.plot(grid, oracle, "--", label="averaged, with r")
for e in edges:
    ax.axhline(e, color="0.8", lw=0.8)
ax.set_xlabel("duty cycle")
ax.set_ylabel("output voltage [V]")
ax.legend()
fig.savefig(OUT / "characteristic.png", dpi=120)
