"""
Small-signal models and local PI loops
======================================

The tabulated third-order models, their poles, step responses and the
closed loops formed with each local PI controller.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tlbc import lti
from tlbc.control import table_iv

OUT = Path(__file__).with_name("out")
OUT.mkdir(exist_ok=True)

registry = lti.table_iii_registry()
gains = table_iv()

# %%
# One printed S2 coefficient fails the Routh test; the registry carries the
# corrected value and flags it.
for key, pair in registry.items():
    p = lti.poles(pair.f_d)
    print(f"{key}: F_d gain {lti.dc_gain(pair.f_d):7.2f}  F_i gain {lti.dc_gain(pair.f_i):6.3f}"
          f"  poles {np.round(p, 0)}  {pair.f_d.note or ''}")

# %%
# F_d has a right-half-plane zero, so a duty step first pulls the output down.
fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
for key, pair in registry.items():
    r = lti.step_response(pair.f_d, 0.01, 10e-3, 1e-6)
    a1.plot(1e3 * r.time, r.value, label=key)
a1.set_xlabel("time [ms]")
a1.set_ylabel("output change for a 1 % duty step [V]")
a1.legend()

# %%
# Closed-loop poles with the Table IV PI gains all sit in the left half plane.
for key, pair in registry.items():
    cl = lti.closed_loop_poles(pair.f_d, gains[key])
    a2.plot(cl.real, cl.imag, "x", label=key)
    print(f"{key}: slowest closed-loop pole {cl[np.argmax(cl.real)]:.1f}")
a2.axvline(0, color="k", lw=0.8)
a2.set_xlabel("Re [1/s]")
a2.set_ylabel("Im [rad/s]")
fig.tight_layout()
fig.savefig(OUT / "small_signal.png", dpi=120)
