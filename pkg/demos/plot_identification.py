"""
Identifying transfer functions from the switched circuit
========================================================

Step the input voltage and the duty cycle at the S1 operating point, record
one cycle average per switching period and fit output-error models.
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from tlbc import lti, sysid
from tlbc.circuit import ConverterParams

OUT = Path(__file__).with_name("out")
OUT.mkdir(exist_ok=True)

params = ConverterParams()
op = sysid.operating_points()["S1"]
experiments = {ch: sysid.generate_experiment(params, op, ch) for ch in sysid.CHANNELS}

# %%
# A structure scan over zero counts. The classes are nested, so on clean
# circuit data the richer models never fit worse.
for ch, exp in experiments.items():
    print(ch)
    for r in sysid.structure_scan(exp):
        print(f"  zeros={r.n_zeros}  fit={r.fit_percent:8.4f}%  {r.model.to_text()}")

# %%
# The chosen structures: no zero from the input, one zero from the duty.
fits = {"input_voltage_step": sysid.fit_tf(experiments["input_voltage_step"], 3, 0),
        "duty_step": sysid.fit_tf(experiments["duty_step"], 3, 1)}
reg = lti.table_iii_registry()["S1"]
print("table F_i1 gain", lti.dc_gain(reg.f_i), "fitted", lti.dc_gain(fits["input_voltage_step"].model))
print("table F_d1 gain", lti.dc_gain(reg.f_d), "fitted", lti.dc_gain(fits["duty_step"].model))

fig, axes = plt.subplots(1, 2, figsize=(10, 4))
for ax, (ch, exp) in zip(axes, experiments.items()):
    r = fits[ch]
    ax.plot(1e3 * exp.t_s, exp.deviation_v, ".", ms=2, label="circuit")
    num, den = lti.normalized(r.model)
    sim = sysid.period_averaged_step(num, den, exp.step_size, exp.period, len(exp.t_s),
                                     exp.step_index)
    ax.plot(1e3 * exp.t_s, sim, label=f"fit {r.fit_percent:.2f}%")
    ax.set_title(ch)
    ax.set_xlabel("time [ms]")
    ax.legend()
fig.tight_layout()
fig.savefig(OUT / "identification.png", dpi=120)
