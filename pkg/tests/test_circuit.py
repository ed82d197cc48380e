import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlbc import circuit
from tlbc.circuit import (ConverterParams, ConverterState, SimulationDiverged,
                          SteadyStateNotReached, SwitchState)
from tlbc.series import COLUMNS, TimeSeries

P = ConverterParams()


def test_table_values():
    assert (P.v_i_nominal, P.l, P.r, P.c1, P.c2, P.r_load, P.f_s) == \
        (12.0, 500e-6, 8e-3, 100e-6, 100e-6, 24.7, 32e3)
    assert P.steps_per_period == 256
    assert P.d_max == 0.9


@pytest.mark.parametrize("change", [{"l": 0.0}, {"r_load": -1.0}, {"c1": math.nan},
                                    {"dt": 1 / (32e3 * 10)}, {"d_max": 1.0}])
def test_params_rejected(change):
    with pytest.raises(ValueError):
        P.replace(**change)


def test_gates_examples():
    assert circuit.pwm_gates(0.37 / P.f_s, 0.0, P) == SwitchState(False, False)
    assert circuit.pwm_gates(0.0, 0.2, P) == SwitchState(True, False)
    assert circuit.pwm_gates(0.5 / P.f_s, 0.2, P) == SwitchState(False, True)
    assert circuit.pwm_gates(0.55 / P.f_s, 0.6, P) == SwitchState(True, True)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.9))
def test_each_gate_on_for_fraction_d(d):
    n = P.steps_per_period
    t = (np.arange(n) + 0.5) * P.dt
    g = [circuit.pwm_gates(tk, d, P) for tk in t]
    on1 = sum(s.m1_on for s in g) / n
    on2 = sum(s.m2_on for s in g) / n
    assert abs(on1 - d) <= 1 / n
    assert abs(on2 - d) <= 1 / n


def test_derivative_examples():
    dx = circuit.derivative(ConverterState(0.0, 0.0, 0.0), SwitchState(True, True), 12.0, P)
    assert dx.i_l == pytest.approx(24000.0)
    assert dx.v_c1 == 0.0 and dx.v_c2 == 0.0
    dx = circuit.derivative(ConverterState(0.0, 6.0, 6.0), SwitchState(False, False), 12.0, P)
    assert dx.i_l == 0.0
    assert dx.v_c1 == pytest.approx(-12 / (24.7 * 100e-6))
    assert dx.v_c1 == pytest.approx(-4858.3, abs=0.1)


def test_one_capacitor_charges_when_one_switch_is_off():
    s = ConverterState(2.0, 6.0, 6.0)
    dx = circuit.derivative(s, SwitchState(False, True), 12.0, P)
    io = 12.0 / P.r_load
    assert dx.v_c1 == pytest.approx((2.0 - io) / P.c1)
    assert dx.v_c2 == pytest.approx(-io / P.c2)
    assert dx.i_l == pytest.approx((12.0 - P.r * 2.0 - 6.0) / P.l)


def test_diode_blocks_reverse_current():
    s = ConverterState(0.0, 20.0, 20.0)
    dx = circuit.derivative(s, SwitchState(False, False), 12.0, P)
    assert dx.i_l == 0.0


def test_pass_through_inrush_then_divider():
    # from a discharged converter the LC filter rings past v_in before settling
    ts = circuit.simulate(P, 12.0, 0.0, 0.05)
    assert ts.t_s[0] == 0.0 and ts.v_o[0] == 0.0
    assert 12.0 < ts.v_o.max() < 24.0
    assert ts.v_o[-1] == pytest.approx(12.0 * P.r_load / (P.r_load + P.r), rel=1e-4)
    assert ts.v_o[-1] == pytest.approx(11.996, abs=1e-3)


def test_ideal_gain_at_d02():
    v = circuit.steady_state_output(P, 0.2)
    assert v == pytest.approx(15.0, rel=1e-3)


def test_input_step_response_at_s1():
    x0 = circuit.periodic_steady_state(P, 0.2, 12.0)
    before = circuit.cycle_average(P, x0, 0.2, 12.0).v_o
    ts = circuit.simulate_averaged(P, 13.0, 0.2, 0.05, x0=x0)
    assert ts.v_o[-1] - before == pytest.approx(1.25, abs=0.01)


@pytest.mark.parametrize("d, expected", [(0.0, 11.996114618746944), (0.2, 14.992305799516814),
                                         (0.5, 23.968947112794382)])
def test_steady_state_output_frozen(d, expected):
    assert circuit.steady_state_output(P, d) == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("d", [0.1, 0.2, 0.3, 0.5])
def test_gain_matches_esr_oracle(d):
    v = circuit.steady_state_output(P, d)
    assert v == pytest.approx(circuit.ideal_gain_with_esr(P, d), rel=0.01)


@pytest.mark.parametrize("d", [0.0, 0.2, 0.5])
def test_steady_state_agrees_with_long_run_from_zero(d):
    ts = circuit.simulate_averaged(P, 12.0, d, 0.15)
    assert ts.v_o[-32:].mean() == pytest.approx(circuit.steady_state_output(P, d), rel=1e-6)


def test_dt_halving():
    coarse = circuit.steady_state_output(P, 0.2)
    fine = circuit.steady_state_output(P.with_steps_per_period(512), 0.2)
    assert abs(fine - coarse) / coarse < 5e-4


def test_capacitor_balance():
    for d in (0.2, 0.5, 0.75):
        x = circuit.periodic_steady_state(P, d, 12.0)
        avg = circuit.cycle_average(P, x, d, 12.0)
        assert abs(avg.v_c1 - avg.v_c2) < 0.01 * avg.v_o / 2


def test_periodic_steady_state_is_a_fixed_point():
    x = circuit.periodic_steady_state(P, 0.43, 12.0)
    stepper = circuit.PeriodStepper(P, x)
    stepper.advance([12.0], [0.43])
    assert np.allclose(stepper.x, x, rtol=1e-9, atol=1e-9)


def test_characteristic_grid():
    pts = circuit.operating_characteristic(P, [0.0, 0.2, 0.5])
    assert all(p.ok for p in pts)
    assert [round(p.v_o) for p in pts] == [12, 15, 24]


def test_characteristic_is_monotone_below_dmax():
    pts = circuit.operating_characteristic(P, np.linspace(0, 0.9, 10))
    v = [p.v_o for p in pts]
    assert all(b > a for a, b in zip(v, v[1:]))


def test_duty_for_output_inverts_steady_state():
    d = circuit.duty_for_output(P, 27.5)
    assert circuit.steady_state_output(P, d) == pytest.approx(27.5, rel=1e-6)
    with pytest.raises(ValueError):
        circuit.duty_for_output(P, 500.0)


def test_steady_state_not_reached():
    with pytest.raises(SteadyStateNotReached) as exc:
        circuit.steady_state_output(P, 0.2, horizon=2e-4, x0=(0.0, 0.0, 0.0))
    assert exc.value.duty == 0.2


def test_divergence_reports_time():
    with pytest.raises(SimulationDiverged) as exc:
        circuit.simulate(P, [(0.0, 12.0), (1e-3, math.inf)], 0.2, 2e-3)
    assert exc.value.time == pytest.approx(1e-3, abs=2 * P.period)


def test_duty_clamped_and_logged(caplog):
    with caplog.at_level(logging.WARNING, logger="tlbc"):
        ts = circuit.simulate_averaged(P, 12.0, 0.97, 1e-3)
    assert np.all(ts.duty == P.d_max)
    assert sum("clamped" in r.message for r in caplog.records) == 1


def test_simulation_is_bit_identical():
    sched = [(0.0, 0.2), (2e-3, 0.3)]
    a = circuit.simulate(P, 12.0, sched, 5e-3, decimation=16)
    b = circuit.simulate(P, 12.0, sched, 5e-3, decimation=16)
    for col in COLUMNS:
        np.testing.assert_array_equal(a.column(col), b.column(col))


def test_decimated_samples_align_with_period_average():
    x0 = circuit.periodic_steady_state(P, 0.3, 12.0)
    raw = circuit.simulate(P, 12.0, 0.3, P.period, decimation=1, x0=x0)
    assert len(raw) == P.steps_per_period + 1
    avg = circuit.cycle_average(P, x0, 0.3, 12.0)
    # the kernel average also samples the PWM edges, so agreement is to O(ripple * dt^2)
    assert np.trapezoid(raw.v_o, raw.t_s) / P.period == pytest.approx(avg.v_o, rel=1e-6)


def test_timeseries_csv_roundtrip(tmp_path):
    ts = circuit.simulate_averaged(P, 12.0, 0.2, 2e-3)
    path = tmp_path / "ts.csv"
    ts.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(COLUMNS)
    back = TimeSeries.from_csv(path)
    for col in COLUMNS:
        np.testing.assert_array_equal(back.column(col), ts.column(col))


def test_timeseries_rejects_bad_time():
    z = np.zeros(3)
    with pytest.raises(ValueError):
        TimeSeries(np.array([0.0, 1.0, 1.0]), z, z, z, z, z, z, z, z, z)
