"""Switched model of the three-level boost converter.

State is ``(i_l, v_c1, v_c2)``; the output is ``v_o = v_c1 + v_c2``. Both
switches share one duty ratio with sawtooth carriers 180 degrees apart, so a
switching period contains up to four topological modes. Each mode is linear,
and the whole period is integrated with a fixed-step RK4 scheme whose steps
are split at the PWM edges so the duty ratio is not quantised to the grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np
from numba import njit
from scipy.optimize import brentq

from .series import TimeSeries

log = logging.getLogger(__name__)

Schedule = Union[float, Sequence[tuple[float, float]]]


class SimulationDiverged(RuntimeError):
    """Raised when the state stops being finite."""

    def __init__(self, time: float, state):
        super().__init__(f"non-finite converter state at t = {time:.6g} s (state {state})")
        self.time = time
        self.state = state


class SteadyStateNotReached(RuntimeError):
    def __init__(self, duty: float, last_average: float, horizon: float):
        super().__init__(
            f"no steady state at d = {duty:.4f} within {horizon:g} s "
            f"(last cycle average {last_average:.6g} V)")
        self.duty = duty
        self.last_average = last_average


@dataclass(frozen=True)
class ConverterParams:
    """Circuit constants (SI units) plus integration step and duty clamp.

    The defaults are the 12 V, 500 uH, 2 x 100 uF, 24.7 ohm, 32 kHz design
    with 256 integration steps per switching period.
    """

    v_i_nominal: float = 12.0
    l: float = 500e-6
    r: float = 8e-3
    c1: float = 100e-6
    c2: float = 100e-6
    r_load: float = 24.7
    f_s: float = 32e3
    dt: float = 1.0 / (32e3 * 256)
    d_max: float = 0.9

    def __post_init__(self):
        for name in ("v_i_nominal", "l", "r", "c1", "c2", "r_load", "f_s", "dt"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and positive, got {value!r}")
        if not 0 < self.d_max < 1:
            raise ValueError(f"d_max must lie in (0, 1), got {self.d_max!r}")
        ratio = 1.0 / (self.f_s * self.dt)
        if ratio < 64 - 1e-9:
            raise ValueError(f"dt gives only {ratio:.1f} steps per switching period (need >= 64)")
        if abs(ratio - round(ratio)) > 1e-6 * ratio:
            raise ValueError("dt must divide the switching period into an integer number of steps")

    @property
    def period(self) -> float:
        return 1.0 / self.f_s

    @property
    def steps_per_period(self) -> int:
        return int(round(1.0 / (self.f_s * self.dt)))

    def with_steps_per_period(self, n: int) -> ConverterParams:
        return self.replace(dt=1.0 / (self.f_s * n))

    def replace(self, **changes) -> ConverterParams:
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if "f_s" in changes and "dt" not in changes:
            fields["dt"] = 1.0 / (changes["f_s"] * self.steps_per_period)
        fields.update(changes)
        return ConverterParams(**fields)


class ConverterState(NamedTuple):
    i_l: float
    v_c1: float
    v_c2: float

    @property
    def v_o(self) -> float:
        return self.v_c1 + self.v_c2


class SwitchState(NamedTuple):
    m1_on: bool
    m2_on: bool


def pwm_gates(t: float, d: float, params: ConverterParams) -> SwitchState:
    """Gate signals for duty ``d`` at time ``t`` (trailing-edge sawtooth PWM).

    ``d`` is clamped to ``[0, d_max]``.
    """
    d = min(max(d, 0.0), params.d_max)
    phase = t * params.f_s
    return SwitchState(phase % 1.0 < d, (phase + 0.5) % 1.0 < d)


@njit(cache=True)
def _mode_derivative(il, v1, v2, m1, m2, vin, l, r, c1, c2, rl):
    vo = v1 + v2
    io = vo / rl
    if m1 and m2:
        vl = vin - r * il
        i1 = 0.0
        i2 = 0.0
    elif m2:
        # M1 off: D1 carries the inductor current into C1
        vl = vin - r * il - v1
        i1 = il
        i2 = 0.0
    elif m1:
        vl = vin - r * il - v2
        i1 = 0.0
        i2 = il
    else:
        vl = vin - r * il - vo
        i1 = il
        i2 = il
    dil = vl / l
    if not (m1 and m2) and il <= 0.0 and dil < 0.0:
        # diode blocks reverse current
        dil = 0.0
    return dil, (i1 - io) / c1, (i2 - io) / c2


def derivative(s: ConverterState, sw: SwitchState, v_in: float,
               params: ConverterParams) -> ConverterState:
    """Time derivative of the state in the mode selected by ``sw``."""
    return ConverterState(*_mode_derivative(
        float(s.i_l), float(s.v_c1), float(s.v_c2), bool(sw.m1_on), bool(sw.m2_on),
        float(v_in), params.l, params.r, params.c1, params.c2, params.r_load))


@njit(cache=True)
def _rk4(il, v1, v2, m1, m2, vin, h, l, r, c1, c2, rl):
    k1a, k1b, k1c = _mode_derivative(il, v1, v2, m1, m2, vin, l, r, c1, c2, rl)
    k2a, k2b, k2c = _mode_derivative(il + 0.5 * h * k1a, v1 + 0.5 * h * k1b, v2 + 0.5 * h * k1c,
                                     m1, m2, vin, l, r, c1, c2, rl)
    k3a, k3b, k3c = _mode_derivative(il + 0.5 * h * k2a, v1 + 0.5 * h * k2b, v2 + 0.5 * h * k2c,
                                     m1, m2, vin, l, r, c1, c2, rl)
    k4a, k4b, k4c = _mode_derivative(il + h * k3a, v1 + h * k3b, v2 + h * k3c,
                                     m1, m2, vin, l, r, c1, c2, rl)
    il = il + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
    v1 = v1 + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
    v2 = v2 + h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
    if not (m1 and m2) and il < 0.0:
        il = 0.0
    return il, v1, v2


@njit(cache=True)
def _integrate_periods(x, vin_p, d_p, period, n_sub, l, r, c1, c2, rl,
                       decim, avg_out, samp_out):
    """Advance ``x`` in place over ``len(vin_p)`` switching periods.

    Fills ``avg_out[p]`` with the time-averaged state of period ``p`` and, when
    ``decim > 0``, ``samp_out`` with the instantaneous state every ``decim``
    steps. Returns the index of the first step whose state is not finite, or -1.
    """
    il = x[0]
    v1 = x[1]
    v2 = x[2]
    h_frac = 1.0 / n_sub
    eps = 1e-12
    cuts = np.empty(3)
    samp_i = 0
    for p in range(vin_p.shape[0]):
        vin = vin_p[p]
        d = d_p[p]
        edge3 = (0.5 + d) % 1.0
        s_il = 0.0
        s_v1 = 0.0
        s_v2 = 0.0
        for j in range(n_sub):
            a = j * h_frac
            b = (j + 1) * h_frac
            nc = 0
            for e in (d, 0.5, edge3):
                if a + eps < e < b - eps:
                    cuts[nc] = e
                    nc += 1
            # insertion sort of at most three cut points
            for u in range(1, nc):
                key = cuts[u]
                w = u - 1
                while w >= 0 and cuts[w] > key:
                    cuts[w + 1] = cuts[w]
                    w -= 1
                cuts[w + 1] = key
            seg = a
            for k in range(nc + 1):
                end = cuts[k] if k < nc else b
                mid = 0.5 * (seg + end)
                m1 = mid < d
                m2 = (mid + 0.5) % 1.0 < d
                h = (end - seg) * period
                nil, nv1, nv2 = _rk4(il, v1, v2, m1, m2, vin, h, l, r, c1, c2, rl)
                s_il += 0.5 * h * (il + nil)
                s_v1 += 0.5 * h * (v1 + nv1)
                s_v2 += 0.5 * h * (v2 + nv2)
                il = nil
                v1 = nv1
                v2 = nv2
                seg = end
            if not (math.isfinite(il) and math.isfinite(v1) and math.isfinite(v2)):
                x[0] = il
                x[1] = v1
                x[2] = v2
                return p * n_sub + j
            if decim > 0 and (p * n_sub + j + 1) % decim == 0:
                samp_out[samp_i, 0] = il
                samp_out[samp_i, 1] = v1
                samp_out[samp_i, 2] = v2
                samp_i += 1
        avg_out[p, 0] = s_il / period
        avg_out[p, 1] = s_v1 / period
        avg_out[p, 2] = s_v2 / period
    x[0] = il
    x[1] = v1
    x[2] = v2
    return -1


class PeriodStepper:
    """Advances the converter one or more switching periods at a time.

    Used directly by closed-loop runners that pick a new duty every period.
    """

    def __init__(self, params: ConverterParams, state: Sequence[float]):
        self.params = params
        self.x = np.array(state, dtype=float)
        self.t = 0.0
        self._empty = np.empty((0, 3))

    @property
    def state(self) -> ConverterState:
        return ConverterState(*map(float, self.x))

    def advance(self, v_in, duty, decimation: int = 0):
        """Run ``len(v_in)`` periods; returns (period averages, decimated samples)."""
        p = self.params
        vin_p = np.ascontiguousarray(np.atleast_1d(v_in), dtype=float)
        d_p = np.ascontiguousarray(np.atleast_1d(duty), dtype=float)
        if vin_p.shape != d_p.shape:
            raise ValueError("v_in and duty must have one entry per period")
        n = vin_p.shape[0]
        avg = np.empty((n, 3))
        if decimation > 0:
            samples = np.empty((n * p.steps_per_period // decimation, 3))
        else:
            samples = self._empty
        bad = _integrate_periods(self.x, vin_p, d_p, p.period, p.steps_per_period,
                                 p.l, p.r, p.c1, p.c2, p.r_load, decimation, avg, samples)
        if bad >= 0:
            t_bad = self.t + (bad + 1) * p.dt
            raise SimulationDiverged(t_bad, tuple(self.x))
        self.t += n * p.period
        return avg, samples


def schedule_at(schedule: Schedule, times: np.ndarray) -> np.ndarray:
    """Evaluate a piecewise-constant schedule (right-continuous) at ``times``."""
    times = np.asarray(times, dtype=float)
    if np.isscalar(schedule) or isinstance(schedule, (int, float)):
        return np.full(times.shape, float(schedule))
    pts = sorted((float(t), float(v)) for t, v in schedule)
    if not pts or pts[0][0] > 0:
        raise ValueError("schedule must start at t = 0")
    ts = np.array([t for t, _ in pts])
    vs = np.array([v for _, v in pts])
    # small tolerance so events placed on a period boundary are not missed by rounding
    idx = np.searchsorted(ts, times + 1e-12, side="right") - 1
    return vs[idx]


def _clamp_duty(d: np.ndarray, params: ConverterParams) -> np.ndarray:
    clipped = np.clip(d, 0.0, params.d_max)
    if np.any(clipped != d):
        log.warning("duty outside [0, %g] clamped (min %g, max %g)",
                    params.d_max, float(d.min()), float(d.max()))
    return clipped


def ideal_state(params: ConverterParams, d: float, v_in: float) -> ConverterState:
    """Lossless continuous-conduction operating point, used as a starting guess."""
    v_o = v_in / (1.0 - d)
    return ConverterState(v_o / (params.r_load * (1.0 - d)), 0.5 * v_o, 0.5 * v_o)


def simulate(params: ConverterParams, v_in: Schedule, d: Schedule, t_end: float,
             decimation: int | None = None, x0: Sequence[float] | None = None,
             clamp: bool = True) -> TimeSeries:
    """Open-loop simulation of the switched circuit.

    Schedules are sampled at the start of every switching period. The result
    holds instantaneous samples every ``decimation`` integration steps
    (default: one per period) including the initial state at ``t = 0``.
    ``x0`` defaults to the fully discharged converter.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    n_periods = int(math.ceil(t_end / params.period - 1e-9))
    starts = np.arange(n_periods) * params.period
    vin_p = schedule_at(v_in, starts)
    d_p = schedule_at(d, starts)
    if clamp:
        d_p = _clamp_duty(d_p, params)
    decimation = decimation or params.steps_per_period
    stepper = PeriodStepper(params, x0 if x0 is not None else (0.0, 0.0, 0.0))
    x_start = stepper.x.copy()
    _, samples = stepper.advance(vin_p, d_p, decimation)
    samples = np.vstack([x_start, samples])
    t = np.arange(len(samples)) * decimation * params.dt
    # the input applied during the interval that ends at each sample
    period_idx = np.minimum(np.maximum(np.ceil(t / params.period - 1e-9).astype(int) - 1, 0),
                            n_periods - 1)
    nan = np.full(len(t), np.nan)
    return TimeSeries(t_s=t, v_in=vin_p[period_idx], v_ref=nan, duty=d_p[period_idx],
                      i_l=samples[:, 0], v_c1=samples[:, 1], v_c2=samples[:, 2],
                      v_o=samples[:, 1] + samples[:, 2], kp_active=nan, ki_active=nan.copy())


def simulate_averaged(params: ConverterParams, v_in: Schedule, d: Schedule, t_end: float,
                      x0: Sequence[float] | None = None, clamp: bool = True) -> TimeSeries:
    """Like :func:`simulate` but each row is the average over one switching period.

    Row ``k`` is stamped at the period start ``k / f_s`` and holds the average
    over ``[k / f_s, (k + 1) / f_s)``.
    """
    n_periods = int(math.ceil(t_end / params.period - 1e-9))
    starts = np.arange(n_periods) * params.period
    vin_p = schedule_at(v_in, starts)
    d_p = schedule_at(d, starts)
    if clamp:
        d_p = _clamp_duty(d_p, params)
    stepper = PeriodStepper(params, x0 if x0 is not None else (0.0, 0.0, 0.0))
    avg, _ = stepper.advance(vin_p, d_p)
    nan = np.full(n_periods, np.nan)
    return TimeSeries(t_s=starts, v_in=vin_p, v_ref=nan, duty=d_p,
                      i_l=avg[:, 0], v_c1=avg[:, 1], v_c2=avg[:, 2], v_o=avg[:, 1] + avg[:, 2],
                      kp_active=nan, ki_active=nan.copy())


def periodic_steady_state(params: ConverterParams, d: float, v_in: float,
                          iterations: int = 3) -> ConverterState:
    """State at the carrier zero of the periodic steady state, by fixed point.

    Within continuous conduction the one-period map is affine, so a Newton
    step on ``F(x) - x`` with a finite-difference Jacobian lands on the cycle
    directly; extra iterations only matter if the diode guard engages.
    """
    x = np.array(ideal_state(params, d, v_in), dtype=float)
    scale = np.array([max(abs(x[0]), 1.0), max(abs(x[1]), 1.0), max(abs(x[2]), 1.0)]) * 1e-3

    def one_period(x0):
        st = PeriodStepper(params, x0)
        st.advance([v_in], [d])
        return st.x

    for _ in range(iterations):
        fx = one_period(x)
        jac = np.empty((3, 3))
        for k in range(3):
            xp = x.copy()
            xp[k] += scale[k]
            jac[:, k] = (one_period(xp) - fx) / scale[k]
        x = x - np.linalg.solve(jac - np.eye(3), fx - x)
    return ConverterState(*map(float, x))


def cycle_average(params: ConverterParams, state: Sequence[float], d: float,
                  v_in: float) -> ConverterState:
    """Average state over the switching period that starts at ``state``."""
    avg, _ = PeriodStepper(params, state).advance([v_in], [d])
    return ConverterState(*map(float, avg[0]))


def duty_for_output(params: ConverterParams, v_o: float, v_in: float | None = None,
                    xtol: float = 1e-12) -> float:
    """Duty whose periodic steady state has cycle-averaged output ``v_o``."""
    v_in = params.v_i_nominal if v_in is None else v_in

    def excess(d):
        return cycle_average(params, periodic_steady_state(params, d, v_in), d, v_in).v_o - v_o

    hi = params.d_max
    if excess(0.0) > 0 or excess(hi) < 0:
        raise ValueError(f"{v_o} V is not reachable from {v_in} V with duty in [0, {hi}]")
    return float(brentq(excess, 0.0, hi, xtol=xtol))


def steady_state_output(params: ConverterParams, d: float, v_in: float | None = None,
                        horizon: float = 0.5, window: int = 10, rel_tol: float = 1e-4,
                        clamp: bool = True, x0: Sequence[float] | None = None) -> float:
    """Cycle-averaged output voltage once the converter has settled.

    Simulates from the periodic steady state found by :func:`periodic_steady_state`
    (or from ``x0``) until the last ``window`` period averages of ``v_o`` agree
    within ``rel_tol``. Starting on the cycle matters: the output filter is
    lightly damped and a short window can pass on a crest of the ringing.
    """
    v_in = params.v_i_nominal if v_in is None else v_in
    if clamp:
        d = min(max(d, 0.0), params.d_max)
    if not 0 <= d < 1:
        raise ValueError(f"duty {d} outside [0, 1)")
    if x0 is None:
        x0 = periodic_steady_state(params, d, v_in)
    stepper = PeriodStepper(params, x0)
    n_max = int(math.ceil(horizon / params.period))
    chunk = 64
    history = np.empty(0)
    done = 0
    while done < n_max:
        n = min(chunk, n_max - done)
        avg, _ = stepper.advance(np.full(n, float(v_in)), np.full(n, float(d)))
        history = np.concatenate([history[-window:], avg[:, 1] + avg[:, 2]])
        done += n
        for k in range(window, len(history) + 1):
            tail = history[k - window:k]
            mean = tail.mean()
            if tail.max() - tail.min() < rel_tol * abs(mean):
                return float(mean)
        chunk = min(chunk * 2, 4096)
    raise SteadyStateNotReached(d, float(history[-1]), horizon)


@dataclass
class CharacteristicPoint:
    d: float
    v_o: float
    ok: bool
    message: str = ""


def operating_characteristic(params: ConverterParams, d_grid: Sequence[float],
                             v_in: float | None = None,
                             horizon: float = 0.5) -> list[CharacteristicPoint]:
    """Steady-state output voltage over a duty grid (unclamped above ``d_max``)."""
    out = []
    for d in d_grid:
        try:
            v = steady_state_output(params, float(d), v_in, horizon=horizon, clamp=False)
            out.append(CharacteristicPoint(float(d), v, True))
        except (SteadyStateNotReached, SimulationDiverged, ValueError) as exc:
            out.append(CharacteristicPoint(float(d), float("nan"), False, str(exc)))
    return out


def ideal_gain_with_esr(params: ConverterParams, d: float, v_in: float | None = None) -> float:
    """Averaged-model output ``V_i (1-d) / ((1-d)^2 + r/R)``."""
    v_in = params.v_i_nominal if v_in is None else v_in
    x = 1.0 - d
    return v_in * x / (x * x + params.r / params.r_load)
