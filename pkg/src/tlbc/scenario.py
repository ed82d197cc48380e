"""Closed- and open-loop experiment definitions, the runner, and step metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .circuit import (ConverterParams, ConverterState, PeriodStepper, Schedule,
                      SimulationDiverged, cycle_average, duty_for_output,
                      periodic_steady_state, schedule_at)
from .control import (FuzzyPartition, PiGains, PiState, TsfConfig, blended_gains, pi_step,
                      table_iv, tsf_pi_step)
from .series import TimeSeries

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class OpenLoop:
    duty: Schedule


@dataclass(frozen=True)
class FixedPi:
    gains: PiGains
    label: str = ""

    @classmethod
    def for_subinterval(cls, key: str) -> FixedPi:
        return cls(table_iv()[key], key)


@dataclass(frozen=True)
class TsfPi:
    config: TsfConfig = field(default_factory=TsfConfig)


Controller = Union[OpenLoop, FixedPi, TsfPi]


@dataclass
class Scenario:
    name: str
    t_end: float
    v_in_schedule: list
    v_ref_schedule: list
    controller: Controller
    initial_state: Union[str, ConverterState] = "auto-steady"
    anti_windup: bool = True
    note: str = ""

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        for label in ("v_in_schedule", "v_ref_schedule"):
            sched = [(float(t), float(v)) for t, v in getattr(self, label)]
            if not sched or sched[0][0] != 0.0:
                raise ValueError(f"{label} must start at t = 0")
            if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
                raise ValueError(f"{label} must be sorted by time")
            setattr(self, label, sched)
        if isinstance(self.controller, OpenLoop) and not np.isscalar(self.controller.duty):
            sched = [(float(t), float(v)) for t, v in self.controller.duty]
            if not sched or sched[0][0] != 0.0:
                raise ValueError("duty schedule must start at t = 0")
        if isinstance(self.initial_state, str) and self.initial_state != "auto-steady":
            raise ValueError(f"unknown initial state {self.initial_state!r}")

    def events(self) -> list[tuple[float, str]]:
        """Schedule change instants after t = 0, labelled by what changed."""
        ev = [(t, "v_in") for t, _ in self.v_in_schedule[1:]]
        ev += [(t, "v_ref") for t, _ in self.v_ref_schedule[1:]]
        if isinstance(self.controller, OpenLoop) and not np.isscalar(self.controller.duty):
            ev += [(float(t), "duty") for t, _ in self.controller.duty[1:]]
        return sorted(e for e in ev if e[0] < self.t_end)


@dataclass
class StepMetrics:
    overshoot_percent: float
    settling_time_s: float
    steady_state_error_v: float
    settled: bool
    final_value_v: float = float("nan")
    peak_deviation_v: float = float("nan")


def _initial_conditions(sc: Scenario, params: ConverterParams, v_in0: float, v_ref0: float):
    """Converter state and, for closed loops, the duty holding ``v_ref0``."""
    if isinstance(sc.controller, OpenLoop):
        d0 = float(schedule_at(sc.controller.duty, np.zeros(1))[0])
        if sc.initial_state == "auto-steady":
            return periodic_steady_state(params, d0, v_in0), d0
        return sc.initial_state, d0
    if sc.initial_state == "auto-steady":
        d0 = duty_for_output(params, v_ref0, v_in0)
        return periodic_steady_state(params, d0, v_in0), d0
    return sc.initial_state, 0.0


def run(scenario: Scenario, params: ConverterParams | None = None) -> TimeSeries:
    """Simulate a scenario; one row per switching (= control) period.

    Row ``k`` is stamped at ``k T`` and holds averages over ``[k T, (k+1) T)``
    together with the duty and gains applied in that period. The controller
    acts on the previous period's average output. A non-finite state ends the
    run early with ``diverged_at`` set instead of raising.
    """
    params = params or ConverterParams()
    sc = scenario
    period = params.period
    n = int(math.ceil(sc.t_end / period - 1e-9))
    t = np.arange(n) * period
    v_in = schedule_at(sc.v_in_schedule, t)
    v_ref = schedule_at(sc.v_ref_schedule, t)
    x0, d0 = _initial_conditions(sc, params, v_in[0], v_ref[0])
    stepper = PeriodStepper(params, x0)
    limits = (0.0, params.d_max)
    ctrl = sc.controller
    out = np.full((n, 6), np.nan)  # duty, i_l, v_c1, v_c2, kp, ki
    diverged_at = None

    if isinstance(ctrl, OpenLoop):
        duty = np.clip(schedule_at(ctrl.duty, t), *limits)
        chunk = 1024
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            try:
                avg, _ = stepper.advance(v_in[start:stop], duty[start:stop])
            except SimulationDiverged as exc:
                diverged_at = exc.time
                n = start
                break
            out[start:stop, 0] = duty[start:stop]
            out[start:stop, 1:4] = avg
    else:
        if isinstance(ctrl, FixedPi):
            kint = ctrl.gains.integral_gain
        else:
            gains0 = tsf_gains_at(ctrl.config, v_ref[0], v_ref[0])
            kint = gains0.integral_gain
        state = PiState(integrator=d0 / kint, integral_gain=kint)
        v_meas = cycle_average(params, stepper.x, d0, v_in[0]).v_o \
            if sc.initial_state == "auto-steady" else float(stepper.x[1] + stepper.x[2])
        vin_buf = np.empty(1)
        d_buf = np.empty(1)
        for k in range(n):
            if isinstance(ctrl, FixedPi):
                duty, state = pi_step(v_ref[k] - v_meas, state, ctrl.gains, limits, period,
                                      sc.anti_windup)
                gains = ctrl.gains
            else:
                duty, state, gains = tsf_pi_step(v_ref[k], v_meas, state, ctrl.config,
                                                 limits, period, sc.anti_windup)
            vin_buf[0] = v_in[k]
            d_buf[0] = duty
            try:
                avg, _ = stepper.advance(vin_buf, d_buf)
            except SimulationDiverged as exc:
                diverged_at = exc.time
                n = k
                break
            row = out[k]
            row[0] = duty
            row[1:4] = avg[0]
            row[4] = gains.kp
            row[5] = gains.ki
            v_meas = avg[0, 1] + avg[0, 2]

    ts = TimeSeries(t_s=t[:n], v_in=v_in[:n], v_ref=(v_ref[:n] if not isinstance(ctrl, OpenLoop)
                                                      else np.full(n, np.nan)),
                    duty=out[:n, 0], i_l=out[:n, 1], v_c1=out[:n, 2], v_c2=out[:n, 3],
                    v_o=out[:n, 2] + out[:n, 3], kp_active=out[:n, 4], ki_active=out[:n, 5],
                    diverged_at=diverged_at, meta={"scenario": sc.name})
    return ts


def tsf_gains_at(config: TsfConfig, v_ref: float, v_o: float) -> PiGains:
    v = v_ref if config.schedule_on == "reference" else v_o
    return blended_gains(v, config.partition, config.table)


def step_metrics(ts: TimeSeries, event_time: float, window_end: float | None = None,
                 target: float | None = None, band: float = 0.02,
                 min_periods: int = 20) -> StepMetrics:
    """Overshoot, +/-2 % settling time and steady-state error after an event.

    The window runs from ``event_time`` to ``window_end`` (default: end of the
    record). The final value is the mean of the window's last 10 %; the band
    is centred on it unless ``target`` is given. Overshoot is the excursion
    beyond the final value in the direction of travel, relative to the step
    size; it is reported as 0 when the step is smaller than the band
    (disturbance events).
    """
    dt = ts.sample_time
    if window_end is None:
        window_end = float(ts.t_s[-1]) + dt
    mask = (ts.t_s >= event_time - 1e-12) & (ts.t_s < window_end - 1e-12)
    idx = np.flatnonzero(mask)
    if len(idx) < min_periods:
        raise ValueError(f"analysis window after t = {event_time} has only {len(idx)} samples")
    y = ts.v_o[idx]
    tw = ts.t_s[idx]
    before = ts.v_o[idx[0] - 1] if idx[0] > 0 else y[0]
    tail = max(1, int(round(0.1 * len(y))))
    final = float(np.mean(y[-tail:]))
    centre = final if target is None else float(target)
    outside = np.flatnonzero(np.abs(y - centre) > band * abs(centre))
    if len(outside) == 0:
        settling, settled = 0.0, True
    elif outside[-1] == len(y) - 1:
        settling, settled = math.inf, False
    else:
        settling, settled = float(tw[outside[-1] + 1] - event_time), True
    step = final - before
    if abs(step) > band * abs(final) and settled:
        excursion = np.max(np.sign(step) * (y - final))
        overshoot = max(0.0, float(excursion)) / abs(step) * 100.0
    elif not settled:
        overshoot = float("nan")
    else:
        overshoot = 0.0
    ref = ts.v_ref[idx]
    sse = float(ref[-1] - final) if np.isfinite(ref[-1]) else float("nan")
    peak = float(np.max(np.abs(y - centre)))
    return StepMetrics(overshoot, settling, sse, settled, final, peak)


@dataclass
class EventReport:
    time: float
    kind: str
    level: float
    metrics: StepMetrics


def scenario_metrics(scenario: Scenario, ts: TimeSeries) -> list[EventReport]:
    """Step metrics for every schedule event, each window ending at the next event."""
    events = scenario.events()
    end = scenario.t_end if ts.diverged_at is None else float(ts.t_s[-1]) + ts.sample_time
    out = []
    for i, (t_ev, kind) in enumerate(events):
        t_next = events[i + 1][0] if i + 1 < len(events) else end
        t_next = min(t_next, end)
        if kind == "v_ref":
            level = float(schedule_at(scenario.v_ref_schedule, np.array([t_ev]))[0])
        elif kind == "v_in":
            level = float(schedule_at(scenario.v_in_schedule, np.array([t_ev]))[0])
        else:
            level = float(schedule_at(scenario.controller.duty, np.array([t_ev]))[0])
        try:
            m = step_metrics(ts, t_ev, t_next)
        except ValueError:
            m = StepMetrics(float("nan"), math.inf, float("nan"), False)
        out.append(EventReport(t_ev, kind, level, m))
    return out


FIG8_LEVELS = (15.0, 25.0, 42.0, 33.0, 50.0)
FIG8_TIMES = (0.0, 0.2, 0.4, 0.6, 0.8)
FIG11_V_IN = (11.0, 12.0, 13.0, 12.0, 11.0)
FIG11_TIMES = (0.0, 0.1, 0.2, 0.3, 0.4)
FIG7_REF_STEP = 2.0


def builtin_scenarios() -> dict[str, Scenario]:
    """The nine reproduction scenarios, keyed by name."""
    partition = FuzzyPartition()
    out = {}
    for k in range(1, 6):
        key = f"S{k}"
        mid = partition.midpoint(key)
        out[f"fig7_s{k}"] = Scenario(
            f"fig7_s{k}", 0.5,
            v_in_schedule=[(0.0, 11.0), (0.12, 13.0), (0.25, 11.0)],
            v_ref_schedule=[(0.0, mid), (0.36, mid + FIG7_REF_STEP)],
            controller=FixedPi.for_subinterval(key),
            note=f"reference step {mid:g} -> {mid + FIG7_REF_STEP:g} V is a reconstruction")
    ref_seq = list(zip(FIG8_TIMES, FIG8_LEVELS))
    out["fig8a"] = Scenario("fig8a", 1.0, [(0.0, 12.0)], ref_seq, FixedPi.for_subinterval("S1"))
    out["fig8b"] = Scenario("fig8b", 1.0, [(0.0, 12.0)], ref_seq, FixedPi.for_subinterval("S4"))
    out["fig11"] = Scenario("fig11", 0.5, list(zip(FIG11_TIMES, FIG11_V_IN)), [(0.0, 17.0)],
                            TsfPi(), note="input step instants (0.1 s apart) are a reconstruction")
    out["fig12"] = Scenario("fig12", 1.0, [(0.0, 12.0)], ref_seq, TsfPi())
    return out


FIGURE_REFS = {
    "fig7_s1": "Fig. 7(a)", "fig7_s2": "Fig. 7(b)", "fig7_s3": "Fig. 7(c)",
    "fig7_s4": "Fig. 7(d)", "fig7_s5": "Fig. 7(e)", "fig8a": "Fig. 8(a)",
    "fig8b": "Fig. 8(b)", "fig11": "Fig. 11", "fig12": "Fig. 12",
}


# scenario documents -------------------------------------------------------

_TOP_KEYS = {"name", "t_end", "initial_state", "converter", "controller", "schedules"}
_CONTROLLER_KEYS = {"type", "subinterval", "kp", "ki", "schedule_on", "overlap_halfwidth",
                    "bumpless", "anti_windup", "gains"}
_SCHEDULE_KEYS = {"v_in", "v_ref", "duty"}


class ScenarioFileError(ValueError):
    pass


def _reject_unknown(section: str, got: dict, allowed: set):
    extra = set(got) - allowed
    if extra:
        raise ScenarioFileError(f"unknown key(s) in [{section}]: {sorted(extra)}")


def _schedule(value, name: str):
    if isinstance(value, (int, float)):
        return [(0.0, float(value))]
    try:
        return [(float(t), float(v)) for t, v in value]
    except (TypeError, ValueError) as exc:
        raise ScenarioFileError(f"schedule {name!r} must be a number or a list of [t, value]") from exc


def scenario_from_dict(doc: dict) -> tuple[Scenario, dict]:
    """Build a scenario from a parsed document; also returns converter overrides."""
    _reject_unknown("top level", doc, _TOP_KEYS)
    for key in ("name", "t_end"):
        if key not in doc:
            raise ScenarioFileError(f"missing required key {key!r}")
    conv = dict(doc.get("converter", {}))
    valid_conv = set(ConverterParams.__dataclass_fields__)
    _reject_unknown("converter", conv, valid_conv)
    for k, v in conv.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ScenarioFileError(f"converter.{k} must be numeric")
    ctl = dict(doc.get("controller", {"type": "tsf_pi"}))
    _reject_unknown("controller", ctl, _CONTROLLER_KEYS)
    sch = dict(doc.get("schedules", {}))
    _reject_unknown("schedules", sch, _SCHEDULE_KEYS)

    kind = ctl.get("type", "tsf_pi")
    if kind == "open_loop":
        if "duty" not in sch:
            raise ScenarioFileError("open_loop controller needs schedules.duty")
        d = sch["duty"]
        controller: Controller = OpenLoop(float(d) if isinstance(d, (int, float))
                                          else _schedule(d, "duty"))
    elif kind == "fixed_pi":
        if "subinterval" in ctl:
            controller = FixedPi.for_subinterval(ctl["subinterval"])
        elif "kp" in ctl and "ki" in ctl:
            controller = FixedPi(PiGains(float(ctl["kp"]), float(ctl["ki"])), "custom")
        else:
            raise ScenarioFileError("fixed_pi needs 'subinterval' or both 'kp' and 'ki'")
    elif kind == "tsf_pi":
        table = table_iv()
        for label, g in ctl.get("gains", {}).items():
            if label not in table:
                raise ScenarioFileError(f"unknown subinterval {label!r} in controller.gains")
            _reject_unknown(f"controller.gains.{label}", g, {"kp", "ki"})
            table[label] = PiGains(float(g["kp"]), float(g["ki"]))
        controller = TsfPi(TsfConfig(
            FuzzyPartition(overlap_halfwidth=float(ctl.get("overlap_halfwidth", 1.0))),
            table, ctl.get("schedule_on", "reference"), bool(ctl.get("bumpless", True))))
    else:
        raise ScenarioFileError(f"unknown controller type {kind!r}")

    if kind != "open_loop" and "v_ref" not in sch:
        raise ScenarioFileError(f"{kind} controller needs schedules.v_ref")
    init = doc.get("initial_state", "auto-steady")
    if not isinstance(init, str):
        init = ConverterState(*map(float, init))
    v_ref = _schedule(sch.get("v_ref", 0.0), "v_ref")
    sc = Scenario(str(doc["name"]), float(doc["t_end"]), _schedule(sch.get("v_in", 12.0), "v_in"),
                  v_ref, controller, init, bool(ctl.get("anti_windup", True)))
    return sc, conv


def load_scenario(path: str | Path) -> tuple[Scenario, dict]:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioFileError(f"{path}: {exc}") from exc
    try:
        return scenario_from_dict(doc)
    except (TypeError, KeyError) as exc:
        raise ScenarioFileError(f"{path}: {exc}") from exc


def run_batch(scenarios: Sequence[Scenario], params: ConverterParams | None = None,
              workers: int = 1) -> dict[str, TimeSeries]:
    """Run independent scenarios, optionally in a process pool; results keyed by name."""
    if workers <= 1:
        return {sc.name: run(sc, params) for sc in scenarios}
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, scenarios, [params] * len(scenarios)))
    return {sc.name: ts for sc, ts in sorted(zip(scenarios, results), key=lambda p: p[0].name)}
