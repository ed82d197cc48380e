"""PI control in ``kp (1 + ki / s)`` form, the five local gain sets, and the
Takagi-Sugeno blend of those gain sets over the output-voltage universe.

Note the form: the integral gain seen by the error is ``kp * ki``. With the
tabulated values (kp ~ 1e-6, ki ~ 1e6) that product is O(1) per volt-second.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

SUBINTERVALS = ("S1", "S2", "S3", "S4", "S5")


@dataclass(frozen=True)
class PiGains:
    kp: float
    ki: float

    def __post_init__(self):
        if not (self.kp > 0 and self.ki > 0):
            raise ValueError(f"PI gains must be positive, got kp={self.kp!r}, ki={self.ki!r}")

    @property
    def integral_gain(self) -> float:
        return self.kp * self.ki


@dataclass(frozen=True)
class PiState:
    """Integrator (volt-seconds) and the time of the last update.

    ``integral_gain`` remembers the ``kp * ki`` the integrator was built
    under, so a scheduler can hand over to new gains without a duty bump.
    """

    integrator: float = 0.0
    last_update: float = 0.0
    integral_gain: float | None = None


def table_iv() -> dict[str, PiGains]:
    return {
        "S1": PiGains(5.24e-6, 1.42e6),
        "S2": PiGains(2.93e-6, 1.72e6),
        "S3": PiGains(1.64e-6, 1.21e6),
        "S4": PiGains(7.34e-7, 1.38e6),
        "S5": PiGains(2.60e-7, 1.18e6),
    }


def pi_step(error: float, state: PiState, gains: PiGains, limits: tuple[float, float],
            dt: float, anti_windup: bool = True) -> tuple[float, PiState]:
    """One controller update with conditional integration.

    The integrator advances by ``error * dt`` unless the resulting output sits
    beyond a limit and the error pushes further past it; then it is frozen.
    Returns the clamped duty and the new state.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    lo, hi = limits
    kp = gains.kp
    kint = kp * gains.ki
    integ = state.integrator + error * dt
    u = kp * error + kint * integ
    if anti_windup and ((u > hi and error > 0) or (u < lo and error < 0)):
        integ = state.integrator
        u = kp * error + kint * integ
    duty = min(max(u, lo), hi)
    return duty, PiState(integ, state.last_update + dt, kint)


@dataclass(frozen=True)
class FuzzyPartition:
    """Five sets over the output-voltage universe with linear overlaps.

    ``edges`` are the set boundaries (12, 18, 24, 31, 40, 57 V). Around each
    internal boundary adjacent memberships cross linearly over
    ``+/- overlap_halfwidth``; everywhere else exactly one set is active.
    """

    edges: tuple[float, ...] = (12.0, 18.0, 24.0, 31.0, 40.0, 57.0)
    overlap_halfwidth: float = 1.0
    labels: tuple[str, ...] = SUBINTERVALS

    def __post_init__(self):
        e = self.edges
        if len(e) != len(self.labels) + 1:
            raise ValueError("need one more edge than labels")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError("edges must increase")
        h = self.overlap_halfwidth
        if h <= 0:
            raise ValueError("overlap_halfwidth must be positive")
        # overlaps may not meet inside a set, otherwise a midpoint loses its single rule
        if any(b - a <= 2 * h for a, b in zip(e, e[1:])):
            raise ValueError("overlap_halfwidth too wide for the set widths")

    @property
    def universe(self) -> tuple[float, float]:
        return self.edges[0], self.edges[-1]

    def midpoint(self, label: str) -> float:
        k = self.labels.index(label)
        return 0.5 * (self.edges[k] + self.edges[k + 1])

    def label_of(self, v: float) -> str:
        w = membership_weights(v, self)
        return self.labels[max(range(len(w)), key=w.__getitem__)]


def membership_weights(v: float, partition: FuzzyPartition) -> tuple[float, ...]:
    """Trapezoidal partition-of-unity weights at ``v`` (saturating outside the universe)."""
    h = partition.overlap_halfwidth
    # lam[j]: how far v has crossed internal boundary j, in [0, 1]
    lam = [1.0]
    for b in partition.edges[1:-1]:
        x = (v - (b - h)) / (2.0 * h)
        lam.append(0.0 if x <= 0.0 else 1.0 if x >= 1.0 else x)
    lam.append(0.0)
    return tuple(lam[k] - lam[k + 1] for k in range(len(partition.labels)))


def blended_gains(v: float, partition: FuzzyPartition,
                  table: Mapping[str, PiGains]) -> PiGains:
    """Zero-order Sugeno weighted average of the local gain sets."""
    w = membership_weights(v, partition)
    kp = 0.0
    ki = 0.0
    for wk, label in zip(w, partition.labels):
        if wk:
            kp += wk * table[label].kp
            ki += wk * table[label].ki
    return PiGains(kp, ki)


@dataclass(frozen=True)
class TsfConfig:
    partition: FuzzyPartition = field(default_factory=FuzzyPartition)
    table: Mapping[str, PiGains] = field(default_factory=table_iv)
    schedule_on: str = "reference"  # or "output"
    bumpless: bool = True

    def __post_init__(self):
        if self.schedule_on not in ("reference", "output"):
            raise ValueError(f"schedule_on must be 'reference' or 'output', got {self.schedule_on!r}")
        missing = set(self.partition.labels) - set(self.table)
        if missing:
            raise ValueError(f"gain table lacks {sorted(missing)}")


def tsf_pi_step(v_ref: float, v_o: float, state: PiState, config: TsfConfig,
                limits: tuple[float, float], dt: float,
                anti_windup: bool = True) -> tuple[float, PiState, PiGains]:
    """Blend the local gains at the scheduling voltage and run one PI update.

    With ``config.bumpless`` the integrator is rescaled whenever ``kp * ki``
    changes so the integral contribution to the duty is continuous.
    Returns (duty, new state, active gains).
    """
    v_sched = v_ref if config.schedule_on == "reference" else v_o
    gains = blended_gains(v_sched, config.partition, config.table)
    kint = gains.integral_gain
    if config.bumpless and state.integral_gain is not None and state.integral_gain != kint:
        state = replace(state, integrator=state.integrator * state.integral_gain / kint)
    duty, new_state = pi_step(v_ref - v_o, state, gains, limits, dt, anti_windup)
    return duty, new_state, gains
