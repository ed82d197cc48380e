"""Small-signal identification of the switched converter.

Step experiments are recorded as one cycle average per switching period.
Models are fitted by output error: an equation-error (ARX) fit gives the
starting poles, the numerator follows by linear least squares, and a
Levenberg-Marquardt loop refines all coefficients against the exact
period-averaged step response of the candidate model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import expm

from .circuit import (ConverterParams, PeriodStepper, cycle_average,
                      periodic_steady_state)
from .lti import (TIME_SCALE, TransferFunction, _propagate, canonical_realization,
                  normalized)

CHANNELS = ("input_voltage_step", "duty_step")


class IdentificationError(RuntimeError):
    """Fit failed; ``best`` holds the best iterate reached (may be None)."""

    def __init__(self, message: str, best: FitResult | None = None):
        super().__init__(message)
        self.best = best


class OperatingPoint(NamedTuple):
    v_in: float
    d: float
    subinterval: str | None = None


def operating_points(v_in: float = 12.0,
                     midpoints: Sequence[float] = (15.0, 21.0, 27.5, 35.5, 48.5)
                     ) -> dict[str, OperatingPoint]:
    """One point per subinterval: the lossless duty for the subinterval midpoint."""
    return {f"S{k + 1}": OperatingPoint(v_in, 1.0 - v_in / v_mid, f"S{k + 1}")
            for k, v_mid in enumerate(midpoints)}


@dataclass
class Experiment:
    operating_point: OperatingPoint
    channel: str
    step_size: float
    t_s: np.ndarray
    deviation_v: np.ndarray
    step_time: float
    period: float
    baseline_v: float = 0.0
    baseline_removed: bool = True

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        self.t_s = np.asarray(self.t_s, dtype=float)
        self.deviation_v = np.asarray(self.deviation_v, dtype=float)

    @property
    def step_index(self) -> int:
        return int(round(self.step_time / self.period))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "deviation_v"])
            for t, y in zip(self.t_s, self.deviation_v):
                w.writerow([repr(float(t)), repr(float(y))])

    @classmethod
    def from_csv(cls, path: str | Path, operating_point: OperatingPoint, channel: str,
                 step_size: float, step_time: float, period: float) -> Experiment:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if header != ["t_s", "deviation_v"]:
                raise ValueError(f"unexpected header {header!r}")
            rows = np.array([[float(a), float(b)] for a, b in reader])
        return cls(operating_point, channel, step_size, rows[:, 0], rows[:, 1],
                   step_time, period)


def generate_experiment(params: ConverterParams, operating_point: OperatingPoint,
                        channel: str, step_size: float | None = None,
                        pre_time: float = 2e-3, post_time: float = 20e-3) -> Experiment:
    """Step the open-loop converter from its periodic steady state.

    ``step_size`` defaults to 1 V on the input or 0.01 on the duty. The
    deviation is the cycle-averaged output minus its pre-step steady value;
    sample ``k`` is the average over ``[k T, (k + 1) T)``.
    """
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")
    if step_size is None:
        step_size = 1.0 if channel == "input_voltage_step" else 0.01
    v_in, d = operating_point.v_in, operating_point.d
    period = params.period
    n_pre = int(round(pre_time / period))
    n_post = int(round(post_time / period))
    x0 = periodic_steady_state(params, d, v_in)
    baseline = cycle_average(params, x0, d, v_in).v_o
    vin_p = np.full(n_pre + n_post, float(v_in))
    d_p = np.full(n_pre + n_post, float(d))
    if channel == "input_voltage_step":
        vin_p[n_pre:] += step_size
    else:
        d_p[n_pre:] += step_size
    avg, _ = PeriodStepper(params, x0).advance(vin_p, d_p)
    dev = avg[:, 1] + avg[:, 2] - baseline
    t = np.arange(n_pre + n_post) * period
    return Experiment(operating_point, channel, float(step_size), t, dev,
                      n_pre * period, period, float(baseline))


def fit_metric(measured, simulated) -> float:
    """Normalised-RMSE fit in percent (100 is exact; may be negative)."""
    m = np.asarray(measured, dtype=float)
    s = np.asarray(simulated, dtype=float)
    if m.shape != s.shape or m.ndim != 1 or len(m) < 2:
        raise ValueError("need two equal-length series with at least two samples")
    spread = np.linalg.norm(m - m.mean())
    if spread == 0:
        raise ValueError("fit metric undefined for a constant measured series")
    return float(100.0 * (1.0 - np.linalg.norm(m - s) / spread))


def period_averaged_step(num: np.ndarray, den: np.ndarray, amplitude: float,
                         period: float, n_samples: int, step_index: int) -> np.ndarray:
    """Exact per-period averages of a model's response to a step at a period boundary.

    ``num`` and ``den`` are normalised-time coefficients (see ``lti.normalized``).
    The model is augmented with an integrator of its output; differencing that
    integral over each period gives the cycle average.
    """
    a, b, c, d = canonical_realization(np.asarray(num, float), np.asarray(den, float))
    n = len(a)
    aug = np.zeros((n + 2, n + 2))
    aug[:n, :n] = a
    aug[n, :n] = c
    aug[:n, n + 1] = b
    aug[n, n + 1] = d
    h = period / TIME_SCALE
    e = expm(aug * h)
    phi = e[:n + 1, :n + 1]
    gam = e[:n + 1, n + 1:n + 2]
    sel = np.zeros(n + 1)
    sel[n] = 1.0
    n_post = n_samples - step_index
    u = np.full((n_post + 1, 1), float(amplitude))
    integral = _propagate(phi, np.ascontiguousarray(gam), sel, np.zeros(1), u)
    out = np.zeros(n_samples)
    out[step_index:] = np.diff(integral) / h
    return out


class LmResult(NamedTuple):
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool


def levenberg_marquardt(residual: Callable[[np.ndarray], np.ndarray], x0: Sequence[float],
                        max_iter: int = 200, rtol: float = 1e-10,
                        lam0: float = 1e-3) -> LmResult:
    """Minimise ``sum(residual(x)**2)``.

    Gauss-Newton steps on a central-difference Jacobian with Marquardt
    (diagonal-scaled) damping. Stops when an accepted step lowers the cost by
    less than ``rtol`` relative, when damping can no longer find a descent
    step, or after ``max_iter`` iterations.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise IdentificationError("objective is not finite at the initial guess")
    lam = lam0
    for it in range(1, max_iter + 1):
        jac = np.empty((len(r), len(x)))
        for k in range(len(x)):
            hk = 1e-6 * max(abs(x[k]), 1e-3)
            xp = x.copy()
            xm = x.copy()
            xp[k] += hk
            xm[k] -= hk
            jac[:, k] = (residual(xp) - residual(xm)) / (2 * hk)
        if not np.all(np.isfinite(jac)):
            return LmResult(x, cost, it, False)
        grad = jac.T @ r
        hess = jac.T @ jac
        diag = np.maximum(np.diag(hess), 1e-12 * max(np.max(np.diag(hess)), 1e-300))
        while True:
            try:
                step = np.linalg.solve(hess + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                x_new = x + step
                r_new = residual(x_new)
                c_new = float(r_new @ r_new)
                if math.isfinite(c_new) and c_new < cost:
                    break
            lam *= 10.0
            if lam > 1e16:
                return LmResult(x, cost, it, True)
        decrease = (cost - c_new) / cost if cost > 0 else 0.0
        x, r, cost = x_new, r_new, c_new
        lam = max(lam / 10.0, 1e-12)
        if decrease < rtol or cost == 0.0:
            return LmResult(x, cost, it, True)
    return LmResult(x, cost, max_iter, False)


@dataclass
class FitResult:
    model: TransferFunction | None
    fit_percent: float
    n_poles: int
    n_zeros: int
    iterations: int = 0
    error: str = ""
    stable: bool = True
    hit_iteration_limit: bool = False

    @property
    def ok(self) -> bool:
        return self.model is not None and not self.error

    def to_text(self) -> str:
        head = f"poles={self.n_poles} zeros={self.n_zeros}"
        if not self.ok:
            return f"{head} FAILED: {self.error}"
        return f"{self.model.to_text()}\nfit: {self.fit_percent:.2f} % ({head})"


def _arx_poles(y: np.ndarray, u: np.ndarray, order: int, period: float) -> np.ndarray:
    """Continuous poles (normalised time) from an equation-error fit."""
    rows = []
    rhs = []
    for k in range(order, len(y)):
        rows.append(np.concatenate([-y[k - order:k][::-1], u[k - order:k][::-1]]))
        rhs.append(y[k])
    theta, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    zd = np.roots(np.concatenate([[1.0], theta[:order]]))
    h = period / TIME_SCALE
    s = []
    for z in zd:
        mag = min(abs(z), 0.999)
        if mag < 1e-6:
            mag = 1e-6
        # a negative real root has no continuous counterpart; keep only its decay
        ang = np.angle(z) if abs(z.imag) > 1e-12 else 0.0
        s.append((math.log(mag) + 1j * ang) / h)
    return np.array(s)


def _numerator_for(den: np.ndarray, n_zeros: int, exp: Experiment) -> np.ndarray:
    basis = []
    for j in range(n_zeros, -1, -1):
        num = np.zeros(j + 1)
        num[0] = 1.0
        basis.append(period_averaged_step(num, den, exp.step_size, exp.period,
                                          len(exp.deviation_v), exp.step_index))
    coef, *_ = np.linalg.lstsq(np.column_stack(basis), exp.deviation_v, rcond=None)
    return coef


def fit_tf(experiment: Experiment, n_poles: int, n_zeros: int, max_iter: int = 200,
           rtol: float = 1e-10, restarts: int = 0, seed: int = 0) -> FitResult:
    """Output-error fit of ``n_poles``/``n_zeros`` to a step experiment.

    ``restarts`` extra starts perturb the ARX poles with a seeded generator;
    the lowest-cost refinement wins. Raises :class:`IdentificationError` on
    optimiser failure, or when the best model is unstable although the data
    settles.
    """
    if not 0 <= n_zeros <= n_poles:
        raise ValueError("need 0 <= n_zeros <= n_poles")
    exp = experiment
    y = exp.deviation_v
    if len(y) < 50:
        raise ValueError("experiment needs at least 50 samples")
    if not np.all(np.isfinite(y)):
        raise IdentificationError("experiment data contains non-finite samples")
    u = np.zeros(len(y))
    u[exp.step_index:] = exp.step_size
    n_samples, k0 = len(y), exp.step_index

    def unpack(theta):
        den = np.concatenate([[1.0], theta[:n_poles]])
        return theta[n_poles:], den

    def residual(theta):
        num, den = unpack(theta)
        with np.errstate(all="ignore"):
            sim = period_averaged_step(num, den, exp.step_size, exp.period, n_samples, k0)
        if not np.all(np.isfinite(sim)):
            return np.full(n_samples, np.inf)
        return sim - y

    rng = np.random.default_rng(seed)
    base_poles = _arx_poles(y, u, n_poles, exp.period)
    best = None
    for attempt in range(restarts + 1):
        p = base_poles
        if attempt:
            p = p * np.exp(rng.normal(0.0, 0.3, len(p)))
        den0 = np.real(np.poly(p))
        num0 = _numerator_for(den0, n_zeros, exp)
        try:
            res = levenberg_marquardt(residual, np.concatenate([den0[1:], num0]),
                                      max_iter=max_iter, rtol=rtol)
        except IdentificationError:
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise IdentificationError("no start produced a finite objective")

    num, den = unpack(best.x)
    model = TransferFunction(_denormalize(num, n_poles), _denormalize(den, n_poles),
                             "input_voltage" if exp.channel == "input_voltage_step" else "duty",
                             exp.operating_point.subinterval)
    sim = period_averaged_step(num, den, exp.step_size, exp.period, n_samples, k0)
    result = FitResult(model, fit_metric(y, sim), n_poles, n_zeros, best.iterations,
                       hit_iteration_limit=not best.converged)
    stable = bool(np.all(np.real(np.roots(den)) < 0))
    result.stable = stable
    if not stable and _settles(y):
        raise IdentificationError("fitted model is unstable although the data settles", result)
    return result


def _settles(y: np.ndarray, band: float = 0.02) -> bool:
    tail = y[-max(2, len(y) // 10):]
    level = tail.mean()
    return bool(np.max(np.abs(tail - level)) <= band * max(abs(level), 1e-12))


def _denormalize(coeffs: np.ndarray, degree: int) -> np.ndarray:
    # inverse of lti.normalized for a monic denominator of the given degree
    c = np.asarray(coeffs, dtype=float)
    powers = degree - np.arange(len(c) - 1, -1, -1)
    return c / TIME_SCALE ** powers


def structure_scan(experiment: Experiment, n_poles: int = 3,
                   zero_counts: Sequence[int] = (0, 1, 2, 3), **fit_kwargs) -> list[FitResult]:
    """Fit every zero count; failures are kept as entries and the scan goes on."""
    out = []
    for nz in sorted(zero_counts):
        try:
            out.append(fit_tf(experiment, n_poles, nz, **fit_kwargs))
        except (IdentificationError, ValueError, np.linalg.LinAlgError) as exc:
            best = getattr(exc, "best", None)
            out.append(FitResult(best.model if best else None,
                                 best.fit_percent if best else float("nan"),
                                 n_poles, nz, best.iterations if best else 0, str(exc),
                                 best.stable if best else False))
    return out


def synthetic_experiment(tf: TransferFunction, channel: str, step_size: float,
                         period: float = 1 / 32e3, pre_time: float = 2e-3,
                         post_time: float = 20e-3) -> Experiment:
    """Noise-free period-averaged step data generated by a known model."""
    n_pre = int(round(pre_time / period))
    n = n_pre + int(round(post_time / period))
    num, den = normalized(tf)
    y = period_averaged_step(num, den, step_size, period, n, n_pre)
    return Experiment(OperatingPoint(float("nan"), float("nan"), tf.subinterval), channel,
                      step_size, np.arange(n) * period, y, n_pre * period, period)
