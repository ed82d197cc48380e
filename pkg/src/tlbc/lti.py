"""Rational transfer functions, the identified small-signal models, and
linear time-domain responses of the open and closed small-signal loops.

Coefficient magnitudes reach 1e13 in seconds, so every computation runs in
normalised time ``t' = t / TIME_SCALE`` where the coefficients are O(1).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .circuit import Schedule, schedule_at

TIME_SCALE = 1e-4
SUBINTERVALS = ("S1", "S2", "S3", "S4", "S5")


class RootFindingError(RuntimeError):
    pass


def _trim(coeffs) -> np.ndarray:
    c = np.atleast_1d(np.asarray(coeffs, dtype=float))
    nz = np.flatnonzero(c)
    return c[nz[0]:] if len(nz) else np.zeros(1)


@dataclass(frozen=True)
class TransferFunction:
    """``num(s) / den(s)`` with coefficients in descending powers of ``s``."""

    num: tuple
    den: tuple
    input_label: str | None = None      # "input_voltage" or "duty"
    subinterval: str | None = None
    corrected_from_paper: bool = False
    note: str = field(default="", compare=False)

    def __post_init__(self):
        num = tuple(float(v) for v in _trim(self.num))
        den = tuple(float(v) for v in _trim(self.den))
        if den == (0.0,):
            raise ValueError("denominator is identically zero")
        if len(num) > len(den):
            raise ValueError("improper transfer function (more zeros than poles)")
        if not all(map(math.isfinite, num + den)):
            raise ValueError("non-finite coefficient")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @property
    def n_poles(self) -> int:
        return len(self.den) - 1

    @property
    def n_zeros(self) -> int:
        return 0 if self.num == (0.0,) else len(self.num) - 1

    @property
    def strictly_proper(self) -> bool:
        return self.n_zeros < self.n_poles or self.num == (0.0,)

    def monic(self) -> TransferFunction:
        lead = self.den[0]
        return TransferFunction(np.array(self.num) / lead, np.array(self.den) / lead,
                                self.input_label, self.subinterval,
                                self.corrected_from_paper, self.note)

    def __call__(self, s):
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def to_text(self) -> str:
        fmt = " ".join
        return (f"num: {fmt(f'{c:.6e}' for c in self.num)} / "
                f"den: {fmt(f'{c:.6e}' for c in self.den)}")

    @classmethod
    def from_text(cls, text: str, **kwargs) -> TransferFunction:
        m = re.fullmatch(r"\s*num:\s*(.+?)\s*/\s*den:\s*(.+?)\s*", text)
        if not m:
            raise ValueError(f"cannot parse transfer function {text!r}")
        num = [float(tok) for tok in m.group(1).split()]
        den = [float(tok) for tok in m.group(2).split()]
        return cls(num, den, **kwargs)


@dataclass(frozen=True)
class ModelPair:
    f_i: TransferFunction
    f_d: TransferFunction


@dataclass
class LinearResponse:
    time: np.ndarray
    value: np.ndarray

    @property
    def final_value(self) -> float:
        return float(self.value[-1])


_TABLE_III = {
    # subinterval: (F_i num, F_i den, F_d num, F_d den)
    "S1": ([2.035e12], [1, 6.442e4, 7.87e7, 1.629e12],
           [-6.136e8, 3.94e13], [1, 8.311e4, 5.087e7, 2.067e12]),
    "S2": ([1.541e12], [1, 6.509e4, 6.849e7, 9.261e11],
           [-8.927e8, 3.928e13], [1, 8.302e4, 4.026e7, 1.151e12]),
    "S3": ([1.153e12], [1, 6.494e4, 6.223e7, 5.205e11],
           [-1.492e9, 3.826e13], [1, 8.135e4, 3.376e7, 6.276e11]),
    "S4": ([7.729e11], [1, 6.535e4, 5.819e7, 2.336e11],
           [-3.313e8, 3.65e13], [1, 8.024e4, 2.918e7, 2.694e11]),
    "S5": ([4.761e11], [1, 6.714e4, 5.74e7, 8.761e10],
           [-8.011e9, 3.383e13], [1, 7.674e4, 2.588e7, 8.904e10]),
}

S2_PRINTED_CONSTANT = 9.261e12
S2_NOTE = ("denominator constant printed as 9.261e12 is unstable (Routh-Hurwitz) and gives "
           "DC gain 0.166; stored as 9.261e11 (stable, DC gain 1.66)")
S5_NOTE = "F_d5 zero coefficient -8.011e9 is ~10x its neighbours; kept as printed"


def table_iii_registry() -> dict[str, ModelPair]:
    """The ten identified small-signal models keyed by subinterval."""
    out = {}
    for key, (ni, di, nd, dd) in _TABLE_III.items():
        f_i = TransferFunction(ni, di, "input_voltage", key,
                               corrected_from_paper=(key == "S2"),
                               note=S2_NOTE if key == "S2" else "")
        f_d = TransferFunction(nd, dd, "duty", key, note=S5_NOTE if key == "S5" else "")
        out[key] = ModelPair(f_i, f_d)
    return out


def dc_gain(tf: TransferFunction) -> float:
    if tf.den[-1] == 0:
        raise ZeroDivisionError("transfer function has a pole at s = 0")
    return tf.num[-1] / tf.den[-1] if len(tf.num) else 0.0


def _scaled(coeffs: Sequence[float], degree: int, tau: float) -> np.ndarray:
    # c_k s^k  ->  c_k tau^(degree - k) sigma^k   (both polynomials share tau^degree)
    c = np.asarray(coeffs, dtype=float)
    powers = degree - np.arange(len(c) - 1, -1, -1)
    return c * tau ** powers


def normalized(tf: TransferFunction, tau: float = TIME_SCALE) -> tuple[np.ndarray, np.ndarray]:
    """Monic coefficients of the same system in time units of ``tau``."""
    n = tf.n_poles
    den = _scaled(tf.den, n, tau)
    num = _scaled(tf.num, n, tau)
    return num / den[0], den / den[0]


def polynomial_roots(coeffs: Sequence[float], tol: float = 1e-8) -> np.ndarray:
    """Roots via eigenvalues of the (balanced) companion matrix."""
    c = _trim(coeffs)
    if len(c) < 2:
        return np.zeros(0, dtype=complex)
    c = c / c[0]
    n = len(c) - 1
    comp = np.zeros((n, n))
    comp[0, :] = -c[1:]
    comp[1:, :-1] = np.eye(n - 1)
    roots = np.linalg.eigvals(comp)  # LAPACK geev balances by default
    if not np.all(np.isfinite(roots)):
        raise RootFindingError("eigenvalue solver returned non-finite roots")
    mags = np.abs(roots)
    scale = np.array([np.sum(np.abs(c) * m ** np.arange(n, -1, -1)) for m in mags])
    resid = np.abs(np.polyval(c, roots)) / scale
    if np.any(resid > tol):
        raise RootFindingError(f"root residual {resid.max():.2e} exceeds {tol:g}")
    return roots


def poles(tf: TransferFunction) -> np.ndarray:
    if tf.n_poles < 1:
        raise ValueError("transfer function has no poles")
    _, den = normalized(tf)
    return polynomial_roots(den) / TIME_SCALE


def zeros(tf: TransferFunction) -> np.ndarray:
    num, _ = normalized(tf)
    return polynomial_roots(num) / TIME_SCALE


def is_hurwitz(coeffs: Sequence[float]) -> bool:
    return bool(np.all(polynomial_roots(coeffs).real < 0))


def is_stable(tf: TransferFunction) -> bool:
    return bool(np.all(poles(tf).real < 0))


def canonical_realization(num: np.ndarray, den: np.ndarray):
    """Controllable canonical form ``(A, B, C, D)`` of a monic proper model."""
    n = len(den) - 1
    num = np.concatenate([np.zeros(n + 1 - len(num)), num])
    d = num[0]
    b = num[1:] - d * den[1:]
    a = np.zeros((n, n))
    a[0, :] = -den[1:]
    if n > 1:
        a[1:, :-1] = np.eye(n - 1)
    bvec = np.zeros(n)
    bvec[0] = 1.0
    return a, bvec, b.copy(), d


def rk4_affine_map(a: np.ndarray, b: np.ndarray, h: float):
    """One RK4 step of ``x' = A x + B u`` with ``u`` held constant.

    For a linear system RK4 reduces to ``x+ = M x + N u`` with the truncated
    exponential series below.
    """
    n = a.shape[0]
    ha = h * a
    eye = np.eye(n)
    ha2 = ha @ ha
    ha3 = ha2 @ ha
    m = eye + ha + ha2 / 2 + ha3 / 6 + ha3 @ ha / 24
    nmat = h * (eye + ha / 2 + ha2 / 6 + ha3 / 24) @ np.asarray(b, dtype=float).reshape(n, -1)
    return m, nmat


@njit(cache=True)
def _propagate(m, nmat, c, d, u):
    nsteps, nin = u.shape
    nx = m.shape[0]
    x = np.zeros(nx)
    y = np.empty(nsteps)
    for k in range(nsteps):
        acc = 0.0
        for i in range(nx):
            acc += c[i] * x[i]
        for j in range(nin):
            acc += d[j] * u[k, j]
        y[k] = acc
        xn = np.zeros(nx)
        for i in range(nx):
            s = 0.0
            for j in range(nx):
                s += m[i, j] * x[j]
            for j in range(nin):
                s += nmat[i, j] * u[k, j]
            xn[i] = s
        x = xn
    return y


def _time_grid(t_end: float, dt: float) -> np.ndarray:
    n = int(round(t_end / dt))
    return np.arange(n + 1) * dt


def _check_step(tfs: Sequence[TransferFunction], dt: float):
    fastest = max(float(np.max(np.abs(poles(tf)))) for tf in tfs)
    if dt >= 0.1 / fastest:
        raise ValueError(f"dt = {dt:g} s does not resolve the fastest pole "
                         f"({fastest:.3g} rad/s); need dt < {0.1 / fastest:.3g} s")


def _simulate_state_space(a, b, c, d, inputs: np.ndarray, dt: float) -> np.ndarray:
    m, nmat = rk4_affine_map(a, b, dt / TIME_SCALE)
    return _propagate(m, np.ascontiguousarray(nmat), np.asarray(c, dtype=float),
                      np.atleast_1d(np.asarray(d, dtype=float)),
                      np.ascontiguousarray(inputs, dtype=float))


def lsim(tf: TransferFunction, u: np.ndarray, dt: float) -> np.ndarray:
    """Response to ``u`` held constant over each step of length ``dt`` (zero initial state)."""
    num, den = normalized(tf)
    a, b, c, d = canonical_realization(num, den)
    return _simulate_state_space(a, b.reshape(-1, 1), c, [d], np.asarray(u, float).reshape(-1, 1), dt)


def step_response(tf: TransferFunction, amplitude: float, t_end: float,
                  dt: float) -> LinearResponse:
    _check_step([tf], dt)
    t = _time_grid(t_end, dt)
    return LinearResponse(t, lsim(tf, np.full(len(t), float(amplitude)), dt))


def small_signal_open_loop(f_i: TransferFunction, f_d: TransferFunction,
                           dv_in: Schedule, dd: Schedule, t_end: float,
                           dt: float) -> LinearResponse:
    """Output deviation ``F_i dv_in + F_d dd`` for piecewise-constant deviations."""
    _check_step([f_i, f_d], dt)
    t = _time_grid(t_end, dt)
    y = lsim(f_i, schedule_at(dv_in, t), dt) + lsim(f_d, schedule_at(dd, t), dt)
    return LinearResponse(t, y)


def closed_loop_matrices(f_d: TransferFunction, f_i: TransferFunction, gains):
    """State matrices of the loop ``y = F_d C (r - y) + F_i v``, ``C = kp (1 + ki / s)``.

    States: plant F_d, plant F_i, controller integrator (normalised time).
    Inputs: reference deviation, input-voltage deviation. Returns (A, B, C).
    """
    if f_d.n_zeros >= f_d.n_poles or f_i.n_zeros >= f_i.n_poles:
        raise ValueError("closed-loop composition needs strictly proper plants")
    ad, bd, cd, _ = canonical_realization(*normalized(f_d))
    ai, bi, ci, _ = canonical_realization(*normalized(f_i))
    kp = gains.kp
    kint = gains.kp * gains.ki * TIME_SCALE
    nd, ni = len(ad), len(ai)
    n = nd + ni + 1
    a = np.zeros((n, n))
    bmat = np.zeros((n, 2))
    # u = kp (r - y) + kint z,  y = cd xd + ci xi,  z' = r - y
    a[:nd, :nd] = ad - kp * np.outer(bd, cd)
    a[:nd, nd:nd + ni] = -kp * np.outer(bd, ci)
    a[:nd, -1] = kint * bd
    a[nd:nd + ni, nd:nd + ni] = ai
    a[-1, :nd] = -cd
    a[-1, nd:nd + ni] = -ci
    bmat[:nd, 0] = kp * bd
    bmat[nd:nd + ni, 1] = bi
    bmat[-1, 0] = 1.0
    c = np.concatenate([cd, ci, [0.0]])
    return a, bmat, c


def closed_loop_linear(f_d: TransferFunction, f_i: TransferFunction, gains,
                       dv_ref: Schedule, dv_in: Schedule, t_end: float,
                       dt: float) -> LinearResponse:
    """Linear PI loop (no saturation) around the small-signal plant."""
    _check_step([f_d, f_i], dt)
    a, b, c = closed_loop_matrices(f_d, f_i, gains)
    t = _time_grid(t_end, dt)
    u = np.column_stack([schedule_at(dv_ref, t), schedule_at(dv_in, t)])
    return LinearResponse(t, _simulate_state_space(a, b, c, np.zeros(2), u, dt))


def closed_loop_poles(f_d: TransferFunction, gains) -> np.ndarray:
    """Roots of ``s den(s) + kp num(s) (s + ki)`` (the reference-to-output loop)."""
    num, den = normalized(f_d)
    ki_scaled = gains.ki * TIME_SCALE
    char = np.polyadd(np.polymul(den, [1.0, 0.0]),
                      gains.kp * np.polymul(num, [1.0, ki_scaled]))
    return polynomial_roots(char) / TIME_SCALE


def settling_time(resp: LinearResponse, band: float = 0.02) -> float:
    """Time after which the response stays within ``band`` of its final value."""
    final = resp.value[-1]
    outside = np.flatnonzero(np.abs(resp.value - final) > band * abs(final))
    if len(outside) == 0:
        return 0.0
    if outside[-1] + 1 >= len(resp.time):
        return math.inf
    return float(resp.time[outside[-1] + 1])
