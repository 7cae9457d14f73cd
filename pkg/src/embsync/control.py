"""Rational transfer functions, step metrics, stability margins, Ziegler-Nichols.

Numerics for the magnetic-levitation-style case study: everything is SISO,
continuous-time, and proper. Frequencies in rad/s, margins in dB/degrees,
time in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_W_MIN = 1e-3
DEFAULT_W_MAX = 1e3
DEFAULT_SWEEP_POINTS = 2000
SETTLING_BAND = 0.02  # 2% band
DERIV_FILTER_DIV = 10.0  # tau_f = Td / 10


def _poly(c) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(c, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("polynomial coefficients must be a non-empty 1-D sequence")
    return arr


def _polyadd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = max(len(a), len(b))
    out = np.zeros(n)
    out[n - len(a):] += a
    out[n - len(b):] += b
    return out


def _trim(c: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(c) > 0.0)
    if not np.any(np.abs(c) > 0.0):
        return c[-1:]
    return c[idx:]


@dataclass(frozen=True)
class TransferFunction:
    """Rational G(s) = num(s)/den(s), coefficients in descending powers of s."""

    num: np.ndarray
    den: np.ndarray

    def __init__(self, num, den):
        num = _trim(_poly(num))
        den = _trim(_poly(den))
        if den[0] == 0.0:
            raise ValueError("denominator leading coefficient must be nonzero")
        if len(num) > len(den):
            raise ValueError("transfer function must be proper or biproper")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    def __mul__(self, other: "TransferFunction") -> "TransferFunction":
        return TransferFunction(np.polymul(self.num, other.num),
                                np.polymul(self.den, other.den))

    def __add__(self, other: "TransferFunction") -> "TransferFunction":
        num = _polyadd(np.polymul(self.num, other.den),
                       np.polymul(other.num, self.den))
        return TransferFunction(num, np.polymul(self.den, other.den))

    def feedback_unity(self) -> "TransferFunction":
        """Closed loop T = G/(1+G) under unity negative feedback."""
        return TransferFunction(self.num, _polyadd(self.den, self.num))

    def frequency_response(self, w) -> np.ndarray:
        s = 1j * np.asarray(w, dtype=float)
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def poles(self) -> np.ndarray:
        return np.roots(self.den)

    def dc_gain(self) -> float:
        """G(0); +/-inf when the denominator has a root at s = 0."""
        if abs(self.den[-1]) == 0.0:
            if abs(self.num[-1]) == 0.0:
                return math.nan
            return math.copysign(math.inf, self.num[-1] / self.den[0])
        return float(self.num[-1] / self.den[-1])

    def is_stable(self) -> bool:
        return bool(np.all(np.real(self.poles()) < 0.0))

    def to_dict(self) -> dict:
        return {"num": list(self.num), "den": list(self.den)}

    @classmethod
    def from_dict(cls, d: dict) -> "TransferFunction":
        return cls(d["num"], d["den"])


@dataclass(frozen=True)
class PIDGains:
    kp: float
    ki: float
    kd: float

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")

    def tau_f(self) -> float:
        """Derivative filter time constant, Td/10 with Td = kd/kp."""
        if self.kd == 0.0:
            return 0.0
        if self.kp != 0.0:
            return abs(self.kd / self.kp) / DERIV_FILTER_DIV
        return abs(self.kd) / DERIV_FILTER_DIV


@dataclass
class StepMetrics:
    settling_time_s: float          # math.inf when non-settling
    overshoot_pct: float
    steady_state_error: float       # |1 - y_final| for a unit command
    final_value: float
    peak: float
    peak_time_s: float
    non_settling: bool = False

    def to_dict(self) -> dict:
        return {
            "settling_time_s": self.settling_time_s,
            "overshoot_pct": self.overshoot_pct,
            "steady_state_error": self.steady_state_error,
            "final_value": self.final_value,
            "peak": self.peak,
            "peak_time_s": self.peak_time_s,
            "non_settling": self.non_settling,
        }


@dataclass
class Margins:
    gain_margin_db: float           # +inf when no phase crossover in range
    phase_margin_deg: float         # +inf when no gain crossover in range
    phase_crossover_rad_s: Optional[float]
    gain_crossover_rad_s: Optional[float]
    phase_crossover_count: int = 0
    gain_crossover_count: int = 0
    no_gain_crossover: bool = False

    def to_dict(self) -> dict:
        return {
            "gain_margin_db": self.gain_margin_db,
            "phase_margin_deg": self.phase_margin_deg,
            "phase_crossover_rad_s": self.phase_crossover_rad_s,
            "gain_crossover_rad_s": self.gain_crossover_rad_s,
            "phase_crossover_count": self.phase_crossover_count,
            "gain_crossover_count": self.gain_crossover_count,
            "no_gain_crossover": self.no_gain_crossover,
        }


def pid_transfer_function(gains: PIDGains, tau_f: Optional[float] = None) -> TransferFunction:
    """C(s) = kp + ki/s + kd*s/(tau_f*s + 1), assembled without spurious poles."""
    if tau_f is None:
        tau_f = gains.tau_f()
    num = np.array([gains.kp])
    den = np.array([1.0])
    if gains.ki != 0.0:
        num = _polyadd(np.polymul(num, [1.0, 0.0]), den * gains.ki)
        den = np.polymul(den, [1.0, 0.0])
    if gains.kd != 0.0:
        if tau_f <= 0.0:
            raise ValueError("derivative term requires a filter (tau_f > 0)")
        filt = np.array([tau_f, 1.0])
        num = _polyadd(np.polymul(num, filt), np.polymul(den, [gains.kd, 0.0]))
        den = np.polymul(den, filt)
    return TransferFunction(num, den)


def pid_series(plant: TransferFunction, gains: PIDGains,
               tau_f: Optional[float] = None) -> tuple[TransferFunction, TransferFunction]:
    """Open loop L = C*G and unity-feedback closed loop T = L/(1+L)."""
    controller = pid_transfer_function(gains, tau_f)
    open_loop = controller * plant
    return open_loop, open_loop.feedback_unity()


def _state_space(tf: TransferFunction):
    """Controllable canonical realization (A, b, c, d) of a proper TF."""
    den = tf.den / tf.den[0]
    num = tf.num / tf.den[0]
    n = len(den) - 1
    if n == 0:
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0), float(num[0])
    num_full = np.zeros(n + 1)
    num_full[n + 1 - len(num):] = num
    d = num_full[0]
    # strictly-proper residue after pulling out the feedthrough
    b_coeffs = num_full[1:] - d * den[1:]
    A = np.zeros((n, n))
    A[0, :] = -den[1:]
    if n > 1:
        A[1:, :-1] = np.eye(n - 1)
    b = np.zeros(n)
    b[0] = 1.0
    c = b_coeffs
    return A, b, c, float(d)


def rk4_step(f, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_step(tf: TransferFunction, t_final: float, dt: float):
    """Unit-step response y(t) of a proper TF via fixed-step RK4.

    Returns (t, y) arrays including the t=0 sample.
    """
    if t_final < 0 or dt <= 0:
        raise ValueError("need t_final >= 0 and dt > 0")
    A, b, c, d = _state_space(tf)
    n_steps = int(round(t_final / dt))

    def deriv(_t, x):
        return A @ x + b

    x = np.zeros(A.shape[0])
    t = np.empty(n_steps + 1)
    y = np.empty(n_steps + 1)
    t[0] = 0.0
    y[0] = (c @ x + d) if A.shape[0] else d
    for k in range(n_steps):
        x = rk4_step(deriv, k * dt, x, dt)
        t[k + 1] = (k + 1) * dt
        y[k + 1] = (c @ x + d) if A.shape[0] else d
    return t, y


def metrics_from_samples(t: np.ndarray, y: np.ndarray, final_value: float,
                         band: float = SETTLING_BAND) -> StepMetrics:
    """Step metrics from a sampled response and its known final value."""
    peak_idx = int(np.argmax(y))
    peak = float(y[peak_idx])
    if final_value > 0.0 and math.isfinite(final_value):
        overshoot = max(0.0, (peak - final_value) / final_value * 100.0)
    else:
        overshoot = math.inf
    tol = band * abs(final_value)
    outside = np.abs(y - final_value) > tol
    if not math.isfinite(final_value) or outside[-1] or not np.all(np.isfinite(y)):
        return StepMetrics(
            settling_time_s=math.inf,
            overshoot_pct=overshoot,
            steady_state_error=math.inf,
            final_value=final_value,
            peak=peak,
            peak_time_s=float(t[peak_idx]),
            non_settling=True,
        )
    idx = np.nonzero(outside)[0]
    settling = float(t[idx[-1] + 1]) if idx.size else 0.0
    return StepMetrics(
        settling_time_s=settling,
        overshoot_pct=overshoot,
        steady_state_error=abs(1.0 - final_value),
        final_value=final_value,
        peak=peak,
        peak_time_s=float(t[peak_idx]),
    )


def step_response_metrics(system: TransferFunction, t_final: float,
                          dt: float) -> StepMetrics:
    """Simulate a unit step and measure settling time (2% band), overshoot,
    and steady-state error against the final-value-theorem limit."""
    stable = system.is_stable()
    final = system.dc_gain() if stable else math.nan
    t, y = simulate_step(system, t_final, dt)
    if not stable:
        peak_idx = int(np.argmax(y))
        return StepMetrics(
            settling_time_s=math.inf,
            overshoot_pct=math.inf,
            steady_state_error=math.inf,
            final_value=math.nan,
            peak=float(y[peak_idx]),
            peak_time_s=float(t[peak_idx]),
            non_settling=True,
        )
    return metrics_from_samples(t, y, final)


def _bisect(f, lo: float, hi: float, iters: int = 90) -> float:
    flo = f(lo)
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        fm = f(mid)
        if flo * fm <= 0.0:
            hi = mid
        else:
            lo, flo = mid, fm
    return math.sqrt(lo * hi)


def stability_margins(open_loop: TransferFunction,
                      w_min: float = DEFAULT_W_MIN,
                      w_max: float = DEFAULT_W_MAX,
                      points: int = DEFAULT_SWEEP_POINTS) -> Margins:
    """Gain and phase margins from a log sweep refined by bisection.

    Phase crossovers (angle(L) = -180 deg mod 360) are located as zeros of
    angle(-L), which is continuous through the crossing; gain crossovers as
    zeros of log10|L|. With multiple crossovers the worst (smallest) margin
    is reported along with the crossover counts.
    """
    if w_min <= 0 or w_max <= w_min:
        raise ValueError("need 0 < w_min < w_max")
    w = np.logspace(math.log10(w_min), math.log10(w_max), points)
    resp = open_loop.frequency_response(w)
    mag = np.abs(resp)
    neg_angle = np.angle(-resp)          # crosses 0 exactly at phase = -180 mod 360
    log_mag = np.where(mag > 0, np.log10(mag, where=mag > 0), -math.inf)
    phase_unwrapped = np.degrees(np.unwrap(np.angle(resp)))

    def f_phase(x: float) -> float:
        return float(np.angle(-open_loop.frequency_response(x)))

    def f_mag(x: float) -> float:
        return float(np.log10(np.abs(open_loop.frequency_response(x))))

    phase_crossings: list[float] = []
    gain_crossings: list[float] = []
    for i in range(points - 1):
        a, b = neg_angle[i], neg_angle[i + 1]
        # sign change without wrapping through +/-pi
        if a == 0.0 or (a * b < 0.0 and abs(a - b) < math.pi):
            phase_crossings.append(_bisect(f_phase, w[i], w[i + 1]))
        la, lb = log_mag[i], log_mag[i + 1]
        if la == 0.0 or la * lb < 0.0:
            gain_crossings.append(_bisect(f_mag, w[i], w[i + 1]))

    gm_db, w_pc = math.inf, None
    for wc in phase_crossings:
        g = -20.0 * math.log10(abs(open_loop.frequency_response(wc)))
        if g < gm_db:
            gm_db, w_pc = g, wc

    pm_deg, w_gc = math.inf, None
    for wc in gain_crossings:
        idx = int(np.searchsorted(w, wc))
        idx = min(max(idx, 1), points - 1) - 1
        raw_ref = math.degrees(np.angle(resp[idx]))
        raw = math.degrees(np.angle(open_loop.frequency_response(wc)))
        delta = (raw - raw_ref + 180.0) % 360.0 - 180.0
        phase = phase_unwrapped[idx] + delta
        m = 180.0 + phase
        if m < pm_deg:
            pm_deg, w_gc = m, wc

    return Margins(
        gain_margin_db=gm_db,
        phase_margin_deg=pm_deg,
        phase_crossover_rad_s=w_pc,
        gain_crossover_rad_s=w_gc,
        phase_crossover_count=len(phase_crossings),
        gain_crossover_count=len(gain_crossings),
        no_gain_crossover=(w_gc is None),
    )


def evaluate_constraints(metrics: Optional[StepMetrics], margins: Optional[Margins],
                         constraints: list) -> tuple[dict[str, int], dict[str, float]]:
    """Indicator and signed margin per constraint, over step metrics plus
    stability margins. Missing metrics fail their constraints."""
    from .constraints import evaluate_constraints as _eval

    values: dict[str, float] = {}
    if metrics is not None:
        values.update(metrics.to_dict())
    if margins is not None:
        values.update({k: v for k, v in margins.to_dict().items()
                       if isinstance(v, (int, float)) and v is not None})
    return _eval(values, constraints)


class MethodInapplicable(ValueError):
    """The plant has no ultimate gain, so Ziegler-Nichols does not apply."""


def ziegler_nichols_ultimate(plant: TransferFunction,
                             w_min: float = DEFAULT_W_MIN,
                             w_max: float = DEFAULT_W_MAX,
                             points: int = DEFAULT_SWEEP_POINTS) -> PIDGains:
    """Classic Z-N PID tuning from the ultimate gain and period.

    K_u is the gain that brings the loop to sustained oscillation (the
    reciprocal of |G| at the phase crossover), T_u the oscillation period.
    Table: Kp = 0.6 K_u, Ti = T_u/2, Td = T_u/8.
    """
    m = stability_margins(plant, w_min, w_max, points)
    if m.phase_crossover_rad_s is None or not math.isfinite(m.gain_margin_db):
        raise MethodInapplicable("plant has no phase crossover in the sweep range")
    k_u = 10.0 ** (m.gain_margin_db / 20.0)
    t_u = 2.0 * math.pi / m.phase_crossover_rad_s
    kp = 0.6 * k_u
    ti = t_u / 2.0
    td = t_u / 8.0
    return PIDGains(kp=kp, ki=kp / ti, kd=kp * td)
