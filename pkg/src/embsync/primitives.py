"""Built-in streaming primitives: ODE integration, root finding, LTI simulation,
frequency-domain margins.

Each body is a generator yielding at most one emission per internal step, so
the interrupt latency bound of the runner holds sample-accurately. Trajectory
values are emitted verbatim, including NaN/Inf: divergence is a signal for
the perception engine, not an error.
"""

from __future__ import annotations

import math
from typing import Any, Callable

import numpy as np

from .backend import (
    ParamSpec,
    PrimitiveError,
    PrimitiveRegistry,
    PrimitiveSpec,
    Stdout,
    Trajectory,
)
from .control import (
    PIDGains,
    TransferFunction,
    metrics_from_samples,
    pid_series,
    rk4_step,
    simulate_step,
    stability_margins,
)

# Right-hand sides available to rk4_integrate, selected by name. The quadratic
# field blows up in finite time (y = 1/(1-t) from y0=1): the overflow shows up
# mid-stream as Inf and is streamed as-is.
ODE_FIELDS: dict[str, Callable[[float, np.ndarray], np.ndarray]] = {
    "exp_decay": lambda t, y: -y,
    "exp_growth": lambda t, y: y,
    "quadratic_blowup": lambda t, y: y * y,
    "cubic_flip": lambda t, y: -(y ** 3),
    "harmonic": lambda t, y: np.array([y[1], -y[0]]),
}


def rk4_integrate(params: dict[str, Any]):
    """Fixed-step RK4 for y' = f(t, y); streams one state sample per step."""
    name = params["rhs"]
    field = ODE_FIELDS.get(name)
    if field is None:
        raise PrimitiveError(f"unknown rhs {name!r}; have {sorted(ODE_FIELDS)}")
    h = float(params["h"])
    if h <= 0:
        raise PrimitiveError("h must be positive")
    t0 = float(params["t0"])
    t_final = float(params["t_final"])
    if t_final < t0:
        raise PrimitiveError("t_final must be >= t0")
    y0 = params["y0"]
    y = np.atleast_1d(np.asarray(y0, dtype=float))
    n_steps = int(round((t_final - t0) / h))
    t = t0
    for _ in range(n_steps):
        # divergence to inf/nan is expected on blow-up fields; stream it raw
        with np.errstate(over="ignore", invalid="ignore"):
            y = rk4_step(field, t, y, h)
        t += h
        yield Trajectory(sim_time=t, variables={"y": [float(v) for v in y]})
    result_y = float(y[0]) if y.size == 1 else [float(v) for v in y]
    return {"y_final": result_y, "steps": n_steps, "t_final": t}


def bisection_root(params: dict[str, Any]):
    """Bisection on a polynomial over a bracketing interval; streams one
    iteration line per step, payload-compatible with legacy solver logs."""
    coeffs = params["coeffs"]
    lo = float(params["lo"])
    hi = float(params["hi"])
    tol = float(params["tol"])
    max_iter = int(params["max_iter"])
    if hi <= lo:
        raise PrimitiveError("need lo < hi")

    def f(x: float) -> float:
        return float(np.polyval(coeffs, x))

    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return {"root": lo, "iterations": 0, "residual": 0.0}
    if fhi == 0.0:
        return {"root": hi, "iterations": 0, "residual": 0.0}
    if flo * fhi > 0:
        raise PrimitiveError(f"no sign change on [{lo}, {hi}]")

    mid = 0.5 * (lo + hi)
    for k in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        yield Stdout(f"Iteration {k}: error={abs(fmid):.6g}\n")
        if fmid == 0.0 or (hi - lo) / 2.0 < tol:
            return {"root": mid, "iterations": k, "residual": fmid}
        if flo * fmid < 0:
            hi = mid
        else:
            lo, flo = mid, fmid
    return {"root": mid, "iterations": max_iter, "residual": f(mid)}


def _cascade_blocks(plant: TransferFunction) -> list[float] | None:
    """Real poles of a zero-free plant, for first-order cascade realization.

    Repeated real roots come out of the eigensolver as a tight complex
    cluster (imaginary parts ~ eps**(1/multiplicity)), so realness is judged
    with a tolerance far above that but far below any genuine oscillatory
    pair.
    """
    if len(plant.num) != 1:
        return None
    poles = plant.poles()
    if np.any(np.abs(np.imag(poles)) > 1e-3 * (1.0 + np.abs(poles))):
        return None
    return sorted(float(np.real(p)) for p in poles)


def lti_step_sim(params: dict[str, Any]):
    """Closed-loop unit-step response of plant + PID under unity feedback.

    Zero-free plants with real poles are simulated as a cascade of
    first-order blocks so the intermediate states (x1, x2, ...) stream
    alongside the output; other plants fall back to a canonical realization
    of the lumped closed loop and stream y only. Completes with the step
    metrics measured on the full-resolution trajectory.
    """
    plant = TransferFunction.from_dict(params["plant"])
    g = params["gains"]
    gains = PIDGains(float(g.get("kp", 0.0)), float(g.get("ki", 0.0)),
                     float(g.get("kd", 0.0)))
    t_final = float(params["t_final"])
    dt = float(params["dt"])
    if dt <= 0 or t_final < 0:
        raise PrimitiveError("need dt > 0 and t_final >= 0")
    n_steps = int(round(t_final / dt))

    open_loop, closed = pid_series(plant, gains)
    stable = closed.is_stable()
    final_value = closed.dc_gain() if stable else math.nan

    poles = _cascade_blocks(plant)
    times = np.empty(n_steps + 1)
    outputs = np.empty(n_steps + 1)
    times[0] = 0.0
    outputs[0] = 0.0

    if poles is not None:
        gain_in = float(plant.num[0] / plant.den[0])
        tau_f = gains.tau_f()
        n_blocks = len(poles)

        def deriv(_t: float, s: np.ndarray) -> np.ndarray:
            x = s[:n_blocks]
            xi, z = s[n_blocks], s[n_blocks + 1]
            e = 1.0 - x[-1]
            u = gains.kp * e + gains.ki * xi
            if gains.kd != 0.0:
                u += (gains.kd / tau_f) * (e - z)
            dx = np.empty(n_blocks)
            dx[0] = poles[0] * x[0] + gain_in * u
            for i in range(1, n_blocks):
                dx[i] = poles[i] * x[i] + x[i - 1]
            dz = (e - z) / tau_f if gains.kd != 0.0 else 0.0
            return np.append(dx, [e, dz])

        state = np.zeros(n_blocks + 2)
        for k in range(n_steps):
            state = rk4_step(deriv, k * dt, state, dt)
            t = (k + 1) * dt
            y = float(state[n_blocks - 1])
            times[k + 1] = t
            outputs[k + 1] = y
            variables = {"y": [y]}
            for i in range(n_blocks - 1):
                variables[f"x{i + 1}"] = [float(state[i])]
            yield Trajectory(sim_time=t, variables=variables)
    else:
        # lumped fallback: no intermediate block states to expose
        t_arr, y_arr = simulate_step(closed, t_final, dt)
        times, outputs = t_arr, y_arr
        for k in range(1, n_steps + 1):
            yield Trajectory(sim_time=float(times[k]),
                             variables={"y": [float(outputs[k])]})

    metrics = metrics_from_samples(times, outputs, final_value)
    return {
        "metrics": metrics.to_dict(),
        "gains": {"kp": gains.kp, "ki": gains.ki, "kd": gains.kd},
        "stable": stable,
        "samples": int(n_steps) + 1,
    }


def freq_margins(params: dict[str, Any]):
    """Gain/phase margins of an open-loop transfer function via log sweep."""
    loop = TransferFunction(params["num"], params["den"])
    w_min = float(params["w_min"])
    w_max = float(params["w_max"])
    points = int(params["points"])
    yield Stdout(f"sweeping {points} points over [{w_min:g}, {w_max:g}] rad/s\n")
    m = stability_margins(loop, w_min, w_max, points)
    out = m.to_dict()
    # JSON carries inf natively in this protocol, but flag it for readers
    out["gain_margin_infinite"] = math.isinf(m.gain_margin_db)
    return out


BUILTIN_SPECS = [
    (
        PrimitiveSpec(
            name="rk4_integrate",
            parameters={
                "rhs": ParamSpec("string"),
                "y0": ParamSpec("any", default=1.0),
                "t0": ParamSpec("number", units="s", default=0.0),
                "t_final": ParamSpec("number", units="s"),
                "h": ParamSpec("number", units="s"),
            },
            emits_trajectory=True,
            step_budget=100_000,
        ),
        rk4_integrate,
    ),
    (
        PrimitiveSpec(
            name="bisection_root",
            parameters={
                "coeffs": ParamSpec("array"),
                "lo": ParamSpec("number"),
                "hi": ParamSpec("number"),
                "tol": ParamSpec("number", default=1e-10),
                "max_iter": ParamSpec("number", default=200),
            },
            step_budget=10_000,
        ),
        bisection_root,
    ),
    (
        PrimitiveSpec(
            name="lti_step_sim",
            parameters={
                "plant": ParamSpec("map"),
                "gains": ParamSpec("map"),
                "t_final": ParamSpec("number", units="s", default=40.0),
                "dt": ParamSpec("number", units="s", default=0.01),
            },
            emits_trajectory=True,
            step_budget=1_000_000,
        ),
        lti_step_sim,
    ),
    (
        PrimitiveSpec(
            name="freq_margins",
            parameters={
                "num": ParamSpec("array"),
                "den": ParamSpec("array"),
                "w_min": ParamSpec("number", units="rad/s", default=1e-3),
                "w_max": ParamSpec("number", units="rad/s", default=1e3),
                "points": ParamSpec("number", default=2000),
            },
            step_budget=16,
        ),
        freq_margins,
    ),
]


def register_builtins(registry: PrimitiveRegistry) -> None:
    for spec, body in BUILTIN_SPECS:
        registry.register(spec, body)


def default_registry() -> PrimitiveRegistry:
    registry = PrimitiveRegistry()
    register_builtins(registry)
    return registry
