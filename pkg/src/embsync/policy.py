"""Pluggable decision policies: the deterministic reference controller brain.

A Policy supplies the five hooks the dual-loop controller calls instead of a
language model: global/local planning, action synthesis, mid-stream repair,
and post-run strategy selection. The reference implementation tunes a PID
loop with physics-shaped coordinate descent and is fully deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional, Protocol

from .backend import Action, Observation
from .control import PIDGains, TransferFunction, pid_series, ziegler_nichols_ultimate
from .perception import Alert

GLOBAL_SUBTASKS = ["Modeling", "Simulation", "Validation"]
STRUCTURE_LADDER = ["P", "PI", "PID"]

LOCAL_STEP_DOWN = 0.7
LOCAL_STEP_UP = 1.3
OSCILLATORY_OVERSHOOT_PCT = 2.0  # above this the settling tail is ringing, not sluggish


@dataclass
class PlanStep:
    name: str
    subtask: str
    primitive: Optional[str] = None     # local/evaluation steps have none
    notes: str = ""

    @property
    def is_primitive(self) -> bool:
        return self.primitive is not None


@dataclass
class Feedback:
    """Outcome of one reflection: the unsatisfied set and the chosen strategy."""

    unsatisfied: dict[str, Optional[float]]
    strategy: Optional[str]             # "local_adjustment" | "global_replan" | None
    rationale: str = ""
    escalated: bool = False             # the turn ended via hot-fix give-up

    def __post_init__(self):
        if self.strategy == "local_adjustment" and not self.unsatisfied:
            raise ValueError("local_adjustment requires a nonempty unsatisfied set")


class BindingError(RuntimeError):
    """A plan step could not be bound against the current state."""


class Policy(Protocol):
    def propose_global(self, intent) -> list[str]: ...
    def propose_local(self, subtask: str, state: dict[str, Any]) -> list[PlanStep]: ...
    def propose_action(self, step: PlanStep, state: dict[str, Any]) -> Action: ...
    def run_local_step(self, step: PlanStep, state: dict[str, Any]) -> None: ...
    def repair(self, action: Action, obs: Optional[Observation],
               alert: Alert) -> Optional[Action]: ...
    def structure_adequate(self, delta: set[str], state: dict[str, Any]) -> bool: ...
    def decide(self, feedback: Feedback, state: dict[str, Any]) -> dict[str, Any]: ...


def gains_for_structure(structure: str, gains: PIDGains) -> PIDGains:
    """Zero out the terms a controller structure does not have."""
    ki = gains.ki if "I" in structure else 0.0
    kd = gains.kd if "D" in structure else 0.0
    return PIDGains(gains.kp, ki, kd)


class ReferencePidPolicy:
    """Deterministic PID-design policy for the maglev-style case study.

    Inner loop (mid-stream): a streaming overshoot violation scales the
    proportional gain by 0.7, once per action chain; divergence halves the
    integration step, every time it recurs, until the budget runs out.
    Outer loop (post-run): one coordinate per turn with multiplicative steps,
    margins before overshoot before settling; a steady-state-error miss on an
    integral-free structure is a structural flaw and triggers a re-plan.
    """

    def __init__(self):
        self._zn_cache: dict[tuple, PIDGains] = {}

    # -- planning -----------------------------------------------------------

    def propose_global(self, intent) -> list[str]:
        return list(GLOBAL_SUBTASKS)

    def propose_local(self, subtask: str, state: dict[str, Any]) -> list[PlanStep]:
        if subtask == "Modeling":
            return [PlanStep("bind_model", subtask)]
        if subtask == "Simulation":
            return [
                PlanStep("simulate_closed_loop", subtask, primitive="lti_step_sim"),
                PlanStep("measure_margins", subtask, primitive="freq_margins"),
            ]
        if subtask == "Validation":
            return [PlanStep("evaluate_constraints", subtask)]
        return []

    # -- action synthesis -----------------------------------------------------

    def propose_action(self, step: PlanStep, state: dict[str, Any]) -> Action:
        if step.primitive is None and step.notes.startswith("stop "):
            return Action.interrupt(step.notes.split(maxsplit=1)[1])
        plant = state.get("plant")
        gains = state.get("gains")
        if plant is None:
            raise BindingError(f"{step.name}: no plant in state")
        if gains is None:
            raise BindingError(f"{step.name}: no gains in state")
        if step.primitive == "lti_step_sim":
            sim = state.get("sim", {})
            return Action.call(
                "lti_step_sim",
                plant=dict(plant),
                gains={"kp": gains.kp, "ki": gains.ki, "kd": gains.kd},
                t_final=sim.get("t_final", 40.0),
                dt=sim.get("dt", 0.01),
            )
        if step.primitive == "freq_margins":
            open_loop, _ = pid_series(TransferFunction.from_dict(plant), gains)
            sweep = state.get("sweep", {})
            return Action.call(
                "freq_margins",
                num=list(open_loop.num),
                den=list(open_loop.den),
                w_min=sweep.get("w_min", 1e-3),
                w_max=sweep.get("w_max", 1e3),
                points=sweep.get("points", 2000),
            )
        raise BindingError(f"no action template for step {step.name!r}")

    def run_local_step(self, step: PlanStep, state: dict[str, Any]) -> None:
        if step.name == "bind_model":
            if state.get("gains") is None:
                structure = state.get("structure", "P")
                seed = state.get("initial_gains", PIDGains(1.0, 0.0, 0.0))
                state["gains"] = gains_for_structure(structure, seed)
            return
        if step.name == "evaluate_constraints":
            from .control import evaluate_constraints

            metrics = state.get("metrics")
            margins = state.get("margins")
            indicators, cmargins = evaluate_constraints(
                metrics, margins, state.get("constraints", []))
            state["indicators"] = indicators
            state["constraint_margins"] = cmargins
            return

    # -- inner loop: mid-stream repair -----------------------------------------

    def repair(self, action: Action, obs: Optional[Observation],
               alert: Alert) -> Optional[Action]:
        if action.kind != "primitive_call":
            return None
        params = dict(action.parameters)
        if alert.cause == "nan_divergence" and action.primitive == "rk4_integrate":
            params["h"] = params["h"] / 2.0
            return Action.call(action.primitive, **params)
        if alert.cause.startswith("constraint_violation:"):
            gains = dict(params.get("gains", {}))
            if not gains:
                return None
            gains["kp"] = gains.get("kp", 0.0) * LOCAL_STEP_DOWN
            params["gains"] = gains
            return Action.call(action.primitive, **params)
        return None  # unknown_primitive and other errors escalate immediately

    # -- outer loop: reflection ---------------------------------------------------

    def structure_adequate(self, delta: set[str], state: dict[str, Any]) -> bool:
        """The plan structure is inadequate iff steady-state error is missed
        while the controller has no integral term."""
        structure = state.get("structure", "P")
        return not ("ess" in delta and "I" not in structure)

    def _zn_gains(self, state: dict[str, Any]) -> PIDGains:
        plant = TransferFunction.from_dict(state["plant"])
        key = (tuple(plant.num), tuple(plant.den))
        if key not in self._zn_cache:
            self._zn_cache[key] = ziegler_nichols_ultimate(plant)
        return self._zn_cache[key]

    def next_structure(self, state: dict[str, Any], delta: set[str]) -> Optional[str]:
        """Climb the P -> PI -> PID ladder; a high-order plant that also misses
        phase-margin-like constraints jumps straight to derivative action."""
        current = state.get("structure", "P")
        idx = STRUCTURE_LADDER.index(current) if current in STRUCTURE_LADDER else 0
        candidates = STRUCTURE_LADDER[idx + 1:]
        if not candidates:
            return None
        if "ess" in delta and "I" not in current:
            plant = TransferFunction.from_dict(state["plant"])
            high_order = (len(plant.den) - len(plant.num)) >= 3
            needs_lead = high_order or bool(delta & {"pm", "gm", "mp"})
            if needs_lead and "PID" in candidates:
                return "PID"
        return candidates[0]

    def seed_gains(self, structure: str, state: dict[str, Any]) -> PIDGains:
        zn = self._zn_gains(state)
        if structure == "PID":
            return zn
        k_u = zn.kp / 0.6
        t_u = 8.0 * zn.kd / zn.kp
        if structure == "PI":
            kp = 0.45 * k_u
            return PIDGains(kp, kp / (t_u / 1.2), 0.0)
        return PIDGains(0.5 * k_u, 0.0, 0.0)

    def decide(self, feedback: Feedback, state: dict[str, Any]) -> dict[str, Any]:
        delta = set(feedback.unsatisfied)
        if feedback.strategy == "global_replan":
            target = self.next_structure(state, delta)
            if target is None:
                return {"kind": "exhausted"}
            return {
                "kind": "global_replan",
                "structure": target,
                "gains": gains_for_structure(target, self.seed_gains(target, state)),
                "trigger": sorted(delta),
            }

        gains: PIDGains = state["gains"]
        metrics = state.get("metrics")
        overshoot = metrics.overshoot_pct if metrics is not None else math.inf
        if "mp" in delta and gains.ki > 0.0:
            update = PIDGains(gains.kp, gains.ki * LOCAL_STEP_DOWN, gains.kd)
            reason = "overshoot high: soften integral action"
        elif delta & {"pm", "gm"}:
            update = PIDGains(gains.kp * LOCAL_STEP_DOWN, gains.ki, gains.kd)
            reason = "margins thin: lower loop gain to pull back crossover"
        elif "ts" in delta:
            if overshoot > OSCILLATORY_OVERSHOOT_PCT:
                update = PIDGains(gains.kp, gains.ki * LOCAL_STEP_DOWN, gains.kd)
                reason = "slow ringing tail: soften integral action"
            else:
                update = PIDGains(gains.kp, gains.ki * LOCAL_STEP_UP, gains.kd)
                reason = "sluggish response: strengthen integral action"
        else:
            update = PIDGains(gains.kp, gains.ki * LOCAL_STEP_UP, gains.kd)
            reason = "steady-state error persists: strengthen integral action"
        return {"kind": "local_adjustment", "gains": update, "reason": reason}


class FrozenGainsPolicy(ReferencePidPolicy):
    """Baseline: dispatch one fixed gain set and never adjust anything.

    Reproduces the static-tuning failure mode: no hot-fix, no re-planning.
    """

    def __init__(self, gains: PIDGains, structure: str = "PID"):
        super().__init__()
        self.fixed_gains = gains
        self.fixed_structure = structure

    def run_local_step(self, step: PlanStep, state: dict[str, Any]) -> None:
        if step.name == "bind_model":
            state["structure"] = self.fixed_structure
            state["gains"] = self.fixed_gains
            return
        super().run_local_step(step, state)

    def repair(self, action, obs, alert):
        return None

    def structure_adequate(self, delta, state):
        return True  # never re-plan

    def decide(self, feedback, state):
        return {"kind": "local_adjustment", "gains": self.fixed_gains,
                "reason": "frozen baseline: keep gains"}


POLICY_IDS = ("reference_pid", "zn_frozen")


def make_policy(policy_id: str, scenario: Optional[dict[str, Any]] = None) -> Policy:
    """Instantiate a policy by scenario id."""
    if policy_id == "reference_pid":
        return ReferencePidPolicy()
    if policy_id == "zn_frozen":
        if not scenario or "plant" not in scenario:
            raise ValueError("zn_frozen needs the scenario plant to derive its gains")
        plant = TransferFunction.from_dict(scenario["plant"])
        return FrozenGainsPolicy(ziegler_nichols_ultimate(plant))
    raise ValueError(f"unknown policy {policy_id!r}; have {list(POLICY_IDS)}")
