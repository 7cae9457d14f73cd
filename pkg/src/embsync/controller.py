"""Dual-loop controller: plan, dispatch, perceive, hot-fix, reflect, re-plan.

The fast inner loop watches each operation's live stream and repairs it
mid-flight (interrupt + corrected re-dispatch); the slow outer loop evaluates
the terminal state against the constraint set and chooses between local
parameter adjustment and a structural re-plan, within a fixed turn budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

from .backend import Action
from .constraints import Constraint
from .control import Margins, PIDGains, StepMetrics, evaluate_constraints
from .messages import EnhancedMessage, MessageType
from .perception import Alert, StreamMonitor
from .policy import BindingError, Feedback, PlanStep, Policy
from .session import SessionClient

DEFAULT_MAX_TURNS = 5
DEFAULT_HOTFIX_BUDGET = 3


@dataclass
class Intent:
    """What the episode must achieve: a goal plus its verification set."""

    description: str
    constraints: list[Constraint]
    scenario_parameters: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        names = [c.name for c in self.constraints]
        if len(names) != len(set(names)):
            raise ValueError("constraint names must be unique")


@dataclass
class Plan:
    global_subtasks: list[str]
    local_steps: dict[str, list[PlanStep]] = field(default_factory=dict)
    cursor: tuple[int, int] = (0, 0)


@dataclass
class ChainOutcome:
    """Result of one action chain (original dispatch plus hot-fix repairs)."""

    completed: bool
    result: Optional[dict[str, Any]] = None
    failure_reason: Optional[str] = None
    escalated: bool = False
    final_action: Optional[Action] = None
    operation_ids: list[str] = field(default_factory=list)
    repairs: int = 0
    monitor: Optional[StreamMonitor] = None


@dataclass
class EpisodeResult:
    success: bool
    turns_used: int
    delta_history: list[list[str]]
    final_metrics: dict[str, Any]
    events: list[dict[str, Any]]
    structure: str = ""
    gains: Optional[dict[str, float]] = None
    hotfix_repairs: int = 0
    operations: list[str] = field(default_factory=list)


class Controller:
    """Runs episodes against a connected session using a pluggable policy."""

    def __init__(
        self,
        session: SessionClient,
        policy: Policy,
        known_primitives: Optional[set[str]] = None,
        hotfix_budget: int = DEFAULT_HOTFIX_BUDGET,
        stream_timeout: float = 120.0,
    ):
        self.session = session
        self.policy = policy
        if known_primitives is None:
            from .primitives import default_registry
            known_primitives = set(default_registry().names())
        self.known_primitives = known_primitives
        self.hotfix_budget = hotfix_budget
        self.stream_timeout = stream_timeout
        self.events: list[dict[str, Any]] = []

    # -- planning -----------------------------------------------------------

    def plan_global(self, intent: Intent) -> list[str]:
        subtasks = self.policy.propose_global(intent)
        if not subtasks:
            raise ValueError("policy produced an empty global plan")
        return subtasks

    def plan_local(self, subtask: str, state: dict[str, Any]) -> list[PlanStep]:
        steps = self.policy.propose_local(subtask, state)
        for step in steps:
            if step.is_primitive and step.primitive not in self.known_primitives:
                raise BindingError(
                    f"step {step.name!r} references unregistered primitive "
                    f"{step.primitive!r}")
        return steps

    def generate_action(self, step: PlanStep, state: dict[str, Any]) -> Action:
        return self.policy.propose_action(step, state)

    # -- inner loop -----------------------------------------------------------

    def hot_fix(self, action: Action, obs, alert: Alert,
                budget_left: int) -> Optional[Action]:
        """One repair decision; None means give up (budget spent or declined)."""
        if budget_left <= 0:
            return None
        return self.policy.repair(action, obs, alert)

    def run_action_chain(self, action: Action, constraints: list[Constraint],
                         alert_factor: float = 1.0) -> ChainOutcome:
        """Dispatch an action and supervise its stream, repairing mid-flight.

        Quality alerts (constraint violations) are repaired at most once per
        chain and otherwise ride to completion so the turn still produces
        terminal metrics; fatal alerts (divergence, errors) are repaired every
        recurrence until the budget runs out, then escalate.
        """
        outcome = ChainOutcome(completed=False, final_action=action)
        repaired_causes: set[str] = set()
        declined_causes: set[str] = set()
        monitor = StreamMonitor(action, constraints, alert_factor,
                                parameters=action.parameters)
        op_id = self._dispatch(action)
        outcome.operation_ids.append(op_id)

        while True:
            stop = self._supervise(op_id, monitor, repaired_causes | declined_causes)
            if stop.terminal is not None:
                msg = stop.terminal
                outcome.monitor = monitor
                if msg.type is MessageType.OPERATION_COMPLETE:
                    outcome.completed = True
                    outcome.result = msg.payload.get("result", {})
                else:
                    outcome.failure_reason = msg.payload.get("reason", "")
                    outcome.escalated = not monitor.self_interrupted
                return outcome

            alert = stop.alert
            repaired = self.hot_fix(action, alert.observation, alert,
                                    self.hotfix_budget - outcome.repairs)
            if repaired is None:
                if alert.fatal:
                    self._interrupt_and_drain(op_id, monitor)
                    outcome.monitor = monitor
                    outcome.failure_reason = alert.cause
                    outcome.escalated = True
                    self.events.append({
                        "kind": "hotfix_giveup", "operation_id": op_id,
                        "cause": alert.cause, "repairs": outcome.repairs,
                    })
                    return outcome
                declined_causes.add(alert.cause)
                continue  # let the operation finish; reflection will retune

            self._interrupt_and_drain(op_id, monitor)
            outcome.repairs += 1
            repaired_causes.add(alert.cause)
            self.events.append({
                "kind": "hotfix_repair", "operation_id": op_id,
                "cause": alert.cause, "parameters": repaired.parameters,
            })
            action = repaired
            outcome.final_action = action
            monitor = StreamMonitor(action, constraints, alert_factor,
                                    parameters=action.parameters)
            op_id = self._dispatch(action)
            outcome.operation_ids.append(op_id)

    @dataclass
    class _Stop:
        terminal: Optional[EnhancedMessage] = None
        alert: Optional[Alert] = None

    def _supervise(self, op_id: str, monitor: StreamMonitor,
                   muted_causes: set[str]) -> "Controller._Stop":
        """Consume the stream until terminal or an actionable alert fires.

        Quality causes already repaired or declined this chain are muted;
        fatal causes (divergence, errors) always remain actionable.
        """
        for msg in self.session.stream_operation(op_id, timeout=self.stream_timeout):
            z, alert = monitor.observe_message(msg)
            if msg.type in (MessageType.OPERATION_COMPLETE,
                            MessageType.OPERATION_FAILED):
                return Controller._Stop(terminal=msg)
            if alert is not None and (alert.fatal or alert.cause not in muted_causes):
                return Controller._Stop(alert=alert)
        # stream ended because the mirror already saw the terminal state
        return Controller._Stop(terminal=None)

    def _dispatch(self, action: Action) -> str:
        assert action.kind == "primitive_call"
        return self.session.request_primitive(action.primitive, action.parameters)

    def _interrupt_and_drain(self, op_id: str, monitor: StreamMonitor) -> None:
        """Stop the target and consume its stream through the terminal message."""
        monitor.note_self_interrupt()
        if self.session.trackers[op_id].terminal:
            return
        self.session.send_interrupt(op_id)
        for msg in self.session.stream_operation(op_id, timeout=self.stream_timeout):
            monitor.observe_message(msg)
            if msg.type in (MessageType.OPERATION_COMPLETE,
                            MessageType.OPERATION_FAILED):
                return

    # -- outer loop -------------------------------------------------------------

    def reflect(self, state: dict[str, Any], constraints: list[Constraint],
                escalated: bool = False) -> Feedback:
        """Evaluate every constraint on the terminal state and pick a strategy."""
        indicators, margins = evaluate_constraints(
            state.get("metrics"), state.get("margins"), constraints)
        metrics = state.get("metrics")
        marg = state.get("margins")
        lookup: dict[str, Any] = {}
        if metrics is not None:
            lookup.update(metrics.to_dict())
        if marg is not None:
            lookup.update(marg.to_dict())
        unsatisfied = {
            c.name: lookup.get(c.metric)
            for c in constraints if indicators[c.name] == 0
        }
        if not unsatisfied:
            return Feedback(unsatisfied={}, strategy=None,
                            rationale="all constraints satisfied")
        if self.policy.structure_adequate(set(unsatisfied), state):
            strategy, why = "local_adjustment", "plan structure sound; refine parameters"
        else:
            strategy, why = "global_replan", "structural flaw: rebuild the controller topology"
        return Feedback(unsatisfied=unsatisfied, strategy=strategy,
                        rationale=why, escalated=escalated)

    def run_episode(self, intent: Intent, max_turns: int = DEFAULT_MAX_TURNS) -> EpisodeResult:
        """Execute the dual loop until every constraint holds or turns run out."""
        params = intent.scenario_parameters
        state: dict[str, Any] = {
            "plant": params.get("plant"),
            "structure": params.get("initial_structure", "P"),
            "gains": None,
            "initial_gains": params.get("initial_gains"),
            "sim": params.get("sim", {}),
            "sweep": params.get("sweep", {}),
            "constraints": intent.constraints,
            "metrics": None,
            "margins": None,
        }
        alert_factor = params.get("alert_factor", 1.0)
        self.events = []
        delta_history: list[list[str]] = []
        all_ops: list[str] = []
        repairs = 0

        if max_turns <= 0:
            return EpisodeResult(
                success=False, turns_used=0,
                delta_history=[sorted(c.name for c in intent.constraints)],
                final_metrics={}, events=[],
                structure=state["structure"],
            )

        plan = Plan(global_subtasks=self.plan_global(intent))
        success = False
        turn = 0
        for turn in range(1, max_turns + 1):
            state["metrics"] = None
            state["margins"] = None
            escalated = self._run_turn(plan, state, intent.constraints,
                                       alert_factor, all_ops)
            repairs = sum(1 for e in self.events if e["kind"] == "hotfix_repair")
            feedback = self.reflect(state, intent.constraints, escalated=escalated)
            delta_history.append(sorted(feedback.unsatisfied))
            self.events.append({
                "kind": "reflect", "turn": turn,
                "delta": sorted(feedback.unsatisfied),
                "strategy": feedback.strategy,
                "structure": state["structure"],
                "gains": _gains_dict(state["gains"]),
            })
            if feedback.strategy is None:
                success = True
                break
            if turn == max_turns:
                break
            decision = self.policy.decide(feedback, state)
            if decision["kind"] == "exhausted":
                self.events.append({"kind": "replan_exhausted", "turn": turn})
                break
            if decision["kind"] == "global_replan":
                self.events.append({
                    "kind": "global_replan", "turn": turn,
                    "from_structure": state["structure"],
                    "to_structure": decision["structure"],
                    "trigger": decision["trigger"],
                })
                state["structure"] = decision["structure"]
                state["gains"] = decision["gains"]
            else:
                self.events.append({
                    "kind": "local_adjustment", "turn": turn,
                    "gains": _gains_dict(decision["gains"]),
                    "reason": decision.get("reason", ""),
                })
                state["gains"] = decision["gains"]

        return EpisodeResult(
            success=success,
            turns_used=turn,
            delta_history=delta_history,
            final_metrics=_final_metrics(state),
            events=list(self.events),
            structure=state["structure"],
            gains=_gains_dict(state["gains"]),
            hotfix_repairs=repairs,
            operations=all_ops,
        )

    def _run_turn(self, plan: Plan, state: dict[str, Any],
                  constraints: list[Constraint], alert_factor: float,
                  all_ops: list[str]) -> bool:
        """One pass over the global plan; returns True if a chain escalated."""
        escalated = False
        for i, subtask in enumerate(plan.global_subtasks):
            steps = self.plan_local(subtask, state)
            plan.local_steps[subtask] = steps
            for j, step in enumerate(steps):
                plan.cursor = (i, j)
                if not step.is_primitive:
                    self.policy.run_local_step(step, state)
                    continue
                action = self.generate_action(step, state)
                outcome = self.run_action_chain(action, constraints, alert_factor)
                all_ops.extend(outcome.operation_ids)
                self._absorb_outcome(step, outcome, state)
                if outcome.escalated:
                    escalated = True
        return escalated

    def _absorb_outcome(self, step: PlanStep, outcome: ChainOutcome,
                        state: dict[str, Any]) -> None:
        """Fold a chain's terminal result (and any repaired gains) into state."""
        if outcome.final_action is not None:
            gains = outcome.final_action.parameters.get("gains")
            if gains is not None:
                state["gains"] = PIDGains(gains["kp"], gains["ki"], gains["kd"])
        if not outcome.completed or outcome.result is None:
            return
        if step.primitive == "lti_step_sim":
            m = outcome.result.get("metrics", {})
            state["metrics"] = StepMetrics(
                settling_time_s=_num(m.get("settling_time_s")),
                overshoot_pct=_num(m.get("overshoot_pct")),
                steady_state_error=_num(m.get("steady_state_error")),
                final_value=_num(m.get("final_value")),
                peak=_num(m.get("peak")),
                peak_time_s=_num(m.get("peak_time_s")),
                non_settling=bool(m.get("non_settling", False)),
            )
        elif step.primitive == "freq_margins":
            r = outcome.result
            state["margins"] = Margins(
                gain_margin_db=_num(r.get("gain_margin_db")),
                phase_margin_deg=_num(r.get("phase_margin_deg")),
                phase_crossover_rad_s=r.get("phase_crossover_rad_s"),
                gain_crossover_rad_s=r.get("gain_crossover_rad_s"),
                phase_crossover_count=int(r.get("phase_crossover_count", 0)),
                gain_crossover_count=int(r.get("gain_crossover_count", 0)),
                no_gain_crossover=bool(r.get("no_gain_crossover", False)),
            )


def _num(v) -> float:
    if v is None:
        return math.nan
    return float(v)


def _gains_dict(gains: Optional[PIDGains]) -> Optional[dict[str, float]]:
    if gains is None:
        return None
    return {"kp": gains.kp, "ki": gains.ki, "kd": gains.kd}


def _final_metrics(state: dict[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if state.get("metrics") is not None:
        out.update(state["metrics"].to_dict())
    if state.get("margins") is not None:
        out.update(state["margins"].to_dict())
    return out
