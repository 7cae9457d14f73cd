"""Runtime perception: classify the live observation stream, watch constraints
mid-execution, track best-so-far state, and raise the alerts that drive the
hot-fix loop."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .backend import Action, Observation, observation_from_message
from .constraints import Constraint
from .messages import EnhancedMessage, MessageType

# sys_event classes with fixed severity; everything else is informational
WARNING_EVENT_CLASSES = frozenset({"stiffness", "algebraic_loop", "encoding_degraded"})
FATAL_EVENT_CLASSES = frozenset({"solver_abort"})

UNIT_REFERENCE = 1.0  # streaming overshoot is judged against the unit command


class PerceptState(enum.Enum):
    NORMAL = "Normal"
    ERROR = "Error"
    WARNING = "Warning"


@dataclass
class Alert:
    classification: PerceptState
    cause: str
    observation: Optional[Observation] = None
    constraint: Optional[str] = None
    detail: str = ""
    fatal: bool = False           # doomed run (divergence/error) vs quality miss
    snapshot: Optional["MonitorRecord"] = None


@dataclass
class MonitorRecord:
    """Best-so-far bookkeeping over one operation's stream."""

    best_margin: dict[str, float] = field(default_factory=dict)
    best_parameters: dict[str, Any] = field(default_factory=dict)
    best_sim_time: float = 0.0
    best_aggregate: float = -math.inf
    violation_events: list[tuple[float, str, float]] = field(default_factory=list)
    samples: int = 0

    def violated_constraints(self) -> set[str]:
        return {name for _, name, _ in self.violation_events}


def streaming_value(constraint: Constraint, obs: Observation) -> Optional[float]:
    """Running value of a streaming constraint's metric for one observation.

    overshoot_pct derives from the output y against the unit command; any
    other metric name is read directly as a trajectory variable.
    """
    if obs.trajectory is None:
        return None
    variables = obs.trajectory.get("variables", {})
    if constraint.metric == "overshoot_pct":
        y = variables.get("y")
        if y is None:
            return None
        return max(0.0, (y - UNIT_REFERENCE) / UNIT_REFERENCE * 100.0)
    return variables.get(constraint.metric)


def _trajectory_divergence(obs: Observation) -> Optional[str]:
    if obs.trajectory is None:
        return None
    for name, value in obs.trajectory.get("variables", {}).items():
        if not math.isfinite(value):
            return name
    return None


def classify(
    action: Optional[Action],
    obs: Observation,
    constraints: Iterable[Constraint] = (),
    alert_factor: float = 1.0,
) -> PerceptState:
    """Tri-state latent classification of one observation.

    Error dominates Warning dominates Normal. Errors: non-empty stderr or a
    fatal system event. Warnings: non-finite trajectory values, a streaming
    constraint violated (bound scaled by alert_factor), or a warning-class
    system event.
    """
    state, _ = classify_with_cause(action, obs, constraints, alert_factor)
    return state


def classify_with_cause(
    action: Optional[Action],
    obs: Observation,
    constraints: Iterable[Constraint] = (),
    alert_factor: float = 1.0,
) -> tuple[PerceptState, str]:
    if obs.stderr:
        return PerceptState.ERROR, "stderr"
    event = (obs.sys_event or {}).get("event")
    if event in FATAL_EVENT_CLASSES:
        return PerceptState.ERROR, f"sys_event:{event}"

    diverged = _trajectory_divergence(obs)
    if diverged is not None:
        return PerceptState.WARNING, "nan_divergence"
    if event in WARNING_EVENT_CLASSES:
        return PerceptState.WARNING, f"sys_event:{event}"
    for c in constraints:
        if not c.streaming:
            continue
        value = streaming_value(c, obs)
        if value is None:
            continue
        scaled = Constraint(c.name, c.metric, c.op, c.bound * alert_factor,
                            c.units, c.streaming, c.tolerance)
        if scaled.evaluate(value)[0] == 0:
            return PerceptState.WARNING, f"constraint_violation:{c.name}"
    return PerceptState.NORMAL, ""


def raise_alert(
    z: PerceptState,
    cause: str = "",
    obs: Optional[Observation] = None,
    snapshot: Optional[MonitorRecord] = None,
    constraint: Optional[str] = None,
    detail: str = "",
) -> Optional[Alert]:
    """Warning or Error yields an Alert; Normal yields none."""
    if z is PerceptState.NORMAL:
        return None
    fatal = z is PerceptState.ERROR or cause == "nan_divergence"
    return Alert(classification=z, cause=cause, observation=obs,
                 constraint=constraint, detail=detail, fatal=fatal,
                 snapshot=snapshot)


class StreamMonitor:
    """Incremental perception over one operation's message stream.

    Feeds every streaming message through ``classify``, maintains the
    MonitorRecord (per-constraint best margins are monotone non-decreasing;
    a violation event is recorded at the first violating sample), and turns
    Warning/Error states into alerts.
    """

    def __init__(
        self,
        action: Optional[Action],
        constraints: Iterable[Constraint] = (),
        alert_factor: float = 1.0,
        parameters: Optional[dict[str, Any]] = None,
    ):
        self.action = action
        self.constraints = list(constraints)
        self.alert_factor = alert_factor
        self.parameters = dict(parameters or {})
        self.record = MonitorRecord()
        self.self_interrupted = False

    def note_self_interrupt(self) -> None:
        """Mark that this agent issued the stop, so the resulting failure is
        classified as intentional rather than an Error."""
        self.self_interrupted = True

    def observe_message(self, msg: EnhancedMessage) -> tuple[PerceptState, Optional[Alert]]:
        if msg.type is MessageType.OPERATION_FAILED:
            reason = msg.payload.get("reason", "")
            if reason == "interrupted" and self.self_interrupted:
                return PerceptState.NORMAL, None
            alert = raise_alert(PerceptState.ERROR, "operation_failed",
                                detail=reason, snapshot=self.record)
            return PerceptState.ERROR, alert
        obs = observation_from_message(msg)
        if obs is None:
            return PerceptState.NORMAL, None
        return self.observe(obs)

    def observe(self, obs: Observation) -> tuple[PerceptState, Optional[Alert]]:
        self._update_record(obs)
        z, cause = classify_with_cause(self.action, obs, self.constraints,
                                       self.alert_factor)
        constraint = cause.split(":", 1)[1] if cause.startswith("constraint_violation:") else None
        alert = raise_alert(z, cause, obs=obs, snapshot=self.record,
                            constraint=constraint)
        return z, alert

    def _update_record(self, obs: Observation) -> None:
        if obs.trajectory is None:
            return
        self.record.samples += 1
        sim_time = obs.trajectory.get("sim_time", 0.0)
        margins: dict[str, float] = {}
        for c in self.constraints:
            if not c.streaming:
                continue
            value = streaming_value(c, obs)
            if value is None:
                continue
            indicator, margin = c.evaluate(value)
            margins[c.name] = margin
            best = self.record.best_margin.get(c.name, -math.inf)
            if margin > best:
                self.record.best_margin[c.name] = margin
            if indicator == 0 and c.name not in self.record.violated_constraints():
                self.record.violation_events.append((sim_time, c.name, value))
        if margins:
            aggregate = min(margins.values())
            if aggregate > self.record.best_aggregate:
                self.record.best_aggregate = aggregate
                self.record.best_sim_time = sim_time
                self.record.best_parameters = dict(self.parameters)


def monitor_constraints(
    stream: Iterable[Observation],
    constraints: Iterable[Constraint],
    alert_factor: float = 1.0,
) -> MonitorRecord:
    """Batch form of StreamMonitor over a finished observation sequence."""
    monitor = StreamMonitor(None, constraints, alert_factor)
    for obs in stream:
        monitor.observe(obs)
    return monitor.record
