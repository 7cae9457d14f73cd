"""Scenario files, audit logs, and episode reports.

A scenario is one JSON document declaring the intent, plant, constraints,
policy, and budgets. An episode writes an append-only audit log of every
protocol message the client saw (newline-delimited wire frames); the episode
report is then *reconstructed from that log alone*, so `run` and `replay`
produce identical bytes by construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .constraints import Constraint
from .control import Margins, PIDGains, StepMetrics, evaluate_constraints
from .controller import Intent
from .messages import (
    DecodeError,
    EnhancedMessage,
    MessageType,
    decode_message,
    encode_message,
)
from .session import SessionConfig


class ScenarioError(ValueError):
    """The scenario document does not validate against the schema."""


DEFAULT_BUDGETS = {"max_turns": 5, "hotfix_budget": 3}


@dataclass
class Scenario:
    intent: str
    plant: dict[str, list[float]]
    constraints: list[Constraint]
    policy_id: str
    policy_parameters: dict[str, Any] = field(default_factory=dict)
    budgets: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    sim: dict[str, float] = field(default_factory=lambda: {"t_final": 40.0, "dt": 0.01})
    sweep: dict[str, float] = field(default_factory=dict)
    session: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "intent": self.intent,
            "plant": self.plant,
            "constraints": [c.to_dict() for c in self.constraints],
            "policy": {"id": self.policy_id, "parameters": self.policy_parameters},
            "budgets": self.budgets,
            "sim": self.sim,
            "sweep": self.sweep,
            "session": self.session,
        }

    def session_config(self) -> SessionConfig:
        merged = dict(self.session)
        for key in SessionConfig.__dataclass_fields__:
            env = os.environ.get(f"EMBSYNC_{key.upper()}")
            if env is not None:
                merged[key] = type(SessionConfig.__dataclass_fields__[key].default)(env)
        return SessionConfig.from_dict(merged)

    def to_intent(self) -> Intent:
        params = dict(self.policy_parameters)
        init = params.get("initial_gains", {})
        scenario_parameters = {
            "plant": self.plant,
            "initial_structure": params.get("initial_structure", "P"),
            "initial_gains": PIDGains(
                float(init.get("kp", 1.0)),
                float(init.get("ki", 0.0)),
                float(init.get("kd", 0.0)),
            ),
            "sim": self.sim,
            "sweep": self.sweep,
            "alert_factor": params.get("alert_factor", 1.0),
        }
        return Intent(description=self.intent, constraints=list(self.constraints),
                      scenario_parameters=scenario_parameters)


def _require(doc: dict, key: str, kind: type, where: str = "scenario"):
    if key not in doc:
        raise ScenarioError(f"{where}: missing required key {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise ScenarioError(f"{where}: key {key!r} must be {kind.__name__}")
    return value


def parse_scenario(doc: dict[str, Any]) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    intent = _require(doc, "intent", str)
    plant = _require(doc, "plant", dict)
    for key in ("num", "den"):
        if not isinstance(plant.get(key), list) or not plant[key]:
            raise ScenarioError(f"plant.{key} must be a non-empty coefficient list")
    raw_constraints = _require(doc, "constraints", list)
    if not raw_constraints:
        raise ScenarioError("constraints must be non-empty")
    constraints = []
    for i, c in enumerate(raw_constraints):
        try:
            constraints.append(Constraint.from_dict(c))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"constraints[{i}]: {exc}") from exc
    names = [c.name for c in constraints]
    if len(names) != len(set(names)):
        raise ScenarioError("constraint names must be unique")
    policy = _require(doc, "policy", dict)
    policy_id = _require(policy, "id", str, where="policy")
    budgets = dict(DEFAULT_BUDGETS)
    budgets.update(doc.get("budgets", {}))
    for key, value in budgets.items():
        if not isinstance(value, int) or value < 0:
            raise ScenarioError(f"budgets.{key} must be a non-negative integer")
    sim = {"t_final": 40.0, "dt": 0.01}
    sim.update(doc.get("sim", {}))
    if sim["dt"] <= 0 or sim["t_final"] <= 0:
        raise ScenarioError("sim.dt and sim.t_final must be positive")
    return Scenario(
        intent=intent,
        plant={"num": [float(x) for x in plant["num"]],
               "den": [float(x) for x in plant["den"]]},
        constraints=constraints,
        policy_id=policy_id,
        policy_parameters=policy.get("parameters", {}),
        budgets=budgets,
        sim=sim,
        sweep=doc.get("sweep", {}),
        session=doc.get("session", {}),
    )


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc
    return parse_scenario(doc)


# --- audit log -------------------------------------------------------------

class AuditWriter:
    """Append-only newline-delimited log of encoded messages."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "wb")

    def __call__(self, msg: EnhancedMessage) -> None:
        self._fh.write(encode_message(msg) + b"\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def read_audit_log(path: str) -> tuple[list[EnhancedMessage], bool]:
    """All decodable messages in order, plus a truncation flag."""
    messages: list[EnhancedMessage] = []
    truncated = False
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.strip():
        raise ScenarioError("audit log is empty")
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    else:
        truncated = True  # file did not end on a frame boundary
    for line in lines:
        try:
            messages.append(decode_message(line))
        except DecodeError:
            truncated = True
    if not messages:
        raise ScenarioError("audit log contains no decodable messages")
    return messages, truncated


# --- report reconstruction ------------------------------------------------------

def _structure_of(gains: dict[str, float]) -> str:
    has_i = abs(gains.get("ki", 0.0)) > 0.0
    has_d = abs(gains.get("kd", 0.0)) > 0.0
    if has_i and has_d:
        return "PID"
    if has_i:
        return "PI"
    if has_d:
        return "PD"
    return "P"


def _json_num(v: float):
    if v is None:
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return v


def _metrics_from_result(result: dict) -> Optional[StepMetrics]:
    m = result.get("metrics")
    if not isinstance(m, dict):
        return None
    def f(key, default=math.nan):
        v = m.get(key, default)
        return float(v) if v is not None else math.nan
    return StepMetrics(
        settling_time_s=f("settling_time_s"),
        overshoot_pct=f("overshoot_pct"),
        steady_state_error=f("steady_state_error"),
        final_value=f("final_value"),
        peak=f("peak"),
        peak_time_s=f("peak_time_s"),
        non_settling=bool(m.get("non_settling", False)),
    )


def _margins_from_result(result: dict) -> Margins:
    def f(key):
        v = result.get(key)
        return float(v) if v is not None else math.nan
    return Margins(
        gain_margin_db=f("gain_margin_db"),
        phase_margin_deg=f("phase_margin_deg"),
        phase_crossover_rad_s=result.get("phase_crossover_rad_s"),
        gain_crossover_rad_s=result.get("gain_crossover_rad_s"),
        phase_crossover_count=int(result.get("phase_crossover_count", 0)),
        gain_crossover_count=int(result.get("gain_crossover_count", 0)),
        no_gain_crossover=bool(result.get("no_gain_crossover", False)),
    )


def build_report(messages: list[EnhancedMessage], audit_path: str,
                 truncated: bool = False) -> dict[str, Any]:
    """Reconstruct the episode report from the message log alone."""
    scenario_doc = None
    for msg in messages:
        if msg.type is MessageType.SESSION_INIT and "scenario" in msg.payload:
            scenario_doc = msg.payload["scenario"]
            break
    if scenario_doc is None:
        raise ScenarioError("audit log carries no scenario (session_init payload)")
    scenario = parse_scenario(scenario_doc)

    counts: dict[str, int] = {}
    for msg in messages:
        counts[msg.type.value] = counts.get(msg.type.value, 0) + 1

    ops: dict[str, dict[str, Any]] = {}
    order: list[str] = []
    for msg in messages:
        op_id = msg.operation_id
        if msg.type is MessageType.OPERATION_REQUEST:
            params = msg.payload.get("parameters", {})
            if msg.payload.get("operation_type") == "execute_primitive":
                ops[op_id] = {
                    "primitive": params.get("primitive"),
                    "args": params.get("args", {}),
                    "status": "pending",
                    "result": None,
                    "reason": None,
                }
                order.append(op_id)
        elif msg.type is MessageType.OPERATION_COMPLETE and op_id in ops:
            ops[op_id]["status"] = "completed"
            ops[op_id]["result"] = msg.payload.get("result", {})
        elif msg.type is MessageType.OPERATION_FAILED and op_id in ops:
            ops[op_id]["status"] = "failed"
            ops[op_id]["reason"] = msg.payload.get("reason")

    # a turn closes at each completed margins measurement
    turns: list[dict[str, Any]] = []
    window: list[str] = []
    for op_id in order:
        op = ops[op_id]
        window.append(op_id)
        if op["primitive"] == "freq_margins" and op["status"] == "completed":
            turns.append(_close_turn(len(turns) + 1, window, ops, scenario))
            window = []
    incomplete_tail = bool(window)

    success = bool(turns) and not turns[-1]["delta"] and not incomplete_tail
    replans = []
    prev_structure = scenario.policy_parameters.get("initial_structure")
    if prev_structure is None and turns:
        prev_structure = turns[0]["structure"]
    prev_delta: list[str] = []
    for t in turns:
        if t["structure"] != prev_structure:
            replans.append({
                "turn": t["turn"],
                "from_structure": prev_structure,
                "to_structure": t["structure"],
                "trigger": prev_delta,
            })
        prev_structure = t["structure"]
        prev_delta = t["delta"]

    timestamps = [m.timestamp for m in messages]
    report = {
        "scenario_intent": scenario.intent,
        "policy": scenario.policy_id,
        "success": success,
        "turns": len(turns),
        "per_turn": turns,
        "replans": replans,
        "final_metrics": turns[-1]["metrics"] if turns else {},
        "final_margins": turns[-1]["margins"] if turns else {},
        "delta_history": [t["delta"] for t in turns],
        "message_counts": dict(sorted(counts.items())),
        "operations": {"count": len(order),
                       "interrupted": sum(1 for o in ops.values()
                                          if o["reason"] == "interrupted")},
        "timing": {
            "first_timestamp": min(timestamps),
            "last_timestamp": max(timestamps),
            "span_s": max(timestamps) - min(timestamps),
        },
        "audit_log": audit_path,
        "partial": truncated or incomplete_tail,
    }
    return report


def _close_turn(turn_no: int, window: list[str], ops: dict[str, dict],
                scenario: Scenario) -> dict[str, Any]:
    lti_done = [ops[o] for o in window
                if ops[o]["primitive"] == "lti_step_sim"
                and ops[o]["status"] == "completed"]
    lti_all = [o for o in window if ops[o]["primitive"] == "lti_step_sim"]
    freq = next(ops[o] for o in reversed(window)
                if ops[o]["primitive"] == "freq_margins"
                and ops[o]["status"] == "completed")

    metrics = _metrics_from_result(lti_done[-1]["result"]) if lti_done else None
    margins = _margins_from_result(freq["result"])
    gains = (lti_done[-1]["args"].get("gains", {}) if lti_done else {})
    indicators, cmargins = evaluate_constraints(metrics, margins, scenario.constraints)
    delta = sorted(name for name, ind in indicators.items() if ind == 0)
    return {
        "turn": turn_no,
        "structure": _structure_of(gains) if gains else "unknown",
        "gains": gains,
        "metrics": {k: _json_num(v) for k, v in
                    (metrics.to_dict() if metrics else {}).items()},
        "margins": {k: (_json_num(v) if isinstance(v, float) else v)
                    for k, v in margins.to_dict().items()},
        "delta": delta,
        "constraint_margins": {k: _json_num(v) for k, v in cmargins.items()},
        "hotfix_repairs": max(0, len(lti_all) - 1),
    }


def render_report(report: dict[str, Any]) -> bytes:
    return (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8")


def summarize(report: dict[str, Any]) -> str:
    lines = [
        f"policy={report['policy']} success={report['success']} "
        f"turns={report['turns']} partial={report['partial']}",
    ]
    for t in report["per_turn"]:
        gains = t["gains"]
        gtxt = (f"kp={gains.get('kp', 0):.3f} ki={gains.get('ki', 0):.3f} "
                f"kd={gains.get('kd', 0):.3f}") if gains else "-"
        delta = ",".join(t["delta"]) if t["delta"] else "none"
        lines.append(f"  turn {t['turn']}: [{t['structure']}] {gtxt} "
                     f"hotfix={t['hotfix_repairs']} unsatisfied: {delta}")
    for r in report["replans"]:
        lines.append(f"  replan at turn {r['turn']}: {r['from_structure']} -> "
                     f"{r['to_structure']} (triggered by {','.join(r['trigger'])})")
    return "\n".join(lines)
