"""Dual-loop controller tests: planning fixtures, hot-fix repair chains,
reflection strategy selection, and full episodes."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embsync.backend import Action, Observation
from embsync.constraints import Constraint
from embsync.control import Margins, PIDGains, StepMetrics
from embsync.controller import Controller, Intent
from embsync.messages import MessageType
from embsync.perception import Alert, PerceptState
from embsync.policy import (
    BindingError,
    PlanStep,
    ReferencePidPolicy,
    gains_for_structure,
    make_policy,
)
from embsync.server import SyncServer
from embsync.session import SessionClient, SessionConfig
from embsync.transport import InprocTransport, SimClock

PLANT = {"num": [1.0], "den": [1.0, 3.0, 3.0, 1.0]}

FIVE = [
    Constraint("ts", "settling_time_s", "<", 5.0, "s"),
    Constraint("mp", "overshoot_pct", "<", 20.0, "%", streaming=True),
    Constraint("ess", "steady_state_error", "==", 0.0),
    Constraint("gm", "gain_margin_db", ">", 10.0, "dB"),
    Constraint("pm", "phase_margin_deg", ">", 45.0, "deg"),
]


def maglev_intent(**overrides):
    params = {
        "plant": PLANT,
        "initial_structure": "P",
        "initial_gains": PIDGains(1.0, 0.0, 0.0),
        "sim": {"t_final": 40.0, "dt": 0.01},
    }
    params.update(overrides)
    return Intent("tune the levitation loop", FIVE, params)


def make_stack(config=None):
    clock = SimClock()
    server = SyncServer(config=config or SessionConfig(), clock=clock)
    client = SessionClient(lambda: InprocTransport(server, clock),
                           config or SessionConfig(), clock=clock)
    client.connect()
    return clock, server, client


def make_controller(client=None, policy=None):
    if client is None:
        _, _, client = make_stack()
    return Controller(client, policy or ReferencePidPolicy())


# --- planning ---

def test_global_plan_skeleton():
    ctl = make_controller()
    assert ctl.plan_global(maglev_intent()) == ["Modeling", "Simulation", "Validation"]


def test_global_plan_deterministic_on_replay():
    ctl = make_controller()
    intent = maglev_intent()
    assert ctl.plan_global(intent) == ctl.plan_global(intent)


def test_local_plan_for_simulation_subtask():
    ctl = make_controller()
    steps = ctl.plan_local("Simulation", {})
    assert [s.primitive for s in steps] == ["lti_step_sim", "freq_margins"]


def test_local_plan_for_validation_is_single_local_step():
    ctl = make_controller()
    steps = ctl.plan_local("Validation", {})
    assert len(steps) == 1 and not steps[0].is_primitive


def test_unregistered_primitive_in_plan_is_rejected():
    class OffMenuPolicy(ReferencePidPolicy):
        def propose_local(self, subtask, state):
            return [PlanStep("x", subtask, primitive="levitate_magically")]

    ctl = make_controller(policy=OffMenuPolicy())
    with pytest.raises(BindingError):
        ctl.plan_local("Simulation", {})


def test_generate_action_binds_gains():
    ctl = make_controller()
    state = {"plant": PLANT, "gains": PIDGains(4.8, 2.646, 2.177),
             "sim": {"t_final": 40.0, "dt": 0.01}}
    action = ctl.generate_action(PlanStep("simulate_closed_loop", "Simulation",
                                          primitive="lti_step_sim"), state)
    assert action.parameters["gains"] == {"kp": 4.8, "ki": 2.646, "kd": 2.177}


def test_generate_action_without_plant_is_binding_error():
    ctl = make_controller()
    with pytest.raises(BindingError):
        ctl.generate_action(PlanStep("simulate_closed_loop", "Simulation",
                                     primitive="lti_step_sim"),
                            {"gains": PIDGains(1, 0, 0)})


def test_generate_action_control_step_passthrough():
    ctl = make_controller()
    action = ctl.generate_action(
        PlanStep("halt", "Simulation", notes="stop op-7"), {})
    assert action.kind == "control_command"
    assert action.command == "interrupt"
    assert action.target_operation_id == "op-7"


# --- repair rules ---

def test_nan_repair_halves_step():
    policy = ReferencePidPolicy()
    action = Action.call("rk4_integrate", rhs="quadratic_blowup", y0=1.0,
                         t0=0.0, t_final=2.0, h=0.1)
    alert = Alert(PerceptState.WARNING, "nan_divergence", fatal=True)
    repaired = policy.repair(action, None, alert)
    assert repaired.parameters["h"] == 0.05


def test_overshoot_repair_scales_kp():
    policy = ReferencePidPolicy()
    action = Action.call("lti_step_sim", plant=PLANT,
                         gains={"kp": 4.8, "ki": 2.646, "kd": 2.177},
                         t_final=40.0, dt=0.01)
    alert = Alert(PerceptState.WARNING, "constraint_violation:mp",
                  constraint="mp")
    repaired = policy.repair(action, None, alert)
    assert abs(repaired.parameters["gains"]["kp"] - 3.36) < 1e-9
    assert repaired.parameters["gains"]["ki"] == 2.646


def test_unknown_cause_escalates_immediately():
    policy = ReferencePidPolicy()
    action = Action.call("rk4_integrate", rhs="exp_decay", y0=1.0,
                         t0=0.0, t_final=1.0, h=0.1)
    alert = Alert(PerceptState.ERROR, "operation_failed", detail="unknown_primitive")
    assert policy.repair(action, None, alert) is None


def test_hotfix_budget_boundary():
    ctl = make_controller()
    alert = Alert(PerceptState.WARNING, "nan_divergence", fatal=True)
    action = Action.call("rk4_integrate", rhs="quadratic_blowup", y0=1.0,
                         t0=0.0, t_final=2.0, h=0.1)
    assert ctl.hot_fix(action, None, alert, budget_left=1) is not None
    assert ctl.hot_fix(action, None, alert, budget_left=0) is None


# --- the forced-divergence fixture, end to end ---

def test_divergence_hotfix_chain():
    """Warning surfaces before termination; the controller interrupts and
    re-dispatches with a halved step, up to the budget of 3."""
    clock, server, client = make_stack()
    seen = []
    client.audit_hook = seen.append
    ctl = make_controller(client=client)
    action = Action.call("rk4_integrate", rhs="quadratic_blowup", y0=1.0,
                         t0=0.0, t_final=2.0, h=0.2)
    outcome = ctl.run_action_chain(action, [])

    assert outcome.repairs == 3
    assert outcome.escalated
    assert len(outcome.operation_ids) == 4
    # each dispatch carries a halved step
    h_by_op = {}
    for m in seen:
        if m.type is MessageType.OPERATION_REQUEST and m.operation_id:
            params = m.payload["parameters"]
            if params.get("primitive") == "rk4_integrate":
                h_by_op[m.operation_id] = params["args"]["h"]
    hs = [h_by_op[op] for op in outcome.operation_ids]
    assert hs == [0.2, 0.1, 0.05, 0.025]
    # every interrupted run ends in exactly one interrupted failure
    for op in outcome.operation_ids:
        failures = [m for m in seen
                    if m.operation_id == op
                    and m.type is MessageType.OPERATION_FAILED]
        assert len(failures) == 1
        assert failures[0].payload["reason"] == "interrupted"
    # smaller step survives longer before the singularity overflows
    finite_counts = []
    for op in outcome.operation_ids:
        updates = [m for m in seen
                   if m.operation_id == op and m.type is MessageType.MODEL_STATE_UPDATE]
        finite_counts.append(
            sum(1 for m in updates
                if all(math.isfinite(v) for v in m.payload["variables"]["y"])))
    assert all(b > a for a, b in zip(finite_counts, finite_counts[1:])), finite_counts


# --- reflection ---

def test_reflect_success_when_all_met():
    ctl = make_controller()
    state = {
        "structure": "PID", "gains": PIDGains(2.3, 0.9, 2.2),
        "metrics": StepMetrics(4.9, 0.6, 0.0, 1.0, 1.006, 8.0),
        "margins": Margins(20.6, 70.9, 1.7, 0.36),
    }
    fb = ctl.reflect(state, FIVE)
    assert fb.unsatisfied == {} and fb.strategy is None


def test_reflect_p_controller_with_ess_miss_replans():
    ctl = make_controller()
    state = {
        "structure": "P", "gains": PIDGains(1.0, 0.0, 0.0),
        "metrics": StepMetrics(8.4, 13.9, 0.5, 0.5, 0.57, 3.5),
        "margins": Margins(18.06, math.inf, 1.73, None),
    }
    fb = ctl.reflect(state, FIVE)
    assert "ess" in fb.unsatisfied
    assert fb.strategy == "global_replan"


def test_reflect_pid_with_margin_miss_adjusts_locally():
    ctl = make_controller()
    state = {
        "structure": "PID", "gains": PIDGains(4.8, 2.6, 2.2),
        "metrics": StepMetrics(4.0, 10.0, 0.0, 1.0, 1.1, 2.0),
        "margins": Margins(19.0, 32.0, 1.7, 0.9),
    }
    fb = ctl.reflect(state, FIVE)
    assert set(fb.unsatisfied) == {"pm"}
    assert fb.strategy == "local_adjustment"


@settings(max_examples=150, deadline=None)
@given(
    ts=st.floats(0, 20, allow_nan=False),
    mp=st.floats(0, 80, allow_nan=False),
    ess=st.floats(0, 0.6, allow_nan=False),
    gm=st.floats(0, 40, allow_nan=False),
    pm=st.floats(-20, 110, allow_nan=False),
)
def test_reflect_delta_matches_brute_force(ts, mp, ess, gm, pm):
    ctl = make_controller()
    state = {
        "structure": "PID", "gains": PIDGains(1.0, 1.0, 1.0),
        "metrics": StepMetrics(ts, mp, ess, 1.0, 1.0 + mp / 100, 2.0),
        "margins": Margins(gm, pm, 1.7, 0.9),
    }
    fb = ctl.reflect(state, FIVE)
    expected = set()
    if not ts < 5.0:
        expected.add("ts")
    if not mp < 20.0:
        expected.add("mp")
    if not abs(ess) <= 1e-3:
        expected.add("ess")
    if not gm > 10.0:
        expected.add("gm")
    if not pm > 45.0:
        expected.add("pm")
    assert set(fb.unsatisfied) == expected


# --- structure ladder ---

def test_ladder_jumps_to_pid_for_high_order_plant():
    policy = ReferencePidPolicy()
    state = {"structure": "P", "plant": PLANT}
    assert policy.next_structure(state, {"ess", "ts"}) == "PID"


def test_ladder_steps_to_pi_for_low_order_plant():
    policy = ReferencePidPolicy()
    state = {"structure": "P", "plant": {"num": [1.0], "den": [1.0, 1.0]}}
    assert policy.next_structure(state, {"ess"}) == "PI"


def test_ladder_terminates_after_pid():
    policy = ReferencePidPolicy()
    state = {"structure": "PID", "plant": PLANT}
    assert policy.next_structure(state, {"ess"}) is None


def test_gains_for_structure_masks_terms():
    g = gains_for_structure("PI", PIDGains(1.0, 2.0, 3.0))
    assert (g.kp, g.ki, g.kd) == (1.0, 2.0, 0.0)


# --- episodes ---

def test_maglev_episode_succeeds_within_five_turns():
    ctl = make_controller()
    result = ctl.run_episode(maglev_intent(), max_turns=5)
    assert result.success
    assert result.turns_used <= 5
    assert result.delta_history[-1] == []
    replans = [e for e in result.events if e["kind"] == "global_replan"]
    assert any(e["from_structure"] == "P" and e["to_structure"] == "PID"
               and "ess" in e["trigger"] for e in replans)
    m = result.final_metrics
    assert m["settling_time_s"] < 5.0
    assert m["overshoot_pct"] < 20.0
    assert abs(m["steady_state_error"]) <= 1e-3
    assert m["gain_margin_db"] > 10.0
    assert m["phase_margin_deg"] > 45.0


def test_frozen_zn_episode_fails_with_margin_violations():
    _, _, client = make_stack()
    policy = make_policy("zn_frozen", {"plant": PLANT})
    ctl = Controller(client, policy)
    result = ctl.run_episode(maglev_intent(), max_turns=2)
    assert not result.success
    assert {"pm", "mp"} <= set(result.delta_history[-1])


def test_zero_turn_budget_fails_immediately():
    ctl = make_controller()
    result = ctl.run_episode(maglev_intent(), max_turns=0)
    assert not result.success
    assert result.turns_used == 0
    assert result.delta_history == [["ess", "gm", "mp", "pm", "ts"]]


def test_episode_determinism_metrics_and_streams():
    def run_once():
        clock, server, client = make_stack()
        log = []
        client.audit_hook = log.append
        ctl = make_controller(client=client)
        result = ctl.run_episode(maglev_intent(), max_turns=5)
        per_op: dict[str, list] = {}
        for m in log:
            if m.operation_id is not None:
                per_op.setdefault(m.operation_id, []).append(
                    (m.type.value, repr(sorted(m.payload.items()))))
        return result, per_op

    r1, ops1 = run_once()
    r2, ops2 = run_once()
    assert r1.final_metrics == r2.final_metrics
    assert r1.delta_history == r2.delta_history
    seq1 = sorted(ops1.values())
    seq2 = sorted(ops2.values())
    assert seq1 == seq2


def test_lifecycle_conformance_of_episode_streams():
    """Every operation's messages, projected to lifecycle types, walk the
    state machine from pending to a terminal state without illegal edges."""
    from embsync.lifecycle import LifecycleEvent, apply_transition
    from embsync.messages import OperationStatus

    clock, server, client = make_stack()
    log = []
    client.audit_hook = log.append
    ctl = make_controller(client=client)
    ctl.run_episode(maglev_intent(), max_turns=5)

    event_of = {
        MessageType.OPERATION_ACK: lambda m: LifecycleEvent.ACK,
        MessageType.OPERATION_START: lambda m: LifecycleEvent.START,
        MessageType.OPERATION_PROGRESS: lambda m: LifecycleEvent.PROGRESS,
        MessageType.OPERATION_COMPLETE: lambda m: LifecycleEvent.DONE,
        MessageType.OPERATION_FAILED: lambda m: {
            "timeout": LifecycleEvent.TIMEOUT,
            "interrupted": LifecycleEvent.INTERRUPT_ACK,
        }.get(m.payload.get("reason"), LifecycleEvent.ERROR),
    }
    per_op: dict[str, list] = {}
    for m in log:
        if m.operation_id and m.type in event_of and m.operation_id.startswith("op-"):
            per_op.setdefault(m.operation_id, []).append(event_of[m.type](m))
    assert per_op
    for op, events in per_op.items():
        state = OperationStatus.PENDING
        for event in events:
            state = apply_transition(state, event)  # raises on an illegal edge
        assert state in (OperationStatus.COMPLETED, OperationStatus.FAILED), op


def test_hotfix_repair_creates_coexisting_trackers():
    clock, server, client = make_stack()
    ctl = make_controller(client=client)
    action = Action.call("rk4_integrate", rhs="quadratic_blowup", y0=1.0,
                         t0=0.0, t_final=2.0, h=0.2)
    outcome = ctl.run_action_chain(action, [])
    assert len(outcome.operation_ids) >= 2
    for op in outcome.operation_ids:
        assert client.trackers[op].terminal
        assert server.sessions[client.session_id].trackers[op].terminal


def test_turn_bound_and_hotfix_budget_respected():
    ctl = make_controller()
    result = ctl.run_episode(maglev_intent(), max_turns=3)
    assert result.turns_used <= 3
    per_chain: dict[int, int] = {}
    chain = -1
    for e in result.events:
        if e["kind"] == "hotfix_repair":
            per_chain[chain] = per_chain.get(chain, 0) + 1
        elif e["kind"] == "reflect":
            chain += 1
    assert all(v <= 3 for v in per_chain.values())
