"""State machine, timeout, and garbage collection tests."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embsync.lifecycle import (
    LifecycleEvent,
    OperationTracker,
    TransitionError,
    apply_transition,
    check_timeout,
    collect_garbage,
)
from embsync.messages import OperationStatus

S = OperationStatus
E = LifecycleEvent

# Expected classification written out independently of the implementation table.
EXPECTED_LEGAL = {
    (S.PENDING, E.ACK): S.ACKNOWLEDGED,
    (S.ACKNOWLEDGED, E.START): S.STARTED,
    (S.STARTED, E.PROGRESS): S.IN_PROGRESS,
    (S.IN_PROGRESS, E.PROGRESS): S.IN_PROGRESS,
    (S.IN_PROGRESS, E.DONE): S.COMPLETED,
    (S.IN_PROGRESS, E.ERROR): S.FAILED,
    (S.STARTED, E.ERROR): S.FAILED,
    (S.STARTED, E.DONE): S.COMPLETED,
    (S.ACKNOWLEDGED, E.TIMEOUT): S.FAILED,
    (S.STARTED, E.TIMEOUT): S.FAILED,
    (S.IN_PROGRESS, E.TIMEOUT): S.FAILED,
    (S.STARTED, E.INTERRUPT_ACK): S.FAILED,
    (S.IN_PROGRESS, E.INTERRUPT_ACK): S.FAILED,
}


def test_every_state_event_pair_classified_exactly():
    for state in S:
        for event in E:
            if (state, event) in EXPECTED_LEGAL:
                assert apply_transition(state, event) == EXPECTED_LEGAL[(state, event)]
            else:
                with pytest.raises(TransitionError):
                    apply_transition(state, event)


def test_terminal_states_have_no_outgoing_edges():
    for state in (S.COMPLETED, S.FAILED):
        for event in E:
            with pytest.raises(TransitionError):
                apply_transition(state, event)


def test_every_state_reachable_from_pending():
    reached = {S.PENDING}
    frontier = [S.PENDING]
    while frontier:
        state = frontier.pop()
        for event in E:
            try:
                nxt = apply_transition(state, event)
            except TransitionError:
                continue
            if nxt not in reached:
                reached.add(nxt)
                frontier.append(nxt)
    assert reached == set(S)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(list(E)), max_size=60))
def test_random_event_sequences_never_reach_undefined_state(events):
    state = S.PENDING
    for event in events:
        try:
            state = apply_transition(state, event)
        except TransitionError:
            pass
        assert state in set(S)


# --- timeout ---

def make_tracker(state=S.ACKNOWLEDGED, last=0.0, timeout=600.0, op="op-1"):
    return OperationTracker(operation_id=op, state=state,
                            created_at=0.0, last_activity_at=last, timeout_s=timeout)


def test_timeout_fires_strictly_past_deadline():
    t = make_tracker()
    assert check_timeout(t, 601.0) is E.TIMEOUT


def test_timeout_boundary_is_exclusive():
    t = make_tracker()
    assert check_timeout(t, 600.0) is None


def test_terminal_trackers_never_time_out():
    t = make_tracker(state=S.COMPLETED)
    assert check_timeout(t, 1e9) is None


def test_timeout_transition_does_not_reset_activity_clock():
    t = make_tracker()
    t.apply(E.TIMEOUT, now=601.0)
    assert t.state is S.FAILED
    assert t.last_activity_at == 0.0  # GC clock keeps running from last message


def test_history_is_append_only_and_activity_monotone():
    t = OperationTracker(operation_id="op-1", created_at=0.0, last_activity_at=0.0)
    t.apply(E.ACK, now=1.0)
    t.apply(E.START, now=2.0)
    t.apply(E.PROGRESS, now=3.0)
    assert [e for _, e in t.history] == [E.ACK, E.START, E.PROGRESS]
    assert t.last_activity_at == 3.0
    t.touch(2.5)  # stale touch must not move the clock backwards
    assert t.last_activity_at == 3.0


# --- garbage collection ---

def test_gc_removes_past_timeout_plus_delta():
    t = make_tracker(last=100.0)
    assert collect_garbage([t], now=761.0, delta_s=60.0) == {"op-1"}


def test_gc_boundary_retains():
    t = make_tracker(last=100.0)
    assert collect_garbage([t], now=760.0, delta_s=60.0) == set()


def test_gc_of_empty_set_is_empty():
    assert collect_garbage([], now=1e9) == set()


def test_gc_applies_to_terminal_trackers_too():
    t = make_tracker(state=S.COMPLETED, last=0.0)
    assert collect_garbage([t], now=661.0, delta_s=60.0) == {"op-1"}


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(0, 1e4, allow_nan=False), st.floats(1, 1e3, allow_nan=False)),
        max_size=20,
    ),
    st.floats(0, 2e4, allow_nan=False),
)
def test_gc_fixpoint(tracker_params, now):
    trackers = [
        OperationTracker(operation_id=f"op-{i}", last_activity_at=last, timeout_s=to)
        for i, (last, to) in enumerate(tracker_params)
    ]
    removed = collect_garbage(trackers, now=now, delta_s=60.0)
    retained = [t for t in trackers if t.operation_id not in removed]
    assert collect_garbage(retained, now=now, delta_s=60.0) == set()
