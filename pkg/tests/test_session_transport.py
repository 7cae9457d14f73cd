"""Session and transport tests: handshake, resume, ordering, heartbeats,
backpressure, timeout and GC sweeps, multiplexed FIFO under fuzzed schedules."""

import json
import random

import pytest

from embsync.messages import (
    MessageType,
    OperationStatus,
    decode_message,
    new_message,
)
from embsync.server import SyncServer
from embsync.session import BackpressureError, SessionClient, SessionConfig, SessionError
from embsync.transport import InprocTransport, SimClock


def make_pair(config=None, server_config=None, seed=None):
    clock = SimClock()
    server = SyncServer(config=server_config or config or SessionConfig(),
                        clock=clock, scheduler_seed=seed)
    client = SessionClient(lambda: InprocTransport(server, clock),
                           config or SessionConfig(), clock=clock)
    return clock, server, client


def test_fresh_init_assigns_session_id():
    _, server, client = make_pair()
    client.connect()
    assert client.connected
    assert client.session_id.startswith("sess-")
    assert client.trackers == {}
    assert client.session_id in server.sessions


def test_resume_recovers_trackers_and_id():
    clock, server, client = make_pair()
    client.connect()
    sid = client.session_id
    op = client.request_primitive("rk4_integrate",
                                  {"rhs": "exp_decay", "t_final": 1.0, "h": 0.1})
    list(client.stream_operation(op))
    client.disconnect()
    client.resume()
    assert client.session_id == sid
    assert client.trackers[op].state is OperationStatus.COMPLETED
    assert server.sessions[sid].trackers[op].state is OperationStatus.COMPLETED


def test_resume_after_session_gc_reports_unknown_session():
    clock, server, client = make_pair()
    client.connect()
    client.disconnect()
    clock.advance(10_000.0)  # way past operation_timeout + gc_delta
    server.tick(clock())
    with pytest.raises(SessionError) as err:
        client.resume()
    assert err.value.code == "unknown_session"


def test_resume_idempotence():
    """(disconnect; resume) with no traffic leaves observable state unchanged."""
    _, server, client = make_pair()
    client.connect()
    op = client.request_primitive("rk4_integrate",
                                  {"rhs": "exp_decay", "t_final": 0.5, "h": 0.1})
    list(client.stream_operation(op))
    before = {o: t.state for o, t in client.trackers.items()}
    sid = client.session_id
    client.disconnect()
    client.resume()
    assert client.session_id == sid
    assert {o: t.state for o, t in client.trackers.items()} == before
    assert len(client.outbound_queue) == 0


def test_send_while_disconnected_queues_and_flushes_in_order():
    _, server, client = make_pair()
    client.connect()
    client.disconnect()
    for i in range(5):
        client.send(new_message(MessageType.ERROR,
                                {"code": f"c{i}", "message": ""},
                                session_id=client.session_id, clock=client.clock))
    assert len(client.outbound_queue) == 5
    client.resume()
    assert len(client.outbound_queue) == 0


def test_send_queue_overflow_backpressure():
    config = SessionConfig(queue_capacity=3)
    _, server, client = make_pair(config=config)
    client.connect()
    client.disconnect()
    for i in range(3):
        client.send(new_message(MessageType.ERROR, {"code": "x", "message": ""},
                                session_id=client.session_id, clock=client.clock))
    with pytest.raises(BackpressureError):
        client.send(new_message(MessageType.ERROR, {"code": "x", "message": ""},
                                session_id=client.session_id, clock=client.clock))


def test_server_buffer_overflow_reports_backpressure_on_resume():
    config = SessionConfig(queue_capacity=1)
    clock, server, client = make_pair(config=config)
    client.connect()
    op = client.request_primitive("rk4_integrate",
                                  {"rhs": "exp_decay", "t_final": 1.0, "h": 0.1})
    msg = client.poll(timeout=0.5)  # deliver the request; wait for the ack
    while msg is not None and msg.type is not MessageType.OPERATION_ACK:
        msg = client.poll(timeout=0.5)
    assert msg is not None
    client.disconnect()
    server.run_until_idle()  # emissions pile into a 1-slot buffer
    client.resume()
    codes = []
    while True:
        msg = client.poll(timeout=0.1)
        if msg is None:
            break
        if msg.type is MessageType.ERROR:
            codes.append(msg.payload["code"])
    assert "backpressure" in codes


def test_session_mismatch_rejected():
    _, server, client = make_pair()
    client.connect()
    with pytest.raises(SessionError):
        client.send(new_message(MessageType.HEARTBEAT, {},
                                session_id="someone-else", clock=client.clock))


def test_ack_precedes_start_and_stream():
    _, server, client = make_pair()
    client.connect()
    op = client.request_primitive("rk4_integrate",
                                  {"rhs": "exp_decay", "t_final": 0.3, "h": 0.1})
    types = [m.type for m in client.stream_operation(op)]
    assert types[0] is MessageType.OPERATION_ACK
    assert types[1] is MessageType.OPERATION_START
    assert types[-1] is MessageType.OPERATION_COMPLETE


def test_stray_operation_message_answered_with_unknown_operation():
    _, server, client = make_pair()
    client.connect()
    # inject a stray server->client frame for an operation never requested
    session = server.sessions[client.session_id]
    stray = new_message(MessageType.CODE_OUTPUT, {"stdout": "?"},
                        session_id=client.session_id, operation_id="op-9",
                        status=OperationStatus.IN_PROGRESS, clock=server.clock)
    server._emit(session, stray)
    got = client.poll(timeout=0.5)
    while got is not None and got.operation_id != "op-9":
        got = client.poll(timeout=0.5)
    assert got is None  # dropped, not delivered
    assert "op-9" not in client.trackers


def test_heartbeat_reaches_session_handler_not_trackers():
    _, server, client = make_pair()
    client.connect()
    session = server.sessions[client.session_id]
    server._emit(session, new_message(MessageType.HEARTBEAT, {},
                                      session_id=client.session_id,
                                      clock=server.clock))
    before = dict(client.trackers)
    msg = client.poll(timeout=0.5)
    assert msg is not None and msg.type is MessageType.HEARTBEAT
    assert client.trackers == before
    assert client.last_peer_heartbeat_at is not None


def test_client_disconnects_after_three_missed_heartbeats():
    config = SessionConfig(heartbeat_interval_s=15.0,
                           missed_heartbeats_to_disconnect=3)
    clock, server, client = make_pair(config=config)
    client.connect()
    # silence the server: detach its conn so its heartbeats go to the buffer
    server.sessions[client.session_id].connected = False
    server.sessions[client.session_id].conn = None
    assert client.tick(clock() + 44.9) is True
    assert client.tick(clock() + 45.0) is False
    assert client.connected is False
    assert client.trackers is not None  # state preserved


def test_peer_heartbeats_keep_connection_alive():
    config = SessionConfig(heartbeat_interval_s=15.0,
                           missed_heartbeats_to_disconnect=3)
    clock, server, client = make_pair(config=config)
    client.connect()
    for _ in range(200):
        clock.advance(5.0)
        server.tick(clock())
        while client.poll(timeout=0.0) is not None:
            pass
        assert client.connected


# --- timeout and GC through the server (simulated clock) ---

def test_operation_timeout_and_gc_sweep():
    # huge heartbeat interval so the simulated idle does not drop the session
    config = SessionConfig(operation_timeout_s=600.0, gc_delta_s=60.0,
                           heartbeat_interval_s=10_000.0)
    clock, server, client = make_pair(config=config)
    client.connect()
    session = server.sessions[client.session_id]

    # a queued operation that never starts: freeze scheduling by not polling
    op = client.request_primitive("rk4_integrate",
                                  {"rhs": "exp_decay", "t_final": 1.0, "h": 0.1})
    # deliver the request without letting the scheduler start it
    transport = client._transport
    while transport._to_server:
        server.handle_frame(transport._conn, transport._to_server.popleft())
    t0 = clock()
    assert session.trackers[op].state is OperationStatus.ACKNOWLEDGED

    server.tick(t0 + 600.0)  # boundary: retained, still acknowledged
    assert session.trackers[op].state is OperationStatus.ACKNOWLEDGED
    server.tick(t0 + 601.0)  # strictly past: timeout fires
    assert session.trackers[op].state is OperationStatus.FAILED
    failed = [decode_message(f) for f in transport._to_client]
    failed = [m for m in failed if m.type is MessageType.OPERATION_FAILED]
    assert failed and failed[-1].payload["reason"] == "timeout"

    server.tick(t0 + 660.0)  # gc boundary: retained
    assert op in session.trackers
    server.tick(t0 + 661.0)  # strictly past timeout + delta: collected
    assert op not in session.trackers


def test_interrupt_unknown_or_terminal_target():
    _, server, client = make_pair()
    client.connect()
    op = client.request_primitive("rk4_integrate",
                                  {"rhs": "exp_decay", "t_final": 0.3, "h": 0.1})
    list(client.stream_operation(op))  # completes
    client.send_interrupt(op)
    codes = []
    msg = client.poll(timeout=0.5)
    while msg is not None:
        if msg.type is MessageType.ERROR:
            codes.append(msg.payload["code"])
        msg = client.poll(timeout=0.5)
    assert codes == ["not_interruptible"]

    client.send_interrupt("op-never-existed")
    msg = client.poll(timeout=0.5)
    got = []
    while msg is not None:
        if msg.type is MessageType.ERROR:
            got.append(msg.payload["code"])
        msg = client.poll(timeout=0.5)
    assert got == ["not_interruptible"]


def test_unknown_primitive_fails_after_ack_and_start():
    _, server, client = make_pair()
    client.connect()
    op = client.request_primitive("levitate", {})
    msgs = list(client.stream_operation(op))
    assert [m.type for m in msgs] == [
        MessageType.OPERATION_ACK, MessageType.OPERATION_START,
        MessageType.OPERATION_FAILED]
    assert msgs[-1].payload["reason"] == "unknown_primitive"


def test_state_verification_roundtrip():
    _, server, client = make_pair()
    client.connect()
    op = client.request_primitive("rk4_integrate",
                                  {"rhs": "exp_decay", "t_final": 0.3, "h": 0.1})
    list(client.stream_operation(op))
    query = new_message(MessageType.STATE_VERIFICATION,
                        {"query": {"operation_id": op}},
                        session_id=client.session_id, clock=client.clock)
    client.send(query)
    msg = client.poll(timeout=0.5)
    while msg is not None and msg.type is not MessageType.STATE_CONFIRMED:
        msg = client.poll(timeout=0.5)
    assert msg is not None
    assert msg.payload["state"]["operations"][op] == "completed"
    assert msg.payload["state"]["operation"]["history"][0][1] == "ack"


# --- multiplexing: per-operation FIFO under fuzzed interleavings ---

def run_interleaved_trial(seed: int, disconnect_mid: bool = False):
    """Three concurrent streams on one session with a seeded scheduler;
    returns per-operation message sequences in delivery order."""
    config = SessionConfig(parallel_operations=True)
    clock, server, client = make_pair(config=config, seed=seed)
    client.connect()
    ops = [
        client.request_primitive("rk4_integrate",
                                 {"rhs": "exp_decay", "t_final": 2.0, "h": 0.1},
                                 operation_id=f"op-a{seed}"),
        client.request_primitive("rk4_integrate",
                                 {"rhs": "exp_growth", "t_final": 2.0, "h": 0.1},
                                 operation_id=f"op-b{seed}"),
        client.request_primitive("bisection_root",
                                 {"coeffs": [1.0, 0.0, -2.0], "lo": 0.0, "hi": 2.0,
                                  "tol": 1e-9},
                                 operation_id=f"op-c{seed}"),
    ]
    per_op: dict[str, list] = {op: [] for op in ops}
    terminal = set()
    dropped = False
    polls = 0
    while len(terminal) < len(ops):
        msg = client.poll(timeout=5.0)
        polls += 1
        if msg is None:
            raise AssertionError(f"stalled at {sorted(terminal)}")
        if msg.operation_id in per_op:
            per_op[msg.operation_id].append(msg)
            if msg.type in (MessageType.OPERATION_COMPLETE,
                            MessageType.OPERATION_FAILED):
                terminal.add(msg.operation_id)
        if disconnect_mid and not dropped and polls == 20:
            client.disconnect()
            dropped = True
            client.resume()
    return ops, per_op


def assert_fifo(per_op):
    for op, msgs in per_op.items():
        stamps = [m.timestamp for m in msgs]
        assert stamps == sorted(stamps), f"{op}: timestamps not causal"
        times = [m.payload["sim_time"] for m in msgs
                 if m.type is MessageType.MODEL_STATE_UPDATE]
        assert times == sorted(times), f"{op}: trajectory out of order"
        iters = [int(m.payload["stdout"].split(":")[0].split()[-1])
                 for m in msgs if m.type is MessageType.CODE_OUTPUT]
        assert iters == sorted(iters), f"{op}: stdout out of order"
        types = [m.type for m in msgs]
        assert types[0] is MessageType.OPERATION_ACK
        assert types[1] is MessageType.OPERATION_START
        assert types[-1] in (MessageType.OPERATION_COMPLETE,
                             MessageType.OPERATION_FAILED)


def test_interleaved_operations_preserve_per_op_fifo():
    for seed in range(8):
        ops, per_op = run_interleaved_trial(seed)
        assert_fifo(per_op)


def test_interleavings_actually_differ_across_seeds():
    def global_order(seed):
        ops, per_op = run_interleaved_trial(seed)
        merged = []
        for op, msgs in per_op.items():
            for m in msgs:
                merged.append((m.timestamp, op, m.type.value))
        return tuple(sorted(merged))

    assert global_order(1) != global_order(2), "scheduler fuzz had no effect"


def test_fifo_survives_disconnect_resume():
    for seed in range(4):
        ops, per_op = run_interleaved_trial(seed, disconnect_mid=True)
        assert_fifo(per_op)
        for op in ops:
            assert per_op[op][-1].type is MessageType.OPERATION_COMPLETE
