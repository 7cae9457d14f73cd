"""Server core: stateful sessions, operation scheduling, timeout/GC sweeps.

``SyncServer`` is transport-agnostic and fully synchronous: transports feed
it frames via ``handle_frame``, drive execution via ``advance`` (one internal
step of one running operation per call), and time via ``tick``. The in-process
transport calls these from the client thread for deterministic runs; the
WebSocket binding calls them from reader/worker/sweeper threads under one lock.
"""

from __future__ import annotations

import math
import random
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .backend import OperationRun, PrimitiveError, PrimitiveRegistry
from .lifecycle import LifecycleEvent, OperationTracker, check_timeout, collect_garbage
from .messages import (
    DecodeError,
    EnhancedMessage,
    MessageType,
    OperationStatus,
    decode_message,
    encode_message,
    new_message,
)
from .session import SessionConfig

INTERRUPTIBLE = (OperationStatus.STARTED, OperationStatus.IN_PROGRESS)
TIMEOUTABLE = (OperationStatus.ACKNOWLEDGED, OperationStatus.STARTED,
               OperationStatus.IN_PROGRESS)


@dataclass
class ServerSession:
    session_id: str
    config: SessionConfig
    conn: Optional[Any] = None
    connected: bool = False
    trackers: dict[str, OperationTracker] = field(default_factory=dict)
    runs: dict[str, OperationRun] = field(default_factory=dict)
    run_queue: deque[str] = field(default_factory=deque)
    outbound_buffer: deque[bytes] = field(default_factory=deque)
    dropped: int = 0
    last_activity_at: float = 0.0
    last_heartbeat_sent_at: float = -math.inf
    last_peer_heartbeat_at: float = 0.0

    def live_runs(self) -> list[str]:
        return [op for op, run in self.runs.items() if run.started and not run.done]


class SyncServer:
    """One server instance multiplexing any number of sessions."""

    def __init__(
        self,
        registry: Optional[PrimitiveRegistry] = None,
        config: Optional[SessionConfig] = None,
        clock: Callable[[], float] = time.time,
        scheduler_seed: Optional[int] = None,
    ):
        if registry is None:
            from .primitives import default_registry
            registry = default_registry()
        self.registry = registry
        self.config = config or SessionConfig()
        self.clock = clock
        self.sessions: dict[str, ServerSession] = {}
        self._conn_sessions: dict[int, ServerSession] = {}
        self._known_conns: set[int] = set()
        self._rng = random.Random(scheduler_seed) if scheduler_seed is not None else None
        self._rotation = 0
        self._lock = threading.RLock()

    # -- connection management ------------------------------------------------

    def attach_conn(self, conn: Any) -> None:
        with self._lock:
            self._known_conns.add(id(conn))

    def detach_conn(self, conn: Any) -> None:
        with self._lock:
            self._known_conns.discard(id(conn))
            session = self._conn_sessions.pop(id(conn), None)
            if session is not None and session.conn is conn:
                session.conn = None
                session.connected = False

    # -- inbound ---------------------------------------------------------------

    def handle_frame(self, conn: Any, raw: bytes) -> None:
        with self._lock:
            now = self.clock()
            try:
                msg = decode_message(raw)
            except DecodeError as exc:
                self._send_direct(conn, new_message(
                    MessageType.ERROR,
                    {"code": "decode_error", "message": exc.failure.value},
                    session_id="", clock=self.clock))
                return
            if msg.type is MessageType.SESSION_INIT:
                self._handle_session_init(conn, msg, now)
                return
            session = self._conn_sessions.get(id(conn))
            if session is None:
                self._send_direct(conn, new_message(
                    MessageType.ERROR,
                    {"code": "no_session", "message": "session_init required"},
                    session_id=msg.session_id, correlation_id=msg.id,
                    clock=self.clock))
                return
            if msg.session_id != session.session_id:
                self._send_direct(conn, new_message(
                    MessageType.ERROR,
                    {"code": "session_mismatch", "message": msg.session_id},
                    session_id=session.session_id, correlation_id=msg.id,
                    clock=self.clock))
                return
            session.last_activity_at = now
            if msg.type is MessageType.HEARTBEAT:
                session.last_peer_heartbeat_at = now
            elif msg.type is MessageType.OPERATION_REQUEST:
                self._handle_request(session, msg, now)
            elif msg.type is MessageType.STATE_VERIFICATION:
                self._handle_verification(session, msg)
            elif msg.type is MessageType.ERROR:
                pass  # peer-reported problem; nothing to do server-side
            else:
                self._emit(session, new_message(
                    MessageType.ERROR,
                    {"code": "unexpected_type", "message": msg.type.value},
                    session_id=session.session_id, correlation_id=msg.id,
                    clock=self.clock))

    def _handle_session_init(self, conn: Any, msg: EnhancedMessage, now: float) -> None:
        resume_id = msg.payload.get("resume_session_id")
        if resume_id is not None:
            session = self.sessions.get(resume_id)
            if session is None:
                self._send_direct(conn, new_message(
                    MessageType.ERROR,
                    {"code": "unknown_session", "message": resume_id},
                    session_id=resume_id, correlation_id=msg.id, clock=self.clock))
                return
        else:
            session = ServerSession(
                session_id=f"sess-{uuid.uuid4().hex[:8]}",
                config=self.config,
            )
            self.sessions[session.session_id] = session

        session.conn = conn
        session.connected = True
        session.last_activity_at = now
        session.last_peer_heartbeat_at = now
        self._conn_sessions[id(conn)] = session
        state = {
            "session_id": session.session_id,
            "resumed": resume_id is not None,
            "operations": {op: t.state.value for op, t in session.trackers.items()},
        }
        self._send_direct(conn, new_message(
            MessageType.STATE_CONFIRMED, {"state": state},
            session_id=session.session_id, correlation_id=msg.id, clock=self.clock))
        # drain what accumulated while the peer was away, oldest first
        while session.outbound_buffer:
            conn.send(session.outbound_buffer.popleft())
        if session.dropped:
            dropped, session.dropped = session.dropped, 0
            self._emit(session, new_message(
                MessageType.ERROR,
                {"code": "backpressure",
                 "message": f"{dropped} messages dropped while disconnected"},
                session_id=session.session_id, clock=self.clock))

    def _handle_request(self, session: ServerSession, msg: EnhancedMessage,
                        now: float) -> None:
        op_type = msg.payload["operation_type"]
        params = msg.payload.get("parameters", {})
        if op_type == "interrupt":
            self._handle_interrupt(session, msg, params)
            return

        op_id = msg.operation_id
        if op_id in session.trackers:
            self._emit(session, new_message(
                MessageType.ERROR,
                {"code": "duplicate_operation", "message": op_id},
                session_id=session.session_id, correlation_id=msg.id,
                clock=self.clock))
            return
        tracker = OperationTracker(
            operation_id=op_id, created_at=now, last_activity_at=now,
            timeout_s=session.config.operation_timeout_s)
        session.trackers[op_id] = tracker
        tracker.apply(LifecycleEvent.ACK, now)
        self._emit(session, new_message(
            MessageType.OPERATION_ACK, {}, session_id=session.session_id,
            operation_id=op_id, correlation_id=msg.id, clock=self.clock))

        def reject(reason: str) -> None:
            tracker.apply(LifecycleEvent.START, self.clock())
            self._emit(session, new_message(
                MessageType.OPERATION_START, {}, session_id=session.session_id,
                operation_id=op_id, clock=self.clock))
            tracker.apply(LifecycleEvent.ERROR, self.clock())
            self._emit(session, new_message(
                MessageType.OPERATION_FAILED, {"reason": reason},
                session_id=session.session_id, operation_id=op_id,
                clock=self.clock))

        if op_type != "execute_primitive":
            reject(f"unsupported operation_type {op_type!r}")
            return
        name = params.get("primitive")
        if not isinstance(name, str) or name not in self.registry:
            reject("unknown_primitive")
            return
        try:
            args = self.registry.bind_args(name, params.get("args", {}))
        except PrimitiveError as exc:
            reject(str(exc))
            return
        spec, body = self.registry.get(name)
        run = OperationRun(
            spec, body, args, tracker,
            session_id=session.session_id,
            clock=self.clock,
            decimation=session.config.trajectory_decimation,
        )
        session.runs[op_id] = run
        session.run_queue.append(op_id)

    def _handle_interrupt(self, session: ServerSession, msg: EnhancedMessage,
                          params: dict) -> None:
        target = params.get("target_operation_id", "")
        run = session.runs.get(target)
        tracker = session.trackers.get(target)
        if (run is None or not run.started or run.done
                or tracker is None or tracker.state not in INTERRUPTIBLE):
            self._emit(session, new_message(
                MessageType.ERROR,
                {"code": "not_interruptible", "message": target},
                session_id=session.session_id, correlation_id=msg.id,
                clock=self.clock))
            return
        run.interrupt_flag.set()

    def _handle_verification(self, session: ServerSession,
                             msg: EnhancedMessage) -> None:
        query = msg.payload.get("query", {})
        op_id = query.get("operation_id")
        state: dict[str, Any] = {
            "session_id": session.session_id,
            "operations": {op: t.state.value for op, t in session.trackers.items()},
        }
        tracker = session.trackers.get(op_id) if op_id else None
        if tracker is not None:
            tracker.pending_verifications.append(msg.id)
            state["operation"] = {
                "operation_id": op_id,
                "state": tracker.state.value,
                "history": [[ts, ev.value] for ts, ev in tracker.history],
            }
            tracker.pending_verifications.remove(msg.id)
        self._emit(session, new_message(
            MessageType.STATE_CONFIRMED, {"state": state},
            session_id=session.session_id, operation_id=msg.operation_id,
            correlation_id=msg.id, clock=self.clock))

    # -- execution scheduling ---------------------------------------------------

    def advance(self) -> bool:
        """Run one internal step of one operation; True if any work was done."""
        with self._lock:
            sessions = sorted(self.sessions.values(), key=lambda s: s.session_id)
            if not sessions:
                return False
            for offset in range(len(sessions)):
                session = sessions[(self._rotation + offset) % len(sessions)]
                if self._advance_session(session):
                    self._rotation = (self._rotation + offset + 1) % len(sessions)
                    return True
            return False

    def _advance_session(self, session: ServerSession) -> bool:
        live = session.live_runs()
        can_start = session.config.parallel_operations or not live
        if can_start and session.run_queue:
            op_id = session.run_queue.popleft()
            run = session.runs.get(op_id)
            if run is not None and not run.done:
                for msg in run.start():
                    self._emit(session, msg)
                return True
        if not live:
            return False
        # interrupts take priority so the latency bound holds under any schedule
        flagged = [op for op in live if session.runs[op].interrupt_flag.is_set()]
        if flagged:
            op_id = flagged[0]
        elif self._rng is not None and session.config.parallel_operations:
            op_id = self._rng.choice(live)
        else:
            op_id = live[0]
        run = session.runs[op_id]
        for msg in run.step():
            self._emit(session, msg)
        if run.done:
            del session.runs[op_id]
        return True

    # -- periodic sweeps ----------------------------------------------------------

    def tick(self, now: Optional[float] = None) -> None:
        """Heartbeats, peer-silence detection, operation timeouts, GC."""
        with self._lock:
            if now is None:
                now = self.clock()
            for session in list(self.sessions.values()):
                cfg = session.config
                if session.connected:
                    if now - session.last_heartbeat_sent_at >= cfg.heartbeat_interval_s:
                        session.last_heartbeat_sent_at = now
                        self._emit(session, new_message(
                            MessageType.HEARTBEAT, {},
                            session_id=session.session_id, clock=self.clock))
                    silence = now - session.last_peer_heartbeat_at
                    if silence >= (cfg.heartbeat_interval_s
                                   * cfg.missed_heartbeats_to_disconnect):
                        session.connected = False
                        session.conn = None

                # fail quiet operations first, then collect eligible trackers
                for tracker in list(session.trackers.values()):
                    if (check_timeout(tracker, now) is LifecycleEvent.TIMEOUT
                            and tracker.state in TIMEOUTABLE):
                        tracker.apply(LifecycleEvent.TIMEOUT, now)
                        run = session.runs.pop(tracker.operation_id, None)
                        if run is not None:
                            run.done = True
                        if tracker.operation_id in session.run_queue:
                            session.run_queue.remove(tracker.operation_id)
                        self._emit(session, new_message(
                            MessageType.OPERATION_FAILED, {"reason": "timeout"},
                            session_id=session.session_id,
                            operation_id=tracker.operation_id, clock=self.clock))
                for op_id in collect_garbage(session.trackers.values(), now,
                                             cfg.gc_delta_s):
                    del session.trackers[op_id]
                    session.runs.pop(op_id, None)
                    if op_id in session.run_queue:
                        session.run_queue.remove(op_id)

            for sid, session in list(self.sessions.items()):
                idle = now - session.last_activity_at
                limit = session.config.operation_timeout_s + session.config.gc_delta_s
                if not session.connected and idle > limit:
                    del self.sessions[sid]

    # -- outbound -------------------------------------------------------------------

    def _emit(self, session: ServerSession, msg: EnhancedMessage) -> None:
        data = encode_message(msg)
        session.last_activity_at = max(session.last_activity_at, msg.timestamp)
        if session.connected and session.conn is not None:
            try:
                session.conn.send(data)
                return
            except Exception:
                session.connected = False
                session.conn = None
        if len(session.outbound_buffer) >= session.config.queue_capacity:
            session.dropped += 1
            return
        session.outbound_buffer.append(data)

    def _send_direct(self, conn: Any, msg: EnhancedMessage) -> None:
        try:
            conn.send(encode_message(msg))
        except Exception:
            pass

    # -- helpers for tests/tools ------------------------------------------------------

    def run_until_idle(self, max_steps: int = 1_000_000) -> int:
        steps = 0
        while self.advance():
            steps += 1
            if steps >= max_steps:
                break
        return steps


class _WsConn:
    """Connection adapter handing server emissions to one websocket."""

    def __init__(self, ws):
        self._ws = ws
        self._lock = threading.Lock()

    def send(self, data: bytes) -> None:
        with self._lock:
            self._ws.send(data.decode("utf-8"))


class RunningServer:
    """A live WebSocket endpoint wrapping a SyncServer."""

    def __init__(self, server: SyncServer, host: str = "127.0.0.1", port: int = 0,
                 path: str = "/sync"):
        from websockets.sync.server import serve as ws_serve

        self.server = server
        self.path = path
        self._stop = threading.Event()

        def handler(ws):
            if ws.request.path != path:
                ws.close(code=1008, reason="unknown path")
                return
            conn = _WsConn(ws)
            server.attach_conn(conn)
            try:
                for frame in ws:
                    data = frame if isinstance(frame, bytes) else frame.encode("utf-8")
                    server.handle_frame(conn, data)
            except Exception:
                pass
            finally:
                server.detach_conn(conn)

        self._ws_server = ws_serve(handler, host, port)
        self.host = host
        self.port = self._ws_server.socket.getsockname()[1]

        self._threads = [
            threading.Thread(target=self._ws_server.serve_forever,
                             name="embsync-accept", daemon=True),
            threading.Thread(target=self._worker, name="embsync-worker", daemon=True),
            threading.Thread(target=self._sweeper, name="embsync-sweeper", daemon=True),
        ]
        for t in self._threads:
            t.start()

    @property
    def url(self) -> str:
        return f"ws://{self.host}:{self.port}{self.path}"

    def _worker(self) -> None:
        while not self._stop.is_set():
            if not self.server.advance():
                self._stop.wait(0.002)

    def _sweeper(self) -> None:
        while not self._stop.is_set():
            self.server.tick()
            self._stop.wait(0.05)

    def shutdown(self) -> None:
        self._stop.set()
        self._ws_server.shutdown()
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self) -> "RunningServer":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
