"""Client session: handshake/resume, ordered send with offline queueing,
message routing to per-operation streams, heartbeats, and tracker mirroring."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Optional

from .lifecycle import LifecycleEvent, OperationTracker
from .messages import (
    DecodeError,
    EnhancedMessage,
    MessageType,
    decode_message,
    encode_message,
    new_message,
)
from .transport import Transport, TransportClosed, wall_clock


@dataclass
class SessionConfig:
    heartbeat_interval_s: float = 15.0
    missed_heartbeats_to_disconnect: int = 3
    operation_timeout_s: float = 600.0
    gc_delta_s: float = 60.0
    queue_capacity: int = 10_000
    parallel_operations: bool = False
    trajectory_decimation: int = 1

    def __post_init__(self):
        for name in ("heartbeat_interval_s", "missed_heartbeats_to_disconnect",
                     "operation_timeout_s", "gc_delta_s", "queue_capacity",
                     "trajectory_decimation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SessionConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class BackpressureError(RuntimeError):
    """Outbound queue is full; the caller must back off."""


class SessionError(RuntimeError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


class SessionClient:
    """Client half of a stateful session over any Transport.

    All state mutations serialize through one lock, so the handle can be
    shared across threads; the protocol itself stays single-logical-actor.
    Messages sent while disconnected are queued (bounded) and flushed in
    order on resume.
    """

    def __init__(
        self,
        transport_factory: Callable[[], Transport],
        config: Optional[SessionConfig] = None,
        client_name: str = "embsync-client",
        clock: Callable[[], float] = wall_clock,
    ):
        self._factory = transport_factory
        self.config = config or SessionConfig()
        self.client_name = client_name
        self.clock = clock
        self.session_id: str = ""
        self.connected = False
        self.trackers: dict[str, OperationTracker] = {}
        self.outbound_queue: deque[EnhancedMessage] = deque()
        self.last_heartbeat_sent_at = -float("inf")
        self.last_peer_heartbeat_at: Optional[float] = None
        self._transport: Optional[Transport] = None
        self._inboxes: dict[str, deque[EnhancedMessage]] = {}
        self._session_inbox: deque[EnhancedMessage] = deque()
        self._command_ids: set[str] = set()
        self._op_counter = 0
        self._lock = threading.RLock()
        self.audit_hook: Optional[Callable[[EnhancedMessage], None]] = None

    # -- connection lifecycle ---------------------------------------------

    def connect(self, resume: bool = False, timeout: float = 10.0,
                handshake_extra: Optional[dict[str, Any]] = None) -> None:
        """Open the transport and perform the session_init handshake.

        Fresh connects are assigned a server-side session id; resume proposes
        the current one and recovers tracker state and buffered messages.
        ``handshake_extra`` rides along in the init payload (e.g. the scenario
        document, so an audit log is self-describing).
        """
        with self._lock:
            payload: dict[str, Any] = {"client": self.client_name}
            if handshake_extra:
                payload.update(handshake_extra)
            if resume:
                if not self.session_id:
                    raise SessionError("no_session", "nothing to resume")
                payload["resume_session_id"] = self.session_id
            self._transport = self._factory()
            init = new_message(MessageType.SESSION_INIT, payload,
                               session_id=self.session_id, clock=self.clock)
            self._send_raw(init)
            reply = self._await_reply(init.id, timeout)
            if reply.type is MessageType.ERROR:
                self._transport.close()
                self._transport = None
                raise SessionError(reply.payload["code"], reply.payload["message"])
            assert reply.type is MessageType.STATE_CONFIRMED
            self.session_id = reply.payload["state"]["session_id"]
            self.connected = True
            self.last_peer_heartbeat_at = self.clock()
            self._flush_queue()

    def _await_reply(self, correlation_id: str, timeout: float) -> EnhancedMessage:
        deadline = self.clock() + timeout
        while True:
            remaining = deadline - self.clock()
            if remaining <= 0:
                raise SessionError("timeout", "no handshake reply")
            raw = self._transport.recv_frame(timeout=remaining)
            if raw is None:
                raise SessionError("timeout", "no handshake reply")
            msg = decode_message(raw)
            self._audit(msg)
            if msg.correlation_id == correlation_id:
                return msg
            self._route(msg)

    def resume(self, timeout: float = 10.0) -> None:
        self.connect(resume=True, timeout=timeout)

    def disconnect(self) -> None:
        """Drop the transport; session state (trackers, queue) is preserved."""
        with self._lock:
            self.connected = False
            if self._transport is not None:
                self._transport.close()
                self._transport = None

    # -- sending ------------------------------------------------------------

    def send(self, msg: EnhancedMessage) -> None:
        """Transmit now when connected, else enqueue (bounded buffer)."""
        with self._lock:
            if msg.session_id != self.session_id:
                raise SessionError("session_mismatch",
                                   f"{msg.session_id!r} != {self.session_id!r}")
            if not self.connected:
                if len(self.outbound_queue) >= self.config.queue_capacity:
                    raise BackpressureError(
                        f"outbound queue at capacity ({self.config.queue_capacity})")
                self.outbound_queue.append(msg)
                return
            self._send_raw(msg)

    def _send_raw(self, msg: EnhancedMessage) -> None:
        try:
            self._transport.send_frame(encode_message(msg))
            self._audit(msg)
        except TransportClosed:
            self.connected = False
            self.outbound_queue.append(msg)

    def _flush_queue(self) -> None:
        while self.outbound_queue and self.connected:
            self._send_raw(self.outbound_queue.popleft())

    def request_primitive(self, primitive: str, args: dict[str, Any],
                          operation_id: Optional[str] = None) -> str:
        """Dispatch a primitive invocation; returns its operation id."""
        with self._lock:
            self._op_counter += 1
            op_id = operation_id or f"op-{self._op_counter:04d}"
            if op_id in self.trackers:
                raise SessionError("duplicate_operation", op_id)
            msg = new_message(
                MessageType.OPERATION_REQUEST,
                {"operation_type": "execute_primitive",
                 "parameters": {"primitive": primitive, "args": args}},
                session_id=self.session_id,
                operation_id=op_id,
                clock=self.clock,
            )
            tracker = OperationTracker(
                operation_id=op_id,
                created_at=self.clock(),
                last_activity_at=self.clock(),
                timeout_s=self.config.operation_timeout_s,
            )
            self.trackers[op_id] = tracker
            self._inboxes[op_id] = deque()
            self.send(msg)
            return op_id

    def send_interrupt(self, target_operation_id: str) -> str:
        """High-priority stop for a running operation (own command id)."""
        with self._lock:
            self._op_counter += 1
            cmd_id = f"cmd-{self._op_counter:04d}"
            self._command_ids.add(cmd_id)
            msg = new_message(
                MessageType.OPERATION_REQUEST,
                {"operation_type": "interrupt",
                 "parameters": {"target_operation_id": target_operation_id}},
                session_id=self.session_id,
                operation_id=cmd_id,
                clock=self.clock,
            )
            self.send(msg)
            return cmd_id

    # -- receiving ------------------------------------------------------------

    def poll(self, timeout: Optional[float] = 0.0) -> Optional[EnhancedMessage]:
        """Receive, route, and return the next message (None on timeout)."""
        with self._lock:
            self.tick(self.clock())
            if not self.connected or self._transport is None:
                return None
            transport = self._transport
        # recv without the lock so senders on other threads are not starved
        try:
            raw = transport.recv_frame(timeout=timeout)
        except TransportClosed:
            with self._lock:
                self.connected = False
            return None
        if raw is None:
            return None
        with self._lock:
            try:
                msg = decode_message(raw)
            except DecodeError as exc:
                # a bad frame never aborts the session
                self.send(new_message(
                    MessageType.ERROR,
                    {"code": "decode_error", "message": exc.failure.value},
                    session_id=self.session_id, clock=self.clock))
                return None
            self._audit(msg)
            return self._route(msg)

    def _route(self, msg: EnhancedMessage) -> Optional[EnhancedMessage]:
        """Session-level bookkeeping plus per-operation dispatch."""
        if msg.type is MessageType.HEARTBEAT:
            self.last_peer_heartbeat_at = self.clock()
            return msg
        op_id = msg.operation_id
        if op_id is None:
            self._session_inbox.append(msg)
            return msg
        if op_id in self._command_ids:
            return msg
        tracker = self.trackers.get(op_id)
        if tracker is None:
            # stray message for an operation this session never issued
            self.send(new_message(
                MessageType.ERROR,
                {"code": "unknown_operation", "message": op_id},
                session_id=self.session_id,
                correlation_id=msg.id,
                clock=self.clock,
            ))
            return None
        self._mirror(tracker, msg)
        self._inboxes[op_id].append(msg)
        return msg

    def _mirror(self, tracker: OperationTracker, msg: EnhancedMessage) -> None:
        """Keep the client-side tracker in lockstep with server lifecycle."""
        now = self.clock()
        event: Optional[LifecycleEvent] = None
        if msg.type is MessageType.OPERATION_ACK:
            event = LifecycleEvent.ACK
        elif msg.type is MessageType.OPERATION_START:
            event = LifecycleEvent.START
        elif msg.type is MessageType.OPERATION_COMPLETE:
            event = LifecycleEvent.DONE
        elif msg.type is MessageType.OPERATION_FAILED:
            reason = msg.payload.get("reason", "")
            if reason == "timeout":
                event = LifecycleEvent.TIMEOUT
            elif reason == "interrupted":
                event = LifecycleEvent.INTERRUPT_ACK
            else:
                event = LifecycleEvent.ERROR
        elif msg.type in (MessageType.CODE_OUTPUT, MessageType.CODE_EVENT,
                          MessageType.CODE_STATUS, MessageType.CODE_DEBUG,
                          MessageType.MODEL_STATE_UPDATE,
                          MessageType.OPERATION_PROGRESS):
            if tracker.state is not None and not tracker.terminal:
                event = LifecycleEvent.PROGRESS
        if event is None:
            tracker.touch(now)
            return
        try:
            tracker.apply(event, now)
        except Exception:
            tracker.touch(now)  # tolerate replays/races; server is authoritative

    def stream_operation(self, op_id: str,
                         timeout: float = 30.0) -> Iterator[EnhancedMessage]:
        """Yield this operation's messages in order until it reaches a
        terminal state; other traffic keeps flowing to its own inboxes."""
        if op_id not in self.trackers:
            raise SessionError("unknown_operation", op_id)
        inbox = self._inboxes[op_id]
        while True:
            while inbox:
                msg = inbox.popleft()
                yield msg
                if msg.type in (MessageType.OPERATION_COMPLETE,
                                MessageType.OPERATION_FAILED):
                    return
            if self.trackers[op_id].terminal and not inbox:
                return
            got = self.poll(timeout=timeout)
            if got is None:
                raise SessionError("stream_stalled",
                                   f"no traffic for {timeout}s on {op_id}")

    # -- heartbeat ------------------------------------------------------------

    def tick(self, now: float) -> bool:
        """Emit a heartbeat when due; declare disconnect after the configured
        span of peer silence. Returns True if still connected."""
        if not self.connected:
            return False
        interval = self.config.heartbeat_interval_s
        if now - self.last_heartbeat_sent_at >= interval:
            self.last_heartbeat_sent_at = now
            self._send_raw(new_message(MessageType.HEARTBEAT, {},
                                       session_id=self.session_id, clock=self.clock))
        if self.last_peer_heartbeat_at is not None:
            silence = now - self.last_peer_heartbeat_at
            if silence >= interval * self.config.missed_heartbeats_to_disconnect:
                self.disconnect()
                return False
        return True

    def _audit(self, msg: EnhancedMessage) -> None:
        if self.audit_hook is not None:
            self.audit_hook(msg)
