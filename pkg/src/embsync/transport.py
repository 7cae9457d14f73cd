"""Transports: deterministic in-process channel pair and WebSocket client.

Both present the same contract: ordered, reliable delivery of whole frames
(one JSON message per frame). The in-process pair shares a simulated clock
with the server core and advances it one quantum per pump, which makes every
session byte-for-byte reproducible; the WebSocket transport speaks text
frames to a live endpoint.
"""

from __future__ import annotations

import time
from collections import deque
from typing import Optional, Protocol, runtime_checkable


class SimClock:
    """Deterministic clock: advances only when told (one quantum per pump)."""

    def __init__(self, start: float = 0.0, quantum: float = 0.001):
        self._now = float(start)
        self.quantum = float(quantum)

    def __call__(self) -> float:
        return self._now

    def advance(self, dt: Optional[float] = None) -> float:
        self._now += self.quantum if dt is None else dt
        return self._now


class TransportClosed(ConnectionError):
    """The peer or the network closed the channel."""


@runtime_checkable
class Transport(Protocol):
    def send_frame(self, data: bytes) -> None: ...
    def recv_frame(self, timeout: Optional[float] = None) -> Optional[bytes]: ...
    def close(self) -> None: ...
    @property
    def connected(self) -> bool: ...


class InprocTransport:
    """Client endpoint wired straight into a server core, no threads.

    ``recv_frame`` pumps the server: deliver queued client frames, advance at
    most one step of one running operation, run the periodic sweeps, then
    return the next server frame. Ordering is identical to the network
    transport; time is the shared SimClock.
    """

    def __init__(self, server, clock: SimClock):
        self._server = server
        self.clock = clock
        self._to_server: deque[bytes] = deque()
        self._to_client: deque[bytes] = deque()
        self._closed = False
        self._conn = _InprocConn(self._to_client)
        server.attach_conn(self._conn)

    @property
    def connected(self) -> bool:
        return not self._closed

    def send_frame(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed("in-process channel closed")
        self._to_server.append(data)

    def recv_frame(self, timeout: Optional[float] = None) -> Optional[bytes]:
        if self._closed:
            raise TransportClosed("in-process channel closed")
        deadline = None if timeout is None else self.clock() + timeout
        while True:
            if self._to_client:
                return self._to_client.popleft()
            idle = not self.pump()
            if self._to_client:
                return self._to_client.popleft()
            if deadline is not None and self.clock() >= deadline:
                return None
            if idle and deadline is None:
                return None  # nothing in flight and nothing will arrive

    def pump(self) -> bool:
        """One scheduling round; returns whether any work was done."""
        worked = False
        while self._to_server:
            self._server.handle_frame(self._conn, self._to_server.popleft())
            worked = True
        if self._server.advance():
            worked = True
        self.clock.advance()
        self._server.tick(self.clock())
        return worked

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._server.detach_conn(self._conn)

    def drop(self) -> None:
        """Simulate an abrupt network drop (same observable effect as close)."""
        self.close()


class _InprocConn:
    """Server-side handle for an in-process client."""

    def __init__(self, outbox: deque):
        self._outbox = outbox

    def send(self, data: bytes) -> None:
        self._outbox.append(data)


class WebSocketTransport:
    """Client transport over one WebSocket connection (text frames)."""

    def __init__(self, url: str, open_timeout: float = 10.0):
        from websockets.sync.client import connect

        self._ws = connect(url, open_timeout=open_timeout)
        self._closed = False

    @property
    def connected(self) -> bool:
        return not self._closed

    def send_frame(self, data: bytes) -> None:
        from websockets.exceptions import ConnectionClosed

        if self._closed:
            raise TransportClosed("websocket closed")
        try:
            self._ws.send(data.decode("utf-8"))
        except ConnectionClosed as exc:
            self._closed = True
            raise TransportClosed(str(exc)) from exc

    def recv_frame(self, timeout: Optional[float] = None) -> Optional[bytes]:
        from websockets.exceptions import ConnectionClosed

        if self._closed:
            raise TransportClosed("websocket closed")
        try:
            frame = self._ws.recv(timeout=timeout)
        except TimeoutError:
            return None
        except ConnectionClosed as exc:
            self._closed = True
            raise TransportClosed(str(exc)) from exc
        if isinstance(frame, bytes):
            return frame
        return frame.encode("utf-8")

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._ws.close()
            except Exception:
                pass


def wall_clock() -> float:
    return time.time()
