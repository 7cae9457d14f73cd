"""Walkthrough: the wire protocol and a stateful session, no network needed.

Shows the message schema (encode/decode, failure classes), the session
handshake, heartbeats, state verification, and disconnect/resume with
buffered delivery. Everything runs on the deterministic in-process
transport with a simulated clock.

Run:  python demos/01_protocol_session.py
"""

import json

from embsync.messages import (
    DecodeError,
    MessageType,
    decode_message,
    encode_message,
    new_message,
)
from embsync.server import SyncServer
from embsync.session import SessionClient, SessionConfig
from embsync.transport import InprocTransport, SimClock

print("=== 1. the wire unit ===")
request = new_message(
    MessageType.OPERATION_REQUEST,
    {"operation_type": "execute_primitive",
     "parameters": {"primitive": "bisection_root",
                    "args": {"coeffs": [1.0, 0.0, -2.0], "lo": 0.0, "hi": 2.0}}},
    session_id="sess-1234",
    operation_id="op-5678",
)
frame = encode_message(request)
print("frame:", frame.decode()[:120], "...")
assert decode_message(frame) == request
print("round-trips bit-exactly\n")

print("=== 2. decode failures carry a class, never kill a session ===")
for raw, expect in [
    (b"\xff\xfe not text", "not-UTF-8"),
    (b"{broken", "malformed-structure"),
    (json.dumps({"id": "x", "type": "op_launch", "payload": {},
                 "session_id": "s"}).encode(), "unknown-type"),
    (json.dumps({"id": "x", "type": "code_output", "payload": {},
                 "session_id": "s", "operation_id": "op-1"}).encode(),
     "schema-violation"),
]:
    try:
        decode_message(raw)
    except DecodeError as exc:
        print(f"  {expect:>20}: {exc}")
print()

print("=== 3. a stateful session over the in-process transport ===")
clock = SimClock()
server = SyncServer(clock=clock)
client = SessionClient(lambda: InprocTransport(server, clock),
                       SessionConfig(), clock=clock)
client.connect()
print("server assigned:", client.session_id)

op = client.request_primitive(
    "bisection_root", {"coeffs": [1.0, 0.0, -2.0], "lo": 0.0, "hi": 2.0})
for msg in client.stream_operation(op):
    if msg.type is MessageType.CODE_OUTPUT:
        continue  # iteration chatter
    print(f"  {msg.type.value:<20} status={msg.status.value if msg.status else '-'}")
root = client.trackers[op]
print(f"tracker ended {root.state.value} after {len(root.history)} events\n")

print("=== 4. state verification ===")
query = new_message(MessageType.STATE_VERIFICATION,
                    {"query": {"operation_id": op}},
                    session_id=client.session_id, clock=clock)
client.send(query)
reply = client.poll(timeout=1.0)
while reply is not None and reply.type is not MessageType.STATE_CONFIRMED:
    reply = client.poll(timeout=1.0)
print("confirmed state:", json.dumps(reply.payload["state"]["operations"]))
print()

print("=== 5. disconnect, come back, nothing is lost ===")
client.disconnect()
print("dropped transport; trackers held:", list(client.trackers))
client.resume()
print("resumed as", client.session_id, "- tracker still",
      client.trackers[op].state.value)
