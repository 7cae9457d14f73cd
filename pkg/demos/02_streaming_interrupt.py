"""Walkthrough: live trajectory streaming, mid-run perception, and the
hot-fix loop on a genuinely diverging integration.

The quadratic field y' = y^2 blows up at t = 1 no matter the step size, so
the stream goes non-finite mid-run. The perception engine flags it as a
Warning before the operation ends; the controller interrupts at a step
boundary and re-dispatches with a halved step, up to the budget.

Run:  python demos/02_streaming_interrupt.py
"""

import math

from embsync.backend import Action
from embsync.controller import Controller
from embsync.messages import MessageType
from embsync.policy import ReferencePidPolicy
from embsync.server import SyncServer
from embsync.session import SessionClient, SessionConfig
from embsync.transport import InprocTransport, SimClock

clock = SimClock()
server = SyncServer(clock=clock)
client = SessionClient(lambda: InprocTransport(server, clock),
                       SessionConfig(), clock=clock)
client.connect()

print("=== 1. a healthy stream, interrupted by hand ===")
op = client.request_primitive(
    "rk4_integrate", {"rhs": "exp_decay", "t_final": 100.0, "h": 0.1})
count = 0
for msg in client.stream_operation(op):
    if msg.type is MessageType.MODEL_STATE_UPDATE:
        count += 1
        if count == 5:
            print("  5 samples in; sending the stop signal")
            client.send_interrupt(op)
    if msg.type is MessageType.OPERATION_FAILED:
        print(f"  halted with reason={msg.payload['reason']!r} "
              f"after {count} samples (of 1000 planned)")
print()

print("=== 2. the hot-fix loop on forced divergence ===")
log = []
client.audit_hook = log.append
controller = Controller(client, ReferencePidPolicy())
action = Action.call("rk4_integrate", rhs="quadratic_blowup", y0=1.0,
                     t0=0.0, t_final=2.0, h=0.2)
outcome = controller.run_action_chain(action, [])

print(f"repairs used: {outcome.repairs} of 3; escalated: {outcome.escalated}")
for op_id in outcome.operation_ids:
    request = next(m for m in log
                   if m.operation_id == op_id
                   and m.type is MessageType.OPERATION_REQUEST
                   and m.payload.get("operation_type") == "execute_primitive")
    updates = [m for m in log if m.operation_id == op_id
               and m.type is MessageType.MODEL_STATE_UPDATE]
    finite = sum(1 for m in updates
                 if all(math.isfinite(v) for v in m.payload["variables"]["y"]))
    terminal = next(m for m in reversed(log)
                    if m.operation_id == op_id
                    and m.type is MessageType.OPERATION_FAILED)
    print(f"  {op_id}: h={request.payload['parameters']['args']['h']:<7} "
          f"finite samples before blow-up: {finite:<4} "
          f"ended: {terminal.payload['reason']}")
print("\nsmaller steps track the singularity longer; the structural fix "
      "(this field has no global solution past t=1) belongs to re-planning, "
      "so the chain hands the failure up after the budget.")
