"""embsync: full-duplex state-sync runtime for streaming numerical execution.

A controller ("brain") talks to a streaming execution backend ("body") over
an asynchronous state-synchronization protocol, perceives mid-run telemetry,
and closes the loop with hot-fix repairs and reflective re-planning. Ships
with a control-systems library and a PID tuning case study.
"""

__version__ = "0.1.0"
