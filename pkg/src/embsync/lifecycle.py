"""Per-operation state machine, timeout policy, and tracker garbage collection."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .messages import OperationStatus

DEFAULT_TIMEOUT_S = 600.0
DEFAULT_GC_DELTA_S = 60.0


class LifecycleEvent(enum.Enum):
    ACK = "ack"
    START = "start"
    PROGRESS = "progress"
    DONE = "done"
    ERROR = "error"
    TIMEOUT = "timeout"
    INTERRUPT_ACK = "interrupt_ack"


class TransitionError(Exception):
    def __init__(self, state: OperationStatus, event: LifecycleEvent):
        super().__init__(f"illegal transition: {state.value} + {event.value}")
        self.state = state
        self.event = event


TERMINAL_STATES = frozenset({OperationStatus.COMPLETED, OperationStatus.FAILED})

# The complete legal edge set. started+done covers primitives that finish
# before emitting any progress; interrupt_ack is only honored while running.
LEGAL_EDGES: dict[tuple[OperationStatus, LifecycleEvent], OperationStatus] = {
    (OperationStatus.PENDING, LifecycleEvent.ACK): OperationStatus.ACKNOWLEDGED,
    (OperationStatus.ACKNOWLEDGED, LifecycleEvent.START): OperationStatus.STARTED,
    (OperationStatus.STARTED, LifecycleEvent.PROGRESS): OperationStatus.IN_PROGRESS,
    (OperationStatus.IN_PROGRESS, LifecycleEvent.PROGRESS): OperationStatus.IN_PROGRESS,
    (OperationStatus.IN_PROGRESS, LifecycleEvent.DONE): OperationStatus.COMPLETED,
    (OperationStatus.IN_PROGRESS, LifecycleEvent.ERROR): OperationStatus.FAILED,
    (OperationStatus.STARTED, LifecycleEvent.ERROR): OperationStatus.FAILED,
    (OperationStatus.STARTED, LifecycleEvent.DONE): OperationStatus.COMPLETED,
    (OperationStatus.ACKNOWLEDGED, LifecycleEvent.TIMEOUT): OperationStatus.FAILED,
    (OperationStatus.STARTED, LifecycleEvent.TIMEOUT): OperationStatus.FAILED,
    (OperationStatus.IN_PROGRESS, LifecycleEvent.TIMEOUT): OperationStatus.FAILED,
    (OperationStatus.STARTED, LifecycleEvent.INTERRUPT_ACK): OperationStatus.FAILED,
    (OperationStatus.IN_PROGRESS, LifecycleEvent.INTERRUPT_ACK): OperationStatus.FAILED,
}


def apply_transition(state: OperationStatus, event: LifecycleEvent) -> OperationStatus:
    """Return the successor state; raises TransitionError on an illegal edge."""
    try:
        return LEGAL_EDGES[(state, event)]
    except KeyError:
        raise TransitionError(state, event) from None


@dataclass
class OperationTracker:
    """Lifecycle record for one operation: state, clocks, and event history."""

    operation_id: str
    state: OperationStatus = OperationStatus.PENDING
    created_at: float = 0.0
    last_activity_at: float = 0.0
    timeout_s: float = DEFAULT_TIMEOUT_S
    history: list[tuple[float, LifecycleEvent]] = field(default_factory=list)
    pending_verifications: list[str] = field(default_factory=list)

    def apply(self, event: LifecycleEvent, now: float) -> OperationStatus:
        """Transition via the legal edge set and append to history.

        A timeout does not count as operation activity: the GC clock keeps
        running from the last real message so the tracker is collected
        timeout_s + delta_s after the operation went quiet.
        """
        self.state = apply_transition(self.state, event)
        self.history.append((now, event))
        if event is not LifecycleEvent.TIMEOUT:
            self.touch(now)
        return self.state

    def touch(self, now: float) -> None:
        if now > self.last_activity_at:
            self.last_activity_at = now

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES


def check_timeout(tracker: OperationTracker, now: float) -> Optional[LifecycleEvent]:
    """Timeout event iff the tracker is live and idle strictly longer than timeout_s."""
    if tracker.terminal:
        return None
    if now - tracker.last_activity_at > tracker.timeout_s:
        return LifecycleEvent.TIMEOUT
    return None


def collect_garbage(
    trackers: Iterable[OperationTracker],
    now: float,
    delta_s: float = DEFAULT_GC_DELTA_S,
) -> set[str]:
    """Operation ids whose trackers are idle strictly longer than timeout_s + delta_s.

    Both terminal and non-terminal trackers are eligible; a sweep is expected
    to apply pending timeouts first so nothing vanishes without a terminal
    message (see SyncServer.tick).
    """
    return {
        t.operation_id
        for t in trackers
        if now - t.last_activity_at > t.timeout_s + delta_s
    }
