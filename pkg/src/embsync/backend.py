"""Streaming execution backend: interruptible numerical primitives.

A primitive body is a generator that yields one emission per internal step
and returns a result map. The runner turns emissions into protocol messages,
checks the interrupt flag at every step boundary, applies the step budget,
and degrades gracefully on repeated output-decoding failures.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterator, Optional

from .lifecycle import LifecycleEvent, OperationTracker
from .messages import (
    EnhancedMessage,
    MessageType,
    OperationStatus,
    new_message,
)

DECODE_FAILURE_LIMIT = 3  # consecutive bad chunks before degradation


@dataclass
class Action:
    """A primitive invocation or a control command; exactly one of the two."""

    kind: str  # "primitive_call" | "control_command"
    primitive: Optional[str] = None
    parameters: dict[str, Any] = field(default_factory=dict)
    command: Optional[str] = None  # "interrupt" | "stop"
    target_operation_id: Optional[str] = None

    def __post_init__(self):
        if self.kind == "primitive_call":
            if not self.primitive or self.command is not None:
                raise ValueError("primitive_call requires primitive and no command")
        elif self.kind == "control_command":
            if self.command not in ("interrupt", "stop") or self.primitive is not None:
                raise ValueError("control_command requires command and no primitive")
        else:
            raise ValueError(f"unknown action kind {self.kind!r}")

    @classmethod
    def call(cls, primitive: str, **parameters) -> "Action":
        return cls(kind="primitive_call", primitive=primitive, parameters=parameters)

    @classmethod
    def interrupt(cls, target_operation_id: str) -> "Action":
        return cls(kind="control_command", command="interrupt",
                   target_operation_id=target_operation_id)


@dataclass
class Observation:
    """One item of the observation stream; at least one field populated."""

    stdout: Optional[str] = None
    stderr: Optional[str] = None
    sys_event: Optional[dict[str, Any]] = None       # {"event": str, "data": map}
    trajectory: Optional[dict[str, Any]] = None      # {"sim_time": s, "variables": {name: value}}

    def __post_init__(self):
        if (self.stdout is None and self.stderr is None
                and self.sys_event is None and self.trajectory is None):
            raise ValueError("observation must populate at least one field")


def observation_from_message(msg: EnhancedMessage) -> Optional[Observation]:
    """Map a streaming/state message to an observation; None for other types."""
    p = msg.payload
    if msg.type is MessageType.CODE_OUTPUT:
        return Observation(stdout=p.get("stdout"), stderr=p.get("stderr"))
    if msg.type is MessageType.CODE_DEBUG:
        return Observation(sys_event={"event": "debug", "data": {"detail": p["detail"]}})
    if msg.type is MessageType.CODE_STATUS:
        return Observation(sys_event={"event": "status", "data": {"status": p["status"]}})
    if msg.type is MessageType.CODE_EVENT:
        return Observation(sys_event={"event": p["event"], "data": p.get("data", {})})
    if msg.type is MessageType.MODEL_STATE_UPDATE:
        variables = {}
        for name, samples in p.get("variables", {}).items():
            if not samples:
                continue
            bad = [v for v in samples if not math.isfinite(v)]
            variables[name] = bad[0] if bad else samples[-1]
        return Observation(trajectory={"sim_time": p.get("sim_time", 0.0),
                                       "variables": variables})
    return None


# --- emissions yielded by primitive bodies (one per internal step) ---

@dataclass
class Stdout:
    text: str


@dataclass
class Stderr:
    text: str


@dataclass
class RawChunk:
    """Possibly non-UTF-8 stdout bytes from a legacy producer."""

    data: bytes


@dataclass
class SysEvent:
    event: str
    data: dict[str, Any] = field(default_factory=dict)


@dataclass
class Trajectory:
    sim_time: float
    variables: dict[str, list[float]]


Emission = Stdout | Stderr | RawChunk | SysEvent | Trajectory
PrimitiveBody = Callable[[dict[str, Any]], Generator[Emission, None, dict]]

_REQUIRED = object()


@dataclass(frozen=True)
class ParamSpec:
    type: str                    # "number" | "string" | "map" | "array"
    units: str = ""
    default: Any = _REQUIRED

    @property
    def required(self) -> bool:
        return self.default is _REQUIRED


_TYPE_CHECKS: dict[str, Callable[[Any], bool]] = {
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "string": lambda v: isinstance(v, str),
    "map": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "any": lambda v: True,
}


@dataclass(frozen=True)
class PrimitiveSpec:
    name: str
    parameters: dict[str, ParamSpec]
    emits_trajectory: bool = False
    step_budget: int = 1_000_000


class PrimitiveError(Exception):
    """Raised by a primitive body; surfaces as operation_failed."""


class DuplicatePrimitive(ValueError):
    pass


class UnknownPrimitive(KeyError):
    pass


class PrimitiveRegistry:
    """Name -> (spec, body). Names are unique; registration is startup-time."""

    def __init__(self):
        self._entries: dict[str, tuple[PrimitiveSpec, PrimitiveBody]] = {}

    def register(self, spec: PrimitiveSpec, body: PrimitiveBody) -> None:
        if spec.name in self._entries:
            raise DuplicatePrimitive(f"primitive {spec.name!r} already registered")
        self._entries[spec.name] = (spec, body)

    def get(self, name: str) -> tuple[PrimitiveSpec, PrimitiveBody]:
        try:
            return self._entries[name]
        except KeyError:
            raise UnknownPrimitive(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return sorted(self._entries)

    def bind_args(self, name: str, args: dict[str, Any]) -> dict[str, Any]:
        """Apply defaults and validate declared parameter types."""
        spec, _ = self.get(name)
        bound: dict[str, Any] = {}
        for pname, pspec in spec.parameters.items():
            if pname in args:
                value = args[pname]
            elif pspec.required:
                raise PrimitiveError(f"{name}: missing required parameter {pname!r}")
            else:
                value = pspec.default
            if value is not None and not _TYPE_CHECKS[pspec.type](value):
                raise PrimitiveError(
                    f"{name}: parameter {pname!r} must be {pspec.type}")
            bound[pname] = value
        unknown = set(args) - set(spec.parameters)
        if unknown:
            raise PrimitiveError(f"{name}: unknown parameters {sorted(unknown)}")
        return bound


def decode_output_chunk(
    raw: bytes,
    failure_count: int,
    limit: int = DECODE_FAILURE_LIMIT,
) -> tuple[Optional[str], int, bool]:
    """Decode one stdout chunk with graceful degradation.

    Returns (text, updated_counter, degrade). A valid chunk resets the
    counter; an invalid one increments it and yields nothing; the limit-th
    consecutive failure raises the degrade signal.
    """
    try:
        return raw.decode("utf-8"), 0, False
    except UnicodeDecodeError:
        count = failure_count + 1
        return None, count, count >= limit


class OperationRun:
    """Drives one primitive invocation through its lifecycle.

    ``step()`` performs one internal step and returns the messages to emit.
    The interrupt flag is honored at every step boundary: after it is set,
    at most one further observation message can leave the runner.
    """

    def __init__(
        self,
        spec: PrimitiveSpec,
        body: PrimitiveBody,
        args: dict[str, Any],
        tracker: OperationTracker,
        session_id: str,
        clock: Callable[[], float],
        decode_limit: int = DECODE_FAILURE_LIMIT,
        decimation: int = 1,
    ):
        self.spec = spec
        self.tracker = tracker
        self.session_id = session_id
        self.clock = clock
        self.decode_limit = decode_limit
        self.decimation = max(1, int(decimation))
        self.interrupt_flag = threading.Event()
        self.done = False
        self._gen = body(args)
        self._steps = 0
        self._decode_failures = 0
        self._trajectory_count = 0
        self.started = False

    # -- message helpers -------------------------------------------------

    def _msg(self, mtype: MessageType, payload: dict,
             status: Optional[OperationStatus] = None):
        return new_message(
            mtype, payload,
            session_id=self.session_id,
            operation_id=self.tracker.operation_id,
            status=status,
            clock=self.clock,
        )

    def _apply(self, event: LifecycleEvent) -> None:
        self.tracker.apply(event, self.clock())

    def _progress_status(self) -> OperationStatus:
        # first streaming emission moves the tracker to in_progress
        if self.tracker.state is OperationStatus.STARTED:
            self._apply(LifecycleEvent.PROGRESS)
        else:
            self.tracker.touch(self.clock())
        return self.tracker.state

    def _terminal_complete(self, result: dict) -> list[EnhancedMessage]:
        event = (LifecycleEvent.DONE if self.tracker.state in
                 (OperationStatus.STARTED, OperationStatus.IN_PROGRESS) else None)
        if event is not None:
            self._apply(event)
        self.done = True
        return [self._msg(MessageType.OPERATION_COMPLETE, {"result": result})]

    def _terminal_failed(self, reason: str,
                         event: LifecycleEvent = LifecycleEvent.ERROR) -> list[EnhancedMessage]:
        self._apply(event)
        self.done = True
        self._gen.close()
        return [self._msg(MessageType.OPERATION_FAILED, {"reason": reason})]

    # -- lifecycle -------------------------------------------------------

    def start(self) -> list[EnhancedMessage]:
        """Emit operation_start; called once when the runner is scheduled."""
        assert not self.started
        self.started = True
        self._apply(LifecycleEvent.START)
        return [self._msg(MessageType.OPERATION_START, {})]

    def step(self) -> list[EnhancedMessage]:
        """One internal step; returns the messages produced by it."""
        if self.done:
            return []
        if self.interrupt_flag.is_set():
            return self._terminal_failed("interrupted", LifecycleEvent.INTERRUPT_ACK)
        if self._steps >= self.spec.step_budget:
            return self._terminal_failed("step_budget")
        self._steps += 1
        try:
            emission = next(self._gen)
        except StopIteration as stop:
            result = stop.value if isinstance(stop.value, dict) else {}
            return self._terminal_complete(result)
        except PrimitiveError as exc:
            return self._terminal_failed(str(exc))
        except Exception as exc:  # primitive bug: fail the operation, not the server
            return self._terminal_failed(f"{type(exc).__name__}: {exc}")
        return self._emission_messages(emission)

    def _emission_messages(self, emission: Emission) -> list[EnhancedMessage]:
        if isinstance(emission, RawChunk):
            text, self._decode_failures, degrade = decode_output_chunk(
                emission.data, self._decode_failures, self.decode_limit)
            if degrade:
                # operation is marked complete with a warning, keeping partial results
                status = self._progress_status()
                warn = self._msg(
                    MessageType.CODE_EVENT,
                    {"event": "encoding_degraded",
                     "data": {"consecutive_failures": self._decode_failures}},
                    status=status,
                )
                return [warn] + self._terminal_complete({"partial": True})
            if text is None:
                return []
            emission = Stdout(text)

        status = self._progress_status()
        if isinstance(emission, Stdout):
            return [self._msg(MessageType.CODE_OUTPUT, {"stdout": emission.text},
                              status=status)]
        if isinstance(emission, Stderr):
            return [self._msg(MessageType.CODE_OUTPUT,
                              {"stdout": "", "stderr": emission.text}, status=status)]
        if isinstance(emission, SysEvent):
            return [self._msg(MessageType.CODE_EVENT,
                              {"event": emission.event, "data": emission.data},
                              status=status)]
        if isinstance(emission, Trajectory):
            self._trajectory_count += 1
            if (self._trajectory_count - 1) % self.decimation:
                return []
            return [self._msg(
                MessageType.MODEL_STATE_UPDATE,
                {"variables": emission.variables, "sim_time": emission.sim_time},
                status=status,
            )]
        raise TypeError(f"primitive yielded unsupported emission {emission!r}")

    def run_to_completion(self) -> Iterator[EnhancedMessage]:
        """Convenience driver for tests: start, then step until terminal."""
        yield from self.start()
        while not self.done:
            yield from self.step()
