"""Wire message schema: the 16 message types and bit-exact encode/decode.

Every interaction between controller and backend travels as one
``EnhancedMessage`` per transport frame, serialized as a UTF-8 JSON object.
Optional fields are omitted from the wire form, never written as null.
"""

from __future__ import annotations

import enum
import json
import time
import uuid
from dataclasses import dataclass
from typing import Any, Callable, Optional


class MessageType(enum.Enum):
    # Operation lifecycle
    OPERATION_REQUEST = "operation_request"
    OPERATION_ACK = "operation_ack"
    OPERATION_START = "operation_start"
    OPERATION_PROGRESS = "operation_progress"
    OPERATION_COMPLETE = "operation_complete"
    OPERATION_FAILED = "operation_failed"
    # Streaming output
    CODE_OUTPUT = "code_output"
    CODE_STATUS = "code_status"
    CODE_DEBUG = "code_debug"
    CODE_EVENT = "code_event"
    # State sync
    MODEL_STATE_UPDATE = "model_state_update"
    STATE_VERIFICATION = "state_verification"
    STATE_CONFIRMED = "state_confirmed"
    # Session management
    SESSION_INIT = "session_init"
    HEARTBEAT = "heartbeat"
    ERROR = "error"


class OperationStatus(enum.Enum):
    PENDING = "pending"
    ACKNOWLEDGED = "acknowledged"
    STARTED = "started"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


LIFECYCLE_TYPES = frozenset({
    MessageType.OPERATION_REQUEST,
    MessageType.OPERATION_ACK,
    MessageType.OPERATION_START,
    MessageType.OPERATION_PROGRESS,
    MessageType.OPERATION_COMPLETE,
    MessageType.OPERATION_FAILED,
})

STREAMING_TYPES = frozenset({
    MessageType.CODE_OUTPUT,
    MessageType.CODE_STATUS,
    MessageType.CODE_DEBUG,
    MessageType.CODE_EVENT,
})

# Server-emitted lifecycle replies always carry a status stamp. The request
# itself does not (its initial state is implied), matching observed traffic.
STATUS_REQUIRED_TYPES = LIFECYCLE_TYPES - {MessageType.OPERATION_REQUEST}

# Default status stamped on each lifecycle reply.
LIFECYCLE_STATUS = {
    MessageType.OPERATION_ACK: OperationStatus.ACKNOWLEDGED,
    MessageType.OPERATION_START: OperationStatus.STARTED,
    MessageType.OPERATION_PROGRESS: OperationStatus.IN_PROGRESS,
    MessageType.OPERATION_COMPLETE: OperationStatus.COMPLETED,
    MessageType.OPERATION_FAILED: OperationStatus.FAILED,
}


class DecodeFailure(enum.Enum):
    NOT_UTF8 = "not-UTF-8"
    MALFORMED_STRUCTURE = "malformed-structure"
    UNKNOWN_TYPE = "unknown-type"
    SCHEMA_VIOLATION = "schema-violation"


class DecodeError(Exception):
    """A frame failed to decode. Carries the failure class; never fatal to a session."""

    def __init__(self, failure: DecodeFailure, detail: str = ""):
        super().__init__(f"{failure.value}: {detail}" if detail else failure.value)
        self.failure = failure
        self.detail = detail


class SchemaError(ValueError):
    """Payload does not conform to the schema of its message type."""


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_number_array(v: Any) -> bool:
    return isinstance(v, list) and all(_is_number(x) for x in v)


def _check_variables(v: Any) -> bool:
    return isinstance(v, dict) and all(
        isinstance(k, str) and _is_number_array(x) for k, x in v.items()
    )


# Minimum required payload keys per type; extra keys are always allowed.
_PAYLOAD_SCHEMAS: dict[MessageType, dict[str, Callable[[Any], bool]]] = {
    MessageType.OPERATION_REQUEST: {
        "operation_type": lambda v: isinstance(v, str),
        "parameters": lambda v: isinstance(v, dict),
    },
    MessageType.OPERATION_ACK: {},
    MessageType.OPERATION_START: {},
    MessageType.OPERATION_PROGRESS: {},
    MessageType.OPERATION_COMPLETE: {"result": lambda v: isinstance(v, dict)},
    MessageType.OPERATION_FAILED: {"reason": lambda v: isinstance(v, str)},
    MessageType.CODE_OUTPUT: {"stdout": lambda v: isinstance(v, str)},
    MessageType.CODE_STATUS: {"status": lambda v: isinstance(v, str)},
    MessageType.CODE_DEBUG: {"detail": lambda v: isinstance(v, str)},
    MessageType.CODE_EVENT: {
        "event": lambda v: isinstance(v, str),
        "data": lambda v: isinstance(v, dict),
    },
    MessageType.MODEL_STATE_UPDATE: {
        "variables": _check_variables,
        "sim_time": _is_number,
    },
    MessageType.STATE_VERIFICATION: {"query": lambda v: isinstance(v, dict)},
    MessageType.STATE_CONFIRMED: {"state": lambda v: isinstance(v, dict)},
    MessageType.SESSION_INIT: {"client": lambda v: isinstance(v, str)},
    MessageType.HEARTBEAT: {},
    MessageType.ERROR: {
        "code": lambda v: isinstance(v, str),
        "message": lambda v: isinstance(v, str),
    },
}


@dataclass
class EnhancedMessage:
    """One protocol frame: envelope plus a type-specific payload."""

    id: str
    type: MessageType
    payload: dict[str, Any]
    timestamp: float
    session_id: str
    operation_id: Optional[str] = None
    status: Optional[OperationStatus] = None
    correlation_id: Optional[str] = None

    def validate(self) -> None:
        """Check invariants; raises SchemaError on violation."""
        validate_payload(self.type, self.payload)
        if self.type in LIFECYCLE_TYPES or self.type in STREAMING_TYPES:
            if not self.operation_id:
                raise SchemaError(
                    f"{self.type.value} requires operation_id"
                )
        if self.type in STATUS_REQUIRED_TYPES and self.status is None:
            raise SchemaError(f"{self.type.value} requires status")


def validate_payload(mtype: MessageType, payload: dict[str, Any]) -> None:
    if not isinstance(payload, dict):
        raise SchemaError("payload must be a map")
    schema = _PAYLOAD_SCHEMAS[mtype]
    for key, check in schema.items():
        if key not in payload:
            raise SchemaError(f"{mtype.value} payload missing key {key!r}")
        if not check(payload[key]):
            raise SchemaError(f"{mtype.value} payload key {key!r} has wrong type")
    # session_init: resume_session_id is optional but typed when present
    if mtype is MessageType.SESSION_INIT:
        resume = payload.get("resume_session_id")
        if resume is not None and not isinstance(resume, str):
            raise SchemaError("session_init resume_session_id must be a string")


def new_message(
    mtype: MessageType,
    payload: dict[str, Any],
    session_id: str,
    operation_id: Optional[str] = None,
    correlation_id: Optional[str] = None,
    status: Optional[OperationStatus] = None,
    clock: Callable[[], float] = time.time,
) -> EnhancedMessage:
    """Build a message with a fresh UUID id and the current timestamp.

    Lifecycle replies get their conventional status stamp automatically
    unless one is passed explicitly.
    """
    if status is None:
        status = LIFECYCLE_STATUS.get(mtype)
    msg = EnhancedMessage(
        id=str(uuid.uuid4()),
        type=mtype,
        payload=payload,
        timestamp=float(clock()),
        session_id=session_id,
        operation_id=operation_id,
        status=status,
        correlation_id=correlation_id,
    )
    msg.validate()
    return msg


def encode_message(msg: EnhancedMessage) -> bytes:
    """Serialize to one UTF-8 JSON object; absent optional fields are omitted."""
    obj: dict[str, Any] = {
        "id": msg.id,
        "type": msg.type.value,
        "payload": msg.payload,
        "timestamp": msg.timestamp,
        "session_id": msg.session_id,
    }
    if msg.operation_id is not None:
        obj["operation_id"] = msg.operation_id
    if msg.status is not None:
        obj["status"] = msg.status.value
    if msg.correlation_id is not None:
        obj["correlation_id"] = msg.correlation_id
    return json.dumps(obj).encode("utf-8")


def decode_message(data: bytes | str) -> EnhancedMessage:
    """Parse one frame; raises DecodeError carrying the failure class.

    Frames missing session_id/timestamp (as seen from abridged producers)
    decode with "" / 0.0 defaults; everything else is validated strictly.
    """
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(DecodeFailure.NOT_UTF8, str(exc)) from exc
    else:
        text = data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(DecodeFailure.MALFORMED_STRUCTURE, str(exc)) from exc
    if not isinstance(obj, dict):
        raise DecodeError(DecodeFailure.MALFORMED_STRUCTURE, "frame is not an object")

    type_name = obj.get("type")
    if not isinstance(type_name, str):
        raise DecodeError(DecodeFailure.MALFORMED_STRUCTURE, "missing type")
    try:
        mtype = MessageType(type_name)
    except ValueError:
        raise DecodeError(DecodeFailure.UNKNOWN_TYPE, type_name) from None

    msg_id = obj.get("id")
    if not isinstance(msg_id, str):
        raise DecodeError(DecodeFailure.MALFORMED_STRUCTURE, "missing id")
    payload = obj.get("payload")
    if not isinstance(payload, dict):
        raise DecodeError(DecodeFailure.MALFORMED_STRUCTURE, "missing payload")
    timestamp = obj.get("timestamp", 0.0)
    if not _is_number(timestamp):
        raise DecodeError(DecodeFailure.MALFORMED_STRUCTURE, "timestamp not a number")
    session_id = obj.get("session_id", "")
    if not isinstance(session_id, str):
        raise DecodeError(DecodeFailure.MALFORMED_STRUCTURE, "session_id not a string")

    operation_id = obj.get("operation_id")
    if operation_id is not None and not isinstance(operation_id, str):
        raise DecodeError(DecodeFailure.SCHEMA_VIOLATION, "operation_id not a string")
    correlation_id = obj.get("correlation_id")
    if correlation_id is not None and not isinstance(correlation_id, str):
        raise DecodeError(DecodeFailure.SCHEMA_VIOLATION, "correlation_id not a string")
    status = None
    if "status" in obj:
        try:
            status = OperationStatus(obj["status"])
        except (ValueError, TypeError):
            raise DecodeError(
                DecodeFailure.SCHEMA_VIOLATION, f"bad status {obj['status']!r}"
            ) from None

    msg = EnhancedMessage(
        id=msg_id,
        type=mtype,
        payload=payload,
        timestamp=float(timestamp),
        session_id=session_id,
        operation_id=operation_id,
        status=status,
        correlation_id=correlation_id,
    )
    try:
        msg.validate()
    except SchemaError as exc:
        raise DecodeError(DecodeFailure.SCHEMA_VIOLATION, str(exc)) from exc
    return msg
