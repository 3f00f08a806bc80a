"""Wire format and session state machines for the training protocol.

Frames are a 4-byte big-endian body length followed by a UTF-8 JSON body;
tensors travel as base64 little-endian float32. Messages validate against a
strict per-kind payload schema at construction time, so no message can ever
carry raw feature rows. See docs/protocol.md for worked byte examples.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from numbers import Real

from .codec import SCHEMA_VERSION
from .dp import DpConfig
from .errors import ConfigError, FrameTooLarge, ProtocolError
from .model import (
    ModelParams,
    ParamDelta,
    RoundSchedule,
    delta_from_obj,
    delta_to_obj,
    model_from_obj,
    model_to_obj,
    schedule_from_obj,
    schedule_to_obj,
)

MAX_FRAME_BYTES = 64 * 1024 * 1024
_HEADER = struct.Struct(">I")

HELLO = "Hello"
WELCOME = "Welcome"
GLOBAL_MODEL = "GlobalModel"
LOCAL_UPDATE = "LocalUpdate"
ROUND_DONE = "RoundDone"
ERROR = "Error"
BYE = "Bye"

KINDS = (HELLO, WELCOME, GLOBAL_MODEL, LOCAL_UPDATE, ROUND_DONE, ERROR, BYE)


def _require_keys(kind: str, payload: dict, keys: set[str]) -> None:
    got = set(payload)
    if got != keys:
        extra = got - keys
        missing = keys - got
        parts = []
        if extra:
            parts.append(f"unexpected fields {sorted(extra)}")
        if missing:
            parts.append(f"missing fields {sorted(missing)}")
        raise ProtocolError(f"{kind} payload: " + "; ".join(parts))


def _require_number(kind: str, name: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, Real):
        raise ProtocolError(f"{kind} payload: {name} must be a real number")
    if not math.isfinite(float(value)):
        raise ProtocolError(f"{kind} payload: {name} must be finite")
    return float(value)


def _validate_metrics(kind: str, metrics, keys: set[str]) -> None:
    if not isinstance(metrics, dict):
        raise ProtocolError(f"{kind} payload: metrics must be an object")
    _require_keys(kind, metrics, keys)
    for k, v in metrics.items():
        _require_number(kind, f"metrics.{k}", v)


def _validate_payload(kind: str, p: dict) -> None:
    if not isinstance(p, dict):
        raise ProtocolError("payload must be an object")
    if kind in (HELLO, BYE):
        _require_keys(kind, p, set())
    elif kind == WELCOME:
        _require_keys(kind, p, {"total_rounds"})
        if isinstance(p["total_rounds"], bool) or not isinstance(p["total_rounds"], int):
            raise ProtocolError("Welcome payload: total_rounds must be an integer")
        if p["total_rounds"] < 0:
            raise ProtocolError("Welcome payload: total_rounds must be >= 0")
    elif kind == GLOBAL_MODEL:
        _require_keys(kind, p, {"model", "schedule", "dp"})
        if not isinstance(p["model"], ModelParams):
            raise ProtocolError("GlobalModel payload: model must be ModelParams")
        p["model"].validate()
        if not isinstance(p["schedule"], RoundSchedule):
            raise ProtocolError("GlobalModel payload: schedule must be RoundSchedule")
        p["schedule"].validate(len(p["model"].layers))
        if p["dp"] is not None:
            if not isinstance(p["dp"], DpConfig):
                raise ProtocolError("GlobalModel payload: dp must be DpConfig or null")
            p["dp"].validate()
    elif kind == LOCAL_UPDATE:
        _require_keys(kind, p, {"delta", "sample_count", "metrics"})
        if not isinstance(p["delta"], ParamDelta):
            raise ProtocolError("LocalUpdate payload: delta must be ParamDelta")
        if isinstance(p["sample_count"], bool) or not isinstance(p["sample_count"], int):
            raise ProtocolError("LocalUpdate payload: sample_count must be an integer")
        if p["sample_count"] < 1:
            raise ProtocolError("LocalUpdate payload: sample_count must be >= 1")
        _validate_metrics(kind, p["metrics"], {"loss", "accuracy"})
    elif kind == ROUND_DONE:
        _require_keys(kind, p, {"metrics"})
        _validate_metrics(kind, p["metrics"], {"global_loss", "global_accuracy"})
    elif kind == ERROR:
        _require_keys(kind, p, {"reason"})
        if not isinstance(p["reason"], str):
            raise ProtocolError("Error payload: reason must be a string")
    else:
        raise ProtocolError(f"unknown message kind {kind!r}")


@dataclass
class Message:
    kind: str
    round: int
    sender_id: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        if isinstance(self.round, bool) or not isinstance(self.round, int) or self.round < 0:
            raise ProtocolError("round must be a non-negative integer")
        if not isinstance(self.sender_id, str) or not self.sender_id:
            raise ProtocolError("sender_id must be a non-empty string")
        _validate_payload(self.kind, self.payload)


def _payload_to_obj(kind: str, p: dict) -> dict:
    if kind == GLOBAL_MODEL:
        return {
            "model": model_to_obj(p["model"]),
            "schedule": schedule_to_obj(p["schedule"]),
            "dp": p["dp"].to_obj() if p["dp"] is not None else None,
        }
    if kind == LOCAL_UPDATE:
        return {
            "delta": delta_to_obj(p["delta"]),
            "sample_count": p["sample_count"],
            "metrics": dict(p["metrics"]),
        }
    return dict(p)


def _payload_from_obj(kind: str, obj) -> dict:
    if not isinstance(obj, dict):
        raise ProtocolError("payload must be an object")
    try:
        if kind == GLOBAL_MODEL:
            _require_keys(kind, obj, {"model", "schedule", "dp"})
            return {
                "model": model_from_obj(obj["model"]),
                "schedule": schedule_from_obj(obj["schedule"]),
                "dp": DpConfig.from_obj(obj["dp"]) if obj["dp"] is not None else None,
            }
        if kind == LOCAL_UPDATE:
            _require_keys(kind, obj, {"delta", "sample_count", "metrics"})
            return {
                "delta": delta_from_obj(obj["delta"]),
                "sample_count": obj["sample_count"],
                "metrics": obj["metrics"],
            }
    except ConfigError as exc:
        raise ProtocolError(str(exc)) from exc
    return obj


def encode(msg: Message) -> bytes:
    """Message -> complete frame bytes (header + JSON body)."""
    body_obj = {
        "schema_version": SCHEMA_VERSION,
        "kind": msg.kind,
        "round": msg.round,
        "sender_id": msg.sender_id,
        "payload": _payload_to_obj(msg.kind, msg.payload),
    }
    body = json.dumps(body_obj, separators=(",", ":"), sort_keys=True).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"frame body of {len(body)} bytes exceeds limit")
    return _HEADER.pack(len(body)) + body


def try_decode(buffer: bytes) -> tuple[Message, int] | None:
    """Decode one frame from the front of ``buffer``.

    Returns (message, bytes_consumed), or None when more bytes are needed.
    Raises ProtocolError / FrameTooLarge on malformed input.
    """
    if len(buffer) < _HEADER.size:
        return None
    (length,) = _HEADER.unpack_from(buffer)
    if length > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"declared frame body of {length} bytes exceeds limit")
    end = _HEADER.size + length
    if len(buffer) < end:
        return None
    return _decode_body(buffer[_HEADER.size : end]), end


def decode(frame: bytes) -> Message:
    """Decode exactly one complete frame; ProtocolError on trailing bytes."""
    out = try_decode(frame)
    if out is None:
        raise ProtocolError("incomplete frame")
    msg, used = out
    if used != len(frame):
        raise ProtocolError("trailing bytes after frame")
    return msg


def _decode_body(body: bytes) -> Message:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame body: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame body must be a JSON object")
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise ProtocolError(f"unsupported schema version {obj.get('schema_version')!r}")
    for key in ("kind", "round", "sender_id", "payload"):
        if key not in obj:
            raise ProtocolError(f"frame body missing {key!r}")
    kind = obj["kind"]
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    payload = _payload_from_obj(kind, obj["payload"])
    if isinstance(obj["round"], bool) or not isinstance(obj["round"], int):
        raise ProtocolError("round must be an integer")
    return Message(kind, obj["round"], obj["sender_id"], payload)


class FrameDecoder:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        while True:
            got = try_decode(bytes(self._buf))
            if got is None:
                return out
            msg, used = got
            del self._buf[:used]
            out.append(msg)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# --- session state machines -------------------------------------------------

CONNECTING = "connecting"
REGISTERED = "registered"
TRAINING = "training"
AWAIT_GLOBAL = "await_global"
DONE = "done"
FAILED = "failed"

AWAIT_HELLO = "await_hello"
READY = "ready"
WAIT_UPDATE = "wait_update"


@dataclass(frozen=True)
class Received:
    msg: Message


@dataclass(frozen=True)
class TrainingComplete:
    round: int
    delta: ParamDelta
    sample_count: int
    metrics: dict


@dataclass(frozen=True)
class Timeout:
    reason: str = "timeout"


@dataclass(frozen=True)
class Send:
    msg: Message


@dataclass(frozen=True)
class StartTraining:
    round: int
    model: ModelParams
    schedule: RoundSchedule
    dp: DpConfig | None


@dataclass(frozen=True)
class Warn:
    reason: str


@dataclass(frozen=True)
class CloseConn:
    reason: str = ""


@dataclass(frozen=True)
class Deliver:
    client_id: str
    round: int
    delta: ParamDelta
    sample_count: int
    metrics: dict


class ClientSession:
    """Client half of the round protocol, as a pure event -> actions machine."""

    def __init__(self, client_id: str):
        self.client_id = client_id
        self.state = CONNECTING
        self.round = 0
        self.total_rounds: int | None = None
        self.round_metrics: list[dict] = []
        self.failure: str | None = None

    def start(self) -> list:
        return [Send(Message(HELLO, 0, self.client_id))]

    def _fail(self, reason: str) -> list:
        self.state = FAILED
        self.failure = reason
        return [
            Send(Message(ERROR, self.round, self.client_id, {"reason": reason})),
            CloseConn(reason),
        ]

    def step(self, event) -> list:
        if isinstance(event, TrainingComplete):
            if self.state != TRAINING or event.round != self.round:
                return self._fail("training completion outside an active round")
            self.state = AWAIT_GLOBAL
            return [
                Send(
                    Message(
                        LOCAL_UPDATE,
                        event.round,
                        self.client_id,
                        {
                            "delta": event.delta,
                            "sample_count": event.sample_count,
                            "metrics": dict(event.metrics),
                        },
                    )
                )
            ]
        if isinstance(event, Timeout):
            self.state = FAILED
            self.failure = event.reason
            return [CloseConn(event.reason)]
        if not isinstance(event, Received):
            raise ProtocolError(f"unknown event {event!r}")
        msg = event.msg

        if msg.kind == ERROR:
            self.state = FAILED
            self.failure = msg.payload["reason"]
            return [CloseConn(msg.payload["reason"])]
        if msg.kind == BYE:
            self.state = DONE
            return [CloseConn("server finished")]

        if self.state == CONNECTING:
            if msg.kind == WELCOME:
                self.state = REGISTERED
                self.total_rounds = msg.payload["total_rounds"]
                return []
            return self._fail(f"expected Welcome, got {msg.kind}")

        if msg.kind == GLOBAL_MODEL:
            if self.state == REGISTERED:
                expected = self.round + 1
            elif self.state == AWAIT_GLOBAL:
                expected = self.round + 1
            elif self.state == TRAINING:
                expected = None  # nothing acceptable while training
            else:
                return self._fail(f"GlobalModel in state {self.state}")
            if msg.round <= self.round:
                return [Warn(f"ignoring stale GlobalModel for round {msg.round}")]
            if expected is None or msg.round != expected:
                return self._fail(
                    f"out-of-order GlobalModel round {msg.round}, expected {expected}"
                )
            self.state = TRAINING
            self.round = msg.round
            p = msg.payload
            return [StartTraining(msg.round, p["model"], p["schedule"], p["dp"])]

        if msg.kind == ROUND_DONE:
            if msg.round < self.round:
                return [Warn(f"ignoring stale RoundDone for round {msg.round}")]
            if msg.round > self.round or self.state != AWAIT_GLOBAL:
                return self._fail(f"unexpected RoundDone for round {msg.round}")
            self.round_metrics.append({"round": msg.round, **msg.payload["metrics"]})
            return []

        return self._fail(f"unexpected {msg.kind} in state {self.state}")


class ServerPeerSession:
    """Server-side mirror of one client connection."""

    def __init__(self):
        self.state = AWAIT_HELLO
        self.client_id: str | None = None
        self.round = 0
        self.failure: str | None = None

    def _fail(self, reason: str) -> list:
        self.state = FAILED
        self.failure = reason
        sender = "server"
        return [
            Send(Message(ERROR, self.round, sender, {"reason": reason})),
            CloseConn(reason),
        ]

    def sent_global(self, round_index: int) -> None:
        """Record that the server broadcast this round's model to the peer."""
        if self.state not in (READY, WAIT_UPDATE):
            raise ProtocolError(f"cannot broadcast in state {self.state}")
        if round_index < self.round:
            raise ProtocolError("broadcast round must not decrease")
        self.state = WAIT_UPDATE
        self.round = round_index

    def step(self, event) -> list:
        if isinstance(event, Timeout):
            self.state = FAILED
            self.failure = event.reason
            return [CloseConn(event.reason)]
        if not isinstance(event, Received):
            raise ProtocolError(f"unknown event {event!r}")
        msg = event.msg

        if msg.kind == ERROR:
            self.state = FAILED
            self.failure = msg.payload["reason"]
            return [CloseConn(msg.payload["reason"])]
        if msg.kind == BYE:
            self.state = DONE
            return [CloseConn("client left")]

        if self.state == AWAIT_HELLO:
            if msg.kind == HELLO:
                self.state = READY
                self.client_id = msg.sender_id
                return []
            return self._fail(f"expected Hello, got {msg.kind}")

        if msg.kind == LOCAL_UPDATE:
            if self.state != WAIT_UPDATE:
                return self._fail(f"LocalUpdate in state {self.state}")
            if msg.round < self.round:
                return [Warn(f"ignoring stale LocalUpdate for round {msg.round}")]
            if msg.round > self.round:
                return self._fail(
                    f"LocalUpdate for future round {msg.round}, expected {self.round}"
                )
            self.state = READY
            p = msg.payload
            return [
                Deliver(
                    msg.sender_id, msg.round, p["delta"], p["sample_count"], p["metrics"]
                )
            ]

        return self._fail(f"unexpected {msg.kind} in state {self.state}")
