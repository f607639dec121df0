"""Edge-to-cloud wire protocol.

Frames are UTF-8 JSON objects, one per line, newline terminated, with
top-level keys "frame_id", "sent_at" (ISO-8601 UTC), "kind" and "body".
Kinds: hello, auth_req, auth_resp, status_update, ack, heartbeat, error.
Unknown top-level keys are ignored for forward compatibility; decoding
never raises anything but DecodeError, whatever the input bytes.

Also here: the edge-side store-and-forward buffer (frames held until
acked, flushed in order on reconnect) and the heartbeat liveness rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime
from typing import Optional, Union

from .model import AuthDecision, decision_from_json, from_iso, to_iso

HEARTBEAT_INTERVAL = 5.0  # seconds
AUTH_TIMEOUT = 3.0  # seconds an edge waits for an auth_resp before failing closed
BUFFER_CAPACITY = 1024  # unacknowledged status updates an edge may hold

# error frame codes
ERR_BAD_FRAME = 400
ERR_UNAUTHENTICATED = 401
ERR_PROTOCOL = 409
ERR_INTERNAL = 500

LANE_ENTRY = "entry"
LANE_EXIT = "exit"


class DecodeError(Exception):
    """Raised for any undecodable input; `reason` is one of the class
    constants, `detail` says where/why."""

    TRUNCATED = "truncated"
    BAD_JSON = "bad_json"
    UNKNOWN_KIND = "unknown_kind"
    INVARIANT = "invariant_violation"

    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


class BufferOverflow(Exception):
    pass


@dataclass(frozen=True)
class Hello:
    kind = "hello"
    space_id: str
    token: str

    def to_json(self):
        return {"space_id": self.space_id, "token": self.token}


@dataclass(frozen=True)
class AuthReq:
    kind = "auth_req"
    space_id: str
    lane: str  # entry | exit
    rfid_uid: str

    def to_json(self):
        return {"space_id": self.space_id, "lane": self.lane, "rfid_uid": self.rfid_uid}


@dataclass(frozen=True)
class AuthResp:
    kind = "auth_resp"
    frame_id_of_req: int
    decision: AuthDecision
    slot_no: Optional[int] = None  # set on accepted decisions so the edge
    # can report the slot in its confirmations

    def to_json(self):
        data = {"frame_id_of_req": self.frame_id_of_req, "decision": self.decision.to_json()}
        if self.slot_no is not None:
            data["slot_no"] = self.slot_no
        return data


@dataclass(frozen=True)
class StatusUpdate:
    kind = "status_update"
    space_id: str
    slot_no: int
    new_state: str  # vacant | reserved | occupied
    cause: str

    def to_json(self):
        return {
            "space_id": self.space_id,
            "slot_no": self.slot_no,
            "new_state": self.new_state,
            "cause": self.cause,
        }


@dataclass(frozen=True)
class Ack:
    kind = "ack"
    frame_id: int

    def to_json(self):
        return {"frame_id": self.frame_id}


@dataclass(frozen=True)
class Heartbeat:
    kind = "heartbeat"
    space_id: str

    def to_json(self):
        return {"space_id": self.space_id}


@dataclass(frozen=True)
class ErrorBody:
    kind = "error"
    code: int
    text: str

    def to_json(self):
        return {"code": self.code, "text": self.text}


Body = Union[Hello, AuthReq, AuthResp, StatusUpdate, Ack, Heartbeat, ErrorBody]

_BODY_KINDS = {cls.kind: cls for cls in (Hello, AuthReq, AuthResp, StatusUpdate, Ack, Heartbeat, ErrorBody)}

_VALID_SLOT_STATES = {"vacant", "reserved", "occupied"}


@dataclass(frozen=True)
class Frame:
    frame_id: int
    sent_at: datetime
    body: Body

    @property
    def kind(self) -> str:
        return self.body.kind


def encode_frame(frame: Frame) -> bytes:
    """One newline-terminated canonical JSON line. Validity of the frame
    is the caller's precondition."""
    doc = {
        "frame_id": frame.frame_id,
        "sent_at": to_iso(frame.sent_at),
        "kind": frame.kind,
        "body": frame.body.to_json(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    ) + b"\n"


def _require(condition: bool, detail: str) -> None:
    if not condition:
        raise DecodeError(DecodeError.INVARIANT, detail)


def _decode_body(kind: str, data) -> Body:
    _require(isinstance(data, dict), "body must be an object")
    if kind == "hello":
        _require(isinstance(data.get("space_id"), str), "hello.space_id")
        _require(isinstance(data.get("token"), str), "hello.token")
        return Hello(data["space_id"], data["token"])
    if kind == "auth_req":
        _require(isinstance(data.get("space_id"), str), "auth_req.space_id")
        _require(data.get("lane") in (LANE_ENTRY, LANE_EXIT), "auth_req.lane")
        _require(isinstance(data.get("rfid_uid"), str), "auth_req.rfid_uid")
        return AuthReq(data["space_id"], data["lane"], data["rfid_uid"])
    if kind == "auth_resp":
        _require(
            isinstance(data.get("frame_id_of_req"), int) and data["frame_id_of_req"] >= 1,
            "auth_resp.frame_id_of_req",
        )
        _require(isinstance(data.get("decision"), dict), "auth_resp.decision")
        try:
            decision = decision_from_json(data["decision"])
        except (ValueError, KeyError) as exc:
            raise DecodeError(DecodeError.INVARIANT, f"auth_resp.decision: {exc}") from exc
        slot_no = data.get("slot_no")
        _require(slot_no is None or (isinstance(slot_no, int) and slot_no >= 1), "auth_resp.slot_no")
        return AuthResp(data["frame_id_of_req"], decision, slot_no)
    if kind == "status_update":
        _require(isinstance(data.get("space_id"), str), "status_update.space_id")
        _require(isinstance(data.get("slot_no"), int) and data["slot_no"] >= 1, "status_update.slot_no")
        _require(data.get("new_state") in _VALID_SLOT_STATES, "status_update.new_state")
        _require(isinstance(data.get("cause"), str), "status_update.cause")
        return StatusUpdate(data["space_id"], data["slot_no"], data["new_state"], data["cause"])
    if kind == "ack":
        _require(isinstance(data.get("frame_id"), int) and data["frame_id"] >= 1, "ack.frame_id")
        return Ack(data["frame_id"])
    if kind == "heartbeat":
        _require(isinstance(data.get("space_id"), str), "heartbeat.space_id")
        return Heartbeat(data["space_id"])
    if kind == "error":
        _require(isinstance(data.get("code"), int), "error.code")
        _require(isinstance(data.get("text"), str), "error.text")
        return ErrorBody(data["code"], data["text"])
    raise DecodeError(DecodeError.UNKNOWN_KIND, f"kind {kind!r}")


def decode_frame(data: bytes) -> Frame:
    """Decode one line. Raises DecodeError (and nothing else) on any
    malformed input."""
    if not isinstance(data, (bytes, bytearray)):
        raise DecodeError(DecodeError.BAD_JSON, "input must be bytes")
    stripped = bytes(data).strip(b"\r\n")
    if not stripped:
        raise DecodeError(DecodeError.TRUNCATED, "empty input")
    try:
        text = stripped.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(DecodeError.BAD_JSON, f"not UTF-8 at byte {exc.start}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(DecodeError.BAD_JSON, f"{exc.msg} at position {exc.pos}") from exc
    _require(isinstance(doc, dict), "frame must be a JSON object")
    kind = doc.get("kind")
    if not isinstance(kind, str):
        raise DecodeError(DecodeError.INVARIANT, "missing kind")
    if kind not in _BODY_KINDS:
        raise DecodeError(DecodeError.UNKNOWN_KIND, f"kind {kind!r}")
    frame_id = doc.get("frame_id")
    _require(isinstance(frame_id, int) and not isinstance(frame_id, bool) and frame_id >= 1, "frame_id")
    sent_at_raw = doc.get("sent_at")
    _require(isinstance(sent_at_raw, str), "sent_at")
    try:
        sent_at = from_iso(sent_at_raw)
    except ValueError as exc:
        raise DecodeError(DecodeError.INVARIANT, f"sent_at: {exc}") from exc
    body = _decode_body(kind, doc.get("body"))
    return Frame(frame_id=frame_id, sent_at=sent_at, body=body)


class LineBuffer:
    """Incremental newline splitter for a byte stream."""

    def __init__(self, max_line: int = 1 << 20):
        self._chunks = bytearray()
        self._max_line = max_line

    def feed(self, data: bytes) -> list[bytes]:
        self._chunks.extend(data)
        lines = []
        while True:
            index = self._chunks.find(b"\n")
            if index < 0:
                if len(self._chunks) > self._max_line:
                    raise DecodeError(DecodeError.INVARIANT, "line too long")
                return lines
            lines.append(bytes(self._chunks[: index + 1]))
            del self._chunks[: index + 1]


class EdgeBuffer:
    """Store-and-forward queue of unacknowledged status updates.

    Frames leave only on ack; order is preserved; hitting capacity raises
    BufferOverflow instead of dropping anything silently.
    """

    def __init__(self, capacity: int = BUFFER_CAPACITY):
        self.capacity = capacity
        self._frames: list[Frame] = []

    def __len__(self) -> int:
        return len(self._frames)

    def enqueue(self, frame: Frame) -> None:
        if len(self._frames) >= self.capacity:
            raise BufferOverflow(f"edge buffer full at {self.capacity} frames")
        self._frames.append(frame)

    def ack(self, frame_id: int) -> bool:
        for i, frame in enumerate(self._frames):
            if frame.frame_id == frame_id:
                del self._frames[i]
                return True
        return False

    def pending(self) -> tuple[Frame, ...]:
        return tuple(self._frames)


def liveness(
    last_heartbeat_at: datetime | None,
    now: datetime,
    *,
    heartbeat_interval: float = HEARTBEAT_INTERVAL,
) -> str:
    """"online" unless the silence exceeds three heartbeat intervals
    (strictly; exactly three is still online), or nothing was ever heard."""
    if last_heartbeat_at is None:
        return "offline"
    silence = (now - last_heartbeat_at).total_seconds()
    return "offline" if silence > 3 * heartbeat_interval else "online"
