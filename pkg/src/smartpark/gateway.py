"""Cloud end of the device link.

One DeviceSession per edge connection: the first frame must be a hello
carrying the space's pre-shared token; anything before that gets an error
frame and a disconnect. After authentication the session serves auth
round-trips (delegating to the store, which logs the state change before
the response is built), acknowledges status updates with at-least-once
dedup by (space_id, frame_id), and tracks heartbeats for liveness.

The session itself is transport-free (bytes in, bytes out), so the same
code runs under the threaded TCP server and under the deterministic
in-process simulator.
"""

from __future__ import annotations

import logging
import socketserver
import threading
from datetime import datetime, timezone
from typing import Callable, Optional

from .model import Accepted, UnknownSpace
from .protocol import (
    Ack,
    AuthReq,
    AuthResp,
    DecodeError,
    ERR_BAD_FRAME,
    ERR_INTERNAL,
    ERR_PROTOCOL,
    ERR_UNAUTHENTICATED,
    ErrorBody,
    Frame,
    HEARTBEAT_INTERVAL,
    Hello,
    LANE_ENTRY,
    StatusUpdate,
    decode_frame,
    encode_frame,
    liveness,
)
from .store import ParkingStore

log = logging.getLogger(__name__)


def wall_clock() -> datetime:
    return datetime.now(timezone.utc)


class LivenessRegistry:
    """Last-contact bookkeeping per space, shared with the HTTP layer."""

    def __init__(self, heartbeat_interval: float = HEARTBEAT_INTERVAL):
        self.heartbeat_interval = heartbeat_interval
        self._last: dict[str, datetime] = {}
        self._lock = threading.Lock()

    def note(self, space_id: str, now: datetime) -> None:
        with self._lock:
            self._last[space_id] = now

    def status(self, space_id: str, now: datetime) -> str:
        with self._lock:
            last = self._last.get(space_id)
        return liveness(last, now, heartbeat_interval=self.heartbeat_interval)


class DeviceGateway:
    """Shared state across sessions: the store, token check, liveness and
    the status-update dedup watermarks."""

    def __init__(
        self,
        store: ParkingStore,
        verify_token: Callable[[str, str], bool],
        *,
        clock: Callable[[], datetime] = wall_clock,
        liveness_registry: LivenessRegistry | None = None,
    ):
        self.store = store
        self.verify_token = verify_token
        self.clock = clock
        self.liveness = liveness_registry or LivenessRegistry()
        self._dedup_lock = threading.Lock()
        self._watermarks: dict[str, int] = {}
        # confirmations actually applied (not deduplicated), per space;
        # the cloud is authoritative for slot state, so these are audit
        # records rather than state transitions
        self.applied_updates: dict[str, list[StatusUpdate]] = {}

    def session(self) -> "DeviceSession":
        return DeviceSession(self)

    def record_status_update(self, update: StatusUpdate, frame_id: int) -> bool:
        """True when applied, False when recognized as a duplicate."""
        with self._dedup_lock:
            if frame_id <= self._watermarks.get(update.space_id, 0):
                return False
            self._watermarks[update.space_id] = frame_id
            self.applied_updates.setdefault(update.space_id, []).append(update)
            return True


class DeviceSession:
    """Protocol state machine for one edge connection."""

    def __init__(self, gateway: DeviceGateway):
        self.gateway = gateway
        self.space_id: Optional[str] = None
        self._next_out = 0
        self._last_in = 0

    def _frame(self, body, now: datetime) -> Frame:
        self._next_out += 1
        return Frame(frame_id=self._next_out, sent_at=now, body=body)

    def _error(self, code: int, text: str, now: datetime) -> bytes:
        return encode_frame(self._frame(ErrorBody(code, text), now))

    def handle_line(self, line: bytes, now: datetime | None = None) -> tuple[list[bytes], bool]:
        """Process one inbound line; returns (outbound lines, keep_open)."""
        now = now or self.gateway.clock()
        try:
            frame = decode_frame(line)
        except DecodeError as exc:
            authed = self.space_id is not None
            return [self._error(ERR_BAD_FRAME, str(exc), now)], authed
        if frame.frame_id <= self._last_in:
            return [
                self._error(
                    ERR_PROTOCOL,
                    f"frame_id {frame.frame_id} not increasing (last {self._last_in})",
                    now,
                )
            ], False
        self._last_in = frame.frame_id

        if self.space_id is None:
            if not isinstance(frame.body, Hello):
                return [self._error(ERR_UNAUTHENTICATED, "hello required first", now)], False
            return self._handle_hello(frame.body, now)

        self.gateway.liveness.note(self.space_id, now)
        body = frame.body
        if isinstance(body, AuthReq):
            return self._handle_auth(frame, body, now)
        if isinstance(body, StatusUpdate):
            return self._handle_status(frame, body, now)
        if body.kind == "heartbeat":
            return [], True
        return [self._error(ERR_BAD_FRAME, f"unexpected kind {body.kind!r}", now)], True

    def _handle_hello(self, hello: Hello, now: datetime) -> tuple[list[bytes], bool]:
        if self.gateway.store.get_space(hello.space_id) is None:
            return [self._error(ERR_UNAUTHENTICATED, "unknown space", now)], False
        if not self.gateway.verify_token(hello.space_id, hello.token):
            return [self._error(ERR_UNAUTHENTICATED, "bad token", now)], False
        self.space_id = hello.space_id
        self.gateway.liveness.note(self.space_id, now)
        return [], True

    def _handle_auth(self, frame: Frame, req: AuthReq, now: datetime) -> tuple[list[bytes], bool]:
        if req.space_id != self.space_id:
            return [self._error(ERR_PROTOCOL, "auth_req for a different space", now)], True
        try:
            if req.lane == LANE_ENTRY:
                decision, session = self.gateway.store.check_in(req.space_id, req.rfid_uid, now=now)
            else:
                decision, session = self.gateway.store.check_out(req.space_id, req.rfid_uid, now=now)
        except UnknownSpace:
            return [self._error(ERR_PROTOCOL, "unknown space", now)], True
        except Exception:  # engine failure must not kill the link
            log.exception("auth handling failed for %s", req.space_id)
            return [self._error(ERR_INTERNAL, "internal error", now)], True
        slot_no = session.slot_no if (session is not None and isinstance(decision, Accepted)) else None
        resp = AuthResp(frame_id_of_req=frame.frame_id, decision=decision, slot_no=slot_no)
        return [encode_frame(self._frame(resp, now))], True

    def _handle_status(
        self, frame: Frame, update: StatusUpdate, now: datetime
    ) -> tuple[list[bytes], bool]:
        if update.space_id != self.space_id:
            return [self._error(ERR_PROTOCOL, "status_update for a different space", now)], True
        self.gateway.record_status_update(update, frame.frame_id)
        return [encode_frame(self._frame(Ack(frame.frame_id), now))], True


class _DeviceLinkHandler(socketserver.StreamRequestHandler):
    def handle(self):
        session = self.server.gateway.session()
        while True:
            line = self.rfile.readline()
            if not line:
                break
            out, keep_open = session.handle_line(line)
            for chunk in out:
                self.wfile.write(chunk)
            self.wfile.flush()
            if not keep_open:
                break


class DeviceLinkServer(socketserver.ThreadingTCPServer):
    """TCP front for the gateway: newline-delimited JSON frames."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], gateway: DeviceGateway):
        super().__init__(address, _DeviceLinkHandler)
        self.gateway = gateway

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=lambda: self.serve_forever(poll_interval=0.05), name="device-link", daemon=True)
        thread.start()
        return thread
