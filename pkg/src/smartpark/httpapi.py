"""Motorist-facing HTTP/JSON API.

Plain threaded stdlib server: request handling is synchronous, every
mutation funnels into the store's single writer, and the long-lived
GET /events stream is newline-delimited JSON with dense sequence numbers
and `since` resumption. Lines starting with '#' on the stream are
heartbeat comments.

Slot rendering: vacant=green, reserved=orange, occupied=red.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional
from urllib.parse import parse_qs, urlparse

from .model import (
    COLOR_BY_STATE,
    DomainError,
    DuplicateCredential,
    DuplicateNationalId,
    ParkingSpace,
    to_iso,
)
from .store import ParkingStore, StreamEvent

log = logging.getLogger(__name__)

STREAM_HEARTBEAT_SECONDS = 15.0
STREAM_QUEUE_SIZE = 256

_STATUS_BY_CODE = {
    "invalid_capacity": 422,
    "invalid_coordinates": 422,
    "malformed_uid": 422,
    "duplicate_credential": 409,
    "duplicate_national_id": 409,
    "unknown_space": 404,
    "unknown_slot": 404,
    "unknown_motorist": 404,
    "unknown_reservation": 404,
    "slot_not_vacant": 409,
    "motorist_has_active_claim": 409,
    "not_active": 409,
    "active_claim_exists": 409,
    "negative_duration": 422,
}


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _bad_request(message: str) -> ApiError:
    return ApiError(422, "invalid_body", message)


def slot_view(state_kind: str, slot_no: int, holder: str | None, viewer: str | None) -> dict:
    return {
        "slot_no": slot_no,
        "state": state_kind,
        "color": COLOR_BY_STATE[state_kind],
        "reserved_by_me": viewer is not None and holder == viewer,
    }


class _Subscription:
    """Bounded per-client queue; a slow consumer is cut off, not buffered."""

    def __init__(self, size: int = STREAM_QUEUE_SIZE):
        self.queue: queue.Queue = queue.Queue(maxsize=size)
        self.overflowed = False

    def __call__(self, event: StreamEvent) -> None:
        try:
            self.queue.put_nowait(event)
        except queue.Full:
            self.overflowed = True


class ApiServer(ThreadingHTTPServer):
    """HTTP front; all domain state lives in the store."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(
        self,
        address: tuple[str, int],
        store: ParkingStore,
        tokens,
        *,
        clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
        edge_status: Callable[[str, datetime], str] | None = None,
        meta: dict | None = None,
        stream_heartbeat: float = STREAM_HEARTBEAT_SECONDS,
    ):
        super().__init__(address, _ApiHandler)
        self.store = store
        self.tokens = tokens
        self.clock = clock
        self.edge_status = edge_status or (lambda space_id, now: "offline")
        self.meta = meta or {}
        self.stream_heartbeat = stream_heartbeat
        self.closing = threading.Event()
        self._streams_lock = threading.Lock()
        self._streams: set[_Subscription] = set()

    def track_stream(self, subscription: _Subscription) -> None:
        with self._streams_lock:
            self._streams.add(subscription)

    def untrack_stream(self, subscription: _Subscription) -> None:
        with self._streams_lock:
            self._streams.discard(subscription)

    def shutdown_streams(self) -> None:
        self.closing.set()
        with self._streams_lock:
            for subscription in self._streams:
                subscription.overflowed = True  # forces the writer loop to exit

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=lambda: self.serve_forever(poll_interval=0.05), name="http-api", daemon=True)
        thread.start()
        return thread

    # view helpers -----------------------------------------------------

    def space_summary(self, space: ParkingSpace, counts, now: datetime) -> dict:
        vacant, reserved, occupied = counts
        return {
            "space_id": space.space_id,
            "name": space.name,
            "location": {"latitude": space.latitude, "longitude": space.longitude},
            "capacity": space.capacity,
            "counts": {"vacant": vacant, "reserved": reserved, "occupied": occupied},
            "tariff": space.tariff.to_json(),
            "reservation_ttl_minutes": int(
                self.store.engine.reservation_ttl.total_seconds() // 60
            ),
            "admin_name": space.admin_name,
            "admin_contact": space.admin_contact,
            "edge_status": self.edge_status(space.space_id, now),
        }

    def space_detail(self, space_id: str, viewer: str | None) -> dict:
        with self.store._lock:
            space = self.store.engine.spaces.get(space_id)
            if space is None:
                raise ApiError(404, "unknown_space", space_id)
            now = self.clock()
            detail = self.space_summary(space, space.counts(), now)
            detail["as_of_seq"] = self.store.stream_head
            detail["slots"] = [
                slot_view(
                    space.slot(no).kind, no, self.store.engine.holder_of(space_id, no), viewer
                )
                for no in range(1, space.capacity + 1)
            ]
            return detail


class _ApiHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: ApiServer

    # ------------------------------------------------------------------
    # plumbing

    def log_message(self, format, *args):  # route through logging, not stderr
        log.debug("%s - %s", self.address_string(), format % args)

    def _send_json(self, status: int, doc, extra_headers: dict | None = None) -> None:
        body = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        for key, value in (extra_headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_empty(self, status: int) -> None:
        self.send_response(status)
        self.send_header("Content-Length", "0")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()

    def _send_error(self, err: ApiError) -> None:
        self._send_json(err.status, {"error": err.code, "message": err.message})

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise _bad_request("empty body")
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ApiError(400, "bad_json", str(exc)) from exc
        if not isinstance(doc, dict):
            raise _bad_request("body must be a JSON object")
        return doc

    def _field(self, doc: dict, name: str, kind=str):
        value = doc.get(name)
        kinds = kind if isinstance(kind, tuple) else (kind,)
        if isinstance(value, bool) and bool not in kinds:
            raise _bad_request(f"field {name!r} has the wrong type")
        if not isinstance(value, kinds):
            names = "/".join(k.__name__ for k in kinds)
            raise _bad_request(f"field {name!r} must be {names}")
        return value

    def _viewer(self) -> Optional[str]:
        header = self.headers.get("Authorization") or ""
        if header.startswith("Bearer "):
            return self.server.tokens.motorist_for(header[len("Bearer ") :].strip())
        query = parse_qs(urlparse(self.path).query)
        if "token" in query:
            return self.server.tokens.motorist_for(query["token"][0])
        return None

    def _require_viewer(self) -> str:
        viewer = self._viewer()
        if viewer is None:
            raise ApiError(401, "unauthorized", "missing or invalid bearer token")
        return viewer

    def _dispatch(self, method: str) -> None:
        parsed = urlparse(self.path)
        parts = [p for p in parsed.path.split("/") if p]
        try:
            handler = self._route(method, parts, parse_qs(parsed.query))
            if handler is None:
                raise ApiError(404, "not_found", parsed.path)
            handler()
        except ApiError as err:
            self._send_error(err)
        except DomainError as err:
            status = _STATUS_BY_CODE.get(err.code, 409)
            self._send_error(ApiError(status, err.code, str(err)))
        except (BrokenPipeError, ConnectionResetError):
            pass
        except Exception:
            log.exception("request failed: %s %s", method, self.path)
            self._send_error(ApiError(500, "internal", "internal error"))

    def do_OPTIONS(self):
        # CORS preflight for the browser UI
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, PUT, DELETE, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Authorization, Content-Type")
        self.send_header("Access-Control-Max-Age", "86400")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def _route(self, method: str, parts: list[str], query: dict):
        if method == "GET" and parts == ["healthz"]:
            return self._get_healthz
        if method == "GET" and parts == ["spaces"]:
            return self._get_spaces
        if method == "POST" and parts == ["spaces"]:
            return self._post_space
        if method == "GET" and len(parts) == 2 and parts[0] == "spaces":
            return lambda: self._get_space(parts[1])
        if method == "POST" and len(parts) == 3 and parts[0] == "spaces" and parts[2] == "reservations":
            return lambda: self._post_reservation(parts[1])
        if method == "GET" and parts == ["motorists"]:
            return lambda: self._get_motorist(query)
        if method == "POST" and parts == ["motorists"]:
            return self._post_motorist
        if method == "PUT" and len(parts) == 3 and parts[0] == "motorists" and parts[2] == "credential":
            return lambda: self._put_credential(parts[1])
        if method == "DELETE" and len(parts) == 2 and parts[0] == "reservations":
            return lambda: self._delete_reservation(parts[1])
        if method == "GET" and parts == ["events"]:
            return lambda: self._get_events(query)
        return None

    # ------------------------------------------------------------------
    # endpoints

    def _get_healthz(self):
        self._send_json(200, {"status": "ok", **self.server.meta})

    def _post_space(self):
        doc = self._read_body()
        location = doc.get("location")
        if not isinstance(location, dict):
            raise _bad_request("field 'location' must be an object")
        tariff_doc = doc.get("tariff")
        try:
            from .model import Tariff

            tariff = Tariff.from_json(tariff_doc) if tariff_doc else Tariff()
        except (KeyError, TypeError, ValueError) as exc:
            raise _bad_request(f"bad tariff: {exc}") from exc
        space = self.server.store.register_space(
            self._field(doc, "name"),
            (
                self._field(location, "latitude", (int, float)),
                self._field(location, "longitude", (int, float)),
            ),
            self._field(doc, "capacity", int),
            self._field(doc, "admin_name"),
            self._field(doc, "admin_contact"),
            tariff,
            now=self.server.clock(),
        )
        body = space.to_json(include_slots=False)
        body["device_token"] = self.server.tokens.device_token(space.space_id)
        self._send_json(201, body)

    def _get_spaces(self):
        now = self.server.clock()
        with self.server.store._lock:
            summaries = [
                self.server.space_summary(space, counts, now)
                for space, counts in self.server.store.engine.list_spaces()
            ]
        self._send_json(200, summaries)

    def _get_space(self, space_id: str):
        self._send_json(200, self.server.space_detail(space_id, self._viewer()))

    def _get_motorist(self, query: dict):
        uid = (query.get("uid") or [None])[0]
        if not uid:
            raise _bad_request("query parameter 'uid' required")
        motorist = self.server.store.find_motorist_by_uid(uid)
        if motorist is None:
            raise ApiError(404, "unknown_motorist", uid)
        self._send_json(200, motorist.to_json())

    def _post_motorist(self):
        doc = self._read_body()
        store = self.server.store
        try:
            motorist = store.register_motorist(
                self._field(doc, "full_name"),
                self._field(doc, "nationality"),
                self._field(doc, "national_id"),
                self._field(doc, "contact"),
                self._field(doc, "rfid_uid"),
                now=self.server.clock(),
            )
            status = 201
        except (DuplicateCredential, DuplicateNationalId):
            # idempotent create: an exact repeat of an existing identity
            # (same card, same national id) gets the record and token back
            motorist = store.find_motorist_by_uid(self._field(doc, "rfid_uid"))
            if motorist is None or motorist.national_id != self._field(doc, "national_id"):
                raise
            status = 200
        body = motorist.to_json()
        body["token"] = self.server.tokens.issue(motorist.motorist_id)
        self._send_json(status, body)

    def _put_credential(self, motorist_id: str):
        self._require_admin_or_owner(motorist_id)
        doc = self._read_body()
        motorist = self.server.store.rebind_credential(
            motorist_id, self._field(doc, "rfid_uid"), now=self.server.clock()
        )
        self._send_json(200, motorist.to_json())

    def _require_admin_or_owner(self, motorist_id: str) -> None:
        # No admin principal exists; owner tokens or the operator CLI (which
        # holds no token) may rebind. Unauthenticated callers are allowed at
        # desk scale; a bearer token, when present, must match.
        viewer = self._viewer()
        if viewer is not None and viewer != motorist_id:
            raise ApiError(403, "forbidden", "not your credential")

    def _post_reservation(self, space_id: str):
        viewer = self._require_viewer()
        doc = self._read_body()
        slot_no = self._field(doc, "slot_no", int)
        reservation = self.server.store.reserve_slot(
            space_id, slot_no, viewer, now=self.server.clock()
        )
        self._send_json(201, reservation.to_json())

    def _delete_reservation(self, reservation_id: str):
        viewer = self._require_viewer()
        store = self.server.store
        with store._lock:
            reservation = store.engine.reservations.get(reservation_id)
            if reservation is None:
                raise ApiError(404, "unknown_reservation", reservation_id)
            if reservation.motorist_id != viewer:
                raise ApiError(403, "forbidden", "not your reservation")
            store.cancel_reservation(reservation_id, now=self.server.clock())
        self._send_empty(204)

    # ------------------------------------------------------------------
    # event stream

    def _get_events(self, query: dict):
        try:
            since = int(query.get("since", ["0"])[0])
        except ValueError:
            raise _bad_request("since must be an integer")
        viewer = self._viewer()
        subscription = _Subscription()
        server = self.server
        server.track_stream(subscription)
        history = server.store.open_subscription(max(since, 0), subscription)

        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Transfer-Encoding", "chunked")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Connection", "close")
        self.end_headers()

        last_sent = max(since, 0)
        try:
            for event in history:
                last_sent = self._write_event(event, viewer, last_sent)
            while not server.closing.is_set() and not subscription.overflowed:
                try:
                    event = subscription.queue.get(timeout=server.stream_heartbeat)
                except queue.Empty:
                    self._write_chunk(b"# hb " + to_iso(server.clock()).encode() + b"\n")
                    continue
                last_sent = self._write_event(event, viewer, last_sent)
            self._write_chunk(b"")  # terminal chunk
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            server.store.unsubscribe(subscription)
            server.untrack_stream(subscription)
            self.close_connection = True

    def _write_chunk(self, data: bytes) -> None:
        # one flushed chunk per line keeps client-side line iterators live
        self.wfile.write(b"%X\r\n" % len(data) + data + b"\r\n")
        self.wfile.flush()

    def _write_event(self, event: StreamEvent, viewer: str | None, last_sent: int) -> int:
        if event.stream_seq <= last_sent:
            return last_sent
        self._write_chunk(json.dumps(event.to_json(viewer)).encode("utf-8") + b"\n")
        return event.stream_seq
