"""Durable, restart-safe facade over the engine.

One writer: every mutating command takes the store lock, sweeps due
reservation expiries, asks the engine for the events, appends them to the
log (flushed before anything else observes them), applies them, and only
then fans out to stream subscribers and returns. Queries share the same
lock briefly and see a consistent snapshot.

Slot-affecting events additionally get a dense `stream_seq` (1, 2, 3 ...)
used by the HTTP push stream for gap-free resumption; registration events
do not appear on that stream.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Optional

from . import events as ev
from .engine import DEFAULT_RESERVATION_TTL, ParkingEngine
from .eventlog import EventLog, read_snapshot, replay, write_snapshot
from .model import COLOR_BY_STATE, to_iso

LOG_FILENAME = "events.log"
SNAPSHOT_GLOB = "snapshot-*.json"


@dataclass(frozen=True)
class StreamEvent:
    """One slot transition as published to API clients."""

    stream_seq: int
    timestamp: datetime
    space_id: str
    slot_no: int
    state: str  # vacant | reserved | occupied
    cause: str  # reserved | cancelled | expired | checked_in | checked_out
    holder_motorist_id: Optional[str]

    def to_json(self, viewer_motorist_id: str | None = None) -> dict:
        return {
            "seq": self.stream_seq,
            "timestamp": to_iso(self.timestamp),
            "space_id": self.space_id,
            "slot_no": self.slot_no,
            "slot": {
                "slot_no": self.slot_no,
                "state": self.state,
                "color": COLOR_BY_STATE[self.state],
                "reserved_by_me": (
                    viewer_motorist_id is not None
                    and self.holder_motorist_id == viewer_motorist_id
                ),
            },
            "cause": self.cause,
        }


class ParkingStore:
    """Engine + log + snapshots + subscriber fan-out.

    With data_dir=None the store runs purely in memory (used by the
    deterministic simulator and by tests); otherwise the directory holds
    events.log and snapshot files, replayed on open.
    """

    def __init__(
        self,
        data_dir: str | Path | None = None,
        *,
        reservation_ttl: timedelta = DEFAULT_RESERVATION_TTL,
        allow_walk_in: bool = False,
        snapshot_every: int | None = 500,
    ):
        self._lock = threading.RLock()
        self._subscribers: list[Callable[[StreamEvent], None]] = []
        self._stream_history: list[StreamEvent] = []
        self._snapshot_every = snapshot_every
        self._engine_kwargs = {
            "reservation_ttl": reservation_ttl,
            "allow_walk_in": allow_walk_in,
        }
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.log: EventLog | None = None
        if self.data_dir is None:
            self.engine = ParkingEngine(**self._engine_kwargs)
        else:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self.log = EventLog(self.data_dir / LOG_FILENAME)
            snapshot = self._latest_snapshot()
            self.engine = replay(self.log.records, snapshot, **self._engine_kwargs)
        # rebuild the stream history so GET /events?since=N replays correctly
        shadow = ParkingEngine(**self._engine_kwargs)
        records = self.log.records if self.log else []
        for record in records:
            shadow.apply_event(record)
            self._project_stream_event(record, shadow)

    def _latest_snapshot(self) -> dict | None:
        candidates = sorted(self.data_dir.glob(SNAPSHOT_GLOB), reverse=True)
        for path in candidates:
            snapshot = read_snapshot(path)  # raises CorruptSnapshot on bad JSON
            if int(snapshot.get("as_of_seq", -1)) <= self.log.last_seq:
                return snapshot
        return None

    # ------------------------------------------------------------------
    # stream plumbing

    def _project_stream_event(self, record: ev.EventRecord, engine: ParkingEngine) -> StreamEvent | None:
        transition = ev.SLOT_TRANSITIONS.get(record.kind)
        if transition is None:
            return None
        cause, _old, new_state = transition
        payload = record.payload
        if record.kind == ev.SLOT_RESERVED:
            holder = payload["motorist_id"]
        elif record.kind == ev.CHECKED_IN:
            motorist = engine.find_motorist_by_uid(payload["rfid_uid"])
            holder = motorist.motorist_id if motorist else None
        else:
            holder = None
        event = StreamEvent(
            stream_seq=len(self._stream_history) + 1,
            timestamp=record.timestamp,
            space_id=payload["space_id"],
            slot_no=int(payload["slot_no"]),
            state=new_state,
            cause=cause,
            holder_motorist_id=holder,
        )
        self._stream_history.append(event)
        return event

    def subscribe(self, callback: Callable[[StreamEvent], None]) -> None:
        """Register a fan-out callback; it runs under the store lock and
        must be quick (enqueue and return)."""
        with self._lock:
            self._subscribers.append(callback)

    def open_subscription(
        self, since: int, callback: Callable[[StreamEvent], None]
    ) -> list[StreamEvent]:
        """Atomically fetch history after `since` and start receiving live
        events; no event can fall between the two."""
        with self._lock:
            history = self._stream_history[since:]
            self._subscribers.append(callback)
            return history

    def unsubscribe(self, callback: Callable[[StreamEvent], None]) -> None:
        with self._lock:
            try:
                self._subscribers.remove(callback)
            except ValueError:
                pass

    def stream_events_since(self, seq: int) -> list[StreamEvent]:
        with self._lock:
            return self._stream_history[seq:]

    @property
    def stream_head(self) -> int:
        with self._lock:
            return len(self._stream_history)

    # ------------------------------------------------------------------
    # command execution

    def _persist(self, pending: list[tuple[str, dict]], now: datetime) -> list[ev.EventRecord]:
        """Append each event durably, apply it, and fan out. Lock held."""
        records = []
        for kind, payload in pending:
            record = ev.EventRecord(
                seq=self.engine.applied_seq + 1, timestamp=now, kind=kind, payload=payload
            )
            if self.log is not None:
                self.log.append(record)
            self.engine.apply_event(record)
            records.append(record)
            stream_event = self._project_stream_event(record, self.engine)
            if stream_event is not None:
                for callback in list(self._subscribers):
                    callback(stream_event)
        if (
            self.log is not None
            and self._snapshot_every
            and self.engine.applied_seq
            and self.engine.applied_seq % self._snapshot_every == 0
        ):
            self.save_snapshot()
        return records

    def _sweep(self, now: datetime) -> list[str]:
        pending = self.engine.decide_expire(now)
        self._persist(pending, now)
        return [payload["reservation_id"] for _, payload in pending]

    def register_space(self, name, location, capacity, admin_name, admin_contact, tariff, *, now):
        with self._lock:
            pending = self.engine.decide_register_space(
                name, location, capacity, admin_name, admin_contact, tariff
            )
            self._persist(pending, now)
            return self.engine.spaces[pending[0][1]["space_id"]]

    def register_motorist(self, full_name, nationality, national_id, contact, rfid_uid, *, now):
        with self._lock:
            pending = self.engine.decide_register_motorist(
                full_name, nationality, national_id, contact, rfid_uid
            )
            self._persist(pending, now)
            return self.engine.motorists[pending[0][1]["motorist_id"]]

    def rebind_credential(self, motorist_id, new_uid, *, now):
        with self._lock:
            self._sweep(now)
            pending = self.engine.decide_rebind_credential(motorist_id, new_uid)
            self._persist(pending, now)
            return self.engine.motorists[motorist_id]

    def reserve_slot(self, space_id, slot_no, motorist_id, *, now):
        with self._lock:
            self._sweep(now)
            pending = self.engine.decide_reserve(space_id, slot_no, motorist_id, now)
            self._persist(pending, now)
            return self.engine.reservations[pending[0][1]["reservation_id"]]

    def cancel_reservation(self, reservation_id, *, now):
        with self._lock:
            self._sweep(now)
            self._persist(self.engine.decide_cancel(reservation_id, now), now)

    def expire_due(self, *, now) -> list[str]:
        with self._lock:
            return self._sweep(now)

    def check_in(self, space_id, rfid_uid, *, now):
        with self._lock:
            self._sweep(now)
            decision, pending = self.engine.decide_check_in(space_id, rfid_uid, now)
            self._persist(pending, now)
            session = self.engine.sessions[pending[0][1]["session_id"]] if pending else None
            return decision, session

    def check_out(self, space_id, rfid_uid, *, now):
        with self._lock:
            self._sweep(now)
            decision, pending = self.engine.decide_check_out(space_id, rfid_uid, now)
            self._persist(pending, now)
            session = self.engine.sessions[pending[0][1]["session_id"]] if pending else None
            return decision, session

    # ------------------------------------------------------------------
    # queries

    def find_motorist_by_uid(self, rfid_uid):
        with self._lock:
            return self.engine.find_motorist_by_uid(rfid_uid)

    def active_claim(self, rfid_uid, space_id):
        with self._lock:
            return self.engine.active_claim(rfid_uid, space_id)

    def list_spaces(self):
        with self._lock:
            return self.engine.list_spaces()

    def get_space(self, space_id):
        with self._lock:
            return self.engine.spaces.get(space_id)

    def availability(self, space_id):
        with self._lock:
            return self.engine.availability(space_id)

    # ------------------------------------------------------------------

    def save_snapshot(self) -> Path | None:
        if self.data_dir is None:
            return None
        with self._lock:
            path = self.data_dir / f"snapshot-{self.engine.applied_seq:012d}.json"
            return write_snapshot(path, self.engine)

    def close(self) -> None:
        if self.log is not None:
            self.log.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
