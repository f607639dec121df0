"""Slot-lifecycle state machine and reservation engine.

Pure logic, no I/O: every mutation is decided against the current state,
expressed as one or more event records, then applied. `decide_*` methods
validate and build events without touching state; `apply_event` is the
only mutator. The convenience wrappers (register_space, reserve_slot, ...)
do decide+apply in one step for in-memory use; the durable store interleaves
its log append between the two.

All operations take `now` explicitly; the engine never reads a clock.
"""

from __future__ import annotations

from datetime import datetime, timedelta

from . import events as ev
from .model import (
    Accepted,
    ActiveClaimExists,
    AuthDecision,
    DuplicateCredential,
    DuplicateNationalId,
    GateAction,
    InvalidCapacity,
    MalformedUid,
    Motorist,
    MotoristHasActiveClaim,
    NotActive,
    Occupied,
    ParkingSession,
    ParkingSpace,
    Rejected,
    RejectReason,
    Reservation,
    ReservationStatus,
    Reserved,
    SlotNotVacant,
    Tariff,
    UnknownMotorist,
    UnknownReservation,
    UnknownSlot,
    UnknownSpace,
    VACANT,
    Vacant,
    canonical_uid,
    compute_fee,
    from_iso,
    to_iso,
    validate_coordinates,
)

DEFAULT_RESERVATION_TTL = timedelta(minutes=30)

PendingEvent = tuple[str, dict]


def _id_suffix(entity_id: str) -> int:
    try:
        return int(entity_id.rsplit("-", 1)[1])
    except (IndexError, ValueError):
        return 0


class ParkingEngine:
    def __init__(
        self,
        *,
        reservation_ttl: timedelta = DEFAULT_RESERVATION_TTL,
        allow_walk_in: bool = False,
    ):
        self.reservation_ttl = reservation_ttl
        self.allow_walk_in = allow_walk_in
        self.applied_seq = 0
        self.spaces: dict[str, ParkingSpace] = {}
        self.motorists: dict[str, Motorist] = {}
        self.reservations: dict[str, Reservation] = {}
        self.sessions: dict[str, ParkingSession] = {}
        # lookup indexes, all derivable from the entity maps
        self._motorist_by_uid: dict[str, str] = {}
        self._motorist_by_national_id: dict[str, str] = {}
        self._active_reservation_by_uid: dict[str, str] = {}
        self._open_session_by_uid: dict[str, str] = {}
        self._last_reservation_at: dict[tuple[str, str], str] = {}
        self._counters = {"sp": 0, "mo": 0, "rv": 0, "se": 0}

    # ------------------------------------------------------------------
    # decisions: validate and describe, never mutate

    def decide_register_space(
        self,
        name: str,
        location: tuple[float, float],
        capacity: int,
        admin_name: str,
        admin_contact: str,
        tariff: Tariff,
    ) -> list[PendingEvent]:
        if not isinstance(capacity, int) or capacity < 1:
            raise InvalidCapacity(f"capacity must be a positive integer, got {capacity!r}")
        latitude, longitude = location
        validate_coordinates(latitude, longitude)
        space_id = self._peek_id("sp")
        payload = {
            "space_id": space_id,
            "name": name,
            "location": {"latitude": float(latitude), "longitude": float(longitude)},
            "capacity": capacity,
            "admin_name": admin_name,
            "admin_contact": admin_contact,
            "tariff": tariff.to_json(),
        }
        return [(ev.SPACE_REGISTERED, payload)]

    def decide_register_motorist(
        self,
        full_name: str,
        nationality: str,
        national_id: str,
        contact: str,
        rfid_uid: str,
    ) -> list[PendingEvent]:
        uid = canonical_uid(rfid_uid)
        if not national_id:
            raise DuplicateNationalId("national_id must be non-empty")
        if uid in self._motorist_by_uid:
            raise DuplicateCredential(f"uid {uid} already bound")
        if national_id in self._motorist_by_national_id:
            raise DuplicateNationalId(f"national id {national_id!r} already registered")
        payload = {
            "motorist_id": self._peek_id("mo"),
            "full_name": full_name,
            "nationality": nationality,
            "national_id": national_id,
            "contact": contact,
            "rfid_uid": uid,
        }
        return [(ev.MOTORIST_REGISTERED, payload)]

    def decide_rebind_credential(self, motorist_id: str, new_uid: str) -> list[PendingEvent]:
        motorist = self.motorists.get(motorist_id)
        if motorist is None:
            raise UnknownMotorist(motorist_id)
        uid = canonical_uid(new_uid)
        if uid == motorist.rfid_uid:
            raise DuplicateCredential(f"uid {uid} already bound to this motorist")
        if uid in self._motorist_by_uid:
            raise DuplicateCredential(f"uid {uid} already bound")
        old_uid = motorist.rfid_uid
        if old_uid in self._active_reservation_by_uid or old_uid in self._open_session_by_uid:
            raise ActiveClaimExists("cannot rebind while a reservation or session is active")
        return [
            (
                ev.CREDENTIAL_REBOUND,
                {"motorist_id": motorist_id, "old_uid": old_uid, "new_uid": uid},
            )
        ]

    def decide_reserve(
        self, space_id: str, slot_no: int, motorist_id: str, now: datetime
    ) -> list[PendingEvent]:
        space = self._require_space(space_id)
        motorist = self.motorists.get(motorist_id)
        if motorist is None:
            raise UnknownMotorist(motorist_id)
        if not isinstance(slot_no, int) or not 1 <= slot_no <= space.capacity:
            raise UnknownSlot(f"slot {slot_no!r} out of 1..{space.capacity}")
        uid = motorist.rfid_uid
        if uid in self._active_reservation_by_uid or uid in self._open_session_by_uid:
            raise MotoristHasActiveClaim(f"{motorist_id} already holds a claim")
        if not isinstance(space.slot(slot_no), Vacant):
            raise SlotNotVacant(f"slot {slot_no} of {space_id} is not vacant")
        reservation = Reservation(
            reservation_id=self._peek_id("rv"),
            space_id=space_id,
            slot_no=slot_no,
            motorist_id=motorist_id,
            rfid_uid=uid,
            reserved_at=now,
            expires_at=now + self.reservation_ttl,
        )
        return [(ev.SLOT_RESERVED, reservation.to_json())]

    def decide_cancel(self, reservation_id: str, now: datetime) -> list[PendingEvent]:
        reservation = self.reservations.get(reservation_id)
        if reservation is None:
            raise UnknownReservation(reservation_id)
        if reservation.status is not ReservationStatus.ACTIVE:
            raise NotActive(f"{reservation_id} is {reservation.status.value}")
        payload = {
            "reservation_id": reservation_id,
            "space_id": reservation.space_id,
            "slot_no": reservation.slot_no,
            "cancelled_at": to_iso(now),
        }
        return [(ev.RESERVATION_CANCELLED, payload)]

    def decide_expire(self, now: datetime) -> list[PendingEvent]:
        """One ReservationExpired record per active reservation with
        expires_at <= now (inclusive boundary)."""
        pending = []
        for reservation in self.reservations.values():
            if reservation.status is ReservationStatus.ACTIVE and reservation.expires_at <= now:
                pending.append(
                    (
                        ev.RESERVATION_EXPIRED,
                        {
                            "reservation_id": reservation.reservation_id,
                            "space_id": reservation.space_id,
                            "slot_no": reservation.slot_no,
                            "expired_at": to_iso(now),
                        },
                    )
                )
        return pending

    def decide_check_in(
        self, space_id: str, rfid_uid: str, now: datetime
    ) -> tuple[AuthDecision, list[PendingEvent]]:
        """Gate entry. Credential problems become Rejected decisions, never
        exceptions; only an unknown space raises."""
        space = self._require_space(space_id)
        try:
            uid = canonical_uid(rfid_uid)
        except MalformedUid:
            return Rejected(RejectReason.UNKNOWN_CARD), []
        motorist_id = self._motorist_by_uid.get(uid)
        if motorist_id is None:
            return Rejected(RejectReason.UNKNOWN_CARD), []

        session_id = self._open_session_by_uid.get(uid)
        if session_id is not None and self.sessions[session_id].space_id == space_id:
            return Rejected(RejectReason.ALREADY_INSIDE), []

        reservation_id = self._active_reservation_by_uid.get(uid)
        reservation = self.reservations.get(reservation_id) if reservation_id else None
        if reservation is not None and reservation.space_id == space_id:
            if reservation.expires_at <= now:
                # rejection carries no state change; expiry itself is the
                # expire_reservations sweep's job
                return Rejected(RejectReason.RESERVATION_EXPIRED), []
            session = ParkingSession(
                session_id=self._peek_id("se"),
                reservation_id=reservation.reservation_id,
                space_id=space_id,
                slot_no=reservation.slot_no,
                rfid_uid=uid,
                entry_at=now,
            )
            return Accepted(GateAction.OPEN_ENTRY), [(ev.CHECKED_IN, session.to_json())]

        last_id = self._last_reservation_at.get((uid, space_id))
        if (
            last_id is not None
            and self.reservations[last_id].status is ReservationStatus.EXPIRED
        ):
            return Rejected(RejectReason.RESERVATION_EXPIRED), []

        if self.allow_walk_in and session_id is None and reservation is None:
            slot_no = next(
                (
                    no
                    for no in range(1, space.capacity + 1)
                    if isinstance(space.slot(no), Vacant)
                ),
                None,
            )
            if slot_no is not None:
                session = ParkingSession(
                    session_id=self._peek_id("se"),
                    reservation_id=None,
                    space_id=space_id,
                    slot_no=slot_no,
                    rfid_uid=uid,
                    entry_at=now,
                )
                return Accepted(GateAction.OPEN_ENTRY), [(ev.CHECKED_IN, session.to_json())]

        return Rejected(RejectReason.NO_RESERVATION), []

    def decide_check_out(
        self, space_id: str, rfid_uid: str, now: datetime
    ) -> tuple[AuthDecision, list[PendingEvent]]:
        space = self._require_space(space_id)
        try:
            uid = canonical_uid(rfid_uid)
        except MalformedUid:
            return Rejected(RejectReason.UNKNOWN_CARD), []
        session_id = self._open_session_by_uid.get(uid)
        session = self.sessions.get(session_id) if session_id else None
        if session is not None and session.space_id == space_id:
            fee = compute_fee(space.tariff, session.entry_at, now)
            payload = {
                "session_id": session.session_id,
                "space_id": space_id,
                "slot_no": session.slot_no,
                "rfid_uid": uid,
                "exit_at": to_iso(now),
                "fee": fee,
            }
            return Accepted(GateAction.OPEN_EXIT), [(ev.CHECKED_OUT, payload)]
        if uid not in self._motorist_by_uid:
            return Rejected(RejectReason.UNKNOWN_CARD), []
        return Rejected(RejectReason.NOT_INSIDE), []

    # ------------------------------------------------------------------
    # application: the single mutator

    def apply_event(self, record: ev.EventRecord) -> None:
        if record.seq != self.applied_seq + 1:
            raise ValueError(f"event seq {record.seq} does not follow {self.applied_seq}")
        handler = self._APPLIERS[record.kind]
        handler(self, record.payload)
        self.applied_seq = record.seq

    def _apply_space_registered(self, payload: dict) -> None:
        space = ParkingSpace.from_json(payload)
        self.spaces[space.space_id] = space
        self._bump("sp", space.space_id)

    def _apply_motorist_registered(self, payload: dict) -> None:
        motorist = Motorist.from_json(payload)
        self.motorists[motorist.motorist_id] = motorist
        self._motorist_by_uid[motorist.rfid_uid] = motorist.motorist_id
        self._motorist_by_national_id[motorist.national_id] = motorist.motorist_id
        self._bump("mo", motorist.motorist_id)

    def _apply_credential_rebound(self, payload: dict) -> None:
        motorist = self.motorists[payload["motorist_id"]]
        del self._motorist_by_uid[payload["old_uid"]]
        motorist.rfid_uid = payload["new_uid"]
        self._motorist_by_uid[motorist.rfid_uid] = motorist.motorist_id

    def _apply_slot_reserved(self, payload: dict) -> None:
        reservation = Reservation.from_json(payload)
        self.reservations[reservation.reservation_id] = reservation
        space = self.spaces[reservation.space_id]
        space.set_slot(
            reservation.slot_no,
            Reserved(
                reservation_id=reservation.reservation_id,
                reserved_at=reservation.reserved_at,
                expires_at=reservation.expires_at,
            ),
        )
        self._active_reservation_by_uid[reservation.rfid_uid] = reservation.reservation_id
        self._last_reservation_at[(reservation.rfid_uid, reservation.space_id)] = (
            reservation.reservation_id
        )
        self._bump("rv", reservation.reservation_id)

    def _release_reservation(self, payload: dict, status: ReservationStatus) -> None:
        reservation = self.reservations[payload["reservation_id"]]
        reservation.status = status
        self.spaces[reservation.space_id].set_slot(reservation.slot_no, VACANT)
        self._active_reservation_by_uid.pop(reservation.rfid_uid, None)

    def _apply_reservation_cancelled(self, payload: dict) -> None:
        self._release_reservation(payload, ReservationStatus.CANCELLED)

    def _apply_reservation_expired(self, payload: dict) -> None:
        self._release_reservation(payload, ReservationStatus.EXPIRED)

    def _apply_checked_in(self, payload: dict) -> None:
        session = ParkingSession.from_json(payload)
        self.sessions[session.session_id] = session
        if session.reservation_id is not None:
            reservation = self.reservations[session.reservation_id]
            reservation.status = ReservationStatus.CONVERTED
            self._active_reservation_by_uid.pop(reservation.rfid_uid, None)
        self.spaces[session.space_id].set_slot(
            session.slot_no,
            Occupied(session_id=session.session_id, checked_in_at=session.entry_at),
        )
        self._open_session_by_uid[session.rfid_uid] = session.session_id
        self._bump("se", session.session_id)

    def _apply_checked_out(self, payload: dict) -> None:
        session = self.sessions[payload["session_id"]]
        session.exit_at = from_iso(payload["exit_at"])
        session.fee = int(payload["fee"])
        self.spaces[session.space_id].set_slot(session.slot_no, VACANT)
        self._open_session_by_uid.pop(session.rfid_uid, None)

    _APPLIERS = {
        ev.SPACE_REGISTERED: _apply_space_registered,
        ev.MOTORIST_REGISTERED: _apply_motorist_registered,
        ev.CREDENTIAL_REBOUND: _apply_credential_rebound,
        ev.SLOT_RESERVED: _apply_slot_reserved,
        ev.RESERVATION_CANCELLED: _apply_reservation_cancelled,
        ev.RESERVATION_EXPIRED: _apply_reservation_expired,
        ev.CHECKED_IN: _apply_checked_in,
        ev.CHECKED_OUT: _apply_checked_out,
    }

    # ------------------------------------------------------------------
    # convenience command surface (decide + apply in memory)

    def _commit(self, pending: list[PendingEvent], now: datetime) -> list[ev.EventRecord]:
        records = []
        for kind, payload in pending:
            record = ev.EventRecord(
                seq=self.applied_seq + 1, timestamp=now, kind=kind, payload=payload
            )
            self.apply_event(record)
            records.append(record)
        return records

    def register_space(
        self,
        name: str,
        location: tuple[float, float],
        capacity: int,
        admin_name: str,
        admin_contact: str,
        tariff: Tariff,
        *,
        now: datetime,
    ) -> ParkingSpace:
        pending = self.decide_register_space(
            name, location, capacity, admin_name, admin_contact, tariff
        )
        self._commit(pending, now)
        return self.spaces[pending[0][1]["space_id"]]

    def register_motorist(
        self,
        full_name: str,
        nationality: str,
        national_id: str,
        contact: str,
        rfid_uid: str,
        *,
        now: datetime,
    ) -> Motorist:
        pending = self.decide_register_motorist(
            full_name, nationality, national_id, contact, rfid_uid
        )
        self._commit(pending, now)
        return self.motorists[pending[0][1]["motorist_id"]]

    def rebind_credential(self, motorist_id: str, new_uid: str, *, now: datetime) -> Motorist:
        pending = self.decide_rebind_credential(motorist_id, new_uid)
        self._commit(pending, now)
        return self.motorists[motorist_id]

    def reserve_slot(
        self, space_id: str, slot_no: int, motorist_id: str, *, now: datetime
    ) -> Reservation:
        pending = self.decide_reserve(space_id, slot_no, motorist_id, now)
        self._commit(pending, now)
        return self.reservations[pending[0][1]["reservation_id"]]

    def cancel_reservation(self, reservation_id: str, *, now: datetime) -> None:
        self._commit(self.decide_cancel(reservation_id, now), now)

    def expire_reservations(self, *, now: datetime) -> list[str]:
        pending = self.decide_expire(now)
        self._commit(pending, now)
        return [payload["reservation_id"] for _, payload in pending]

    def check_in(
        self, space_id: str, rfid_uid: str, *, now: datetime
    ) -> tuple[AuthDecision, ParkingSession | None]:
        decision, pending = self.decide_check_in(space_id, rfid_uid, now)
        self._commit(pending, now)
        session = self.sessions[pending[0][1]["session_id"]] if pending else None
        return decision, session

    def check_out(
        self, space_id: str, rfid_uid: str, *, now: datetime
    ) -> tuple[AuthDecision, ParkingSession | None]:
        decision, pending = self.decide_check_out(space_id, rfid_uid, now)
        self._commit(pending, now)
        session = self.sessions[pending[0][1]["session_id"]] if pending else None
        return decision, session

    # ------------------------------------------------------------------
    # queries

    def availability(self, space_id: str) -> tuple[int, int, int]:
        """(vacant, reserved, occupied) recomputed from slot states."""
        return self._require_space(space_id).counts()

    def find_motorist_by_uid(self, rfid_uid: str) -> Motorist | None:
        try:
            uid = canonical_uid(rfid_uid)
        except MalformedUid:
            return None
        motorist_id = self._motorist_by_uid.get(uid)
        return self.motorists[motorist_id] if motorist_id else None

    def active_claim(self, rfid_uid: str, space_id: str):
        """The active Reservation or open ParkingSession at a space, if any."""
        try:
            uid = canonical_uid(rfid_uid)
        except MalformedUid:
            return None
        session_id = self._open_session_by_uid.get(uid)
        if session_id is not None and self.sessions[session_id].space_id == space_id:
            return self.sessions[session_id]
        reservation_id = self._active_reservation_by_uid.get(uid)
        if reservation_id is not None:
            reservation = self.reservations[reservation_id]
            if reservation.space_id == space_id:
                return reservation
        return None

    def list_spaces(self) -> list[tuple[ParkingSpace, tuple[int, int, int]]]:
        return [(space, space.counts()) for space in self.spaces.values()]

    def holder_of(self, space_id: str, slot_no: int) -> str | None:
        """Motorist currently holding a slot (via reservation or session)."""
        state = self.spaces[space_id].slot(slot_no)
        if isinstance(state, Reserved):
            return self.reservations[state.reservation_id].motorist_id
        if isinstance(state, Occupied):
            uid = self.sessions[state.session_id].rfid_uid
            motorist_id = self._motorist_by_uid.get(uid)
            return motorist_id
        return None

    # ------------------------------------------------------------------
    # integrity and snapshot support

    def verify_integrity(self) -> None:
        """Cross-check indexes, exclusivity and conservation; raises AssertionError."""
        for space in self.spaces.values():
            vacant, reserved, occupied = space.counts()
            assert vacant + reserved + occupied == space.capacity, space.space_id
            assert len(space.slots) == space.capacity
        active_slots = set()
        for reservation in self.reservations.values():
            if reservation.status is ReservationStatus.ACTIVE:
                key = (reservation.space_id, reservation.slot_no)
                assert key not in active_slots, f"two active reservations on {key}"
                active_slots.add(key)
                state = self.spaces[reservation.space_id].slot(reservation.slot_no)
                assert isinstance(state, Reserved)
                assert state.reservation_id == reservation.reservation_id
        claims: dict[str, int] = {}
        for uid, reservation_id in self._active_reservation_by_uid.items():
            assert self.reservations[reservation_id].status is ReservationStatus.ACTIVE
            claims[uid] = claims.get(uid, 0) + 1
        for uid, session_id in self._open_session_by_uid.items():
            assert self.sessions[session_id].open
            claims[uid] = claims.get(uid, 0) + 1
        for uid, count in claims.items():
            assert count <= 1, f"{uid} holds {count} claims"

    def entities(self) -> dict:
        return {
            "spaces": list(self.spaces.values()),
            "motorists": list(self.motorists.values()),
            "reservations": list(self.reservations.values()),
            "sessions": list(self.sessions.values()),
        }

    @classmethod
    def from_entities(
        cls,
        spaces: list[ParkingSpace],
        motorists: list[Motorist],
        reservations: list[Reservation],
        sessions: list[ParkingSession],
        applied_seq: int,
        *,
        reservation_ttl: timedelta = DEFAULT_RESERVATION_TTL,
        allow_walk_in: bool = False,
    ) -> "ParkingEngine":
        engine = cls(reservation_ttl=reservation_ttl, allow_walk_in=allow_walk_in)
        engine.applied_seq = applied_seq
        for space in spaces:
            engine.spaces[space.space_id] = space
            engine._bump("sp", space.space_id)
        for motorist in motorists:
            engine.motorists[motorist.motorist_id] = motorist
            engine._motorist_by_uid[motorist.rfid_uid] = motorist.motorist_id
            engine._motorist_by_national_id[motorist.national_id] = motorist.motorist_id
            engine._bump("mo", motorist.motorist_id)
        for reservation in sorted(reservations, key=lambda r: _id_suffix(r.reservation_id)):
            engine.reservations[reservation.reservation_id] = reservation
            engine._bump("rv", reservation.reservation_id)
            engine._last_reservation_at[(reservation.rfid_uid, reservation.space_id)] = (
                reservation.reservation_id
            )
            if reservation.status is ReservationStatus.ACTIVE:
                engine._active_reservation_by_uid[reservation.rfid_uid] = (
                    reservation.reservation_id
                )
        for session in sorted(sessions, key=lambda s: _id_suffix(s.session_id)):
            engine.sessions[session.session_id] = session
            engine._bump("se", session.session_id)
            if session.open:
                engine._open_session_by_uid[session.rfid_uid] = session.session_id
        return engine

    # ------------------------------------------------------------------

    def _require_space(self, space_id: str) -> ParkingSpace:
        space = self.spaces.get(space_id)
        if space is None:
            raise UnknownSpace(space_id)
        return space

    def _peek_id(self, prefix: str) -> str:
        return f"{prefix}-{self._counters[prefix] + 1:06d}"

    def _bump(self, prefix: str, entity_id: str) -> None:
        self._counters[prefix] = max(self._counters[prefix], _id_suffix(entity_id))
