"""Event records shared by the engine, the log and the push stream.

Every state mutation is described by exactly one EventRecord; replaying
records 1..n from an empty engine reproduces the state after the original
operations. Slot-affecting records additionally project to StateChange
entries, which feed the HTTP event stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

from .model import from_iso, to_iso

SPACE_REGISTERED = "SpaceRegistered"
MOTORIST_REGISTERED = "MotoristRegistered"
CREDENTIAL_REBOUND = "CredentialRebound"
SLOT_RESERVED = "SlotReserved"
RESERVATION_CANCELLED = "ReservationCancelled"
RESERVATION_EXPIRED = "ReservationExpired"
CHECKED_IN = "CheckedIn"
CHECKED_OUT = "CheckedOut"

EVENT_KINDS = frozenset(
    {
        SPACE_REGISTERED,
        MOTORIST_REGISTERED,
        CREDENTIAL_REBOUND,
        SLOT_RESERVED,
        RESERVATION_CANCELLED,
        RESERVATION_EXPIRED,
        CHECKED_IN,
        CHECKED_OUT,
    }
)

# kind -> (cause, old slot state, new slot state) for slot-affecting records
SLOT_TRANSITIONS = {
    SLOT_RESERVED: ("reserved", "vacant", "reserved"),
    RESERVATION_CANCELLED: ("cancelled", "reserved", "vacant"),
    RESERVATION_EXPIRED: ("expired", "reserved", "vacant"),
    CHECKED_IN: ("checked_in", "reserved", "occupied"),
    CHECKED_OUT: ("checked_out", "occupied", "vacant"),
}


@dataclass(frozen=True)
class EventRecord:
    seq: int
    timestamp: datetime
    kind: str
    payload: dict

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "payload": self.payload,
            "seq": self.seq,
            "timestamp": to_iso(self.timestamp),
        }

    @classmethod
    def from_json(cls, data: dict) -> "EventRecord":
        kind = data["kind"]
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        return cls(
            seq=int(data["seq"]),
            timestamp=from_iso(data["timestamp"]),
            kind=kind,
            payload=data["payload"],
        )


@dataclass(frozen=True)
class StateChange:
    """One slot transition, as consumed by the push stream and the UI."""

    space_id: str
    slot_no: int
    old_state: str
    new_state: str
    cause: str
    timestamp: datetime
    # motorist currently holding the slot (None once it is vacant again);
    # lets the API render reserved_by_me per authenticated subscriber.
    holder_motorist_id: str | None = None


def state_change_of(record: EventRecord, holder_motorist_id: str | None) -> StateChange | None:
    """Project an event record onto a slot transition, if it has one."""
    transition = SLOT_TRANSITIONS.get(record.kind)
    if transition is None:
        return None
    cause, old_state, new_state = transition
    return StateChange(
        space_id=record.payload["space_id"],
        slot_no=int(record.payload["slot_no"]),
        old_state=old_state,
        new_state=new_state,
        cause=cause,
        timestamp=record.timestamp,
        holder_motorist_id=holder_motorist_id,
    )
