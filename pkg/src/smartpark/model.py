"""Domain model for the parking platform.

Pure data types and pure functions only: slot lifecycle states, registry
entities, gate decisions, fee arithmetic and the canonical credential
format. No I/O, no clocks; every timestamp comes in as an argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Optional, Union

# Slot rendering used by the HTTP layer and the web UI: one color per state.
COLOR_BY_STATE = {"vacant": "green", "reserved": "orange", "occupied": "red"}

# Gate display strings. The cloud issues GRANTED/DENIED; TRY_AGAIN is what an
# edge node shows when it cannot reach the cloud (fail-closed), WELCOME is the
# idle text.
DISPLAY_GRANTED = "ACCESS GRANTED"
DISPLAY_DENIED = "ACCESS DENIED"
DISPLAY_TRY_AGAIN = "TRY AGAIN"
DISPLAY_WELCOME = "WELCOME"

_UID_SEPARATORS = str.maketrans("", "", ":- \t")


class DomainError(Exception):
    """Base class for rule violations; `code` is stable across interfaces."""

    code = "domain_error"

    def __init__(self, message: str | None = None):
        super().__init__(message or self.code)


class InvalidCapacity(DomainError):
    code = "invalid_capacity"


class InvalidCoordinates(DomainError):
    code = "invalid_coordinates"


class MalformedUid(DomainError):
    code = "malformed_uid"


class DuplicateCredential(DomainError):
    code = "duplicate_credential"


class DuplicateNationalId(DomainError):
    code = "duplicate_national_id"


class UnknownSpace(DomainError):
    code = "unknown_space"


class UnknownSlot(DomainError):
    code = "unknown_slot"


class UnknownMotorist(DomainError):
    code = "unknown_motorist"


class UnknownReservation(DomainError):
    code = "unknown_reservation"


class SlotNotVacant(DomainError):
    code = "slot_not_vacant"


class MotoristHasActiveClaim(DomainError):
    code = "motorist_has_active_claim"


class NotActive(DomainError):
    code = "not_active"


class ActiveClaimExists(DomainError):
    code = "active_claim_exists"


class NegativeDuration(DomainError):
    code = "negative_duration"


def canonical_uid(raw: str) -> str:
    """Normalize an RFID UID to uppercase hex without separators.

    Accepts 4 to 10 byte identifiers, optionally separated by colons,
    dashes or spaces. Raises MalformedUid for anything else.
    """
    if not isinstance(raw, str):
        raise MalformedUid("uid must be a string")
    stripped = raw.translate(_UID_SEPARATORS)
    if len(stripped) % 2 != 0:
        raise MalformedUid(f"odd-length hex uid: {raw!r}")
    nbytes = len(stripped) // 2
    if not 4 <= nbytes <= 10:
        raise MalformedUid(f"uid must be 4-10 bytes, got {nbytes}")
    try:
        bytes.fromhex(stripped)
    except ValueError:
        raise MalformedUid(f"non-hex uid: {raw!r}") from None
    return stripped.upper()


def to_iso(ts: datetime) -> str:
    """Render a timestamp as ISO-8601 UTC with trailing Z, microsecond precision."""
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def from_iso(text: str) -> datetime:
    """Parse ISO-8601, accepting both 'Z' and explicit offsets."""
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass(frozen=True)
class Tariff:
    """Pricing of one parking space. Money is integer minor units."""

    free: bool = True
    rate_per_unit: int = 0
    billing_unit_minutes: int = 15
    free_minutes: int = 0
    currency: str = "UGX"  # uninterpreted metadata

    def __post_init__(self):
        if self.rate_per_unit < 0:
            raise ValueError("rate_per_unit must be >= 0")
        if self.billing_unit_minutes <= 0:
            raise ValueError("billing_unit_minutes must be > 0")
        if self.free_minutes < 0:
            raise ValueError("free_minutes must be >= 0")

    def to_json(self) -> dict:
        return {
            "free": self.free,
            "rate_per_unit": self.rate_per_unit,
            "billing_unit_minutes": self.billing_unit_minutes,
            "free_minutes": self.free_minutes,
            "currency": self.currency,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Tariff":
        return cls(
            free=bool(data["free"]),
            rate_per_unit=int(data["rate_per_unit"]),
            billing_unit_minutes=int(data["billing_unit_minutes"]),
            free_minutes=int(data["free_minutes"]),
            currency=str(data.get("currency", "UGX")),
        )


@dataclass(frozen=True)
class Vacant:
    kind = "vacant"

    def to_json(self) -> dict:
        return {"state": "vacant"}


@dataclass(frozen=True)
class Reserved:
    kind = "reserved"
    reservation_id: str
    reserved_at: datetime
    expires_at: datetime

    def to_json(self) -> dict:
        return {
            "state": "reserved",
            "reservation_id": self.reservation_id,
            "reserved_at": to_iso(self.reserved_at),
            "expires_at": to_iso(self.expires_at),
        }


@dataclass(frozen=True)
class Occupied:
    kind = "occupied"
    session_id: str
    checked_in_at: datetime

    def to_json(self) -> dict:
        return {
            "state": "occupied",
            "session_id": self.session_id,
            "checked_in_at": to_iso(self.checked_in_at),
        }


SlotState = Union[Vacant, Reserved, Occupied]

VACANT = Vacant()


def slot_state_from_json(data: dict) -> SlotState:
    state = data["state"]
    if state == "vacant":
        return VACANT
    if state == "reserved":
        return Reserved(
            reservation_id=data["reservation_id"],
            reserved_at=from_iso(data["reserved_at"]),
            expires_at=from_iso(data["expires_at"]),
        )
    if state == "occupied":
        return Occupied(
            session_id=data["session_id"],
            checked_in_at=from_iso(data["checked_in_at"]),
        )
    raise ValueError(f"unknown slot state {state!r}")


@dataclass
class ParkingSpace:
    """A registered lot with a fixed array of slots, indexed 1..capacity."""

    space_id: str
    name: str
    latitude: float
    longitude: float
    capacity: int
    admin_name: str
    admin_contact: str
    tariff: Tariff
    slots: list = field(default_factory=list)  # list[SlotState], 0-based storage

    def slot(self, slot_no: int) -> SlotState:
        if not 1 <= slot_no <= self.capacity:
            raise UnknownSlot(f"slot {slot_no} out of 1..{self.capacity}")
        return self.slots[slot_no - 1]

    def set_slot(self, slot_no: int, state: SlotState) -> None:
        if not 1 <= slot_no <= self.capacity:
            raise UnknownSlot(f"slot {slot_no} out of 1..{self.capacity}")
        self.slots[slot_no - 1] = state

    def counts(self) -> tuple[int, int, int]:
        """(vacant, reserved, occupied), recomputed by scanning slot states."""
        reserved = sum(1 for s in self.slots if isinstance(s, Reserved))
        occupied = sum(1 for s in self.slots if isinstance(s, Occupied))
        return self.capacity - reserved - occupied, reserved, occupied

    def to_json(self, include_slots: bool = True) -> dict:
        data = {
            "space_id": self.space_id,
            "name": self.name,
            "location": {"latitude": self.latitude, "longitude": self.longitude},
            "capacity": self.capacity,
            "admin_name": self.admin_name,
            "admin_contact": self.admin_contact,
            "tariff": self.tariff.to_json(),
        }
        if include_slots:
            data["slots"] = [s.to_json() for s in self.slots]
        return data

    @classmethod
    def from_json(cls, data: dict) -> "ParkingSpace":
        space = cls(
            space_id=data["space_id"],
            name=data["name"],
            latitude=float(data["location"]["latitude"]),
            longitude=float(data["location"]["longitude"]),
            capacity=int(data["capacity"]),
            admin_name=data["admin_name"],
            admin_contact=data["admin_contact"],
            tariff=Tariff.from_json(data["tariff"]),
        )
        if "slots" in data:
            space.slots = [slot_state_from_json(s) for s in data["slots"]]
        else:
            space.slots = [VACANT] * space.capacity
        return space


@dataclass
class Motorist:
    motorist_id: str
    full_name: str
    nationality: str
    national_id: str
    contact: str
    rfid_uid: str  # canonical uppercase hex

    def to_json(self) -> dict:
        return {
            "motorist_id": self.motorist_id,
            "full_name": self.full_name,
            "nationality": self.nationality,
            "national_id": self.national_id,
            "contact": self.contact,
            "rfid_uid": self.rfid_uid,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Motorist":
        return cls(
            motorist_id=data["motorist_id"],
            full_name=data["full_name"],
            nationality=data["nationality"],
            national_id=data["national_id"],
            contact=data["contact"],
            rfid_uid=data["rfid_uid"],
        )


class ReservationStatus(str, Enum):
    ACTIVE = "active"
    CANCELLED = "cancelled"
    EXPIRED = "expired"
    CONVERTED = "converted"


@dataclass
class Reservation:
    reservation_id: str
    space_id: str
    slot_no: int
    motorist_id: str
    rfid_uid: str
    reserved_at: datetime
    expires_at: datetime
    status: ReservationStatus = ReservationStatus.ACTIVE

    def to_json(self) -> dict:
        return {
            "reservation_id": self.reservation_id,
            "space_id": self.space_id,
            "slot_no": self.slot_no,
            "motorist_id": self.motorist_id,
            "rfid_uid": self.rfid_uid,
            "reserved_at": to_iso(self.reserved_at),
            "expires_at": to_iso(self.expires_at),
            "status": self.status.value,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Reservation":
        return cls(
            reservation_id=data["reservation_id"],
            space_id=data["space_id"],
            slot_no=int(data["slot_no"]),
            motorist_id=data["motorist_id"],
            rfid_uid=data["rfid_uid"],
            reserved_at=from_iso(data["reserved_at"]),
            expires_at=from_iso(data["expires_at"]),
            status=ReservationStatus(data["status"]),
        )


@dataclass
class ParkingSession:
    session_id: str
    reservation_id: Optional[str]
    space_id: str
    slot_no: int
    rfid_uid: str
    entry_at: datetime
    exit_at: Optional[datetime] = None
    fee: Optional[int] = None

    @property
    def open(self) -> bool:
        return self.exit_at is None

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "reservation_id": self.reservation_id,
            "space_id": self.space_id,
            "slot_no": self.slot_no,
            "rfid_uid": self.rfid_uid,
            "entry_at": to_iso(self.entry_at),
            "exit_at": to_iso(self.exit_at) if self.exit_at else None,
            "fee": self.fee,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ParkingSession":
        return cls(
            session_id=data["session_id"],
            reservation_id=data.get("reservation_id"),
            space_id=data["space_id"],
            slot_no=int(data["slot_no"]),
            rfid_uid=data["rfid_uid"],
            entry_at=from_iso(data["entry_at"]),
            exit_at=from_iso(data["exit_at"]) if data.get("exit_at") else None,
            fee=data.get("fee"),
        )


class GateAction(str, Enum):
    OPEN_ENTRY = "gate_open_entry"
    OPEN_EXIT = "gate_open_exit"


class RejectReason(str, Enum):
    UNKNOWN_CARD = "unknown_card"
    NO_RESERVATION = "no_reservation"
    RESERVATION_EXPIRED = "reservation_expired"
    ALREADY_INSIDE = "already_inside"
    NOT_INSIDE = "not_inside"
    # issued locally by an edge node when the cloud is unreachable
    CLOUD_UNREACHABLE = "cloud_unreachable"


@dataclass(frozen=True)
class Accepted:
    action: GateAction
    display_text: str = DISPLAY_GRANTED

    def __post_init__(self):
        if not self.display_text:
            raise ValueError("display_text must be non-empty")

    def to_json(self) -> dict:
        return {
            "result": "accepted",
            "action": self.action.value,
            "display_text": self.display_text,
        }


@dataclass(frozen=True)
class Rejected:
    reason: RejectReason
    display_text: str = DISPLAY_DENIED

    def __post_init__(self):
        if not self.display_text:
            raise ValueError("display_text must be non-empty")

    def to_json(self) -> dict:
        return {
            "result": "rejected",
            "reason": self.reason.value,
            "display_text": self.display_text,
        }


AuthDecision = Union[Accepted, Rejected]


def decision_from_json(data: dict) -> AuthDecision:
    if data.get("result") == "accepted":
        return Accepted(GateAction(data["action"]), data["display_text"])
    if data.get("result") == "rejected":
        return Rejected(RejectReason(data["reason"]), data["display_text"])
    raise ValueError(f"bad decision: {data!r}")


def compute_fee(
    tariff: Tariff, entry_at: datetime, exit_at: datetime
) -> int:
    """Fee for one stay: ceil(billable / billing_unit) * rate, 0 when free.

    Billable time is the stay minus the tariff's free allowance, floored
    at zero. Exact integer arithmetic on microseconds, no floats.
    """
    if exit_at < entry_at:
        raise NegativeDuration(f"exit {to_iso(exit_at)} before entry {to_iso(entry_at)}")
    if tariff.free:
        return 0
    duration_us = round((exit_at - entry_at).total_seconds() * 1_000_000)
    free_us = tariff.free_minutes * 60_000_000
    billable_us = max(0, duration_us - free_us)
    unit_us = tariff.billing_unit_minutes * 60_000_000
    units = -(-billable_us // unit_us)  # ceiling division
    return units * tariff.rate_per_unit


def session_fee(session: ParkingSession, tariff: Tariff, now: datetime) -> int:
    """Fee of a session; `now` serves as provisional exit while still open."""
    exit_at = session.exit_at if session.exit_at is not None else now
    return compute_fee(tariff, session.entry_at, exit_at)


def validate_coordinates(latitude: float, longitude: float) -> None:
    if not (isinstance(latitude, (int, float)) and isinstance(longitude, (int, float))):
        raise InvalidCoordinates("coordinates must be numeric")
    if math.isnan(latitude) or math.isnan(longitude):
        raise InvalidCoordinates("coordinates must not be NaN")
    if not -90.0 <= latitude <= 90.0:
        raise InvalidCoordinates(f"latitude {latitude} out of [-90, 90]")
    if not -180.0 <= longitude <= 180.0:
        raise InvalidCoordinates(f"longitude {longitude} out of [-180, 180]")
