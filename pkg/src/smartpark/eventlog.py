"""Append-only event log and snapshot files.

Log format: a sequence of [u32 length][u32 crc32][payload] records,
big-endian, payload being canonical JSON (keys sorted alphabetically,
compact separators, UTF-8) of one EventRecord. Appends are flushed and
fsynced before returning.

Opening scans the whole file: a partial trailing record (torn write) is
truncated away; a complete record with a bad checksum, undecodable JSON
or a gap in seq numbers raises CorruptLog with the seq of the first bad
record. A corrupted middle record is never skipped silently.

Snapshot files are single canonical-JSON documents with top-level keys
"as_of_seq", "spaces", "motorists", "reservations" and "sessions".
Denormalized per-space counts are stored and re-verified on load.
"""

from __future__ import annotations

import errno
import json
import os
import struct
import zlib
from pathlib import Path

from .engine import ParkingEngine
from .events import EventRecord
from .model import Motorist, ParkingSession, ParkingSpace, Reservation

_HEADER = struct.Struct(">II")  # length, crc32


class PersistenceError(Exception):
    pass


class StorageFull(PersistenceError):
    pass


class CorruptLog(PersistenceError):
    def __init__(self, first_bad_seq: int, reason: str):
        super().__init__(f"corrupt log at seq {first_bad_seq}: {reason}")
        self.first_bad_seq = first_bad_seq
        self.reason = reason


class CorruptSnapshot(PersistenceError):
    pass


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


class EventLog:
    """Single-writer append-only log; reads are served from memory."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.records: list[EventRecord] = []
        self._fh = None
        self._open_and_recover()

    @property
    def last_seq(self) -> int:
        return self.records[-1].seq if self.records else 0

    def _open_and_recover(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        data = self.path.read_bytes()
        offset = 0
        good_end = 0
        expected_seq = 1
        while offset < len(data):
            if offset + _HEADER.size > len(data):
                break  # torn header
            length, checksum = _HEADER.unpack_from(data, offset)
            body_start = offset + _HEADER.size
            if body_start + length > len(data):
                break  # torn payload
            payload = data[body_start : body_start + length]
            if zlib.crc32(payload) & 0xFFFFFFFF != checksum:
                raise CorruptLog(expected_seq, "checksum mismatch")
            try:
                record = EventRecord.from_json(json.loads(payload.decode("utf-8")))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptLog(expected_seq, f"undecodable record: {exc}") from exc
            if record.seq != expected_seq:
                raise CorruptLog(expected_seq, f"seq gap, found {record.seq}")
            self.records.append(record)
            expected_seq += 1
            offset = body_start + length
            good_end = offset
        if good_end != len(data):
            # torn trailing write: drop it so the next append lands cleanly
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)
        self._fh = open(self.path, "ab")

    def append(self, record: EventRecord) -> int:
        if record.seq != self.last_seq + 1:
            raise ValueError(f"append seq {record.seq} does not follow {self.last_seq}")
        payload = canonical_json_bytes(record.to_json())
        frame = _HEADER.pack(len(payload), zlib.crc32(payload) & 0xFFFFFFFF) + payload
        try:
            self._fh.write(frame)
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise StorageFull(str(exc)) from exc
            raise
        self.records.append(record)
        return record.seq

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# snapshots


def snapshot_of(engine: ParkingEngine) -> dict:
    spaces = []
    for space in engine.spaces.values():
        data = space.to_json(include_slots=True)
        vacant, reserved, occupied = space.counts()
        data["counts"] = {"vacant": vacant, "reserved": reserved, "occupied": occupied}
        spaces.append(data)
    return {
        "as_of_seq": engine.applied_seq,
        "spaces": spaces,
        "motorists": [m.to_json() for m in engine.motorists.values()],
        "reservations": [r.to_json() for r in engine.reservations.values()],
        "sessions": [s.to_json() for s in engine.sessions.values()],
    }


def engine_from_snapshot(data: dict, **engine_kwargs) -> ParkingEngine:
    spaces = []
    for space_data in data["spaces"]:
        space = ParkingSpace.from_json(space_data)
        vacant, reserved, occupied = space.counts()
        stored = space_data.get("counts")
        if stored is not None and (
            stored.get("vacant") != vacant
            or stored.get("reserved") != reserved
            or stored.get("occupied") != occupied
        ):
            raise CorruptSnapshot(
                f"space {space.space_id}: stored counts {stored} != recomputed "
                f"({vacant}, {reserved}, {occupied})"
            )
        spaces.append(space)
    return ParkingEngine.from_entities(
        spaces,
        [Motorist.from_json(m) for m in data["motorists"]],
        [Reservation.from_json(r) for r in data["reservations"]],
        [ParkingSession.from_json(s) for s in data["sessions"]],
        int(data["as_of_seq"]),
        **engine_kwargs,
    )


def write_snapshot(path: str | os.PathLike, engine: ParkingEngine) -> Path:
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(canonical_json_bytes(snapshot_of(engine)))
    os.replace(tmp, path)
    return path


def read_snapshot(path: str | os.PathLike) -> dict:
    try:
        return json.loads(Path(path).read_bytes().decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptSnapshot(f"{path}: {exc}") from exc


def replay(
    records: list[EventRecord],
    snapshot: dict | None = None,
    **engine_kwargs,
) -> ParkingEngine:
    """Rebuild an engine from a snapshot (optional) plus the event tail."""
    if snapshot is not None:
        engine = engine_from_snapshot(snapshot, **engine_kwargs)
    else:
        engine = ParkingEngine(**engine_kwargs)
    for record in records:
        if record.seq <= engine.applied_seq:
            continue
        engine.apply_event(record)
    return engine
