import random
from datetime import datetime, timedelta, timezone

import pytest

from smartpark.engine import ParkingEngine
from smartpark.model import Tariff

T0 = datetime(2025, 6, 1, 8, 0, 0, tzinfo=timezone.utc)


def at(minutes=0, seconds=0.0):
    return T0 + timedelta(minutes=minutes, seconds=seconds)


FREE = Tariff()
PAID = Tariff(free=False, rate_per_unit=500, billing_unit_minutes=15, free_minutes=30)


def fresh_engine(**kwargs) -> ParkingEngine:
    return ParkingEngine(**kwargs)


def register_lot(engine, capacity=2, name="Lot A", tariff=FREE, now=T0):
    return engine.register_space(
        name, (0.315, 32.582), capacity, "K. Admin", "+256-700-000000", tariff, now=now
    )


def register_driver(engine, uid="9C7A31B4", national_id=None, now=T0):
    national_id = national_id or f"ID-{uid}"
    return engine.register_motorist(
        "Test Driver", "Ugandan", national_id, "+256-700-111111", uid, now=now
    )


def make_uids(n, seed=7):
    rng = random.Random(seed)
    uids = set()
    while len(uids) < n:
        nbytes = rng.choice([4, 7, 10])
        uids.add(bytes(rng.randrange(256) for _ in range(nbytes)).hex().upper())
    return sorted(uids)


@pytest.fixture
def engine():
    return fresh_engine()
