"""Random valid-frame generator for codec round-trip tests."""

import random
from datetime import timedelta

from smartpark import protocol as proto
from smartpark.model import (
    Accepted,
    GateAction,
    Rejected,
    RejectReason,
)

from conftest import T0

_WORDS = ["lot", "gate", "north", "kampala", "edge", "visitor", "türe", "景点"]


def _text(rng, max_words=3):
    return " ".join(rng.choice(_WORDS) for _ in range(rng.randrange(1, max_words + 1)))


def _uid(rng):
    return bytes(rng.randrange(256) for _ in range(rng.choice([4, 7, 10]))).hex().upper()


def _decision(rng):
    if rng.random() < 0.5:
        return Accepted(rng.choice(list(GateAction)), display_text=_text(rng))
    return Rejected(rng.choice(list(RejectReason)), display_text=_text(rng))


def random_body(rng: random.Random):
    kind = rng.choice(["hello", "auth_req", "auth_resp", "status_update", "ack", "heartbeat", "error"])
    space = f"sp-{rng.randrange(1, 1000):06d}"
    if kind == "hello":
        return proto.Hello(space, token=f"{rng.getrandbits(128):032x}")
    if kind == "auth_req":
        return proto.AuthReq(space, rng.choice([proto.LANE_ENTRY, proto.LANE_EXIT]), _uid(rng))
    if kind == "auth_resp":
        return proto.AuthResp(
            frame_id_of_req=rng.randrange(1, 10_000),
            decision=_decision(rng),
            slot_no=rng.choice([None, rng.randrange(1, 100)]),
        )
    if kind == "status_update":
        return proto.StatusUpdate(
            space,
            slot_no=rng.randrange(1, 100),
            new_state=rng.choice(["vacant", "reserved", "occupied"]),
            cause=_text(rng, 2),
        )
    if kind == "ack":
        return proto.Ack(frame_id=rng.randrange(1, 10_000))
    if kind == "heartbeat":
        return proto.Heartbeat(space)
    return proto.ErrorBody(code=rng.choice([400, 401, 409, 500]), text=_text(rng))


def random_frame(rng: random.Random) -> proto.Frame:
    return proto.Frame(
        frame_id=rng.randrange(1, 1_000_000),
        sent_at=T0 + timedelta(milliseconds=rng.randrange(0, 10**9)),
        body=random_body(rng),
    )
