"""Simulated fleet of parking-lot edge nodes.

Each node models the per-lot hardware: an RFID reader per lane (entry and
exit), a gate servo state machine, one LCD, a store-and-forward buffer and
a network link. Nodes are pure state machines emitting effects (frames to
send, timers to arm, trace entries); a driver executes the effects.

Two drivers share all node logic:

* VirtualScenarioRunner owns a logical millisecond clock and an in-process
  cloud (real store + real device-link sessions, bytes through the real
  codec). Nothing sleeps; runs are deterministic and byte-identical for a
  fixed script.
* TcpScenarioRunner speaks to a separately launched service over loopback
  TCP and HTTP, mapping script times onto the wall clock.

Scenario scripts are JSON: top-level "seed", optional "config", an
"actions" array ({"at": ms, "type": ...}) and optional "assertions"
evaluated against the finished trace.
"""

from __future__ import annotations

import heapq
import json
import select
import socket
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Callable, Optional

from .gateway import DeviceGateway, LivenessRegistry
from .model import (
    DISPLAY_DENIED,
    DISPLAY_GRANTED,
    DISPLAY_TRY_AGAIN,
    DISPLAY_WELCOME,
    DomainError,
    Tariff,
)
from .protocol import (
    Ack,
    AuthReq,
    AuthResp,
    BufferOverflow,
    EdgeBuffer,
    Frame,
    Heartbeat,
    Hello,
    LineBuffer,
    StatusUpdate,
    decode_frame,
    encode_frame,
)
from .store import ParkingStore

SIM_EPOCH = datetime(2025, 6, 1, 8, 0, 0, tzinfo=timezone.utc)

GATE_CLOSED = "closed"
GATE_OPENING = "opening"
GATE_OPEN = "open"
GATE_CLOSING = "closing"

EV_ACCEPTED = "decision_accepted"
EV_TIMER = "timer_elapsed"
EV_REJECTED = "decision_rejected"

_GATE_TRANSITIONS = {
    (GATE_CLOSED, EV_ACCEPTED): GATE_OPENING,
    (GATE_OPENING, EV_TIMER): GATE_OPEN,
    (GATE_OPEN, EV_TIMER): GATE_CLOSING,
    (GATE_CLOSING, EV_TIMER): GATE_CLOSED,
}

ACTION_TYPES = {"card_tap", "partition", "delay", "drop_next", "advance_time", "reserve", "cancel"}


class IllegalEvent(Exception):
    pass


class ScriptError(Exception):
    pass


def step_gate(gate_state: str, event: str, now=None) -> str:
    """Gate servo transition table. A rejection never moves the gate;
    undefined pairs are defects."""
    if event == EV_REJECTED:
        return gate_state
    try:
        return _GATE_TRANSITIONS[(gate_state, event)]
    except KeyError:
        raise IllegalEvent(f"{event} in state {gate_state}") from None


@dataclass
class SimConfig:
    auth_timeout_ms: int = 3000
    heartbeat_interval_ms: int = 5000
    gate_open_duration_ms: int = 10_000
    servo_travel_ms: int = 1000
    link_latency_ms: int = 5
    status_retry_ms: int = 3000
    end_settle_ms: int = 30_000
    buffer_capacity: int = 1024

    @classmethod
    def from_json(cls, doc: dict | None) -> "SimConfig":
        config = cls()
        for key, value in (doc or {}).items():
            if not hasattr(config, key):
                raise ScriptError(f"unknown config key {key!r}")
            if not isinstance(value, int) or value < 0:
                raise ScriptError(f"config {key} must be a non-negative integer")
            setattr(config, key, value)
        return config


@dataclass
class Gate:
    lane: str
    state: str = GATE_CLOSED
    timer_epoch: int = 0
    active_slot: Optional[int] = None
    active_cause: Optional[str] = None


# effects an EdgeNode hands back to its driver
SEND = "send"
TIMER = "timer"
TRACE = "trace"


class EdgeNode:
    """One lot's edge assembly; transport-free, effect-based."""

    def __init__(self, name: str, space_id: str, token: str, config: SimConfig):
        self.name = name
        self.space_id = space_id
        self.token = token
        self.config = config
        self.gates = {"entry": Gate("entry"), "exit": Gate("exit")}
        self.lcd_text = DISPLAY_WELCOME
        self.connected = False
        self.buffer = EdgeBuffer(config.buffer_capacity)
        self.drop_next = 0
        self.extra_latency_ms = 0
        # frame id 1 is the per-connection hello; payload frames draw ids
        # from this persistent counter, so a re-sent status update keeps its
        # id across reconnects (the cloud's dedup key) while every
        # connection still sees strictly increasing ids
        self._next_frame_id = 1
        self._pending_auth: dict[int, tuple[str, str]] = {}

    # -- helpers --------------------------------------------------------

    def _frame(self, body, now_dt: datetime) -> Frame:
        self._next_frame_id += 1
        return Frame(frame_id=self._next_frame_id, sent_at=now_dt, body=body)

    def _lcd(self, text: str) -> list:
        if text == self.lcd_text:
            return []
        self.lcd_text = text
        return [(TRACE, {"type": "lcd", "text": text})]

    def _gate_effects(self, gate: Gate, new_state: str, delay_to_next: int | None) -> list:
        gate.state = new_state
        effects = [(TRACE, {"type": "gate", "lane": gate.lane, "state": new_state})]
        if delay_to_next is not None:
            gate.timer_epoch += 1
            effects.append((TIMER, delay_to_next, ("gate", gate.lane, gate.timer_epoch)))
        return effects

    # -- inputs ---------------------------------------------------------

    def on_link_up(self, now_dt: datetime) -> list:
        self.connected = True
        effects = [(TRACE, {"type": "link", "state": "up"})]
        hello = Frame(frame_id=1, sent_at=now_dt, body=Hello(self.space_id, self.token))
        effects.append((SEND, hello))
        for frame in self.buffer.pending():  # flush in order, oldest first
            effects.append((SEND, frame))
            effects.append((TIMER, self.config.status_retry_ms, ("retry", frame.frame_id)))
            effects.append(
                (TRACE, {"type": "buffer_flush", "frame_id": frame.frame_id})
            )
        return effects

    def on_link_down(self) -> list:
        self.connected = False
        return [(TRACE, {"type": "link", "state": "down"})]

    def on_card_tap(self, lane: str, uid: str, now_dt: datetime) -> list:
        effects = [(TRACE, {"type": "card_tap", "lane": lane, "uid": uid})]
        if not self.connected:
            # fail closed: no cloud, no gate
            effects.append(
                (TRACE, {"type": "decision", "lane": lane, "result": "unreachable"})
            )
            effects.extend(self._lcd(DISPLAY_TRY_AGAIN))
            return effects
        frame = self._frame(AuthReq(self.space_id, lane, uid), now_dt)
        self._pending_auth[frame.frame_id] = (lane, uid)
        effects.append((SEND, frame))
        effects.append((TIMER, self.config.auth_timeout_ms, ("auth_timeout", frame.frame_id)))
        return effects

    def on_frame(self, frame: Frame, now_dt: datetime) -> list:
        effects = [
            (TRACE, {"type": "frame_rx", "kind": frame.kind, "frame_id": frame.frame_id})
        ]
        body = frame.body
        if isinstance(body, AuthResp):
            effects.extend(self._on_auth_resp(body))
        elif isinstance(body, Ack):
            if self.buffer.ack(body.frame_id):
                effects.append(
                    (TRACE, {"type": "buffer", "pending": len(self.buffer)})
                )
        elif body.kind == "error":
            effects.append(
                (TRACE, {"type": "cloud_error", "code": body.code, "text": body.text})
            )
        return effects

    def _on_auth_resp(self, resp: AuthResp) -> list:
        pending = self._pending_auth.pop(resp.frame_id_of_req, None)
        if pending is None:
            return [(TRACE, {"type": "decision", "result": "late_ignored"})]
        lane, _uid = pending
        decision = resp.decision.to_json()
        effects = [
            (
                TRACE,
                {
                    "type": "decision",
                    "lane": lane,
                    "result": decision["result"],
                    "detail": decision.get("action") or decision.get("reason"),
                },
            )
        ]
        if decision["result"] == "accepted":
            effects.extend(self._lcd(DISPLAY_GRANTED))
            effects.extend(self._open_gate(lane, resp.slot_no))
        else:
            # a rejection never moves the gate
            gate = self.gates[lane]
            gate.state = step_gate(gate.state, EV_REJECTED)
            effects.extend(self._lcd(DISPLAY_DENIED))
        return effects

    def _open_gate(self, lane: str, slot_no: Optional[int]) -> list:
        gate = self.gates[lane]
        gate.active_slot = slot_no
        gate.active_cause = "entry_confirmed" if lane == "entry" else "exit_confirmed"
        if gate.state == GATE_CLOSED:
            return self._gate_effects(
                gate, step_gate(gate.state, EV_ACCEPTED), self.config.servo_travel_ms
            )
        if gate.state == GATE_OPEN:
            # second car while open: hold the gate, restart the close timer
            gate.timer_epoch += 1
            return [(TIMER, self.config.gate_open_duration_ms, ("gate", lane, gate.timer_epoch))]
        return []  # opening/closing: the running cycle covers it

    def on_timer(self, tag: tuple, now_dt: datetime) -> list:
        kind = tag[0]
        if kind == "auth_timeout":
            pending = self._pending_auth.pop(tag[1], None)
            if pending is None:
                return []
            lane, _uid = pending
            effects = [(TRACE, {"type": "decision", "lane": lane, "result": "timeout"})]
            effects.extend(self._lcd(DISPLAY_TRY_AGAIN))
            return effects
        if kind == "gate":
            return self._on_gate_timer(tag[1], tag[2], now_dt)
        if kind == "heartbeat":
            effects = [(TIMER, self.config.heartbeat_interval_ms, ("heartbeat",))]
            if self.connected:
                effects.append((SEND, self._frame(Heartbeat(self.space_id), now_dt)))
            return effects
        if kind == "retry":
            frame = next((f for f in self.buffer.pending() if f.frame_id == tag[1]), None)
            if frame is None or not self.connected:
                return []
            return [
                (SEND, frame),
                (TIMER, self.config.status_retry_ms, ("retry", frame.frame_id)),
                (TRACE, {"type": "status_retry", "frame_id": frame.frame_id}),
            ]
        return []

    def _on_gate_timer(self, lane: str, epoch: int, now_dt: datetime) -> list:
        gate = self.gates[lane]
        if epoch != gate.timer_epoch:
            return []  # superseded (gate was held open)
        if gate.state == GATE_OPENING:
            return self._gate_effects(gate, GATE_OPEN, self.config.gate_open_duration_ms)
        if gate.state == GATE_OPEN:
            return self._gate_effects(gate, GATE_CLOSING, self.config.servo_travel_ms)
        if gate.state == GATE_CLOSING:
            effects = self._gate_effects(gate, GATE_CLOSED, None)
            effects.extend(self._confirm_passage(gate, now_dt))
            effects.extend(self._lcd(DISPLAY_WELCOME))
            return effects
        return []

    def _confirm_passage(self, gate: Gate, now_dt: datetime) -> list:
        if gate.active_slot is None:
            return []
        new_state = "occupied" if gate.lane == "entry" else "vacant"
        frame = self._frame(
            StatusUpdate(self.space_id, gate.active_slot, new_state, gate.active_cause), now_dt
        )
        gate.active_slot = None
        gate.active_cause = None
        try:
            self.buffer.enqueue(frame)
        except BufferOverflow:
            return [(TRACE, {"type": "buffer_overflow", "dropped_frame_id": frame.frame_id})]
        effects = [(TRACE, {"type": "buffer", "pending": len(self.buffer)})]
        if self.connected:
            effects.append((SEND, frame))
            effects.append((TIMER, self.config.status_retry_ms, ("retry", frame.frame_id)))
        return effects


# ---------------------------------------------------------------------------
# scripts

@dataclass
class Scenario:
    seed: int
    config: SimConfig
    actions: list[dict]
    assertions: list[dict]

    @classmethod
    def from_json(cls, doc: dict) -> "Scenario":
        if not isinstance(doc, dict):
            raise ScriptError("script must be a JSON object")
        actions = doc.get("actions", [])
        if not isinstance(actions, list):
            raise ScriptError("actions must be an array")
        last_at = 0
        for index, action in enumerate(actions):
            if not isinstance(action, dict):
                raise ScriptError(f"action {index} must be an object")
            at = action.get("at")
            if not isinstance(at, int) or at < 0:
                raise ScriptError(f"action {index}: 'at' must be a non-negative integer")
            if at < last_at:
                raise ScriptError(f"action {index}: timestamps must be non-decreasing")
            last_at = at
            kind = action.get("type")
            if kind not in ACTION_TYPES:
                raise ScriptError(f"action {index}: unknown type {kind!r}")
            cls._validate_fields(index, kind, action)
        return cls(
            seed=int(doc.get("seed", 0)),
            config=SimConfig.from_json(doc.get("config")),
            actions=actions,
            assertions=doc.get("assertions", []),
        )

    @staticmethod
    def _validate_fields(index: int, kind: str, action: dict) -> None:
        def need(field, check, what):
            if not check(action.get(field)):
                raise ScriptError(f"action {index} ({kind}): bad field {field!r}, expected {what}")

        is_str = lambda v: isinstance(v, str) and v
        pos_int = lambda v: isinstance(v, int) and v >= 1
        if kind in ("card_tap", "partition", "delay", "drop_next", "reserve"):
            need("space", is_str, "a space name")
        if kind == "card_tap":
            need("lane", lambda v: v in ("entry", "exit"), "entry or exit")
            need("uid", is_str, "an rfid uid")
        if kind == "partition":
            need("duration_ms", pos_int, "a positive duration")
        if kind == "delay":
            need("latency_ms", lambda v: isinstance(v, int) and v >= 0, "a latency")
        if kind == "drop_next":
            need("n", pos_int, "a positive count")
        if kind == "advance_time":
            need("duration_ms", pos_int, "a positive duration")
        if kind == "reserve":
            need("slot_no", pos_int, "a slot number")
            need("uid", is_str, "an rfid uid")
        if kind == "cancel":
            need("uid", is_str, "an rfid uid")


def load_script(path) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return Scenario.from_json(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScriptError(f"cannot load script {path}: {exc}") from exc


@dataclass
class SimulationTrace:
    entries: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def of_type(self, entry_type: str, space: str | None = None) -> list[dict]:
        return [
            e
            for e in self.entries
            if e["type"] == entry_type and (space is None or e.get("space") == space)
        ]


# ---------------------------------------------------------------------------
# shared runner core

class _BaseRunner:
    """Effect execution and tracing shared by both drivers."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.config = scenario.config
        self.trace = SimulationTrace()
        self.nodes: dict[str, EdgeNode] = {}  # by space name
        self._heap: list = []
        self._tick = 0

    # driver hooks ------------------------------------------------------

    def now_dt(self, t_ms: int) -> datetime:
        return SIM_EPOCH + timedelta(milliseconds=t_ms)

    def transmit(self, node: EdgeNode, frame: Frame, t_ms: int) -> None:
        raise NotImplementedError

    # ---------------------------------------------------------------

    def schedule(self, t_ms: int, fn: Callable[[int], None]) -> None:
        self._tick += 1
        heapq.heappush(self._heap, (t_ms, self._tick, fn))

    def emit(self, t_ms: int, node_name: str | None, entry: dict) -> None:
        record = {"at": t_ms}
        if node_name is not None:
            record["space"] = node_name
        record.update(entry)
        self.trace.entries.append(record)

    def run_effects(self, node: EdgeNode, effects: list, t_ms: int) -> None:
        for effect in effects:
            if effect[0] == TRACE:
                self.emit(t_ms, node.name, effect[1])
            elif effect[0] == TIMER:
                _, delay, tag = effect
                self.schedule(
                    t_ms + delay,
                    lambda t, node=node, tag=tag: self.run_effects(
                        node, node.on_timer(tag, self.now_dt(t)), t
                    ),
                )
            elif effect[0] == SEND:
                _, frame = effect
                if node.drop_next > 0:
                    node.drop_next -= 1
                    self.emit(
                        t_ms,
                        node.name,
                        {
                            "type": "frame_drop",
                            "kind": frame.kind,
                            "frame_id": frame.frame_id,
                            "why": "drop_next",
                        },
                    )
                    continue
                if not node.connected:
                    self.emit(
                        t_ms,
                        node.name,
                        {
                            "type": "frame_drop",
                            "kind": frame.kind,
                            "frame_id": frame.frame_id,
                            "why": "disconnected",
                        },
                    )
                    continue
                self.emit(
                    t_ms,
                    node.name,
                    {"type": "frame_tx", "kind": frame.kind, "frame_id": frame.frame_id},
                )
                self.transmit(node, frame, t_ms)

    # assertions --------------------------------------------------------

    def evaluate_assertions(self) -> list[tuple[dict, bool, str]]:
        results = []
        for assertion in self.scenario.assertions:
            ok, message = self._check(assertion)
            results.append((assertion, ok, message))
        return results

    def _snapshot_after(self, action_index: int, space: str) -> list | None:
        following = [
            e
            for e in self.trace.of_type("cloud_slots", space)
            if e.get("before_action", 10**9) > action_index or e.get("final")
        ]
        return following[0]["slots"] if following else None

    def _check(self, assertion: dict) -> tuple[bool, str]:
        kind = assertion.get("type")
        space = assertion.get("space")
        if kind == "slot_state":
            finals = [e for e in self.trace.of_type("cloud_slots", space) if e.get("final")]
            if not finals:
                return False, "no final snapshot"
            got = finals[-1]["slots"][assertion["slot_no"] - 1]
            return got == assertion["state"], f"slot {assertion['slot_no']} is {got}"
        if kind == "slot_state_after":
            slots = self._snapshot_after(assertion["action_index"], space)
            if slots is None:
                return False, "no snapshot after action"
            got = slots[assertion["slot_no"] - 1]
            return got == assertion["state"], f"slot {assertion['slot_no']} is {got}"
        if kind == "gate_opened":
            opened = [
                e
                for e in self.trace.of_type("gate", space)
                if e["state"] == GATE_OPEN and e["lane"] == assertion["lane"]
            ]
            return len(opened) == assertion["count"], f"opened {len(opened)} times"
        if kind == "lcd_shown":
            texts = [e["text"] for e in self.trace.of_type("lcd", space)]
            return assertion["text"] in texts, f"lcd history {texts}"
        if kind == "buffer_empty":
            node = self.nodes[space]
            return len(node.buffer) == 0, f"{len(node.buffer)} frames pending"
        if kind == "fail_closed":
            return self._check_fail_closed()
        return False, f"unknown assertion type {kind!r}"

    def _check_fail_closed(self) -> tuple[bool, str]:
        """Every gate opening must consume an earlier accepted decision for
        the same space and lane."""
        credits: dict[tuple[str, str], int] = {}
        for entry in self.trace.entries:
            key = (entry.get("space"), entry.get("lane"))
            if entry["type"] == "decision" and entry.get("result") == "accepted":
                credits[key] = credits.get(key, 0) + 1
            elif entry["type"] == "gate" and entry["state"] == GATE_OPENING:
                if credits.get(key, 0) < 1:
                    return False, f"gate opened without acceptance at t={entry['at']}"
                credits[key] -= 1
        return True, "ok"


# ---------------------------------------------------------------------------
# virtual-time driver

class VirtualScenarioRunner(_BaseRunner):
    """Deterministic in-process run: logical clock, real codec, real store."""

    def __init__(self, scenario: Scenario, registry: dict, *, store: ParkingStore | None = None):
        super().__init__(scenario)
        self.store = store or ParkingStore()
        self.liveness = LivenessRegistry(self.config.heartbeat_interval_ms / 1000.0)
        self._tokens: dict[str, str] = {}
        self.gateway = DeviceGateway(
            self.store,
            lambda space_id, token: self._tokens.get(space_id) == token,
            liveness_registry=self.liveness,
        )
        self._sessions: dict[str, object] = {}
        self._epochs: dict[str, int] = {}
        self._motorist_by_uid: dict[str, str] = {}
        self._space_by_name: dict[str, str] = {}
        self._setup_registry(registry)
        self._validate_refs()

    def _setup_registry(self, registry: dict) -> None:
        now = self.now_dt(0)
        for space_doc in registry.get("spaces", []):
            tariff = Tariff.from_json(space_doc["tariff"]) if space_doc.get("tariff") else Tariff()
            space = self.store.register_space(
                space_doc["name"],
                (space_doc["location"]["latitude"], space_doc["location"]["longitude"]),
                space_doc["capacity"],
                space_doc.get("admin_name", "admin"),
                space_doc.get("admin_contact", "n/a"),
                tariff,
                now=now,
            )
            self._space_by_name[space.name] = space.space_id
            self._tokens[space.space_id] = f"sim-token-{space.space_id}"
            self.nodes[space.name] = EdgeNode(
                space.name, space.space_id, self._tokens[space.space_id], self.config
            )
        for motorist_doc in registry.get("motorists", []):
            motorist = self.store.register_motorist(
                motorist_doc["full_name"],
                motorist_doc.get("nationality", "n/a"),
                motorist_doc["national_id"],
                motorist_doc.get("contact", "n/a"),
                motorist_doc["rfid_uid"],
                now=now,
            )
            self._motorist_by_uid[motorist.rfid_uid] = motorist.motorist_id

    def _validate_refs(self) -> None:
        for index, action in enumerate(self.scenario.actions):
            space = action.get("space")
            if space is not None and space not in self.nodes:
                raise ScriptError(f"action {index}: unknown space {space!r}")
            uid = action.get("uid")
            if uid is not None and action["type"] in ("card_tap", "reserve", "cancel"):
                canonical = uid.upper()
                if canonical not in self._motorist_by_uid:
                    raise ScriptError(f"action {index}: unknown uid {uid!r}")

    # transport ---------------------------------------------------------

    def _connect(self, node: EdgeNode, t_ms: int) -> None:
        self._epochs[node.name] = self._epochs.get(node.name, 0) + 1
        self._sessions[node.name] = self.gateway.session()
        self.run_effects(node, node.on_link_up(self.now_dt(t_ms)), t_ms)

    def _disconnect(self, node: EdgeNode, t_ms: int) -> None:
        self._epochs[node.name] = self._epochs.get(node.name, 0) + 1
        self._sessions[node.name] = None
        self.run_effects(node, node.on_link_down(), t_ms)

    def transmit(self, node: EdgeNode, frame: Frame, t_ms: int) -> None:
        latency = self.config.link_latency_ms + node.extra_latency_ms
        epoch = self._epochs.get(node.name, 0)
        self.schedule(
            t_ms + latency,
            lambda t, data=encode_frame(frame): self._deliver_to_cloud(node, data, epoch, t),
        )

    def _deliver_to_cloud(self, node: EdgeNode, data: bytes, epoch: int, t_ms: int) -> None:
        if self._epochs.get(node.name, 0) != epoch or self._sessions.get(node.name) is None:
            self.emit(t_ms, node.name, {"type": "frame_drop", "kind": "?", "why": "partition"})
            return
        session = self._sessions[node.name]
        outputs, keep_open = session.handle_line(data, now=self.now_dt(t_ms))
        latency = self.config.link_latency_ms + node.extra_latency_ms
        for chunk in outputs:
            self.schedule(
                t_ms + latency,
                lambda t, chunk=chunk, epoch=epoch: self._deliver_to_edge(node, chunk, epoch, t),
            )
        if not keep_open:
            self._disconnect(node, t_ms)

    def _deliver_to_edge(self, node: EdgeNode, data: bytes, epoch: int, t_ms: int) -> None:
        if self._epochs.get(node.name, 0) != epoch or not node.connected:
            self.emit(t_ms, node.name, {"type": "frame_drop", "kind": "?", "why": "partition"})
            return
        frame = decode_frame(data)
        self.run_effects(node, node.on_frame(frame, self.now_dt(t_ms)), t_ms)

    # script processing --------------------------------------------------

    def _slots_of(self, space_name: str) -> list[str]:
        space = self.store.get_space(self._space_by_name[space_name])
        return [space.slot(no).kind for no in range(1, space.capacity + 1)]

    def _snapshot_all(self, t_ms: int, tag: dict) -> None:
        for name in sorted(self.nodes):
            self.emit(t_ms, name, {"type": "cloud_slots", "slots": self._slots_of(name), **tag})

    def _do_action(self, index: int, action: dict, t_ms: int) -> None:
        self._snapshot_all(t_ms, {"before_action": index})
        kind = action["type"]
        now = self.now_dt(t_ms)
        if kind == "card_tap":
            node = self.nodes[action["space"]]
            self.run_effects(node, node.on_card_tap(action["lane"], action["uid"].upper(), now), t_ms)
        elif kind == "partition":
            node = self.nodes[action["space"]]
            self._disconnect(node, t_ms)
            heal_at = t_ms + action.get("duration_ms", 1000)
            self.schedule(heal_at, lambda t, node=node: self._connect(node, t))
        elif kind == "delay":
            self.nodes[action["space"]].extra_latency_ms = action.get("latency_ms", 0)
        elif kind == "drop_next":
            self.nodes[action["space"]].drop_next += action.get("n", 1)
        elif kind == "advance_time":
            pass  # only stretches the horizon
        elif kind == "reserve":
            self._api_reserve(action, t_ms, now)
        elif kind == "cancel":
            self._api_cancel(action, t_ms, now)

    def _api_reserve(self, action: dict, t_ms: int, now: datetime) -> None:
        space_id = self._space_by_name[action["space"]]
        motorist_id = self._motorist_by_uid[action["uid"].upper()]
        try:
            reservation = self.store.reserve_slot(space_id, action["slot_no"], motorist_id, now=now)
            self.emit(
                t_ms,
                action["space"],
                {"type": "api", "op": "reserve", "ok": True, "reservation_id": reservation.reservation_id},
            )
        except DomainError as exc:
            self.emit(
                t_ms, action["space"], {"type": "api", "op": "reserve", "ok": False, "error": exc.code}
            )

    def _api_cancel(self, action: dict, t_ms: int, now: datetime) -> None:
        uid = action["uid"].upper()
        motorist_id = self._motorist_by_uid[uid]
        engine = self.store.engine
        reservation_id = engine._active_reservation_by_uid.get(uid)
        if reservation_id is None:
            self.emit(t_ms, None, {"type": "api", "op": "cancel", "ok": False, "error": "no_active"})
            return
        try:
            self.store.cancel_reservation(reservation_id, now=now)
            self.emit(t_ms, None, {"type": "api", "op": "cancel", "ok": True})
        except DomainError as exc:
            self.emit(t_ms, None, {"type": "api", "op": "cancel", "ok": False, "error": exc.code})

    def run(self) -> SimulationTrace:
        self.emit(0, None, {"type": "start", "seed": self.scenario.seed})
        horizon = self.config.end_settle_ms
        for action in self.scenario.actions:
            # actions that schedule future work stretch the horizon too
            tail = action["at"] + action.get("duration_ms", 0)
            horizon = max(horizon, tail + self.config.end_settle_ms)
        for node in self.nodes.values():
            self._connect(node, 0)
            self.schedule(
                self.config.heartbeat_interval_ms,
                lambda t, node=node: self.run_effects(
                    node, node.on_timer(("heartbeat",), self.now_dt(t)), t
                ),
            )
        for index, action in enumerate(self.scenario.actions):
            self.schedule(
                action["at"], lambda t, i=index, a=action: self._do_action(i, a, t)
            )
        while self._heap:
            t_ms, _tick, fn = heapq.heappop(self._heap)
            if t_ms > horizon:
                break
            fn(t_ms)
        self._snapshot_all(horizon, {"final": True})
        return self.trace


def run_scenario(script: dict | Scenario, initial_registry: dict) -> SimulationTrace:
    """Deterministic in-process execution of one scenario script."""
    scenario = script if isinstance(script, Scenario) else Scenario.from_json(script)
    return VirtualScenarioRunner(scenario, initial_registry).run()


# ---------------------------------------------------------------------------
# loopback driver against a live service

class TcpScenarioRunner(_BaseRunner):
    """Runs a scenario against `smartpark serve` over loopback, reusing the
    node state machines with wall-clock time."""

    def __init__(self, scenario: Scenario, registry: dict, base_url: str):
        super().__init__(scenario)
        import requests

        self._requests = requests
        self.base_url = base_url.rstrip("/")
        self._session = requests.Session()
        health = self._session.get(f"{self.base_url}/healthz", timeout=5).json()
        host, port = health["device_address"].rsplit(":", 1)
        self.device_addr = (host, int(port))
        self._space_by_name: dict[str, str] = {}
        self._device_tokens: dict[str, str] = {}
        self._bearer_by_uid: dict[str, str] = {}
        self._reservation_by_uid: dict[str, str] = {}
        self._sockets: dict[str, socket.socket] = {}
        self._line_buffers: dict[str, LineBuffer] = {}
        self._t0 = None
        self._setup_registry(registry)
        self._validate_refs()

    def _setup_registry(self, registry: dict) -> None:
        for space_doc in registry.get("spaces", []):
            resp = self._session.post(f"{self.base_url}/spaces", json=space_doc, timeout=5)
            if resp.status_code != 201:
                raise ScriptError(f"space setup failed: {resp.status_code} {resp.text}")
            doc = resp.json()
            self._space_by_name[doc["name"]] = doc["space_id"]
            self._device_tokens[doc["space_id"]] = doc["device_token"]
            self.nodes[doc["name"]] = EdgeNode(
                doc["name"], doc["space_id"], doc["device_token"], self.config
            )
        for motorist_doc in registry.get("motorists", []):
            resp = self._session.post(f"{self.base_url}/motorists", json=motorist_doc, timeout=5)
            if resp.status_code not in (200, 201):  # 200: already registered
                raise ScriptError(f"motorist setup failed: {resp.status_code} {resp.text}")
            doc = resp.json()
            self._bearer_by_uid[doc["rfid_uid"]] = doc["token"]

    def _validate_refs(self) -> None:
        for index, action in enumerate(self.scenario.actions):
            space = action.get("space")
            if space is not None and space not in self.nodes:
                raise ScriptError(f"action {index}: unknown space {space!r}")
            uid = action.get("uid")
            if uid is not None and uid.upper() not in self._bearer_by_uid:
                raise ScriptError(f"action {index}: unknown uid {uid!r}")

    # wall-time plumbing --------------------------------------------------

    def _now_ms(self) -> int:
        import time

        return int((time.monotonic() - self._t0) * 1000)

    def now_dt(self, t_ms: int) -> datetime:
        return datetime.now(timezone.utc)

    def transmit(self, node: EdgeNode, frame: Frame, t_ms: int) -> None:
        if node.extra_latency_ms:
            self.schedule(
                t_ms + node.extra_latency_ms,
                lambda t, frame=frame: self._send_now(node, frame),
            )
        else:
            self._send_now(node, frame)

    def _send_now(self, node: EdgeNode, frame: Frame) -> None:
        sock = self._sockets.get(node.name)
        if sock is None:
            return
        try:
            sock.sendall(encode_frame(frame))
        except OSError:
            pass

    def _connect(self, node: EdgeNode, t_ms: int) -> None:
        sock = socket.create_connection(self.device_addr, timeout=5)
        sock.setblocking(False)
        self._sockets[node.name] = sock
        self._line_buffers[node.name] = LineBuffer()
        self.run_effects(node, node.on_link_up(self.now_dt(t_ms)), t_ms)

    def _disconnect(self, node: EdgeNode, t_ms: int) -> None:
        sock = self._sockets.pop(node.name, None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
        self.run_effects(node, node.on_link_down(), t_ms)

    def _poll_sockets(self, timeout: float) -> None:
        socks = {s: name for name, s in self._sockets.items()}
        if not socks:
            import time

            time.sleep(timeout)
            return
        readable, _, _ = select.select(list(socks), [], [], max(timeout, 0))
        for sock in readable:
            name = socks[sock]
            try:
                data = sock.recv(65536)
            except OSError:
                continue
            if not data:
                continue
            node = self.nodes[name]
            for line in self._line_buffers[name].feed(data):
                t_ms = self._now_ms()
                frame = decode_frame(line)
                self.run_effects(node, node.on_frame(frame, self.now_dt(t_ms)), t_ms)

    # actions -------------------------------------------------------------

    def _slots_of(self, space_name: str) -> list[str]:
        space_id = self._space_by_name[space_name]
        doc = self._session.get(f"{self.base_url}/spaces/{space_id}", timeout=5).json()
        return [s["state"] for s in doc["slots"]]

    def _snapshot_all(self, t_ms: int, tag: dict) -> None:
        for name in sorted(self.nodes):
            self.emit(t_ms, name, {"type": "cloud_slots", "slots": self._slots_of(name), **tag})

    def _do_action(self, index: int, action: dict, t_ms: int) -> None:
        self._snapshot_all(t_ms, {"before_action": index})
        kind = action["type"]
        if kind == "card_tap":
            node = self.nodes[action["space"]]
            self.run_effects(
                node, node.on_card_tap(action["lane"], action["uid"].upper(), self.now_dt(t_ms)), t_ms
            )
        elif kind == "partition":
            node = self.nodes[action["space"]]
            self._disconnect(node, t_ms)
            heal_at = t_ms + action.get("duration_ms", 1000)
            self.schedule(heal_at, lambda t, node=node: self._connect(node, t))
        elif kind == "delay":
            self.nodes[action["space"]].extra_latency_ms = action.get("latency_ms", 0)
        elif kind == "drop_next":
            self.nodes[action["space"]].drop_next += action.get("n", 1)
        elif kind == "advance_time":
            pass
        elif kind == "reserve":
            uid = action["uid"].upper()
            headers = {"Authorization": f"Bearer {self._bearer_by_uid[uid]}"}
            space_id = self._space_by_name[action["space"]]
            resp = self._session.post(
                f"{self.base_url}/spaces/{space_id}/reservations",
                json={"slot_no": action["slot_no"]},
                headers=headers,
                timeout=5,
            )
            if resp.status_code == 201:
                self._reservation_by_uid[uid] = resp.json()["reservation_id"]
                self.emit(t_ms, action["space"], {"type": "api", "op": "reserve", "ok": True})
            else:
                self.emit(
                    t_ms,
                    action["space"],
                    {"type": "api", "op": "reserve", "ok": False, "error": resp.json().get("error")},
                )
        elif kind == "cancel":
            uid = action["uid"].upper()
            reservation_id = self._reservation_by_uid.get(uid)
            if reservation_id is None:
                self.emit(t_ms, None, {"type": "api", "op": "cancel", "ok": False, "error": "no_active"})
                return
            headers = {"Authorization": f"Bearer {self._bearer_by_uid[uid]}"}
            resp = self._session.delete(
                f"{self.base_url}/reservations/{reservation_id}", headers=headers, timeout=5
            )
            self.emit(t_ms, None, {"type": "api", "op": "cancel", "ok": resp.status_code == 204})

    def run(self) -> SimulationTrace:
        import time

        self._t0 = time.monotonic()
        self.emit(0, None, {"type": "start", "seed": self.scenario.seed})
        horizon = self.config.end_settle_ms
        for action in self.scenario.actions:
            tail = action["at"] + action.get("duration_ms", 0)
            horizon = max(horizon, tail + self.config.end_settle_ms)
        for node in self.nodes.values():
            self._connect(node, 0)
            self.schedule(
                self.config.heartbeat_interval_ms,
                lambda t, node=node: self.run_effects(
                    node, node.on_timer(("heartbeat",), self.now_dt(t)), t
                ),
            )
        for index, action in enumerate(self.scenario.actions):
            self.schedule(action["at"], lambda t, i=index, a=action: self._do_action(i, a, t))

        while True:
            now_ms = self._now_ms()
            if now_ms >= horizon and not self._heap:
                break
            if self._heap and self._heap[0][0] <= now_ms:
                t_ms, _tick, fn = heapq.heappop(self._heap)
                if t_ms > horizon:
                    self._heap.clear()
                    continue
                fn(max(t_ms, now_ms))
                continue
            next_deadline = min(
                self._heap[0][0] if self._heap else horizon, horizon
            )
            self._poll_sockets(min(0.02, max(0.001, (next_deadline - now_ms) / 1000)))
        self._snapshot_all(horizon, {"final": True})
        for name in list(self._sockets):
            self._disconnect(self.nodes[name], horizon)
        return self.trace
