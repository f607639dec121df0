"""HTTP API: endpoints, auth, color mapping, stream continuity."""

import json
import queue
import threading

import pytest
import requests

from smartpark.eventlog import EventLog
from smartpark.service import ParkingService
from smartpark.store import LOG_FILENAME

from conftest import T0, at

SPACE_BODY = {
    "name": "Lot A",
    "location": {"latitude": 0.315, "longitude": 32.582},
    "capacity": 2,
    "admin_name": "K. Admin",
    "admin_contact": "+256-700",
    "tariff": {
        "free": True,
        "rate_per_unit": 0,
        "billing_unit_minutes": 15,
        "free_minutes": 0,
    },
}


def motorist_body(uid="9C7A31B4", national_id="CM123"):
    return {
        "full_name": "Jane Doe",
        "nationality": "Ugandan",
        "national_id": national_id,
        "contact": "+256-701",
        "rfid_uid": uid,
    }


@pytest.fixture
def service(tmp_path):
    clock = [T0]
    svc = ParkingService(
        tmp_path / "data",
        clock=lambda: clock[0],
        stream_heartbeat=0.15,
        sweep_interval=None,
    )
    svc.clock_value = clock
    svc.start()
    yield svc
    svc.stop()


@pytest.fixture
def url(service):
    return service.base_url


def _auth(token):
    return {"Authorization": f"Bearer {token}"}


class StreamReader:
    """Background line reader over GET /events."""

    def __init__(self, url, since=0, token=None):
        params = {"since": since}
        if token:
            params["token"] = token
        self.response = requests.get(f"{url}/events", params=params, stream=True, timeout=10)
        self.lines: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    def _pump(self):
        try:
            for line in self.response.iter_lines():
                self.lines.put(line.decode())
        except Exception:
            pass
        self.lines.put(None)

    def next_line(self, timeout=5):
        return self.lines.get(timeout=timeout)

    def next_event(self, timeout=5):
        while True:
            line = self.next_line(timeout)
            if line is None:
                raise AssertionError("stream closed")
            if line.startswith("#") or not line:
                continue
            return json.loads(line)

    def close(self):
        self.response.close()


# ---------------------------------------------------------------------------

class TestRegistration:
    def test_register_motorist_issues_token(self, url):
        resp = requests.post(f"{url}/motorists", json=motorist_body())
        assert resp.status_code == 201
        doc = resp.json()
        assert doc["motorist_id"] == "mo-000001"
        assert doc["rfid_uid"] == "9C7A31B4"
        assert len(doc["token"]) == 32

    def test_duplicate_uid_is_409(self, url):
        requests.post(f"{url}/motorists", json=motorist_body())
        resp = requests.post(f"{url}/motorists", json=motorist_body(national_id="OTHER"))
        assert resp.status_code == 409
        assert resp.json()["error"] == "duplicate_credential"

    def test_exact_reregistration_is_idempotent(self, url):
        first = requests.post(f"{url}/motorists", json=motorist_body())
        again = requests.post(f"{url}/motorists", json=motorist_body())
        assert first.status_code == 201 and again.status_code == 200
        assert again.json()["motorist_id"] == first.json()["motorist_id"]
        assert again.json()["token"] == first.json()["token"]

    def test_malformed_uid_is_422(self, url):
        resp = requests.post(f"{url}/motorists", json=motorist_body(uid="XYZ"))
        assert resp.status_code == 422

    def test_missing_field_is_422(self, url):
        body = motorist_body()
        del body["full_name"]
        assert requests.post(f"{url}/motorists", json=body).status_code == 422

    def test_register_space_returns_device_token(self, url, service):
        resp = requests.post(f"{url}/spaces", json=SPACE_BODY)
        assert resp.status_code == 201
        doc = resp.json()
        assert doc["space_id"] == "sp-000001"
        assert doc["device_token"] == service.tokens.device_token("sp-000001")

    def test_register_space_validation(self, url):
        bad = dict(SPACE_BODY, capacity=0)
        assert requests.post(f"{url}/spaces", json=bad).status_code == 422
        bad = dict(SPACE_BODY, location={"latitude": 99.0, "longitude": 0.0})
        assert requests.post(f"{url}/spaces", json=bad).status_code == 422

    def test_rebind_credential(self, url):
        token = requests.post(f"{url}/motorists", json=motorist_body()).json()["token"]
        resp = requests.put(
            f"{url}/motorists/mo-000001/credential",
            json={"rfid_uid": "A1B2C3D4"},
            headers=_auth(token),
        )
        assert resp.status_code == 200
        assert resp.json()["rfid_uid"] == "A1B2C3D4"

    def test_rebind_other_motorist_forbidden(self, url):
        requests.post(f"{url}/motorists", json=motorist_body())
        other = requests.post(
            f"{url}/motorists", json=motorist_body(uid="11223344", national_id="Z9")
        ).json()
        resp = requests.put(
            f"{url}/motorists/mo-000001/credential",
            json={"rfid_uid": "55667788"},
            headers=_auth(other["token"]),
        )
        assert resp.status_code == 403


class TestSpaces:
    def test_empty_registry(self, url):
        resp = requests.get(f"{url}/spaces")
        assert resp.status_code == 200 and resp.json() == []

    def test_fresh_two_slot_lot(self, url):
        requests.post(f"{url}/spaces", json=SPACE_BODY)
        listing = requests.get(f"{url}/spaces").json()
        assert len(listing) == 1
        assert listing[0]["counts"] == {"vacant": 2, "reserved": 0, "occupied": 0}
        assert listing[0]["reservation_ttl_minutes"] == 30
        assert listing[0]["edge_status"] == "offline"

    def test_detail_colors_follow_lifecycle(self, url, service):
        requests.post(f"{url}/spaces", json=SPACE_BODY)
        token = requests.post(f"{url}/motorists", json=motorist_body()).json()["token"]

        detail = requests.get(f"{url}/spaces/sp-000001").json()
        assert [s["color"] for s in detail["slots"]] == ["green", "green"]

        requests.post(f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token))
        detail = requests.get(f"{url}/spaces/sp-000001", headers=_auth(token)).json()
        assert detail["slots"][0]["color"] == "orange"
        assert detail["slots"][0]["reserved_by_me"] is True
        assert detail["slots"][1]["color"] == "green"

        service.store.check_in("sp-000001", "9C7A31B4", now=at(1))
        detail = requests.get(f"{url}/spaces/sp-000001", headers=_auth(token)).json()
        assert detail["slots"][0]["color"] == "red"
        assert detail["slots"][0]["state"] == "occupied"

    def test_unknown_space_404(self, url):
        assert requests.get(f"{url}/spaces/sp-999999").status_code == 404

    def test_counts_match_recount_oracle(self, url, service):
        requests.post(f"{url}/spaces", json=SPACE_BODY)
        token = requests.post(f"{url}/motorists", json=motorist_body()).json()["token"]
        requests.post(f"{url}/spaces/sp-000001/reservations", json={"slot_no": 2}, headers=_auth(token))
        listing = requests.get(f"{url}/spaces").json()[0]
        space = service.store.get_space("sp-000001")
        recount = {
            "vacant": sum(1 for s in space.slots if s.kind == "vacant"),
            "reserved": sum(1 for s in space.slots if s.kind == "reserved"),
            "occupied": sum(1 for s in space.slots if s.kind == "occupied"),
        }
        assert listing["counts"] == recount


class TestReservations:
    def _setup(self, url, capacity=2):
        body = dict(SPACE_BODY, capacity=capacity)
        requests.post(f"{url}/spaces", json=body)
        return requests.post(f"{url}/motorists", json=motorist_body()).json()["token"]

    def test_reserve_sets_ttl_expiry(self, url):
        token = self._setup(url)
        resp = requests.post(
            f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token)
        )
        assert resp.status_code == 201
        doc = resp.json()
        assert doc["expires_at"] == "2025-06-01T08:30:00.000000Z"  # now + 30 min
        assert doc["status"] == "active"

    def test_unauthenticated_401(self, url):
        self._setup(url)
        resp = requests.post(f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1})
        assert resp.status_code == 401

    def test_second_reservation_same_motorist_409(self, url):
        token = self._setup(url)
        requests.post(f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token))
        resp = requests.post(
            f"{url}/spaces/sp-000001/reservations", json={"slot_no": 2}, headers=_auth(token)
        )
        assert resp.status_code == 409
        assert resp.json()["error"] == "motorist_has_active_claim"

    def test_unknown_space_and_slot_404(self, url):
        token = self._setup(url)
        assert (
            requests.post(
                f"{url}/spaces/sp-000042/reservations", json={"slot_no": 1}, headers=_auth(token)
            ).status_code
            == 404
        )
        assert (
            requests.post(
                f"{url}/spaces/sp-000001/reservations", json={"slot_no": 9}, headers=_auth(token)
            ).status_code
            == 404
        )

    def test_race_for_last_slot_one_winner(self, url):
        requests.post(f"{url}/spaces", json=dict(SPACE_BODY, capacity=1))
        tokens = [
            requests.post(
                f"{url}/motorists",
                json=motorist_body(uid=f"1122334{i}", national_id=f"R{i}"),
            ).json()["token"]
            for i in range(4)
        ]
        results = []

        def grab(token):
            resp = requests.post(
                f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token)
            )
            results.append(resp.status_code)

        threads = [threading.Thread(target=grab, args=(t,)) for t in tokens]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results) == [201, 409, 409, 409]

    def test_cancel_own_reservation(self, url):
        token = self._setup(url)
        rid = requests.post(
            f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token)
        ).json()["reservation_id"]
        assert requests.delete(f"{url}/reservations/{rid}", headers=_auth(token)).status_code == 204
        detail = requests.get(f"{url}/spaces/sp-000001").json()
        assert detail["slots"][0]["color"] == "green"

    def test_cancel_foreign_reservation_403(self, url):
        token = self._setup(url)
        rid = requests.post(
            f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token)
        ).json()["reservation_id"]
        other = requests.post(
            f"{url}/motorists", json=motorist_body(uid="11223344", national_id="B7")
        ).json()["token"]
        assert requests.delete(f"{url}/reservations/{rid}", headers=_auth(other)).status_code == 403

    def test_cancel_after_check_in_409(self, url, service):
        token = self._setup(url)
        rid = requests.post(
            f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token)
        ).json()["reservation_id"]
        service.store.check_in("sp-000001", "9C7A31B4", now=at(1))
        resp = requests.delete(f"{url}/reservations/{rid}", headers=_auth(token))
        assert resp.status_code == 409

    def test_cancel_unknown_404(self, url):
        token = self._setup(url)
        assert requests.delete(f"{url}/reservations/rv-000077", headers=_auth(token)).status_code == 404

    def test_mutation_logged_before_response(self, url, service, tmp_path):
        token = self._setup(url)
        resp = requests.post(
            f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token)
        )
        assert resp.status_code == 201
        log = EventLog(tmp_path / "data" / LOG_FILENAME)
        assert log.records[-1].kind == "SlotReserved"
        assert log.records[-1].payload["reservation_id"] == resp.json()["reservation_id"]
        log.close()


class TestEventStream:
    def test_fresh_stream_gets_only_heartbeats(self, url):
        reader = StreamReader(url)
        line = reader.next_line()
        assert line.startswith("# hb")
        reader.close()

    def test_reserve_event_delivered_live(self, url):
        requests.post(f"{url}/spaces", json=SPACE_BODY)
        token = requests.post(f"{url}/motorists", json=motorist_body()).json()["token"]
        reader = StreamReader(url, token=token)
        requests.post(f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token))
        event = reader.next_event()
        assert event["seq"] == 1
        assert event["cause"] == "reserved"
        assert event["slot"] == {
            "slot_no": 1,
            "state": "reserved",
            "color": "orange",
            "reserved_by_me": True,
        }
        reader.close()

    def test_since_replays_history_without_gaps(self, url, service):
        requests.post(f"{url}/spaces", json=SPACE_BODY)
        token = requests.post(f"{url}/motorists", json=motorist_body()).json()["token"]
        rid = requests.post(
            f"{url}/spaces/sp-000001/reservations", json={"slot_no": 1}, headers=_auth(token)
        ).json()["reservation_id"]
        requests.delete(f"{url}/reservations/{rid}", headers=_auth(token))
        requests.post(f"{url}/spaces/sp-000001/reservations", json={"slot_no": 2}, headers=_auth(token))

        reader = StreamReader(url, since=0)
        seqs = [reader.next_event()["seq"] for _ in range(3)]
        assert seqs == [1, 2, 3]
        reader.close()

        reader = StreamReader(url, since=2)
        event = reader.next_event()
        assert event["seq"] == 3 and event["cause"] == "reserved"
        reader.close()

    def test_reconnect_with_since_no_gaps_no_duplicates(self, url, service):
        requests.post(f"{url}/spaces", json=dict(SPACE_BODY, capacity=4))
        token = requests.post(f"{url}/motorists", json=motorist_body()).json()["token"]
        seen = []
        last = 0
        for round_no in range(4):
            reader = StreamReader(url, since=last)
            rid = requests.post(
                f"{url}/spaces/sp-000001/reservations", json={"slot_no": round_no + 1}, headers=_auth(token)
            ).json()["reservation_id"]
            requests.delete(f"{url}/reservations/{rid}", headers=_auth(token))
            seen.append(reader.next_event()["seq"])
            seen.append(reader.next_event()["seq"])
            last = seen[-1]
            reader.close()
        assert seen == list(range(1, 9))

    def test_snapshot_plus_deltas_matches_later_snapshot(self, url, service):
        """A client applying stream events to a GET snapshot must converge
        on the next GET snapshot."""
        requests.post(f"{url}/spaces", json=dict(SPACE_BODY, capacity=3))
        token = requests.post(f"{url}/motorists", json=motorist_body()).json()["token"]

        snapshot = requests.get(f"{url}/spaces/sp-000001", headers=_auth(token)).json()
        grid = {s["slot_no"]: s for s in snapshot["slots"]}
        reader = StreamReader(url, since=snapshot["as_of_seq"], token=token)

        rid = requests.post(
            f"{url}/spaces/sp-000001/reservations", json={"slot_no": 2}, headers=_auth(token)
        ).json()["reservation_id"]
        requests.delete(f"{url}/reservations/{rid}", headers=_auth(token))
        requests.post(f"{url}/spaces/sp-000001/reservations", json={"slot_no": 3}, headers=_auth(token))

        for _ in range(3):
            event = reader.next_event()
            grid[event["slot"]["slot_no"]] = event["slot"]
        reader.close()

        fresh = requests.get(f"{url}/spaces/sp-000001", headers=_auth(token)).json()
        assert {s["slot_no"]: s for s in fresh["slots"]} == grid


class TestMeta:
    def test_healthz_reports_device_address(self, url, service):
        doc = requests.get(f"{url}/healthz").json()
        assert doc["status"] == "ok"
        host, port = doc["device_address"].rsplit(":", 1)
        assert int(port) == service.device_address[1]

    def test_unknown_route_404(self, url):
        assert requests.get(f"{url}/nope").status_code == 404

    def test_bad_json_body_400(self, url):
        resp = requests.post(
            f"{url}/motorists", data=b"{oops", headers={"Content-Type": "application/json"}
        )
        assert resp.status_code == 400
