"""CLI against a real `smartpark serve` subprocess: registry commands,
scenario runs, restart preservation, corrupt log reporting."""

import json
import signal
import socket
import struct
import subprocess
import sys
import time
from pathlib import Path

import pytest
import requests
from click.testing import CliRunner

from smartpark.cli import main

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "smartpark" / "scenarios"


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _wait_http(url, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            requests.get(f"{url}/healthz", timeout=1)
            return
        except requests.RequestException:
            time.sleep(0.05)
    raise AssertionError(f"server at {url} never came up")


class Server:
    def __init__(self, data_dir, extra=()):
        self.http_port = _free_port()
        self.device_port = _free_port()
        self.url = f"http://127.0.0.1:{self.http_port}"
        self.proc = subprocess.Popen(
            [
                sys.executable,
                "-m",
                "smartpark.cli",
                "serve",
                "--data-dir",
                str(data_dir),
                "--http",
                f"127.0.0.1:{self.http_port}",
                "--device",
                f"127.0.0.1:{self.device_port}",
                *extra,
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
        _wait_http(self.url)

    def stop(self):
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            self.proc.wait(timeout=10)


@pytest.fixture
def server(tmp_path):
    srv = Server(tmp_path / "data")
    yield srv
    srv.stop()


def run_cli(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


ADD_SPACE = ["space", "add", "--name", "Lot A", "--lat", "0.315", "--lng", "32.582", "--capacity", "2"]
ADD_MOTORIST = [
    "motorist", "add", "--name", "Jane", "--national-id", "CM1", "--uid", "9C7A31B4",
]


class TestRegistryCommands:
    def test_space_add_prints_id_and_token(self, server):
        result = run_cli(*ADD_SPACE, "--server", server.url)
        assert result.exit_code == 0
        assert "space sp-000001 (Lot A)" in result.output
        assert "device token:" in result.output

    def test_space_add_then_ls(self, server):
        run_cli(*ADD_SPACE, "--server", server.url)
        result = run_cli("space", "ls", "--server", server.url)
        assert result.exit_code == 0
        assert "sp-000001" in result.output and "Lot A" in result.output

    def test_space_ls_json(self, server):
        run_cli(*ADD_SPACE, "--server", server.url)
        result = run_cli("space", "ls", "--server", server.url, "--json")
        listing = json.loads(result.output)
        assert listing[0]["counts"]["vacant"] == 2

    def test_space_add_idempotent(self, server):
        run_cli(*ADD_SPACE, "--server", server.url)
        again = run_cli(*ADD_SPACE, "--if-exists", "ok", "--server", server.url)
        assert again.exit_code == 0 and "sp-000001" in again.output
        assert len(requests.get(f"{server.url}/spaces").json()) == 1

    def test_motorist_add_and_duplicate(self, server):
        first = run_cli(*ADD_MOTORIST, "--server", server.url)
        assert first.exit_code == 0
        assert "motorist mo-000001" in first.output and "api token:" in first.output
        # an exact repeat is an idempotent re-registration
        repeat = run_cli(*ADD_MOTORIST, "--server", server.url)
        assert repeat.exit_code == 0 and "mo-000001" in repeat.output
        # same card under a different identity is a real conflict
        conflict = run_cli(
            "motorist", "add", "--name", "Jane", "--national-id", "OTHER",
            "--uid", "9C7A31B4", "--server", server.url,
        )
        assert conflict.exit_code == 1
        recovered = run_cli(
            "motorist", "add", "--name", "Jane", "--national-id", "OTHER",
            "--uid", "9C7A31B4", "--if-exists", "ok", "--server", server.url,
        )
        assert recovered.exit_code == 0 and "mo-000001" in recovered.output

    def test_card_bind_and_duplicate(self, server):
        run_cli(*ADD_MOTORIST, "--server", server.url)
        rebind = run_cli(
            "card", "bind", "--motorist", "mo-000001", "--uid", "A1B2C3D4", "--server", server.url
        )
        assert rebind.exit_code == 0 and "A1B2C3D4" in rebind.output
        other = run_cli(
            "motorist", "add", "--name", "Amos", "--national-id", "CM2", "--uid", "9C7A31B4",
            "--server", server.url,
        )
        assert other.exit_code == 0  # old uid was freed by the rebind
        stolen = run_cli(
            "card", "bind", "--motorist", "mo-000001", "--uid", "9C7A31B4", "--server", server.url
        )
        assert stolen.exit_code == 1

    def test_unreachable_server_exits_2(self):
        result = run_cli("space", "ls", "--server", "http://127.0.0.1:1")
        assert result.exit_code == 2


class TestSimRun:
    def test_missing_script_exits_2(self, tmp_path):
        result = run_cli("sim", "run", str(tmp_path / "nope.json"), "--virtual")
        assert result.exit_code == 2

    def test_bad_script_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"actions": [{"at": -5, "type": "advance_time"}]}')
        result = run_cli("sim", "run", str(bad), "--virtual")
        assert result.exit_code == 2

    def test_fig5_flow_against_live_server(self, server, tmp_path):
        trace_path = tmp_path / "fig5.trace.jsonl"
        result = run_cli(
            "sim", "run", str(SCENARIOS / "fig5_flow.json"),
            "--against", server.url, "--trace", str(trace_path),
        )
        assert result.exit_code == 0, result.output
        assert "FAIL" not in result.output
        entries = [json.loads(line) for line in trace_path.read_text().splitlines()]
        assert any(e["type"] == "gate" and e["state"] == "open" for e in entries)

    def test_fail_closed_against_live_server(self, server, tmp_path):
        result = run_cli(
            "sim", "run", str(SCENARIOS / "fail_closed.json"),
            "--against", server.url, "--trace", str(tmp_path / "t.jsonl"),
        )
        assert result.exit_code == 0, result.output

    def test_assertion_failure_exits_1(self, tmp_path):
        doc = json.loads((SCENARIOS / "fig5_flow.json").read_text())
        doc["assertions"] = [
            {"type": "slot_state", "space": "Lot A", "slot_no": 1, "state": "occupied"}
        ]
        script = tmp_path / "wrong.json"
        script.write_text(json.dumps(doc))
        result = run_cli("sim", "run", str(script), "--virtual", "--trace", str(tmp_path / "t.jsonl"))
        assert result.exit_code == 1
        assert "first failure" in result.output or "FAIL" in result.output


class TestServeLifecycle:
    def test_state_survives_restart(self, tmp_path):
        data = tmp_path / "data"
        srv = Server(data)
        try:
            run_cli(*ADD_SPACE, "--server", srv.url)
            token = requests.post(
                f"{srv.url}/motorists",
                json={
                    "full_name": "J", "nationality": "UG", "national_id": "CM1",
                    "contact": "c", "rfid_uid": "9C7A31B4",
                },
            ).json()["token"]
            requests.post(
                f"{srv.url}/spaces/sp-000001/reservations",
                json={"slot_no": 2},
                headers={"Authorization": f"Bearer {token}"},
            )
        finally:
            srv.stop()

        srv = Server(data)
        try:
            listing = requests.get(f"{srv.url}/spaces").json()
            assert listing[0]["counts"] == {"vacant": 1, "reserved": 1, "occupied": 0}
            # tokens derive from the persisted secret: still valid after restart
            resp = requests.post(
                f"{srv.url}/spaces/sp-000001/reservations",
                json={"slot_no": 2},
                headers={"Authorization": f"Bearer {token}"},
            )
            assert resp.status_code == 409  # recognized caller, claim exists
        finally:
            srv.stop()

    def test_corrupt_log_exits_2_with_seq(self, tmp_path):
        data = tmp_path / "data"
        srv = Server(data)
        run_cli(*ADD_SPACE, "--server", srv.url)
        run_cli(*ADD_MOTORIST, "--server", srv.url)
        srv.stop()

        log_path = data / "events.log"
        blob = bytearray(log_path.read_bytes())
        blob[8 + 4] ^= 0xFF  # flip a byte inside record 1's payload
        log_path.write_bytes(bytes(blob))

        proc = subprocess.run(
            [
                sys.executable, "-m", "smartpark.cli", "serve",
                "--data-dir", str(data), "--http", "127.0.0.1:0", "--device", "127.0.0.1:0",
            ],
            capture_output=True,
            text=True,
            timeout=30,
        )
        assert proc.returncode == 2
        assert "seq 1" in proc.stderr
