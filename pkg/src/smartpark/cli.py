"""Operator command line.

All mutations go through the public HTTP API of a running server; only
`serve` touches the data directory. Exit codes: 0 success, 1 domain
failure (HTTP 4xx, failed scenario assertion), 2 usage or I/O trouble.
"""

from __future__ import annotations

import json
import logging
import signal
import sys
import threading
from datetime import timedelta
from pathlib import Path

import click
import requests

from .eventlog import CorruptLog
from .service import ParkingService
from .simulator import ScriptError, TcpScenarioRunner, VirtualScenarioRunner, load_script

ENV_SERVER = "SMARTPARK_SERVER"


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise click.UsageError(f"address must be HOST:PORT, got {text!r}")
    return host, int(port)


def _die(message: str, code: int = 1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _request(method: str, url: str, **kwargs) -> requests.Response:
    try:
        return requests.request(method, url, timeout=10, **kwargs)
    except requests.RequestException as exc:
        _die(f"cannot reach server: {exc}", 2)


def _fail_from(resp: requests.Response):
    try:
        doc = resp.json()
        message = f"{doc.get('error')}: {doc.get('message')}"
    except ValueError:
        message = resp.text
    _die(f"server said {resp.status_code} ({message})", 1)


@click.group()
def main():
    """Smart parking platform operator tool."""


# ---------------------------------------------------------------------------
# serve

@main.command()
@click.option("--data-dir", envvar="SMARTPARK_DATA_DIR", required=True, type=click.Path())
@click.option("--http", "http_addr", envvar="SMARTPARK_HTTP", default="127.0.0.1:8483", show_default=True)
@click.option("--device", "device_addr", envvar="SMARTPARK_DEVICE", default="127.0.0.1:8484", show_default=True)
@click.option("--ttl-minutes", envvar="SMARTPARK_TTL_MINUTES", default=30, show_default=True, type=int)
@click.option("--heartbeat-seconds", envvar="SMARTPARK_HEARTBEAT_SECONDS", default=5.0, show_default=True, type=float)
@click.option("--allow-walk-in", is_flag=True, default=False)
@click.option("--verbose", is_flag=True, default=False)
def serve(data_dir, http_addr, device_addr, ttl_minutes, heartbeat_seconds, allow_walk_in, verbose):
    """Run the HTTP API and the device-link listener; replays the log first."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    try:
        service = ParkingService(
            Path(data_dir),
            http_addr=_parse_addr(http_addr),
            device_addr=_parse_addr(device_addr),
            reservation_ttl=timedelta(minutes=ttl_minutes),
            allow_walk_in=allow_walk_in,
            heartbeat_interval=heartbeat_seconds,
        )
    except CorruptLog as exc:
        click.echo(f"corrupt event log: first bad record at seq {exc.first_bad_seq}", err=True)
        sys.exit(2)
    except OSError as exc:
        click.echo(f"cannot open data dir: {exc}", err=True)
        sys.exit(2)
    try:
        service.start()
    except OSError as exc:
        click.echo(f"cannot bind: {exc}", err=True)
        sys.exit(2)
    click.echo(
        "listening http=%s:%d device=%s:%d data=%s"
        % (*service.http_address, *service.device_address, data_dir),
        err=False,
    )
    sys.stdout.flush()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    service.stop()


# ---------------------------------------------------------------------------
# registry commands

_server_option = click.option(
    "--server", envvar=ENV_SERVER, default="http://127.0.0.1:8483", show_default=True
)
_json_option = click.option("--json", "as_json", is_flag=True, default=False, help="machine output")


@main.group()
def space():
    """Parking space registry."""


@space.command("add")
@_server_option
@_json_option
@click.option("--name", required=True)
@click.option("--lat", type=float, required=True)
@click.option("--lng", type=float, required=True)
@click.option("--capacity", type=int, required=True)
@click.option("--admin-name", default="unknown", show_default=True)
@click.option("--admin-contact", default="n/a", show_default=True)
@click.option("--free/--paid", "free", default=True, show_default=True)
@click.option("--rate", type=int, default=0, help="minor units per billing unit")
@click.option("--unit-minutes", type=int, default=15, show_default=True)
@click.option("--free-minutes", type=int, default=0, show_default=True)
@click.option("--currency", default="UGX", show_default=True)
@click.option("--if-exists", type=click.Choice(["fail", "ok"]), default="fail", show_default=True)
def space_add(server, as_json, name, lat, lng, capacity, admin_name, admin_contact,
              free, rate, unit_minutes, free_minutes, currency, if_exists):
    """Register a lot; prints its id and the edge device token."""
    doc = None
    if if_exists == "ok":
        # names carry no server-side uniqueness; the pre-check makes re-runs safe
        listing = _request("GET", f"{server}/spaces")
        if listing.status_code == 200:
            doc = next((s for s in listing.json() if s["name"] == name), None)
    if doc is None:
        body = {
            "name": name,
            "location": {"latitude": lat, "longitude": lng},
            "capacity": capacity,
            "admin_name": admin_name,
            "admin_contact": admin_contact,
            "tariff": {
                "free": free,
                "rate_per_unit": rate,
                "billing_unit_minutes": unit_minutes,
                "free_minutes": free_minutes,
                "currency": currency,
            },
        }
        resp = _request("POST", f"{server}/spaces", json=body)
        if resp.status_code != 201:
            _fail_from(resp)
        doc = resp.json()
    if as_json:
        click.echo(json.dumps(doc))
    else:
        click.echo(f"space {doc['space_id']} ({doc['name']})")
        if "device_token" in doc:
            click.echo(f"device token: {doc['device_token']}")


@space.command("ls")
@_server_option
@_json_option
def space_ls(server, as_json):
    """List spaces with live availability counts."""
    listing = _request("GET", f"{server}/spaces")
    if listing.status_code != 200:
        _fail_from(listing)
    spaces = listing.json()
    if as_json:
        click.echo(json.dumps(spaces))
        return
    if not spaces:
        click.echo("no spaces registered")
        return
    header = f"{'ID':<12} {'NAME':<20} {'CAP':>3} {'VAC':>3} {'RES':>3} {'OCC':>3} {'EDGE':<8}"
    click.echo(header)
    for doc in spaces:
        counts = doc["counts"]
        click.echo(
            f"{doc['space_id']:<12} {doc['name']:<20} {doc['capacity']:>3} "
            f"{counts['vacant']:>3} {counts['reserved']:>3} {counts['occupied']:>3} "
            f"{doc['edge_status']:<8}"
        )


@main.group()
def motorist():
    """Motorist registry."""


@motorist.command("add")
@_server_option
@_json_option
@click.option("--name", required=True)
@click.option("--nationality", default="n/a", show_default=True)
@click.option("--national-id", required=True)
@click.option("--contact", default="n/a", show_default=True)
@click.option("--uid", required=True, help="RFID card uid, hex")
@click.option("--if-exists", type=click.Choice(["fail", "ok"]), default="fail", show_default=True)
def motorist_add(server, as_json, name, nationality, national_id, contact, uid, if_exists):
    """Register a motorist and bind their RFID card; prints the API token."""
    body = {
        "full_name": name,
        "nationality": nationality,
        "national_id": national_id,
        "contact": contact,
        "rfid_uid": uid,
    }
    resp = _request("POST", f"{server}/motorists", json=body)
    if resp.status_code in (200, 201):  # 200: identical identity re-registered
        doc = resp.json()
    elif if_exists == "ok" and resp.status_code == 409:
        lookup = _request("GET", f"{server}/motorists", params={"uid": uid})
        if lookup.status_code != 200:
            _fail_from(resp)
        doc = lookup.json()
    else:
        _fail_from(resp)
    if as_json:
        click.echo(json.dumps(doc))
    else:
        click.echo(f"motorist {doc['motorist_id']} uid={doc['rfid_uid']}")
        if "token" in doc:
            click.echo(f"api token: {doc['token']}")


@main.group()
def card():
    """RFID credential management."""


@card.command("bind")
@_server_option
@_json_option
@click.option("--motorist", "motorist_id", required=True)
@click.option("--uid", required=True, help="replacement card uid, hex")
def card_bind(server, as_json, motorist_id, uid):
    """Bind a replacement card to an existing motorist."""
    resp = _request("PUT", f"{server}/motorists/{motorist_id}/credential", json={"rfid_uid": uid})
    if resp.status_code != 200:
        _fail_from(resp)
    doc = resp.json()
    if as_json:
        click.echo(json.dumps(doc))
    else:
        click.echo(f"motorist {doc['motorist_id']} now bound to {doc['rfid_uid']}")


# ---------------------------------------------------------------------------
# simulator

@main.group()
def sim():
    """Edge-node scenario simulator."""


@sim.command("run")
@click.argument("script", type=click.Path())
@click.option("--against", help="base URL of a running server (loopback TCP mode)")
@click.option("--virtual", is_flag=True, default=False, help="run fully in-process")
@click.option("--registry", "registry_path", type=click.Path(), help="registry JSON (defaults to script's)")
@click.option("--trace", "trace_path", type=click.Path(), help="trace output (JSON lines)")
@_json_option
def sim_run(script, against, virtual, registry_path, trace_path, as_json):
    """Execute a scenario script; exit 0 iff its assertions all pass."""
    if not Path(script).exists():
        _die(f"script not found: {script}", 2)
    try:
        scenario = load_script(script)
        with open(script, encoding="utf-8") as fh:
            script_doc = json.load(fh)
        if registry_path:
            with open(registry_path, encoding="utf-8") as fh:
                registry = json.load(fh)
        else:
            registry = script_doc.get("registry")
        if not registry:
            _die("no registry: embed one in the script or pass --registry", 2)
        if virtual and against:
            _die("choose one of --virtual or --against", 2)
        if not virtual and not against:
            _die("need --against URL (or --virtual)", 2)
        if virtual:
            runner = VirtualScenarioRunner(scenario, registry)
        else:
            runner = TcpScenarioRunner(scenario, registry, against)
    except (ScriptError, OSError, json.JSONDecodeError) as exc:
        _die(str(exc), 2)
    except requests.RequestException as exc:
        _die(f"cannot reach server: {exc}", 2)

    trace = runner.run()
    out_path = Path(trace_path) if trace_path else Path(script).with_suffix(".trace.jsonl")
    out_path.write_text(trace.to_jsonl(), encoding="utf-8")

    results = runner.evaluate_assertions()
    failed = [(a, msg) for a, ok, msg in results if not ok]
    if as_json:
        click.echo(
            json.dumps(
                {
                    "trace": str(out_path),
                    "passed": len(results) - len(failed),
                    "failed": len(failed),
                    "failures": [{"assertion": a, "message": m} for a, m in failed],
                }
            )
        )
    else:
        for assertion, ok, message in results:
            click.echo(f"{'PASS' if ok else 'FAIL'} {json.dumps(assertion)} ({message})")
        click.echo(f"trace written to {out_path}")
    if failed:
        first, message = failed[0]
        click.echo(f"first failure: {json.dumps(first)}: {message}", err=True)
        sys.exit(1)


@sim.command("scripts")
def sim_scripts():
    """Print the directory holding the bundled scenario scripts."""
    click.echo(str(Path(__file__).parent / "scenarios"))


if __name__ == "__main__":
    main()
