"""Process composition: one store, one HTTP API, one device-link listener.

Tokens are derived from a per-deployment secret (persisted in the data
directory) so they survive restarts without ever being stored in the
event log: API bearer tokens are HMAC(secret, motorist_id), edge device
tokens HMAC(secret, space_id).
"""

from __future__ import annotations

import hmac
import hashlib
import logging
import secrets
import threading
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Optional

from .engine import DEFAULT_RESERVATION_TTL
from .gateway import DeviceGateway, DeviceLinkServer, LivenessRegistry
from .httpapi import ApiServer, STREAM_HEARTBEAT_SECONDS
from .protocol import HEARTBEAT_INTERVAL
from .store import ParkingStore

log = logging.getLogger(__name__)

SECRET_FILENAME = "secret.key"


def wall_clock() -> datetime:
    return datetime.now(timezone.utc)


class TokenIssuer:
    """Deterministic token derivation plus the reverse lookup map."""

    def __init__(self, secret: bytes):
        self._secret = secret
        self._motorist_by_token: dict[str, str] = {}
        self._lock = threading.Lock()

    def _derive(self, label: str) -> str:
        return hmac.new(self._secret, label.encode(), hashlib.sha256).hexdigest()[:32]

    def issue(self, motorist_id: str) -> str:
        token = self._derive(f"motorist:{motorist_id}")
        with self._lock:
            self._motorist_by_token[token] = motorist_id
        return token

    def motorist_for(self, token: str) -> Optional[str]:
        with self._lock:
            return self._motorist_by_token.get(token)

    def device_token(self, space_id: str) -> str:
        return self._derive(f"device:{space_id}")

    def verify_device_token(self, space_id: str, token: str) -> bool:
        return hmac.compare_digest(self.device_token(space_id), token)


def load_or_create_secret(data_dir: Path | None) -> bytes:
    if data_dir is None:
        return secrets.token_bytes(32)
    path = Path(data_dir) / SECRET_FILENAME
    if path.exists():
        return bytes.fromhex(path.read_text().strip())
    path.parent.mkdir(parents=True, exist_ok=True)
    secret = secrets.token_bytes(32)
    path.write_text(secret.hex() + "\n")
    return secret


class ParkingService:
    """Everything `smartpark serve` runs, also embeddable in tests."""

    def __init__(
        self,
        data_dir: str | Path | None,
        *,
        http_addr: tuple[str, int] = ("127.0.0.1", 0),
        device_addr: tuple[str, int] = ("127.0.0.1", 0),
        reservation_ttl: timedelta = DEFAULT_RESERVATION_TTL,
        allow_walk_in: bool = False,
        heartbeat_interval: float = HEARTBEAT_INTERVAL,
        stream_heartbeat: float = STREAM_HEARTBEAT_SECONDS,
        sweep_interval: float | None = 30.0,
        clock: Callable[[], datetime] = wall_clock,
    ):
        self.clock = clock
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.store = ParkingStore(
            self.data_dir, reservation_ttl=reservation_ttl, allow_walk_in=allow_walk_in
        )
        self.tokens = TokenIssuer(load_or_create_secret(self.data_dir))
        for motorist_id in self.store.engine.motorists:
            self.tokens.issue(motorist_id)
        self.liveness = LivenessRegistry(heartbeat_interval)
        self.gateway = DeviceGateway(
            self.store,
            self.tokens.verify_device_token,
            clock=clock,
            liveness_registry=self.liveness,
        )
        self.device_server = DeviceLinkServer(device_addr, self.gateway)
        self.http_server = ApiServer(
            http_addr,
            self.store,
            self.tokens,
            clock=clock,
            edge_status=self.liveness.status,
            meta={"device_address": "%s:%d" % self.device_server.server_address},
            stream_heartbeat=stream_heartbeat,
        )
        self._sweep_interval = sweep_interval
        self._sweeper: threading.Thread | None = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def http_address(self) -> tuple[str, int]:
        return self.http_server.server_address[:2]

    @property
    def device_address(self) -> tuple[str, int]:
        return self.device_server.server_address[:2]

    @property
    def base_url(self) -> str:
        host, port = self.http_address
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._threads = [
            self.http_server.serve_in_thread(),
            self.device_server.serve_in_thread(),
        ]
        if self._sweep_interval:
            self._sweeper = threading.Thread(
                target=self._sweep_loop, name="expiry-sweeper", daemon=True
            )
            self._sweeper.start()
        log.info(
            "serving http on %s:%d, device link on %s:%d",
            *self.http_address,
            *self.device_address,
        )

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self._sweep_interval):
            try:
                expired = self.store.expire_due(now=self.clock())
                if expired:
                    log.info("expired %d reservations", len(expired))
            except Exception:
                log.exception("expiry sweep failed")

    def stop(self) -> None:
        self._stop.set()
        self.http_server.shutdown_streams()
        self.http_server.shutdown()
        self.http_server.server_close()
        self.device_server.shutdown()
        self.device_server.server_close()
        if self._sweeper is not None:
            self._sweeper.join(timeout=2)
        self.store.close()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()
