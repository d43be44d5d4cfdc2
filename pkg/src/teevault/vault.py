"""Vault daemon: hosts submitted programs inside enclaves and polices
every byte that crosses the machine boundary.

The daemon sees programs, frame ciphertext, and resource counters. It
never sees service plaintext: content and credentials exist only
inside the enclave and inside the secure channel. The submission
surface (VCHS) is a plaintext JSON protocol because host programs are
public by design; everything service-side runs through HostProgram.

Boundary policy, each decision appended to a JSONL log:
 - ingress: sessions must arrive through the onion transport; direct
   connections are dropped without a reply;
 - egress: hosted services may answer through their own session only;
   any other destination is denied.
"""

from __future__ import annotations

import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import tee, transport
from .bucket import TokenBucket
from .encoding import canonical_dumps, unb64
from .errors import (
    AdvertiseFailed,
    BackupFailed,
    Collision,
    StartFailed,
    StartupRefused,
    SubmissionRejected,
    TeevaultError,
)
from .hp_config import parse_hp_bytes
from .host_program import EnclaveRuntime, HostProgram, PlainRuntime, ServiceStorage

RECEIVED = "Received"
INSPECTED = "Inspected"
REJECTED = "Rejected"
RUNNING = "Running"
STOPPED = "Stopped"

ALLOW = "Allow"
DENY = "Deny"

EGRESS_REPLY_PATH = "tor_client"

_DEFAULT_CAPS = ("key_import", "listen", "quote", "seal")


@dataclass(frozen=True)
class VaultConfig:
    vchs_onion: Optional[str] = None
    ram_limit_bytes: int = 64 * 1024 * 1024
    disk_limit_bytes: int = 64 * 1024 * 1024
    bandwidth_bytes_per_sec: float = 8 * 1024 * 1024.0
    bandwidth_burst_bytes: Optional[float] = None
    submission_cap_bytes: int = 1024 * 1024
    allowed_capabilities: tuple = _DEFAULT_CAPS
    backup_interval_seconds: Optional[float] = 60.0
    storage_root: Optional[str] = None
    record_traffic: bool = False

    def __post_init__(self):
        if self.ram_limit_bytes <= 0 or self.disk_limit_bytes <= 0:
            raise TeevaultError("resource limits must be positive")
        if self.bandwidth_bytes_per_sec <= 0:
            raise TeevaultError("bandwidth must be positive")
        if self.submission_cap_bytes <= 0:
            raise TeevaultError("submission cap must be positive")

    def to_json(self) -> str:
        data = {
            "vchs_onion": self.vchs_onion,
            "ram_limit_bytes": self.ram_limit_bytes,
            "disk_limit_bytes": self.disk_limit_bytes,
            "bandwidth_bytes_per_sec": self.bandwidth_bytes_per_sec,
            "bandwidth_burst_bytes": self.bandwidth_burst_bytes,
            "submission_cap_bytes": self.submission_cap_bytes,
            "allowed_capabilities": list(self.allowed_capabilities),
            "backup_interval_seconds": self.backup_interval_seconds,
            "storage_root": self.storage_root,
            "record_traffic": self.record_traffic,
        }
        return canonical_dumps(data)

    @classmethod
    def from_json(cls, text: str) -> "VaultConfig":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise TeevaultError("vault config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise TeevaultError(f"unknown vault config keys: {sorted(unknown)}")
        if "allowed_capabilities" in data:
            data["allowed_capabilities"] = tuple(data["allowed_capabilities"])
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "VaultConfig":
        return cls.from_json(Path(path).read_text())


@dataclass
class ServiceAccounting:
    bytes_in: int = 0
    bytes_out: int = 0
    sessions: int = 0
    ram_high_water: int = 0
    disk_used: int = 0


@dataclass
class HostedService:
    service_id: str
    hp_bytes: bytes
    measurement: tee.Measurement
    shielded: bool
    state: str = RECEIVED
    onion_url: Optional[str] = None
    hp: Optional[HostProgram] = None
    bucket: Optional[TokenBucket] = None
    accounting: ServiceAccounting = field(default_factory=ServiceAccounting)
    tap: list = field(default_factory=list)
    reject_reason: Optional[str] = None


def _device_to_json(device: tee.DeviceIdentity) -> str:
    # the vault owns the physical device, so it is the one component
    # allowed to read the fuse material for persistence across restarts
    return canonical_dumps(
        {
            "device_id": device.device_id.hex(),
            "root_secret": device._root_secret.hex(),
            "signing_seed": device._signing_key.private_bytes_raw().hex(),
        }
    )


def _device_from_json(text: str) -> tee.DeviceIdentity:
    data = json.loads(text)
    return tee.DeviceIdentity(
        bytes.fromhex(data["device_id"]),
        bytes.fromhex(data["root_secret"]),
        bytes.fromhex(data["signing_seed"]),
    )


def load_or_create_device(storage_root: Path) -> tee.DeviceIdentity:
    storage_root = Path(storage_root)
    storage_root.mkdir(parents=True, exist_ok=True)
    path = storage_root / "device.json"
    if path.exists():
        return _device_from_json(path.read_text())
    device = tee.DeviceIdentity.create()
    tmp = path.with_suffix(".tmp")
    tmp.write_text(_device_to_json(device))
    tmp.replace(path)
    return device


class VaultDaemon:
    """One vault machine: a device, a submission endpoint, hosted
    services, and the boundary policy between them and the network."""

    def __init__(self, config: VaultConfig, registry: transport.Registry,
                 device: Optional[tee.DeviceIdentity] = None):
        self.config = config
        self.registry = registry
        if config.storage_root is not None:
            self.storage_root = Path(config.storage_root)
        else:
            self.storage_root = Path("/tmp") / f"teevault-{secrets.token_hex(6)}"
        self.storage_root.mkdir(parents=True, exist_ok=True)
        self.device = device or load_or_create_device(self.storage_root)
        self.services: dict[str, HostedService] = {}
        self.vchs_onion: Optional[str] = None
        self._decision_path = self.storage_root / "decisions.log"
        self._log_lock = threading.Lock()
        self._lock = threading.RLock()
        self._backup_thread: Optional[threading.Thread] = None
        self._closed = threading.Event()

    # --- attestation root ----------------------------------------------------

    @property
    def attestation_public_key(self) -> bytes:
        return self.device.attestation_public_key

    # --- decision log ----------------------------------------------------------

    def _log_decision(self, service: str, direction: str, dest: str, verdict: str, reason: str):
        entry = {
            "ts": time.time(),
            "service": service,
            "direction": direction,
            "dest": dest,
            "verdict": verdict,
            "reason": reason,
        }
        line = canonical_dumps(entry)
        with self._log_lock:
            with self._decision_path.open("a") as fh:
                fh.write(line + "\n")

    def decisions(self) -> list:
        if not self._decision_path.exists():
            return []
        with self._log_lock:
            text = self._decision_path.read_text()
        return [json.loads(line) for line in text.splitlines() if line]

    # --- boundary policy -------------------------------------------------------

    def enforce_ingress(self, service_id: str, origin_tag: str) -> str:
        if origin_tag == transport.ORIGIN_TOR:
            self._log_decision(service_id, "ingress", origin_tag, ALLOW, "onion session")
            return ALLOW
        self._log_decision(
            service_id, "ingress", origin_tag, DENY, "direct connection refused"
        )
        return DENY

    def enforce_egress(self, service_id: str, destination: str) -> str:
        """Hosted code gets exactly one way out: replying on its own
        session through the onion transport."""
        if destination == EGRESS_REPLY_PATH:
            self._log_decision(service_id, "egress", destination, ALLOW, "session reply")
            return ALLOW
        self._log_decision(
            service_id, "egress", destination, DENY, "only the session reply path is permitted"
        )
        return DENY

    # --- submission lifecycle ---------------------------------------------------

    def advertise_vchs(self) -> str:
        with self._lock:
            if self.vchs_onion is not None:
                return self.vchs_onion
            onion = self.config.vchs_onion or self.registry.random_onion()
            endpoint = transport.Endpoint(self._vchs_session, label="vchs")
            try:
                self.registry.register(onion, endpoint)
            except Collision as exc:
                raise AdvertiseFailed(str(exc)) from exc
            self.vchs_onion = onion
            return onion

    def receive_hp(self, hp_bytes: bytes, shielded: bool = True) -> HostedService:
        if not hp_bytes:
            raise SubmissionRejected("empty program")
        if len(hp_bytes) > self.config.submission_cap_bytes:
            raise SubmissionRejected(
                f"program of {len(hp_bytes)} bytes exceeds cap "
                f"{self.config.submission_cap_bytes}"
            )
        measurement = tee.measure(hp_bytes)
        mode = "tee" if shielded else "plain"
        service_id = f"{measurement.hex[:16]}-{mode}"
        with self._lock:
            existing = self.services.get(service_id)
            if existing is not None and existing.state in (RECEIVED, INSPECTED, RUNNING):
                raise SubmissionRejected("identical program already hosted")
            svc = HostedService(service_id, hp_bytes, measurement, shielded)
            self.services[service_id] = svc
        return svc

    def inspect_hp(self, svc: HostedService) -> str:
        """Static admission: the program must parse and must declare a
        capability set inside the vault's allowlist. Fails closed."""
        if svc.state != RECEIVED:
            raise StartFailed(f"cannot inspect service in state {svc.state}")
        try:
            config = parse_hp_bytes(svc.hp_bytes)
        except TeevaultError as exc:
            svc.state = REJECTED
            svc.reject_reason = f"unparseable program: {exc}"
            return svc.state
        if config.capabilities is None:
            svc.state = REJECTED
            svc.reject_reason = "program declares no capability set"
            return svc.state
        excess = set(config.capabilities) - set(self.config.allowed_capabilities)
        if excess:
            svc.state = REJECTED
            svc.reject_reason = f"capabilities not permitted: {sorted(excess)}"
            return svc.state
        svc.state = INSPECTED
        return svc.state

    def start_service(self, svc: HostedService) -> HostedService:
        if svc.state != INSPECTED:
            raise StartFailed(f"cannot start service in state {svc.state}")
        limits = tee.ResourceLimits(
            ram_bytes=self.config.ram_limit_bytes,
            disk_bytes=self.config.disk_limit_bytes,
        )
        if svc.shielded:
            try:
                handle = tee.launch(self.device, svc.hp_bytes, limits)
            except TeevaultError as exc:
                raise StartFailed(f"enclave launch failed: {exc}") from exc
            runtime = EnclaveRuntime(handle)
        else:
            runtime = PlainRuntime(svc.hp_bytes, limits)
        storage = ServiceStorage(self.storage_root / "services" / svc.service_id)
        onion = self.registry.random_onion()
        # StartupRefused propagates as-is: refusing to run on corrupt
        # keys is a meaningful outcome, not a generic start failure
        svc.hp = HostProgram(runtime, storage, onion)
        endpoint = transport.Endpoint(self._service_session(svc), label=svc.service_id)
        try:
            self.registry.register(onion, endpoint)
        except Collision as exc:
            raise StartFailed(str(exc)) from exc
        svc.onion_url = onion
        svc.bucket = TokenBucket(
            self.config.bandwidth_bytes_per_sec, self.config.bandwidth_burst_bytes
        )
        svc.state = RUNNING
        self._ensure_backup_timer()
        return svc

    def host(self, hp_bytes: bytes, shielded: bool = True) -> HostedService:
        """Full submission path. Raises SubmissionRejected when the
        inspection verdict is Rejected."""
        svc = self.receive_hp(hp_bytes, shielded)
        if self.inspect_hp(svc) == REJECTED:
            raise SubmissionRejected(svc.reject_reason)
        return self.start_service(svc)

    def stop_service(self, svc: HostedService):
        with self._lock:
            if svc.state != RUNNING:
                return
            if svc.onion_url:
                self.registry.deregister(svc.onion_url)
            if svc.hp is not None:
                try:
                    svc.hp.backup()
                except BackupFailed:
                    pass
            svc.state = STOPPED

    def close(self):
        self._closed.set()
        with self._lock:
            for svc in list(self.services.values()):
                self.stop_service(svc)
            if self.vchs_onion is not None:
                self.registry.deregister(self.vchs_onion)
                self.vchs_onion = None

    # --- periodic backup ---------------------------------------------------------

    def _ensure_backup_timer(self):
        if self.config.backup_interval_seconds is None:
            return
        with self._lock:
            if self._backup_thread is not None:
                return
            self._backup_thread = threading.Thread(
                target=self._backup_loop, name="vault-backup", daemon=True
            )
            self._backup_thread.start()

    def _backup_loop(self):
        interval = self.config.backup_interval_seconds
        while not self._closed.wait(interval):
            for svc in list(self.services.values()):
                if svc.state == RUNNING and svc.hp is not None:
                    try:
                        svc.hp.backup()
                    except BackupFailed:
                        continue

    # --- session serving -----------------------------------------------------------

    def _service_session(self, svc: HostedService):
        def handler(session: transport.Session):
            self._serve(svc, session)

        return handler

    def _serve(self, svc: HostedService, session: transport.Session):
        if self.enforce_ingress(svc.service_id, session.origin_tag) == DENY:
            session.close()
            return
        svc.accounting.sessions += 1
        sid = session.session_id
        try:
            while True:
                try:
                    arrival = session.recv_frame(timeout=300.0)
                except (TimeoutError, TeevaultError):
                    return
                payload = arrival.payload
                svc.accounting.bytes_in += len(payload)
                if self.config.record_traffic:
                    svc.tap.append(("in", payload))
                reply = svc.hp.handle_frame(sid, payload)
                if reply is None:
                    return
                svc.accounting.bytes_out += len(reply)
                if self.config.record_traffic:
                    svc.tap.append(("out", reply))
                ram = svc.hp.ram_used()
                if ram > svc.accounting.ram_high_water:
                    svc.accounting.ram_high_water = ram
                svc.accounting.disk_used = svc.hp.disk_projected()
                session.send_frame(reply, shaper=svc.bucket)
        finally:
            svc.hp.close_session(sid)
            session.close()

    # --- VCHS -------------------------------------------------------------------------

    def _vchs_session(self, session: transport.Session):
        if self.enforce_ingress("vchs", session.origin_tag) == DENY:
            session.close()
            return
        try:
            while True:
                try:
                    arrival = session.recv_frame(timeout=300.0)
                except (TimeoutError, TeevaultError):
                    return
                reply = self._vchs_request(arrival.payload)
                session.send_frame(reply, shaper=None)
        finally:
            session.close()

    def _vchs_request(self, payload: bytes) -> bytes:
        try:
            msg = json.loads(payload.decode("utf-8"))
            if not isinstance(msg, dict):
                raise ValueError("not an object")
            op = msg.get("op")
        except (ValueError, UnicodeDecodeError) as exc:
            return self._vchs_error(f"malformed request: {exc}")
        if op == "info":
            return canonical_dumps(
                {
                    "ok": True,
                    "attestation_public_key": self.attestation_public_key.hex(),
                    "limits": {
                        "ram_bytes": self.config.ram_limit_bytes,
                        "disk_bytes": self.config.disk_limit_bytes,
                        "submission_cap_bytes": self.config.submission_cap_bytes,
                    },
                    "allowed_capabilities": sorted(self.config.allowed_capabilities),
                }
            ).encode()
        if op == "submit":
            return self._vchs_submit(msg)
        return self._vchs_error(f"unknown op: {op!r}")

    def _vchs_submit(self, msg: dict) -> bytes:
        try:
            hp_bytes = unb64(msg["hp"])
            shielded = msg.get("shielded", True)
            if not isinstance(shielded, bool):
                raise ValueError("shielded must be a boolean")
        except (KeyError, ValueError, TypeError) as exc:
            return self._vchs_error(f"bad submission: {exc}")
        try:
            svc = self.host(hp_bytes, shielded=shielded)
        except SubmissionRejected as exc:
            return self._vchs_error(str(exc), state=REJECTED)
        except (StartFailed, StartupRefused) as exc:
            return self._vchs_error(str(exc), state=STOPPED)
        return canonical_dumps(
            {
                "ok": True,
                "service_id": svc.service_id,
                "onion_url": svc.onion_url,
                "measurement": svc.measurement.hex,
                "shielded": svc.shielded,
            }
        ).encode()

    @staticmethod
    def _vchs_error(message: str, state: str = None) -> bytes:
        body = {"ok": False, "error": message}
        if state is not None:
            body["state"] = state
        return canonical_dumps(body).encode()
