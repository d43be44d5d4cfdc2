"""The host program: the request handler a provider ships to a vault.

Runs inside an enclave (or, for benchmark comparison, on a plain
runtime with identical behavior minus sealing and quotes). Manages the
service keypair and certificate, serves the quote bundle, accepts
authenticated content mutations, serves content to clients with
staleness warnings, and seals content snapshots to disk.

Disk names follow the request protocol's reserved paths: "Spath" holds
the sealed private bundle (S_srv plus certificate), "Ppath" the sealed
public key, and "content.snapshot" the sealed content store.

Security posture decisions that tests rely on:
 - corrupted sealed keys refuse startup (silent key rotation would
   invisibly break every client's pin);
 - a corrupt or foreign content snapshot starts the store empty and
   records a prominent restore error instead of refusing, because
   content is recoverable from the provider while keys are not;
 - any request carrying an auth field on a plaintext session is
   refused outright, otherwise the password would transit the vault in
   the clear.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from . import certificate as certmod
from . import channel, tee, wire
from .encoding import b64, canonical_bytes, unb64
from .errors import (
    BackupFailed,
    BadFrame,
    ChannelAuthFailure,
    SealIntegrityFailure,
    StartupRefused,
    TeevaultError,
)
from .hp_config import HostProgramConfig, parse_hp_bytes

KEYS_PATH = "Spath"
PUBKEY_PATH = "Ppath"
CONTENT_SNAPSHOT = "content.snapshot"
QUOTE_PATH = "quote"
RESERVED_CONTENT_PATHS = {KEYS_PATH, PUBKEY_PATH, QUOTE_PATH}

# accounting constants for the deterministic quota model
_ENTRY_OVERHEAD = 64       # per-entry JSON/timestamp/hash overhead
_SNAPSHOT_OVERHEAD = 256   # snapshot header plus seal framing


class ServiceStorage:
    """Per-service directory with write-then-rename discipline."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def read(self, name: str) -> Optional[bytes]:
        p = self.path(name)
        if not p.exists():
            return None
        return p.read_bytes()

    def write_atomic(self, name: str, data: bytes):
        tmp = self.path(name + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(self.path(name))

    def delete(self, name: str):
        p = self.path(name)
        if p.exists():
            p.unlink()


class EnclaveRuntime:
    """Sealing, quoting, and limits backed by a live enclave."""

    attested = True

    def __init__(self, handle: tee.EnclaveHandle):
        self.handle = handle

    @property
    def measurement(self) -> tee.Measurement:
        return self.handle.measurement

    @property
    def config(self) -> HostProgramConfig:
        return self.handle.config

    @property
    def limits(self) -> tee.ResourceLimits:
        return self.handle.limits

    def seal(self, plaintext: bytes) -> bytes:
        return tee.seal(self.handle, plaintext).to_bytes()

    def unseal(self, raw: bytes) -> bytes:
        return tee.unseal(self.handle, tee.SealedBlob.from_bytes(raw))

    def quote_wire(self, report_data: bytes) -> Optional[bytes]:
        return tee.get_quote(self.handle, report_data).to_bytes()


class PlainRuntime:
    """Same program, no TEE: plaintext persistence, no quotes.

    Exists so the benchmark can compare enclave overhead against an
    otherwise identical service.
    """

    attested = False
    _PREFIX = b"PLAINTEXTv1\n"

    def __init__(self, program_bytes: bytes, limits: tee.ResourceLimits):
        self.config = parse_hp_bytes(program_bytes)
        self.measurement = tee.measure(program_bytes)
        self.limits = limits

    def seal(self, plaintext: bytes) -> bytes:
        return self._PREFIX + plaintext

    def unseal(self, raw: bytes) -> bytes:
        if not raw.startswith(self._PREFIX):
            raise SealIntegrityFailure("not a plaintext blob")
        return raw[len(self._PREFIX):]

    def quote_wire(self, report_data: bytes) -> Optional[bytes]:
        return None


def normalize_path(path: str) -> str:
    """Rooted virtual filesystem: no traversal, no absolute escapes."""
    if not isinstance(path, str) or not path:
        raise BadFrame("empty path")
    if "\\" in path or "\x00" in path or any(ord(c) < 0x20 for c in path):
        raise BadFrame("path contains forbidden characters")
    parts = [p for p in path.split("/") if p not in ("", ".")]
    if not parts or any(p == ".." for p in parts):
        raise BadFrame("path escapes the content root")
    return "/".join(parts)


@dataclass
class ContentEntry:
    data: bytes
    timestamp: float
    content_hash: str


class ContentStore:
    """path -> (bytes, timestamp, hash) with quota accounting."""

    def __init__(self):
        self.entries: dict[str, ContentEntry] = {}
        self.total_bytes = 0

    def set(self, path: str, data: bytes, now: float):
        old = self.entries.get(path)
        if old is not None:
            self.total_bytes -= len(old.data)
        self.entries[path] = ContentEntry(data, now, hashlib.sha256(data).hexdigest())
        self.total_bytes += len(data)

    def get(self, path: str) -> Optional[ContentEntry]:
        return self.entries.get(path)

    def remove(self, path: str) -> bool:
        entry = self.entries.pop(path, None)
        if entry is None:
            return False
        self.total_bytes -= len(entry.data)
        return True

    def projected_snapshot_size(self, extra_path: str = None, extra_len: int = 0) -> int:
        """Upper-bound estimate of the sealed snapshot this store would
        produce, used for disk-quota admission before mutating."""
        size = _SNAPSHOT_OVERHEAD
        for path, entry in self.entries.items():
            if path == extra_path:
                continue
            size += 4 * math.ceil(len(entry.data) / 3) + len(path.encode()) + _ENTRY_OVERHEAD
        if extra_path is not None:
            size += 4 * math.ceil(extra_len / 3) + len(extra_path.encode()) + _ENTRY_OVERHEAD
        return size

    def to_snapshot(self) -> dict:
        return {
            path: {"data": b64(e.data), "ts": e.timestamp}
            for path, e in self.entries.items()
        }

    @classmethod
    def from_snapshot(cls, snapshot: dict) -> "ContentStore":
        store = cls()
        for path, item in snapshot.items():
            store.set(path, unb64(item["data"]), float(item["ts"]))
        return store


@dataclass
class _SessionState:
    crypto: Optional[channel.ChannelCrypto] = None
    inflight_bytes: int = 0


class HostProgram:
    """One hosted service instance.

    The vault touches exactly this surface: handle_frame,
    close_session, backup, accounting numbers, and the quote payload.
    Content bytes and the private key never cross it unencrypted.
    """

    def __init__(self, runtime, storage: ServiceStorage, service_name: str, clock=time.time):
        self.runtime = runtime
        self.storage = storage
        self.service_name = service_name
        self.clock = clock
        self.config: HostProgramConfig = runtime.config
        self.restore_error: Optional[str] = None
        self._sessions: dict[str, _SessionState] = {}
        self._lock = threading.RLock()
        self._init_keys()
        self._restore_content()

    # --- key lifecycle -------------------------------------------------------

    def _init_keys(self):
        raw = self.storage.read(KEYS_PATH)
        if raw is not None:
            try:
                bundle = json.loads(self.runtime.unseal(raw).decode("utf-8"))
                keys = certmod.ServiceKeyPair.from_private_bytes(
                    bytes.fromhex(bundle["private_key"])
                )
                cert = certmod.ServiceCertificate.from_dict(bundle["certificate"])
            except (SealIntegrityFailure, TeevaultError, ValueError, KeyError) as exc:
                # no silent regeneration: rotated keys would break every
                # client pin without anyone noticing
                raise StartupRefused(f"sealed service keys unusable: {exc}") from exc
            if cert.public_key != keys.public_bytes:
                raise StartupRefused("sealed certificate does not match sealed key")
        else:
            keys = certmod.ServiceKeyPair.generate()
            cert = certmod.issue_certificate(keys, self.service_name)
        self.keys = keys
        self.cert = cert
        self._persist_keys()
        self._refresh_quote()

    def _persist_keys(self):
        bundle = canonical_bytes(
            {
                "certificate": self.cert.to_dict(),
                "private_key": self.keys.private_bytes().hex(),
            }
        )
        self.storage.write_atomic(KEYS_PATH, self.runtime.seal(bundle))
        self.storage.write_atomic(PUBKEY_PATH, self.runtime.seal(self.keys.public_bytes))

    def _refresh_quote(self):
        self.cert_hash = certmod.cert_hash(self.cert)
        report_data = self.cert_hash + bytes(32)
        quote = self.runtime.quote_wire(report_data)
        self._quote_payload = canonical_bytes(
            {
                "attested": self.runtime.attested,
                "certificate": self.cert.to_dict(),
                "quote": b64(quote) if quote is not None else None,
            }
        )

    def _export_bundle(self) -> bytes:
        return canonical_bytes(
            {
                "certificate": self.cert.to_dict(),
                "private_key": self.keys.private_bytes().hex(),
            }
        )

    def _import_bundle(self, data: bytes) -> wire.Response:
        caps = self.config.capabilities or ()
        if "key_import" not in caps:
            return wire.Response(wire.FAILURE, detail="ImportRejected")
        try:
            bundle = json.loads(data.decode("utf-8"))
            keys = certmod.ServiceKeyPair.from_private_bytes(
                bytes.fromhex(bundle["private_key"])
            )
            cert = certmod.ServiceCertificate.from_dict(bundle["certificate"])
        except (TeevaultError, ValueError, KeyError, UnicodeDecodeError) as exc:
            return wire.Response(wire.FAILURE, detail=f"BadBundle: {exc}")
        if cert.public_key != keys.public_bytes or not certmod.verify_certificate(cert):
            return wire.Response(wire.FAILURE, detail="BadBundle: certificate mismatch")
        with self._lock:
            self.keys = keys
            self.cert = cert
            self._persist_keys()
            self._refresh_quote()
        return wire.Response(wire.SUCCESS)

    # --- content persistence -------------------------------------------------

    def _restore_content(self):
        raw = self.storage.read(CONTENT_SNAPSHOT)
        if raw is None:
            self.store = ContentStore()
            return
        try:
            snapshot = json.loads(self.runtime.unseal(raw).decode("utf-8"))
            self.store = ContentStore.from_snapshot(snapshot)
        except (SealIntegrityFailure, TeevaultError, ValueError, KeyError) as exc:
            self.store = ContentStore()
            self.restore_error = (
                f"content snapshot could not be restored ({exc}); starting empty"
            )

    def backup(self):
        """Seal a content snapshot to disk; the previous snapshot
        survives unless the new one is fully written."""
        with self._lock:
            blob = self.runtime.seal(canonical_bytes(self.store.to_snapshot()))
            if len(blob) > self.runtime.limits.disk_bytes:
                raise BackupFailed(
                    f"snapshot of {len(blob)} bytes exceeds disk limit "
                    f"{self.runtime.limits.disk_bytes}"
                )
            self.storage.write_atomic(CONTENT_SNAPSHOT, blob)

    # --- accounting ----------------------------------------------------------

    def ram_used(self) -> int:
        with self._lock:
            inflight = sum(s.inflight_bytes for s in self._sessions.values())
            return self.store.total_bytes + inflight

    def disk_projected(self) -> int:
        with self._lock:
            return self.store.projected_snapshot_size()

    # --- frame layer ---------------------------------------------------------

    def handle_frame(self, session_id: str, payload: bytes) -> Optional[bytes]:
        """One inbound frame to one outbound frame. None means the
        session should be closed without a reply."""
        with self._lock:
            st = self._sessions.setdefault(session_id, _SessionState())
            st.inflight_bytes += len(payload)
        try:
            if st.crypto is None:
                return self._plaintext_frame(st, payload)
            try:
                plain = st.crypto.decrypt(payload)
            except ChannelAuthFailure:
                return None
            response = self._dispatch(plain, secure=True)
            return st.crypto.encrypt(wire.encode_response(response))
        finally:
            with self._lock:
                if session_id in self._sessions:
                    self._sessions[session_id].inflight_bytes -= len(payload)

    def _plaintext_frame(self, st: _SessionState, payload: bytes) -> Optional[bytes]:
        if channel.is_hello(payload):
            try:
                crypto, ack = channel.server_respond(payload, self.keys, self.cert)
            except BadFrame:
                return None
            st.crypto = crypto
            return ack
        return wire.encode_response(self._dispatch(payload, secure=False))

    def close_session(self, session_id: str):
        with self._lock:
            self._sessions.pop(session_id, None)

    # --- request layer -------------------------------------------------------

    def _dispatch(self, raw: bytes, secure: bool) -> wire.Response:
        try:
            req = wire.decode_request(raw)
        except BadFrame as exc:
            return wire.Response(wire.FAILURE, detail=f"BadFrame: {exc}")
        return self.handle_request(req, self.clock(), secure=secure)

    def handle_request(self, req: wire.Request, now: float, secure: bool = True) -> wire.Response:
        if req.auth is not None and not secure:
            # the password must never transit the vault in the clear
            return wire.Response(wire.FAILURE, detail="SecureChannelRequired")

        if req.type == "client_get":
            return self._client_get(req, now)

        # everything else is a provider operation and needs auth
        if not self._check_auth(req):
            return wire.Response(wire.FAILURE, detail="BadAuth")

        if req.type == "quote":
            return wire.Response(wire.SUCCESS, self._quote_payload)
        if req.type == "upload":
            return self._upload(req, now)
        if req.type == "download":
            return self._download(req)
        if req.type == "remove":
            return self._remove(req)
        return wire.Response(wire.FAILURE, detail="UnknownType")

    def _client_get(self, req: wire.Request, now: float) -> wire.Response:
        if req.auth is not None:
            return wire.Response(wire.FAILURE, detail="client_get carries no auth")
        try:
            path = normalize_path(req.path)
        except BadFrame as exc:
            return wire.Response(wire.FAILURE, detail=f"BadPath: {exc}")
        if path == QUOTE_PATH:
            return wire.Response(wire.SUCCESS, self._quote_payload)
        entry = self.store.get(path)
        if entry is None:
            return wire.Response(wire.FAILURE, detail="NotFound")
        if now - entry.timestamp > self.config.max_staleness_seconds:
            age = int(now - entry.timestamp)
            return wire.Response(wire.STALE_WARNING, entry.data, detail=f"age={age}s")
        return wire.Response(wire.SUCCESS, entry.data)

    def _upload(self, req: wire.Request, now: float) -> wire.Response:
        if req.path == KEYS_PATH:
            return self._import_bundle(req.data)
        try:
            path = normalize_path(req.path)
        except BadFrame as exc:
            return wire.Response(wire.FAILURE, detail=f"BadPath: {exc}")
        if path in RESERVED_CONTENT_PATHS:
            return wire.Response(wire.FAILURE, detail="ReservedPath")
        with self._lock:
            projected = self.store.projected_snapshot_size(path, len(req.data))
            if projected > self.runtime.limits.disk_bytes:
                return wire.Response(wire.FAILURE, detail="QuotaExceeded: disk")
            if self.ram_used() + len(req.data) > self.runtime.limits.ram_bytes:
                return wire.Response(wire.FAILURE, detail="QuotaExceeded: ram")
            previous = self.store.get(path)
            self.store.set(path, req.data, now)
            try:
                self.backup()
            except BackupFailed:
                # roll back; admission said yes but the real snapshot
                # said no, and the old snapshot on disk is intact
                if previous is None:
                    self.store.remove(path)
                else:
                    self.store.set(path, previous.data, previous.timestamp)
                return wire.Response(wire.FAILURE, detail="QuotaExceeded: snapshot")
        return wire.Response(wire.SUCCESS)

    def _download(self, req: wire.Request) -> wire.Response:
        if req.path == KEYS_PATH:
            return wire.Response(wire.SUCCESS, self._export_bundle())
        if req.path == PUBKEY_PATH:
            return wire.Response(wire.SUCCESS, self.keys.public_bytes.hex().encode())
        try:
            path = normalize_path(req.path)
        except BadFrame as exc:
            return wire.Response(wire.FAILURE, detail=f"BadPath: {exc}")
        entry = self.store.get(path)
        if entry is None:
            return wire.Response(wire.FAILURE, detail="NotFound")
        return wire.Response(wire.SUCCESS, entry.data)

    def _remove(self, req: wire.Request) -> wire.Response:
        try:
            path = normalize_path(req.path)
        except BadFrame as exc:
            return wire.Response(wire.FAILURE, detail=f"BadPath: {exc}")
        with self._lock:
            if not self.store.remove(path):
                return wire.Response(wire.FAILURE, detail="NotFound")
            try:
                self.backup()
            except BackupFailed:
                pass  # removal shrinks the store; this cannot happen
        return wire.Response(wire.SUCCESS)

    def _check_auth(self, req: wire.Request) -> bool:
        if req.auth is None:
            return False
        digest = hashlib.sha256(req.auth).digest()
        if hmac.compare_digest(digest, self.config.password_hash):
            return True
        if self.config.provider_public_key is not None and len(req.auth) == 64:
            # alternative mode: auth is an Ed25519 signature over the
            # request content hash by the provider's key
            message = _signature_auth_message(req.type, req.path, req.data)
            try:
                Ed25519PublicKey.from_public_bytes(
                    self.config.provider_public_key
                ).verify(req.auth, message)
                return True
            except (InvalidSignature, ValueError):
                return False
        return False


def _signature_auth_message(rtype: str, path: str, data: bytes) -> bytes:
    return canonical_bytes(
        {"data_sha256": hashlib.sha256(data).hexdigest(), "path": path, "type": rtype}
    )


def sign_request_auth(private_key_bytes: bytes, rtype: str, path: str, data: bytes) -> bytes:
    """Provider-side helper for the signature auth mode."""
    keys = certmod.ServiceKeyPair.from_private_bytes(private_key_bytes)
    return keys.sign(_signature_auth_message(rtype, path, data))
