"""Provider tooling: build a host program, place it on a vault, verify
the enclave by remote attestation, and only then hand over content.

Every network operation is bracketed by an uptime interval so the
provider's total online exposure can be measured, and every protocol
step appends to an ordered event trail. Tests and the benchmark use
both to prove two properties: the provider discloses nothing before
attestation succeeds, and stays offline outside explicit operations.

The `attest` flag exists for the benchmark's comparison variant: the
same flow minus quote verification (trust-on-first-use of the
certificate), matching what hosting without a TEE would give you.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from typing import Optional

from . import certificate as certmod
from . import channel, tee, transport, wire
from .encoding import b64, canonical_dumps, unb64
from .errors import (
    AuthRejected,
    BootstrapError,
    ChannelAuthFailure,
    ChannelClosed,
    ImportRejected,
    MalformedQuote,
    PartialFailure,
    QuoteMismatch,
    TeevaultError,
)
from .host_program import KEYS_PATH
from .hp_config import build_hp_bytes, default_config

LOCAL = transport.CircuitProfile.local()


@dataclass(frozen=True)
class Advertisement:
    """What a provider publishes out of band: where the service lives
    and which certificate to pin."""

    onion_url: str
    cert_hash: str

    def to_json(self) -> str:
        return canonical_dumps({"cert_hash": self.cert_hash, "onion_url": self.onion_url})

    @classmethod
    def from_json(cls, text: str) -> "Advertisement":
        data = json.loads(text)
        onion = data["onion_url"]
        chash = data["cert_hash"]
        if not isinstance(onion, str) or not onion.endswith(".onion"):
            raise TeevaultError("advertisement onion_url malformed")
        if not isinstance(chash, str) or len(bytes.fromhex(chash)) != 32:
            raise TeevaultError("advertisement cert_hash malformed")
        return cls(onion, chash)


@dataclass
class ProviderProfile:
    auth_secret: bytes
    hp_bytes: bytes
    expected_measurement: tee.Measurement
    vault_vchs: Optional[str] = None
    attest: bool = True
    service_onion: Optional[str] = None
    pinned_cert_hash: Optional[bytes] = None
    vault_attestation_key: Optional[bytes] = None
    events: list = field(default_factory=list)
    uptime_log: list = field(default_factory=list)

    def event(self, kind: str, clock=time.time, **detail):
        self.events.append({"ts": clock(), "kind": kind, **detail})

    def event_kinds(self) -> list:
        return [e["kind"] for e in self.events]


def create_profile(
    auth_secret: bytes,
    *,
    vault_vchs: Optional[str] = None,
    attest: bool = True,
    bind_port: int = 8080,
    max_staleness_seconds: int = 7 * 86400,
    capabilities: tuple = ("listen", "quote", "seal"),
    provider_public_key: Optional[bytes] = None,
) -> ProviderProfile:
    """Build the host program locally; its measurement is what remote
    attestation will be checked against."""
    config = default_config(
        auth_secret,
        bind_port=bind_port,
        max_staleness_seconds=max_staleness_seconds,
        capabilities=capabilities,
        provider_public_key=provider_public_key,
    )
    hp_bytes = build_hp_bytes(config)
    return ProviderProfile(
        auth_secret=auth_secret,
        hp_bytes=hp_bytes,
        expected_measurement=tee.measure(hp_bytes),
        vault_vchs=vault_vchs,
        attest=attest,
    )


class _Online:
    """Context manager marking one provider connection interval."""

    def __init__(self, profile: ProviderProfile, clock):
        self.profile = profile
        self.clock = clock

    def __enter__(self):
        self.start = self.clock()
        return self

    def __exit__(self, *exc):
        self.profile.uptime_log.append([self.start, self.clock()])
        return False


def _rpc_raw(sess: transport.Session, payload: bytes, timeout: float = 30.0) -> bytes:
    sess.send_frame(payload)
    return sess.recv_frame(timeout=timeout).payload


def _rpc(sess, crypto, req: wire.Request, timeout: float = 30.0) -> wire.Response:
    reply = _rpc_raw(sess, crypto.encrypt(wire.encode_request(req)), timeout)
    return wire.decode_response(crypto.decrypt(reply))


def _fetch_quote_payload(sess: transport.Session) -> dict:
    raw = _rpc_raw(sess, wire.encode_request(wire.Request("client_get", "/quote")))
    resp = wire.decode_response(raw)
    if resp.status != wire.SUCCESS:
        raise BootstrapError(f"quote fetch failed: {resp.detail}")
    try:
        payload = json.loads(resp.data)
        cert = certmod.ServiceCertificate.from_dict(payload["certificate"])
    except (ValueError, KeyError, TeevaultError) as exc:
        raise BootstrapError(f"quote payload malformed: {exc}") from exc
    payload["_cert"] = cert
    payload["_cert_hash"] = certmod.cert_hash(cert)
    return payload


def _verify_quote_payload(profile: ProviderProfile, payload: dict, clock):
    """Attestation verdict for one quote payload. Raises QuoteMismatch
    with the reason; records the matching event either way."""
    try:
        if not payload.get("attested") or payload.get("quote") is None:
            raise QuoteMismatch("service runs without attestation")
        if not certmod.verify_certificate(payload["_cert"]):
            raise QuoteMismatch("service certificate does not verify")
        try:
            quote = tee.Quote.from_bytes(unb64(payload["quote"]))
        except (MalformedQuote, ValueError) as exc:
            raise QuoteMismatch(f"quote malformed: {exc}") from exc
        report_data = payload["_cert_hash"] + bytes(32)
        ok = tee.verify_quote(
            quote,
            profile.expected_measurement,
            profile.vault_attestation_key,
            report_data,
        )
        if not ok:
            raise QuoteMismatch(
                "quote does not bind the expected program and certificate"
            )
    except QuoteMismatch as exc:
        profile.event("quote_rejected", clock, reason=str(exc))
        raise
    profile.event("quote_verified", clock)


def _establish_channel(profile: ProviderProfile, sess, expected_hash: bytes, clock):
    state, hello = channel.client_hello()
    try:
        ack = _rpc_raw(sess, hello)
    except (ChannelClosed, TimeoutError) as exc:
        profile.event("channel_failed", clock, reason=str(exc))
        raise ChannelAuthFailure(f"no handshake reply: {exc}") from exc
    info = channel.parse_server_hello(ack)
    if info.cert_hash != expected_hash:
        profile.event("channel_failed", clock, reason="certificate hash mismatch")
        raise ChannelAuthFailure("server certificate does not match the pinned hash")
    crypto = channel.client_complete(state, info)
    profile.event("channel_established", clock)
    return crypto


def bootstrap(
    profile: ProviderProfile,
    registry: transport.Registry,
    content: Optional[dict] = None,
    circuit: transport.CircuitProfile = LOCAL,
    rng: Optional[random.Random] = None,
    clock=time.time,
    shielded: Optional[bool] = None,
) -> Advertisement:
    """Submit the host program, attest the enclave, then upload the
    initial content. One online interval covers the whole operation.

    shielded defaults to the profile's attest flag: a provider who
    verifies quotes wants an enclave, the comparison variant does not.
    They can be decoupled, in which case attesting a plain service
    fails exactly as it should.
    """
    if profile.vault_vchs is None:
        raise BootstrapError("profile has no vault submission address")
    content = content or {}
    if shielded is None:
        shielded = profile.attest
    with _Online(profile, clock):
        vchs = transport.connect(registry, profile.vault_vchs, circuit, rng)
        try:
            info = json.loads(_rpc_raw(vchs, b'{"op":"info"}'))
            if not info.get("ok"):
                raise BootstrapError(f"vault info failed: {info.get('error')}")
            profile.vault_attestation_key = bytes.fromhex(info["attestation_public_key"])
            profile.event("vchs_info", clock)
            submission = canonical_dumps(
                {"hp": b64(profile.hp_bytes), "op": "submit", "shielded": shielded}
            ).encode()
            reply = json.loads(_rpc_raw(vchs, submission))
        finally:
            vchs.close()
        if not reply.get("ok"):
            profile.event("bootstrap_failed", clock, reason=reply.get("error"))
            raise BootstrapError(f"submission refused: {reply.get('error')}")
        onion = reply["onion_url"]
        profile.event("hp_submitted", clock, onion_url=onion)

        sess = transport.connect(registry, onion, circuit, rng)
        try:
            payload = _fetch_quote_payload(sess)
            profile.event("quote_received", clock)
            if profile.attest:
                _verify_quote_payload(profile, payload, clock)
            else:
                profile.event("attestation_skipped", clock)
            cert_hash = payload["_cert_hash"]

            crypto = _establish_channel(profile, sess, cert_hash, clock)
            for i, path in enumerate(sorted(content)):
                if i == 0:
                    profile.event("auth_used", clock)
                resp = _rpc(
                    sess, crypto, wire.Request("upload", path, content[path], profile.auth_secret)
                )
                if resp.status != wire.SUCCESS:
                    if resp.detail == "BadAuth":
                        raise AuthRejected("service refused the auth secret")
                    raise BootstrapError(f"initial upload of {path} failed: {resp.detail}")
                profile.event("content_sent", clock, path=path, nbytes=len(content[path]))
        finally:
            sess.close()

    profile.service_onion = onion
    profile.pinned_cert_hash = cert_hash
    return Advertisement(onion, cert_hash.hex())


def _open_service_channel(profile, registry, circuit, rng, clock):
    if profile.service_onion is None or profile.pinned_cert_hash is None:
        raise TeevaultError("profile is not bootstrapped")
    sess = transport.connect(registry, profile.service_onion, circuit, rng)
    try:
        if profile.attest:
            # re-verify on every session: the vault could have swapped
            # the program since we last looked
            payload = _fetch_quote_payload(sess)
            profile.event("quote_received", clock)
            _verify_quote_payload(profile, payload, clock)
            if payload["_cert_hash"] != profile.pinned_cert_hash:
                profile.event("channel_failed", clock, reason="pinned certificate changed")
                raise ChannelAuthFailure("service certificate changed since bootstrap")
        crypto = _establish_channel(profile, sess, profile.pinned_cert_hash, clock)
        return sess, crypto
    except BaseException:
        sess.close()
        raise


def update_content(
    profile: ProviderProfile,
    registry: transport.Registry,
    changes: list,
    circuit: transport.CircuitProfile = LOCAL,
    rng: Optional[random.Random] = None,
    clock=time.time,
) -> dict:
    """Apply an ordered list of ("upload", path, data) / ("remove", path)
    changes in one session. Partial outcomes raise PartialFailure with
    both lists; changes already applied stay applied."""
    applied, failed = [], []
    with _Online(profile, clock):
        sess, crypto = _open_service_channel(profile, registry, circuit, rng, clock)
        try:
            if changes:
                profile.event("auth_used", clock)
            for change in changes:
                if change[0] == "upload":
                    _, path, data = change
                    req = wire.Request("upload", path, data, profile.auth_secret)
                elif change[0] == "remove":
                    _, path = change
                    req = wire.Request("remove", path, b"", profile.auth_secret)
                else:
                    raise TeevaultError(f"unknown change kind: {change[0]!r}")
                resp = _rpc(sess, crypto, req)
                if resp.status == wire.SUCCESS:
                    applied.append(path)
                    kind = "content_sent" if change[0] == "upload" else "content_removed"
                    profile.event(kind, clock, path=path)
                elif resp.detail == "BadAuth":
                    raise AuthRejected("service refused the auth secret")
                else:
                    failed.append({"path": path, "reason": resp.detail})
        finally:
            sess.close()
    if failed:
        raise PartialFailure(applied, failed)
    return {"applied": applied}


def export_keys(
    profile: ProviderProfile,
    registry: transport.Registry,
    circuit: transport.CircuitProfile = LOCAL,
    rng: Optional[random.Random] = None,
    clock=time.time,
) -> bytes:
    """Pull the service key bundle through the secure channel. The
    bundle is what import_keys on another service consumes."""
    with _Online(profile, clock):
        sess, crypto = _open_service_channel(profile, registry, circuit, rng, clock)
        try:
            profile.event("auth_used", clock)
            resp = _rpc(sess, crypto, wire.Request("download", KEYS_PATH, b"", profile.auth_secret))
        finally:
            sess.close()
    if resp.status != wire.SUCCESS:
        if resp.detail == "BadAuth":
            raise AuthRejected("service refused the auth secret")
        raise TeevaultError(f"key export failed: {resp.detail}")
    profile.event("keys_exported", clock)
    return resp.data


def import_keys(
    profile: ProviderProfile,
    registry: transport.Registry,
    bundle: bytes,
    circuit: transport.CircuitProfile = LOCAL,
    rng: Optional[random.Random] = None,
    clock=time.time,
) -> dict:
    """Install an exported key bundle into this profile's service,
    migrating the public identity. The pinned hash follows the new
    certificate on success."""
    try:
        parsed = json.loads(bundle)
        new_cert = certmod.ServiceCertificate.from_dict(parsed["certificate"])
        new_hash = certmod.cert_hash(new_cert)
    except (ValueError, KeyError, TeevaultError) as exc:
        raise ImportRejected(f"bundle unusable: {exc}") from exc
    with _Online(profile, clock):
        sess, crypto = _open_service_channel(profile, registry, circuit, rng, clock)
        try:
            profile.event("auth_used", clock)
            resp = _rpc(
                sess, crypto, wire.Request("upload", KEYS_PATH, bundle, profile.auth_secret)
            )
        finally:
            sess.close()
    if resp.status != wire.SUCCESS:
        if resp.detail == "BadAuth":
            raise AuthRejected("service refused the auth secret")
        raise ImportRejected(f"service refused the bundle: {resp.detail}")
    profile.pinned_cert_hash = new_hash
    profile.event("keys_imported", clock, cert_hash=new_hash.hex())
    return {"cert_hash": new_hash.hex(), "onion_url": profile.service_onion}


def online_seconds(profile: ProviderProfile) -> float:
    return sum(end - start for start, end in profile.uptime_log)
