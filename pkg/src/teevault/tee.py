"""Simulated trusted-execution device.

Models the hardware trust root the rest of the package builds on: a
per-device root secret and attestation key (the "fuses"), SHA-256 code
measurement, enclave launch, signed quotes over measurement plus 64
bytes of report data, and sealed storage bound to (device, program).

Known gap, shared with the protocol being modeled: quotes carry no
freshness nonce, so an old quote for the same program verifies forever.

Concrete algorithms, chosen for bit-exact test vectors: SHA-256
digests, Ed25519 64-byte quote signatures, AES-256-GCM sealing,
HKDF-SHA-256 key derivation.
"""

from __future__ import annotations

import hashlib
import os
import secrets
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    InvalidLimits,
    InvalidProgram,
    InvalidReportData,
    MalformedQuote,
    SealIntegrityFailure,
    TeevaultError,
)
from .hp_config import HostProgramConfig, parse_hp_bytes

REPORT_DATA_LEN = 64
QUOTE_WIRE_LEN = 32 + REPORT_DATA_LEN + 64
SEAL_NONCE_LEN = 12

# Fixed 32-byte HKDF salt; constant across all devices so that key
# separation comes only from (device_root_secret, measurement).
SEALING_CONTEXT = b"sealing-key-derivation-context-1"
assert len(SEALING_CONTEXT) == 32


@dataclass(frozen=True)
class Measurement:
    """SHA-256 digest identifying the exact program byte string."""

    digest: bytes

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise TeevaultError("measurement digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()


class DeviceIdentity:
    """One simulated CPU: id, sealing-root secret, attestation keypair.

    The root secret and the private attestation key never leave this
    object through any operation of this module.
    """

    def __init__(self, device_id: bytes, root_secret: bytes, signing_seed: bytes):
        if len(device_id) != 16 or len(root_secret) != 32 or len(signing_seed) != 32:
            raise TeevaultError("bad device identity material")
        self.device_id = device_id
        self._root_secret = root_secret
        self._signing_key = Ed25519PrivateKey.from_private_bytes(signing_seed)
        self.attestation_public_key = self._signing_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    @classmethod
    def create(cls) -> "DeviceIdentity":
        return cls(secrets.token_bytes(16), secrets.token_bytes(32), secrets.token_bytes(32))

    def _sign(self, message: bytes) -> bytes:
        return self._signing_key.sign(message)

    def __repr__(self):
        return f"<DeviceIdentity {self.device_id.hex()[:8]}>"


@dataclass(frozen=True)
class ResourceLimits:
    ram_bytes: int
    disk_bytes: int


@dataclass
class EnclaveHandle:
    """A running enclave instance.

    `private` is the instance's private memory region: host code must
    only touch it through the sanctioned host-program entry points, and
    no operation here ever serializes it.
    """

    device: DeviceIdentity
    measurement: Measurement
    config: HostProgramConfig
    limits: ResourceLimits
    private: dict = field(default_factory=dict)
    live: bool = True

    def terminate(self):
        self.live = False
        self.private.clear()


@dataclass(frozen=True)
class Quote:
    measurement: Measurement
    report_data: bytes
    signature: bytes

    def to_bytes(self) -> bytes:
        return self.measurement.digest + self.report_data + self.signature

    @classmethod
    def from_bytes(cls, wire: bytes) -> "Quote":
        if not isinstance(wire, (bytes, bytearray)) or len(wire) != QUOTE_WIRE_LEN:
            raise MalformedQuote(f"quote must be exactly {QUOTE_WIRE_LEN} bytes")
        wire = bytes(wire)
        return cls(
            measurement=Measurement(wire[:32]),
            report_data=wire[32 : 32 + REPORT_DATA_LEN],
            signature=wire[32 + REPORT_DATA_LEN :],
        )


@dataclass(frozen=True)
class SealedBlob:
    nonce: bytes
    bound_measurement: Measurement
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.bound_measurement.digest + self.ciphertext

    @classmethod
    def from_bytes(cls, wire: bytes) -> "SealedBlob":
        # 16 = AES-GCM tag; shorter than that cannot authenticate
        if not isinstance(wire, (bytes, bytearray)) or len(wire) < SEAL_NONCE_LEN + 32 + 16:
            raise SealIntegrityFailure("sealed blob truncated")
        wire = bytes(wire)
        return cls(
            nonce=wire[:SEAL_NONCE_LEN],
            bound_measurement=Measurement(wire[SEAL_NONCE_LEN : SEAL_NONCE_LEN + 32]),
            ciphertext=wire[SEAL_NONCE_LEN + 32 :],
        )


def measure(program_bytes: bytes) -> Measurement:
    if not program_bytes:
        raise InvalidProgram("cannot measure empty program")
    return Measurement(hashlib.sha256(bytes(program_bytes)).digest())


def launch(device: DeviceIdentity, program_bytes: bytes, limits: ResourceLimits) -> EnclaveHandle:
    if limits.ram_bytes <= 0 or limits.disk_bytes <= 0:
        raise InvalidLimits("resource limits must be strictly positive")
    config = parse_hp_bytes(program_bytes)  # InvalidProgram on failure
    return EnclaveHandle(
        device=device,
        measurement=measure(program_bytes),
        config=config,
        limits=limits,
        private={},
    )


def get_quote(handle: EnclaveHandle, report_data: bytes) -> Quote:
    if not handle.live:
        raise TeevaultError("enclave is not live")
    if not isinstance(report_data, (bytes, bytearray)) or len(report_data) != REPORT_DATA_LEN:
        raise InvalidReportData(f"report data must be exactly {REPORT_DATA_LEN} bytes")
    report_data = bytes(report_data)
    signature = handle.device._sign(handle.measurement.digest + report_data)
    return Quote(handle.measurement, report_data, signature)


def verify_quote(
    quote: Quote,
    expected_measurement: Measurement,
    attestation_public_key: bytes,
    expected_report_data: bytes,
) -> bool:
    """True iff the signature is valid AND measurement AND report data
    match. Returns False on mismatch; raises MalformedQuote only for
    inputs that violate the type contract outright."""
    if not isinstance(quote, Quote):
        raise MalformedQuote("not a quote")
    if len(quote.report_data) != REPORT_DATA_LEN or len(quote.signature) != 64:
        raise MalformedQuote("quote fields have wrong lengths")
    if (
        not isinstance(expected_report_data, (bytes, bytearray))
        or len(expected_report_data) != REPORT_DATA_LEN
    ):
        raise MalformedQuote("expected report data must be 64 bytes")
    if quote.measurement != expected_measurement:
        return False
    if quote.report_data != bytes(expected_report_data):
        return False
    try:
        public = Ed25519PublicKey.from_public_bytes(bytes(attestation_public_key))
        public.verify(quote.signature, quote.measurement.digest + quote.report_data)
    except (InvalidSignature, ValueError):
        return False
    return True


def derive_sealing_key(device: DeviceIdentity, measurement: Measurement) -> bytes:
    hkdf = HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=SEALING_CONTEXT,
        info=measurement.digest,
    )
    return hkdf.derive(device._root_secret)


def seal(handle: EnclaveHandle, plaintext: bytes) -> SealedBlob:
    if not handle.live:
        raise TeevaultError("enclave is not live")
    key = derive_sealing_key(handle.device, handle.measurement)
    nonce = os.urandom(SEAL_NONCE_LEN)
    ciphertext = AESGCM(key).encrypt(nonce, bytes(plaintext), handle.measurement.digest)
    return SealedBlob(nonce, handle.measurement, ciphertext)


def unseal(handle: EnclaveHandle, blob: SealedBlob) -> bytes:
    if blob.bound_measurement != handle.measurement:
        raise SealIntegrityFailure("blob bound to a different measurement")
    key = derive_sealing_key(handle.device, handle.measurement)
    try:
        return AESGCM(key).decrypt(blob.nonce, blob.ciphertext, blob.bound_measurement.digest)
    except InvalidTag as exc:
        raise SealIntegrityFailure("authentication failed") from exc
