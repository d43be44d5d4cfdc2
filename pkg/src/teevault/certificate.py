"""Service keys and self-signed certificates.

The certificate is the client's pinning anchor: its hash travels in
advertisements and in quote report data, so the serialization must be
canonical. cert_hash is SHA-256 over the full canonical JSON bytes,
signature included, and survives any parse/re-serialize cycle.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .encoding import canonical_bytes
from .errors import TeevaultError

DEFAULT_VALIDITY_SECONDS = 2 * 365 * 86400


class ServiceKeyPair:
    """Ed25519 pair (P_srv, S_srv) owned by a hosted service."""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._private = private_key
        self.public_bytes = private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    @classmethod
    def generate(cls) -> "ServiceKeyPair":
        return cls(Ed25519PrivateKey.generate())

    @classmethod
    def from_private_bytes(cls, raw: bytes) -> "ServiceKeyPair":
        if len(raw) != 32:
            raise TeevaultError("private key must be 32 bytes")
        return cls(Ed25519PrivateKey.from_private_bytes(raw))

    def private_bytes(self) -> bytes:
        return self._private.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


@dataclass(frozen=True)
class ServiceCertificate:
    public_key: bytes
    service_name: str
    not_before: int
    not_after: int
    signature: bytes

    def to_dict(self) -> dict:
        return {
            "not_after": self.not_after,
            "not_before": self.not_before,
            "public_key": self.public_key.hex(),
            "service_name": self.service_name,
            "signature": self.signature.hex(),
        }

    def canonical(self) -> bytes:
        return canonical_bytes(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ServiceCertificate":
        try:
            cert = cls(
                public_key=bytes.fromhex(data["public_key"]),
                service_name=str(data["service_name"]),
                not_before=int(data["not_before"]),
                not_after=int(data["not_after"]),
                signature=bytes.fromhex(data["signature"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise TeevaultError(f"malformed certificate: {exc}") from exc
        if len(cert.public_key) != 32 or len(cert.signature) != 64:
            raise TeevaultError("malformed certificate: bad field lengths")
        return cert


def _signing_payload(public_key: bytes, service_name: str, not_before: int, not_after: int) -> bytes:
    return canonical_bytes(
        {
            "not_after": not_after,
            "not_before": not_before,
            "public_key": public_key.hex(),
            "service_name": service_name,
        }
    )


def issue_certificate(
    keys: ServiceKeyPair,
    service_name: str,
    not_before: int | None = None,
    validity_seconds: int = DEFAULT_VALIDITY_SECONDS,
) -> ServiceCertificate:
    not_before = int(time.time()) if not_before is None else int(not_before)
    not_after = not_before + int(validity_seconds)
    payload = _signing_payload(keys.public_bytes, service_name, not_before, not_after)
    return ServiceCertificate(
        public_key=keys.public_bytes,
        service_name=service_name,
        not_before=not_before,
        not_after=not_after,
        signature=keys.sign(payload),
    )


def verify_certificate(cert: ServiceCertificate) -> bool:
    """Self-signature check under the embedded public key."""
    payload = _signing_payload(cert.public_key, cert.service_name, cert.not_before, cert.not_after)
    try:
        Ed25519PublicKey.from_public_bytes(cert.public_key).verify(cert.signature, payload)
    except (InvalidSignature, ValueError):
        return False
    return True


def cert_hash(cert: ServiceCertificate) -> bytes:
    return hashlib.sha256(cert.canonical()).digest()
