"""Host program byte format.

A host program is, at desk scale, its configuration: a 4-byte magic
followed by canonical JSON. The serialization is deterministic so that
the same (secret, options) always produces byte-identical programs and
therefore identical measurements. The provider's password hash is part
of these bytes, which ties the authentication policy to attestation:
change the password, change the measurement.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

from .encoding import canonical_bytes
from .errors import InvalidProgram

HP_MAGIC = b"HPv1"

DEFAULT_BIND_PORT = 8080
DEFAULT_MAX_STALENESS = 7 * 86400  # 7 days
DEFAULT_CAPABILITIES = ("listen", "quote", "seal")

# capability flags with meaning to the vault's inspection policy
KNOWN_CAPABILITIES = ("listen", "quote", "seal", "key_import")

_REQUIRED_KEYS = {"password_hash", "bind_port", "max_staleness_seconds"}
_OPTIONAL_KEYS = {"capabilities", "provider_public_key"}


@dataclass(frozen=True)
class HostProgramConfig:
    """Parsed form of the measured program bytes.

    capabilities is None when the program declared no capabilities
    field at all; the vault's inspection fails closed on that.
    """

    password_hash: bytes
    bind_port: int
    max_staleness_seconds: int
    capabilities: Optional[tuple[str, ...]]
    provider_public_key: Optional[bytes] = None


def default_config(
    auth_secret: bytes,
    *,
    bind_port: int = DEFAULT_BIND_PORT,
    max_staleness_seconds: int = DEFAULT_MAX_STALENESS,
    capabilities: tuple[str, ...] = DEFAULT_CAPABILITIES,
    provider_public_key: Optional[bytes] = None,
) -> HostProgramConfig:
    if not auth_secret:
        raise ValueError("auth secret must be non-empty")
    return HostProgramConfig(
        password_hash=hashlib.sha256(auth_secret).digest(),
        bind_port=bind_port,
        max_staleness_seconds=max_staleness_seconds,
        capabilities=tuple(capabilities),
        provider_public_key=provider_public_key,
    )


def build_hp_bytes(config: HostProgramConfig) -> bytes:
    body = {
        "bind_port": config.bind_port,
        "max_staleness_seconds": config.max_staleness_seconds,
        "password_hash": config.password_hash.hex(),
    }
    if config.capabilities is not None:
        body["capabilities"] = sorted(config.capabilities)
    if config.provider_public_key is not None:
        body["provider_public_key"] = config.provider_public_key.hex()
    return HP_MAGIC + canonical_bytes(body)


def parse_hp_bytes(program_bytes: bytes) -> HostProgramConfig:
    """Strict parse; anything off-contract raises InvalidProgram."""
    if not isinstance(program_bytes, (bytes, bytearray)):
        raise InvalidProgram("program must be bytes")
    data = bytes(program_bytes)
    if not data.startswith(HP_MAGIC):
        raise InvalidProgram("missing HPv1 magic")
    try:
        body = json.loads(data[len(HP_MAGIC):].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidProgram(f"config is not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise InvalidProgram("config must be a JSON object")

    keys = set(body)
    if not _REQUIRED_KEYS <= keys:
        raise InvalidProgram(f"missing keys: {sorted(_REQUIRED_KEYS - keys)}")
    unknown = keys - _REQUIRED_KEYS - _OPTIONAL_KEYS
    if unknown:
        raise InvalidProgram(f"unknown keys: {sorted(unknown)}")

    password_hash = _hex_field(body, "password_hash", 32)
    bind_port = body["bind_port"]
    if not isinstance(bind_port, int) or isinstance(bind_port, bool) or not 1 <= bind_port <= 65535:
        raise InvalidProgram("bind_port out of range")
    staleness = body["max_staleness_seconds"]
    if not isinstance(staleness, int) or isinstance(staleness, bool) or staleness <= 0:
        raise InvalidProgram("max_staleness_seconds must be a positive integer")

    capabilities = None
    if "capabilities" in body:
        raw = body["capabilities"]
        if not isinstance(raw, list) or not all(isinstance(c, str) for c in raw):
            raise InvalidProgram("capabilities must be a list of strings")
        capabilities = tuple(raw)

    provider_public_key = None
    if "provider_public_key" in body and body["provider_public_key"] is not None:
        provider_public_key = _hex_field(body, "provider_public_key", 32)

    return HostProgramConfig(
        password_hash=password_hash,
        bind_port=bind_port,
        max_staleness_seconds=staleness,
        capabilities=capabilities,
        provider_public_key=provider_public_key,
    )


def _hex_field(body: dict, key: str, nbytes: int) -> bytes:
    value = body[key]
    if not isinstance(value, str):
        raise InvalidProgram(f"{key} must be a hex string")
    try:
        decoded = bytes.fromhex(value)
    except ValueError as exc:
        raise InvalidProgram(f"{key} is not hex") from exc
    if len(decoded) != nbytes:
        raise InvalidProgram(f"{key} must be {nbytes} bytes")
    return decoded
