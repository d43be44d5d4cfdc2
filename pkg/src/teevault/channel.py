"""Ephemeral-key secure channel between a peer and a hosted service.

Handshake: the client sends a fresh X25519 public key and a 16-byte
nonce; the server replies with its own ephemeral key and nonce, its
certificate, and an Ed25519 signature by the service key S_srv over
transcript_hash || server_ephemeral. Both sides derive directional
AES-256-GCM keys from the shared secret with the transcript as HKDF
salt, so any tampering with either hello diverges the keys even when
the signature check is somehow skipped.

transcript_hash = SHA-256(c_eph || c_nonce || s_eph || s_nonce || cert_hash)

Frames after the handshake are AES-GCM sealed with a per-direction
96-bit counter nonce and the transcript as associated data. Counters
never reset; a channel is abandoned, never rekeyed.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import certificate as certmod
from .errors import BadFrame, ChannelAuthFailure

NONCE_LEN = 16


@dataclass
class ClientHandshake:
    """Client-side state between hello and hello_ack."""

    private: X25519PrivateKey
    eph_pub: bytes
    nonce: bytes


@dataclass(frozen=True)
class ServerHelloInfo:
    """Parsed hello_ack, exposed before any cryptographic checks so the
    caller can do its pin comparison first."""

    eph_pub: bytes
    nonce: bytes
    certificate: certmod.ServiceCertificate
    cert_hash: bytes
    signature: bytes


class ChannelCrypto:
    """Directional AEAD state shared by both ends after the handshake."""

    def __init__(self, send_key: bytes, recv_key: bytes, transcript: bytes):
        self._send = AESGCM(send_key)
        self._recv = AESGCM(recv_key)
        self._transcript = transcript
        self._send_ctr = 0
        self._recv_ctr = 0

    def encrypt(self, payload: bytes) -> bytes:
        nonce = struct.pack(">4xQ", self._send_ctr)
        self._send_ctr += 1
        return self._send.encrypt(nonce, payload, self._transcript)

    def decrypt(self, frame: bytes) -> bytes:
        nonce = struct.pack(">4xQ", self._recv_ctr)
        try:
            payload = self._recv.decrypt(nonce, frame, self._transcript)
        except InvalidTag as exc:
            raise ChannelAuthFailure("frame failed authentication") from exc
        self._recv_ctr += 1
        return payload


def is_hello(payload: bytes) -> bool:
    return payload[:1] == b"{" and b'"hello"' in payload[:32]


def client_hello() -> tuple[ClientHandshake, bytes]:
    private = X25519PrivateKey.generate()
    eph = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    nonce = os.urandom(NONCE_LEN)
    payload = json.dumps({"type": "hello", "eph": eph.hex(), "nonce": nonce.hex()}).encode()
    return ClientHandshake(private, eph, nonce), payload


def parse_server_hello(payload: bytes) -> ServerHelloInfo:
    try:
        body = json.loads(payload.decode("utf-8"))
        if body.get("type") != "hello_ack":
            raise ChannelAuthFailure("expected hello_ack")
        eph = bytes.fromhex(body["eph"])
        nonce = bytes.fromhex(body["nonce"])
        sig = bytes.fromhex(body["sig"])
        cert = certmod.ServiceCertificate.from_dict(body["certificate"])
    except ChannelAuthFailure:
        raise
    except Exception as exc:
        raise ChannelAuthFailure(f"malformed hello_ack: {exc}") from exc
    if len(eph) != 32 or len(nonce) != NONCE_LEN or len(sig) != 64:
        raise ChannelAuthFailure("hello_ack field lengths wrong")
    return ServerHelloInfo(eph, nonce, cert, certmod.cert_hash(cert), sig)


def _transcript(c_eph: bytes, c_nonce: bytes, s_eph: bytes, s_nonce: bytes, chash: bytes) -> bytes:
    return hashlib.sha256(c_eph + c_nonce + s_eph + s_nonce + chash).digest()


def _derive(shared: bytes, transcript: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=transcript, info=info).derive(shared)


def client_complete(state: ClientHandshake, hello: ServerHelloInfo) -> ChannelCrypto:
    """Verify the server's proof and derive session keys.

    Raises ChannelAuthFailure on any verification failure. Pin checks
    against hello.cert_hash are the caller's job and happen first.
    """
    if not certmod.verify_certificate(hello.certificate):
        raise ChannelAuthFailure("certificate self-signature invalid")
    transcript = _transcript(state.eph_pub, state.nonce, hello.eph_pub, hello.nonce, hello.cert_hash)
    try:
        Ed25519PublicKey.from_public_bytes(hello.certificate.public_key).verify(
            hello.signature, transcript + hello.eph_pub
        )
    except (InvalidSignature, ValueError) as exc:
        raise ChannelAuthFailure("server handshake signature invalid") from exc
    try:
        shared = state.private.exchange(X25519PublicKey.from_public_bytes(hello.eph_pub))
    except ValueError as exc:
        raise ChannelAuthFailure("bad server ephemeral key") from exc
    return ChannelCrypto(
        send_key=_derive(shared, transcript, b"tv-c2s"),
        recv_key=_derive(shared, transcript, b"tv-s2c"),
        transcript=transcript,
    )


def server_respond(
    hello_payload: bytes,
    keys: certmod.ServiceKeyPair,
    cert: certmod.ServiceCertificate,
) -> tuple[ChannelCrypto, bytes]:
    """Process a client hello; returns channel state and the hello_ack
    payload to send back."""
    try:
        body = json.loads(hello_payload.decode("utf-8"))
        if body.get("type") != "hello":
            raise BadFrame("expected hello")
        c_eph = bytes.fromhex(body["eph"])
        c_nonce = bytes.fromhex(body["nonce"])
    except BadFrame:
        raise
    except Exception as exc:
        raise BadFrame(f"malformed hello: {exc}") from exc
    if len(c_eph) != 32 or len(c_nonce) != NONCE_LEN:
        raise BadFrame("hello field lengths wrong")

    private = X25519PrivateKey.generate()
    s_eph = private.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    s_nonce = os.urandom(NONCE_LEN)
    chash = certmod.cert_hash(cert)
    transcript = _transcript(c_eph, c_nonce, s_eph, s_nonce, chash)
    signature = keys.sign(transcript + s_eph)
    shared = private.exchange(X25519PublicKey.from_public_bytes(c_eph))
    crypto = ChannelCrypto(
        send_key=_derive(shared, transcript, b"tv-s2c"),
        recv_key=_derive(shared, transcript, b"tv-c2s"),
        transcript=transcript,
    )
    ack = json.dumps(
        {
            "type": "hello_ack",
            "eph": s_eph.hex(),
            "nonce": s_nonce.hex(),
            "certificate": cert.to_dict(),
            "sig": signature.hex(),
        }
    ).encode()
    return crypto, ack
