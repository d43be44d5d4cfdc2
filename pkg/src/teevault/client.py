"""Client tooling: pinned certificates and anonymous fetches.

A client never attests anything. It trusts exactly one fact per
service, the certificate hash from the provider's advertisement, and
refuses the connection before sending any request if the served
certificate differs. Everything else (whether the service runs in an
enclave, on which vault, with what limits) is invisible and irrelevant
to the client by design.

Fetch timing is measured from the moment the request frame is handed
to the transport: time to first byte and time to last byte of the
response, which is what the benchmark aggregates.
"""

from __future__ import annotations

import hashlib
import json
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from . import channel, transport, wire
from .errors import (
    ChannelClosed,
    FetchError,
    NotFound,
    PinConflict,
    PinMismatch,
    PinMissing,
    TeevaultError,
)
from .provider import Advertisement

LOCAL = transport.CircuitProfile.local()


class PinStore:
    """onion address -> expected certificate hash, persisted as JSON."""

    def __init__(self, pins: Optional[dict] = None):
        self.pins: dict[str, bytes] = dict(pins or {})

    @classmethod
    def load(cls, path) -> "PinStore":
        path = Path(path)
        if not path.exists():
            return cls()
        data = json.loads(path.read_text())
        if not isinstance(data, dict):
            raise TeevaultError("pin file must hold a JSON object")
        pins = {}
        for url, hex_hash in data.items():
            digest = bytes.fromhex(hex_hash)
            if len(digest) != 32:
                raise TeevaultError(f"pin for {url} is not a 32-byte hash")
            pins[url] = digest
        return cls(pins)

    def save(self, path):
        path = Path(path)
        body = json.dumps(
            {url: digest.hex() for url, digest in sorted(self.pins.items())},
            indent=2,
            sort_keys=True,
        )
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(body + "\n")
        tmp.replace(path)

    def get(self, onion_url: str) -> Optional[bytes]:
        return self.pins.get(onion_url)

    def import_advertisement(self, ad: Union[Advertisement, dict], replace: bool = False):
        """Idempotent for a matching pin; a different pin for a known
        address is refused unless the caller explicitly replaces it."""
        if isinstance(ad, dict):
            ad = Advertisement.from_json(json.dumps(ad))
        digest = bytes.fromhex(ad.cert_hash)
        if len(digest) != 32:
            raise TeevaultError("advertisement cert_hash is not a 32-byte hash")
        existing = self.pins.get(ad.onion_url)
        if existing is not None and existing != digest and not replace:
            raise PinConflict(
                f"{ad.onion_url} is already pinned to a different certificate"
            )
        self.pins[ad.onion_url] = digest


@dataclass(frozen=True)
class FetchResult:
    status: str
    body: bytes
    cert_hash: bytes
    connect_ms: float
    ttfb_ms: float
    ttlb_ms: float
    stale: bool

    @property
    def body_sha256(self) -> str:
        return hashlib.sha256(self.body).hexdigest()


class FetchChannel:
    """An established, pinned channel to one service. Lets callers pay
    the connection cost once and time many fetches over it."""

    def __init__(self, session: transport.Session, crypto, cert_hash: bytes,
                 connect_ms: float):
        self.session = session
        self.crypto = crypto
        self.cert_hash = cert_hash
        self.connect_ms = connect_ms

    @classmethod
    def open(
        cls,
        registry: transport.Registry,
        onion_url: str,
        pins: PinStore,
        profile: transport.CircuitProfile = LOCAL,
        rng: Optional[random.Random] = None,
        timeout: float = 30.0,
    ) -> "FetchChannel":
        pin = pins.get(onion_url)
        if pin is None:
            raise PinMissing(f"no pin recorded for {onion_url}")
        t0 = time.monotonic()
        session = transport.connect(registry, onion_url, profile, rng)
        try:
            state, hello = channel.client_hello()
            session.send_frame(hello)
            ack = session.recv_frame(timeout=timeout).payload
            info = channel.parse_server_hello(ack)
            if info.cert_hash != pin:
                # refuse before any request bytes exist: the handshake
                # hello is the only thing this peer ever got from us
                raise PinMismatch(
                    f"{onion_url} presented a certificate that does not match the pin"
                )
            crypto = channel.client_complete(state, info)
        except BaseException:
            session.close()
            raise
        connect_ms = (time.monotonic() - t0) * 1000.0
        return cls(session, crypto, info.cert_hash, connect_ms)

    def get(self, path: str, timeout: float = 30.0) -> FetchResult:
        request = wire.encode_request(wire.Request("client_get", path))
        t0 = time.monotonic()
        self.session.send_frame(self.crypto.encrypt(request))
        try:
            arrival = self.session.recv_frame(timeout=timeout)
        except (ChannelClosed, TimeoutError) as exc:
            raise FetchError(f"no response: {exc}") from exc
        resp = wire.decode_response(self.crypto.decrypt(arrival.payload))
        if resp.status == wire.FAILURE:
            if resp.detail == "NotFound":
                raise NotFound(path)
            raise FetchError(f"service refused {path}: {resp.detail}")
        return FetchResult(
            status=resp.status,
            body=resp.data,
            cert_hash=self.cert_hash,
            connect_ms=self.connect_ms,
            ttfb_ms=(arrival.t_first - t0) * 1000.0,
            ttlb_ms=(arrival.t_last - t0) * 1000.0,
            stale=resp.status == wire.STALE_WARNING,
        )

    def close(self):
        self.session.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def fetch(
    registry: transport.Registry,
    onion_url: str,
    path: str,
    pins: PinStore,
    profile: transport.CircuitProfile = LOCAL,
    rng: Optional[random.Random] = None,
    timeout: float = 30.0,
) -> FetchResult:
    """One-shot fetch: connect, pin-check, get, close."""
    with FetchChannel.open(registry, onion_url, pins, profile, rng, timeout) as chan:
        return chan.get(path, timeout=timeout)
