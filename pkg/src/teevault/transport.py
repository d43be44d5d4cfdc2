"""Simulated anonymity-network transport.

Stands in for Tor: an onion-name registry plays the directory system,
and a circuit latency model plays the relays. Circuits add latency
only; they are 0 hops (Local), or 3/6 hops with per-hop draws summed
into a one-way delay applied to every frame in each direction.
RandomRelays redraws the circuit on every connect; FixedRelays draws
once per profile and reuses it, which is what makes its repeated-load
timings comparable.

The anonymity contract is structural: a session object carries a
session id and an origin tag, never a peer network address.

Framing: 4-byte big-endian length prefix, then the payload, chunked
into 64 KiB segments. A frame's one-way latency stamps its first
segment; later segments follow immediately (pipelining), so latency
delays the first byte while transfer shaping separates first byte from
last byte.

Backends: in-process loopback (default), TCP on 127.0.0.1, and a
SOCKS5 client connector (RFC 1928 CONNECT with a domain-type address)
for experiments against a real proxy.
"""

from __future__ import annotations

import json
import queue
import random
import secrets
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import (
    ChannelClosed,
    Collision,
    ConnectFailed,
    NotFound,
    ProxyError,
    TeevaultError,
)

SEGMENT_BYTES = 64 * 1024
MAX_FRAME_BYTES = 64 * 1024 * 1024
_B32 = "abcdefghijklmnopqrstuvwxyz234567"

ORIGIN_TOR = "via_tor_client"
ORIGIN_DIRECT = "direct"

VALID_MODES = ("RandomRelays", "FixedRelays", "Local")


@dataclass(frozen=True)
class FrameArrival:
    payload: bytes
    t_first: float  # monotonic time the frame's first segment arrived
    t_last: float   # monotonic time its last segment arrived


class CircuitProfile:
    """Latency recipe for connections: mode, hop count, per-hop range."""

    def __init__(
        self,
        mode: str,
        hops: int,
        min_ms: float = 0.0,
        max_ms: float = 0.0,
        jitter_ms: float = 0.0,
    ):
        if mode not in VALID_MODES:
            raise TeevaultError(f"unknown mode: {mode}")
        if hops not in (0, 3, 6):
            raise TeevaultError("hops must be 0, 3, or 6")
        if mode == "Local" and hops != 0:
            raise TeevaultError("Local mode means 0 hops")
        if mode != "Local" and hops == 0:
            raise TeevaultError(f"{mode} needs 3 or 6 hops")
        if min_ms < 0 or max_ms < min_ms or jitter_ms < 0:
            raise TeevaultError("bad latency range")
        self.mode = mode
        self.hops = hops
        self.min_ms = float(min_ms)
        self.max_ms = float(max_ms)
        self.jitter_ms = float(jitter_ms)
        self._fixed_hops: Optional[list[float]] = None
        self._lock = threading.Lock()

    @classmethod
    def local(cls) -> "CircuitProfile":
        return cls("Local", 0)

    @classmethod
    def random_relays(cls, min_ms=20.0, max_ms=80.0, hops=6, jitter_ms=0.0) -> "CircuitProfile":
        return cls("RandomRelays", hops, min_ms, max_ms, jitter_ms)

    @classmethod
    def fixed_relays(cls, min_ms=20.0, max_ms=80.0, hops=6, jitter_ms=0.0) -> "CircuitProfile":
        return cls("FixedRelays", hops, min_ms, max_ms, jitter_ms)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "hops": self.hops,
            "min_ms": self.min_ms,
            "max_ms": self.max_ms,
            "jitter_ms": self.jitter_ms,
        }

    @classmethod
    def from_json(cls, data) -> "CircuitProfile":
        if isinstance(data, str):
            data = json.loads(data)
        if not isinstance(data, dict):
            raise TeevaultError("profile must be a JSON object")
        return cls(
            mode=data.get("mode", "Local"),
            hops=int(data.get("hops", 0)),
            min_ms=float(data.get("min_ms", 0.0)),
            max_ms=float(data.get("max_ms", 0.0)),
            jitter_ms=float(data.get("jitter_ms", 0.0)),
        )

    def reset_fixed_circuit(self):
        with self._lock:
            self._fixed_hops = None

    def draw_circuit(self, rng: random.Random) -> "CircuitDraw":
        """Sample per-hop latencies for one connection."""
        if self.mode == "Local":
            return CircuitDraw([], 0.0, 0)
        with self._lock:
            if self.mode == "FixedRelays":
                if self._fixed_hops is None:
                    self._fixed_hops = self._sample_hops(rng)
                hops_ms = list(self._fixed_hops)
            else:
                hops_ms = self._sample_hops(rng)
        return CircuitDraw(hops_ms, self.jitter_ms, self.hops)

    def _sample_hops(self, rng: random.Random) -> list[float]:
        return [rng.uniform(self.min_ms, self.max_ms) for _ in range(self.hops)]


@dataclass
class CircuitDraw:
    """One sampled circuit: fixed per-hop latencies plus jitter recipe."""

    hop_ms: list[float]
    jitter_ms: float
    hops: int

    @property
    def one_way_ms(self) -> float:
        return sum(self.hop_ms)

    def one_way_seconds(self, rng: random.Random) -> float:
        base = self.one_way_ms
        if self.jitter_ms > 0:
            base += sum(rng.uniform(0.0, self.jitter_ms) for _ in range(self.hops))
        return base / 1000.0


_ZERO_DRAW = CircuitDraw([], 0.0, 0)
_EOF = None


class Session:
    """One side of a bidirectional framed pipe with latency stamping."""

    def __init__(
        self,
        session_id: str,
        origin_tag: str,
        out_q: "queue.Queue",
        in_q: "queue.Queue",
        draw: CircuitDraw,
        rng_seed: int,
    ):
        self.session_id = session_id
        self.origin_tag = origin_tag
        self._out = out_q
        self._in = in_q
        self._draw = draw
        self._rng = random.Random(rng_seed)
        self._recv_buf = bytearray()
        self._recv_closed = False
        self._send_closed = False
        self.bytes_sent = 0
        self.bytes_received = 0

    @property
    def circuit_one_way_ms(self) -> float:
        return self._draw.one_way_ms

    def send_frame(self, payload: bytes, shaper=None):
        if self._send_closed:
            raise ChannelClosed("session closed")
        if len(payload) > MAX_FRAME_BYTES:
            raise TeevaultError("frame too large")
        buf = struct.pack(">I", len(payload)) + payload
        latency = self._draw.one_way_seconds(self._rng)
        for off in range(0, len(buf), SEGMENT_BYTES):
            seg = buf[off : off + SEGMENT_BYTES]
            if shaper is not None:
                shaper.take(len(seg))
            self._out.put((time.monotonic() + latency, bytes(seg)))
        self.bytes_sent += len(buf)

    def _next_segment(self, timeout: Optional[float]) -> bytes:
        if self._recv_closed:
            raise ChannelClosed("peer closed")
        try:
            item = self._in.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame within timeout")
        if item is _EOF:
            self._recv_closed = True
            raise ChannelClosed("peer closed")
        deliver_at, seg = item
        delay = deliver_at - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        return seg

    def recv_frame(self, timeout: Optional[float] = None) -> FrameArrival:
        t_first = None
        while len(self._recv_buf) < 4:
            seg = self._next_segment(timeout)
            if t_first is None:
                t_first = time.monotonic()
            self._recv_buf.extend(seg)
        length = struct.unpack(">I", self._recv_buf[:4])[0]
        if length > MAX_FRAME_BYTES:
            raise TeevaultError("peer announced oversize frame")
        while len(self._recv_buf) < 4 + length:
            seg = self._next_segment(timeout)
            if t_first is None:
                t_first = time.monotonic()
            self._recv_buf.extend(seg)
        t_last = time.monotonic() if t_first is not None else None
        if t_first is None:
            # frame was fully buffered by an earlier oversized read
            t_first = t_last = time.monotonic()
        payload = bytes(self._recv_buf[4 : 4 + length])
        del self._recv_buf[: 4 + length]
        self.bytes_received += 4 + length
        return FrameArrival(payload, t_first, t_last)

    def close(self):
        if not self._send_closed:
            self._send_closed = True
            self._out.put(_EOF)


class Endpoint:
    """A reachable service: a handler invoked once per inbound session."""

    def __init__(self, handler: Callable[[Session], None], label: str = ""):
        self.handler = handler
        self.label = label

    def open_session(self, origin_tag: str, draw: CircuitDraw, rng: random.Random) -> Session:
        sid = secrets.token_hex(8)
        a, b = queue.Queue(), queue.Queue()
        client = Session(sid, origin_tag, out_q=a, in_q=b, draw=draw, rng_seed=rng.getrandbits(64))
        server = Session(sid, origin_tag, out_q=b, in_q=a, draw=draw, rng_seed=rng.getrandbits(64))
        thread = threading.Thread(
            target=self._run_handler, args=(server,), name=f"ep-{self.label}-{sid}", daemon=True
        )
        thread.start()
        return client

    def _run_handler(self, server_session: Session):
        try:
            self.handler(server_session)
        except ChannelClosed:
            pass
        finally:
            server_session.close()


class TcpEndpointRef:
    """Registry entry pointing at a TCP listener instead of an
    in-process handler."""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port

    def open_session(self, origin_tag: str, draw: CircuitDraw, rng: random.Random) -> "TcpSession":
        try:
            sock = socket.create_connection((self.host, self.port), timeout=10)
        except OSError as exc:
            raise ConnectFailed(f"dial failed: {exc}") from exc
        preamble = b"\x01" if origin_tag == ORIGIN_TOR else b"\x02"
        sock.sendall(preamble)
        return TcpSession(sock, secrets.token_hex(8), origin_tag, draw, rng.getrandbits(64))


class Registry:
    """Onion-name directory: the HSDir stand-in."""

    def __init__(self):
        self._entries = {}
        self._lock = threading.Lock()

    def register(self, onion_url: str, endpoint) -> str:
        with self._lock:
            if onion_url in self._entries:
                raise Collision(f"{onion_url} already registered")
            self._entries[onion_url] = (endpoint, time.time())
        return onion_url

    def resolve(self, onion_url: str):
        with self._lock:
            entry = self._entries.get(onion_url)
        if entry is None:
            raise NotFound(f"{onion_url} not registered")
        return entry[0]

    def deregister(self, onion_url: str):
        with self._lock:
            self._entries.pop(onion_url, None)

    def random_onion(self, rng: Optional[random.Random] = None) -> str:
        pick = rng.choice if rng is not None else secrets.choice
        return "".join(pick(_B32) for _ in range(56)) + ".onion"


def connect(
    registry: Registry,
    onion_url: str,
    profile: CircuitProfile,
    rng: Optional[random.Random] = None,
) -> Session:
    rng = rng or random.Random()
    endpoint = registry.resolve(onion_url)
    draw = profile.draw_circuit(rng)
    return endpoint.open_session(ORIGIN_TOR, draw, rng)


def connect_direct(registry: Registry, onion_url: str) -> Session:
    """Adversarial probe path: same endpoint, no Tor client in front."""
    endpoint = registry.resolve(onion_url)
    return endpoint.open_session(ORIGIN_DIRECT, _ZERO_DRAW, random.Random())


# --- TCP backend -------------------------------------------------------------


class TcpSession:
    """Socket-backed session with the same surface as Session.

    Latency is applied on the sending side: the one-way delay elapses
    before the frame's first byte is written.
    """

    def __init__(self, sock: socket.socket, session_id: str, origin_tag: str,
                 draw: CircuitDraw, rng_seed: int):
        self._sock = sock
        self.session_id = session_id
        self.origin_tag = origin_tag
        self._draw = draw
        self._rng = random.Random(rng_seed)
        self._closed = False
        self.bytes_sent = 0
        self.bytes_received = 0

    @property
    def circuit_one_way_ms(self) -> float:
        return self._draw.one_way_ms

    def send_frame(self, payload: bytes, shaper=None):
        if self._closed:
            raise ChannelClosed("session closed")
        buf = struct.pack(">I", len(payload)) + payload
        delay = self._draw.one_way_seconds(self._rng)
        if delay > 0:
            time.sleep(delay)
        try:
            for off in range(0, len(buf), SEGMENT_BYTES):
                seg = buf[off : off + SEGMENT_BYTES]
                if shaper is not None:
                    shaper.take(len(seg))
                self._sock.sendall(seg)
        except OSError as exc:
            raise ChannelClosed(f"socket error: {exc}") from exc
        self.bytes_sent += len(buf)

    def _read_exact(self, n: int, timeout: Optional[float]) -> tuple[bytes, float]:
        self._sock.settimeout(timeout)
        chunks = []
        t_first = None
        got = 0
        while got < n:
            try:
                chunk = self._sock.recv(min(SEGMENT_BYTES, n - got))
            except socket.timeout:
                raise TimeoutError("no frame within timeout")
            except OSError as exc:
                raise ChannelClosed(f"socket error: {exc}") from exc
            if not chunk:
                self._closed = True
                raise ChannelClosed("peer closed")
            if t_first is None:
                t_first = time.monotonic()
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks), t_first

    def recv_frame(self, timeout: Optional[float] = None) -> FrameArrival:
        header, t_first = self._read_exact(4, timeout)
        length = struct.unpack(">I", header)[0]
        if length > MAX_FRAME_BYTES:
            raise TeevaultError("peer announced oversize frame")
        payload, _ = self._read_exact(length, timeout) if length else (b"", t_first)
        t_last = time.monotonic()
        self.bytes_received += 4 + length
        return FrameArrival(payload, t_first, t_last)

    def close(self):
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


class TcpServer:
    """Accept loop feeding sessions to the same handler interface."""

    def __init__(self, handler: Callable[[TcpSession], None], host: str = "127.0.0.1", port: int = 0):
        self._handler = handler
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.host, self.port = self._listener.getsockname()
        self._stopped = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def _accept_loop(self):
        while not self._stopped.is_set():
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_one, args=(conn,), daemon=True).start()

    def _serve_one(self, conn: socket.socket):
        # first byte declares origin; raw probes that send anything else
        # (or nothing recognizable) count as direct connections
        try:
            preamble = conn.recv(1)
        except OSError:
            conn.close()
            return
        origin = ORIGIN_TOR if preamble == b"\x01" else ORIGIN_DIRECT
        session = TcpSession(conn, secrets.token_hex(8), origin, _ZERO_DRAW, secrets.randbits(64))
        try:
            self._handler(session)
        except (ChannelClosed, TeevaultError):
            pass
        finally:
            session.close()

    def stop(self):
        self._stopped.set()
        try:
            self._listener.close()
        except OSError:
            pass


# --- SOCKS5 client connector (RFC 1928) --------------------------------------


def socks5_connect(
    proxy_host: str,
    proxy_port: int,
    dest_host: str,
    dest_port: int,
    timeout: float = 10.0,
) -> TcpSession:
    """CONNECT through a SOCKS5 proxy using a domain-type address.

    The destination name must fit the protocol's one-byte length field;
    oversize names are rejected before any dialing happens.
    """
    name = dest_host.encode("utf-8")
    if len(name) > 255:
        raise ProxyError("destination name exceeds 255 bytes")
    if not 1 <= dest_port <= 65535:
        raise ProxyError("destination port out of range")
    try:
        sock = socket.create_connection((proxy_host, proxy_port), timeout=timeout)
    except OSError as exc:
        raise ProxyError(f"proxy unreachable: {exc}") from exc
    try:
        sock.settimeout(timeout)
        # greeting: version 5, one method, no-auth
        sock.sendall(b"\x05\x01\x00")
        reply = _recv_exact(sock, 2)
        if reply != b"\x05\x00":
            raise ProxyError(f"proxy refused method negotiation: {reply.hex()}")
        req = b"\x05\x01\x00\x03" + bytes([len(name)]) + name + struct.pack(">H", dest_port)
        sock.sendall(req)
        head = _recv_exact(sock, 4)
        if head[0] != 0x05 or head[1] != 0x00:
            raise ProxyError(f"proxy CONNECT failed: code {head[1]}")
        atyp = head[3]
        if atyp == 0x01:
            _recv_exact(sock, 4 + 2)
        elif atyp == 0x03:
            ln = _recv_exact(sock, 1)[0]
            _recv_exact(sock, ln + 2)
        elif atyp == 0x04:
            _recv_exact(sock, 16 + 2)
        else:
            raise ProxyError(f"proxy reply with unknown ATYP {atyp}")
    except (OSError, socket.timeout) as exc:
        sock.close()
        raise ProxyError(f"proxy handshake failed: {exc}") from exc
    except ProxyError:
        sock.close()
        raise
    return TcpSession(sock, secrets.token_hex(8), ORIGIN_TOR, _ZERO_DRAW, secrets.randbits(64))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    data = b""
    while len(data) < n:
        chunk = sock.recv(n - len(data))
        if not chunk:
            raise OSError("connection closed during handshake")
        data += chunk
    return data
