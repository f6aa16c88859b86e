"""Typed, ordered message channels between parties.

Two interchangeable backends with identical semantics: an in-memory loopback
pair (simulator and tests) and TCP with length-prefixed framing. Every
message travels as an Envelope frame:

    magic "PYVM" | version u16 | session_id 8B | sender u8 | msg_type u8 |
    payload_len u32 | payload

Header integers are big-endian; the payload is opaque to this layer. Each
endpoint expects a single logical reader and a single logical writer.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import ChannelClosed, ChannelTimeout, FormatError, TransportError

__all__ = [
    "MsgType",
    "Envelope",
    "encode_envelope",
    "decode_envelope",
    "MessageRecord",
    "MessageLog",
    "Channel",
    "LoopbackChannel",
    "loopback_pair",
    "TcpChannel",
    "connect_tcp",
    "listen_tcp",
    "accept_channel",
    "PARTY_SCIENTIST",
    "owner_party_code",
]

MAGIC = b"PYVM"
WIRE_VERSION = 1
MAX_FRAME = 64 * 1024 * 1024
_HEADER = struct.Struct(">4sH8sBBI")

PARTY_SCIENTIST = 0


def owner_party_code(owner_index: int) -> int:
    """Party code for the owner at 0-based connection index."""
    return owner_index + 1


class MsgType(IntEnum):
    PSI_BLIND = 1
    PSI_EVAL = 2
    PSI_DIGEST = 3
    GLOBAL_IDS = 4
    LINK_ERROR = 5
    PERMUTATION = 6
    BATCH_REQUEST = 7
    FORWARD = 8
    GRAD = 9
    EVAL_REQUEST = 10
    EVAL_FORWARD = 11
    END_TRAINING = 12
    METRICS = 13


@dataclass(frozen=True)
class Envelope:
    session_id: bytes
    sender: int
    msg_type: MsgType
    payload: bytes
    version: int = WIRE_VERSION


def encode_envelope(env: Envelope) -> bytes:
    if len(env.session_id) != 8:
        raise FormatError("session id must be exactly 8 bytes")
    if not (0 <= env.sender <= 0xFF):
        raise FormatError("sender code out of range")
    if len(env.payload) > MAX_FRAME:
        raise FormatError(f"payload of {len(env.payload)} bytes exceeds frame limit")
    header = _HEADER.pack(
        MAGIC, env.version, env.session_id, env.sender, int(env.msg_type), len(env.payload)
    )
    return header + env.payload


def decode_envelope(frame: bytes) -> Envelope:
    if len(frame) < _HEADER.size:
        raise FormatError("frame shorter than the envelope header")
    magic, version, session_id, sender, msg_type, payload_len = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise FormatError(f"bad envelope magic {magic!r}")
    if version != WIRE_VERSION:
        raise FormatError(f"unsupported envelope version {version}")
    if payload_len > MAX_FRAME:
        raise FormatError("declared payload exceeds frame limit")
    if len(frame) != _HEADER.size + payload_len:
        raise FormatError("frame length does not match declared payload length")
    try:
        mt = MsgType(msg_type)
    except ValueError:
        raise FormatError(f"unregistered message type {msg_type}") from None
    return Envelope(
        session_id=session_id,
        sender=sender,
        msg_type=mt,
        payload=frame[_HEADER.size :],
        version=version,
    )


# ---------------------------------------------------------------------------
# Optional per-message recording (used by protocol-property tests)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MessageRecord:
    sender: str
    receiver: str
    msg_type: MsgType
    size: int
    payload: bytes


class MessageLog:
    """Thread-safe record of every message sent through instrumented channels."""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[MessageRecord] = []

    def append(self, record: MessageRecord) -> None:
        with self._lock:
            self.records.append(record)

    def delivered_to(self, receiver: str) -> list[MessageRecord]:
        with self._lock:
            return [r for r in self.records if r.receiver == receiver]

    def between(self, sender: str, receiver: str) -> list[MessageRecord]:
        with self._lock:
            return [r for r in self.records if r.sender == sender and r.receiver == receiver]


class Channel:
    """Reliable ordered channel endpoint; exactly-once FIFO delivery or an error."""

    local_name: str = "?"
    peer_name: str = "?"
    default_timeout: float | None = None

    def send(self, env: Envelope) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> Envelope:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def _record(self, log: MessageLog | None, env: Envelope) -> None:
        if log is not None:
            log.append(
                MessageRecord(
                    sender=self.local_name,
                    receiver=self.peer_name,
                    msg_type=env.msg_type,
                    size=len(env.payload),
                    payload=env.payload,
                )
            )


_CLOSE = object()


class LoopbackChannel(Channel):
    """In-memory endpoint; frames still round-trip through the wire codec."""

    def __init__(
        self,
        inbox: queue.Queue,
        outbox: queue.Queue,
        local_name: str,
        peer_name: str,
        log: MessageLog | None = None,
        default_timeout: float | None = None,
    ):
        self._inbox = inbox
        self._outbox = outbox
        self.local_name = local_name
        self.peer_name = peer_name
        self._log = log
        self.default_timeout = default_timeout
        self._closed = False

    def send(self, env: Envelope) -> None:
        if self._closed:
            raise ChannelClosed(f"{self.local_name}: channel is closed")
        frame = encode_envelope(env)
        self._record(self._log, env)
        self._outbox.put(frame)

    def recv(self, timeout: float | None = None) -> Envelope:
        if self._closed:
            raise ChannelClosed(f"{self.local_name}: channel is closed")
        if timeout is None:
            timeout = self.default_timeout
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelTimeout(
                f"{self.local_name}: nothing from {self.peer_name} within {timeout}s"
            ) from None
        if item is _CLOSE:
            self._inbox.put(_CLOSE)  # keep surfacing closure on further recvs
            raise ChannelClosed(f"{self.local_name}: {self.peer_name} closed the channel")
        return decode_envelope(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSE)


def loopback_pair(
    a_name: str = "a",
    b_name: str = "b",
    log: MessageLog | None = None,
    default_timeout: float | None = None,
) -> tuple[LoopbackChannel, LoopbackChannel]:
    """Two connected in-memory endpoints sharing a FIFO per direction."""
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    a = LoopbackChannel(b_to_a, a_to_b, a_name, b_name, log, default_timeout)
    b = LoopbackChannel(a_to_b, b_to_a, b_name, a_name, log, default_timeout)
    return a, b


class TcpChannel(Channel):
    """Length-prefix framed channel over a connected TCP socket.

    A receive timeout aborts the session; the stream is not resynchronized
    afterwards.
    """

    def __init__(
        self,
        sock: socket.socket,
        local_name: str = "local",
        peer_name: str = "peer",
        log: MessageLog | None = None,
        default_timeout: float | None = None,
    ):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self.local_name = local_name
        self.peer_name = peer_name
        self._log = log
        self.default_timeout = default_timeout
        self._closed = False

    def send(self, env: Envelope) -> None:
        if self._closed:
            raise ChannelClosed(f"{self.local_name}: channel is closed")
        frame = encode_envelope(env)
        self._record(self._log, env)
        try:
            self._sock.sendall(frame)
        except (BrokenPipeError, ConnectionError) as exc:
            raise ChannelClosed(f"{self.local_name}: peer disconnected") from exc

    def _read_exact(self, nbytes: int) -> bytes:
        chunks = []
        remaining = nbytes
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except socket.timeout:
                raise ChannelTimeout(
                    f"{self.local_name}: nothing from {self.peer_name} in time"
                ) from None
            except ConnectionError as exc:
                raise ChannelClosed(f"{self.local_name}: peer disconnected") from exc
            if not chunk:
                raise ChannelClosed(f"{self.local_name}: {self.peer_name} closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float | None = None) -> Envelope:
        if self._closed:
            raise ChannelClosed(f"{self.local_name}: channel is closed")
        self._sock.settimeout(timeout if timeout is not None else self.default_timeout)
        header = self._read_exact(_HEADER.size)
        payload_len = struct.unpack_from(">I", header, _HEADER.size - 4)[0]
        if payload_len > MAX_FRAME:
            raise FormatError("declared payload exceeds frame limit")
        payload = self._read_exact(payload_len) if payload_len else b""
        return decode_envelope(header + payload)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


def connect_tcp(
    host: str,
    port: int,
    timeout: float = 30.0,
    local_name: str = "client",
    peer_name: str = "server",
    default_timeout: float | None = None,
) -> TcpChannel:
    """Dial with retries until the deadline; raises TransportError on failure."""
    deadline = time.monotonic() + timeout
    last_error: Exception | None = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=min(timeout, 5.0))
            return TcpChannel(sock, local_name, peer_name, default_timeout=default_timeout)
        except OSError as exc:
            last_error = exc
            time.sleep(0.1)
    raise TransportError(f"could not connect to {host}:{port} within {timeout}s: {last_error}")


def listen_tcp(host: str, port: int) -> tuple[socket.socket, int]:
    """Bind and listen; returns (listener, bound port). Port 0 picks a free one."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(1)
    return listener, listener.getsockname()[1]


def accept_channel(
    listener: socket.socket,
    timeout: float | None = None,
    local_name: str = "server",
    peer_name: str = "client",
    default_timeout: float | None = None,
) -> TcpChannel:
    listener.settimeout(timeout)
    try:
        sock, _ = listener.accept()
    except socket.timeout:
        raise ChannelTimeout(f"{local_name}: no peer connected within {timeout}s") from None
    return TcpChannel(sock, local_name, peer_name, default_timeout=default_timeout)
