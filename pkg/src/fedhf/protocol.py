"""Length-prefixed framing for server/client messages.

Frame layout (big-endian)::

    u32 payload length | u8 kind | u32 round | payload
"""

from __future__ import annotations

import enum
import json
import socket
import struct
from dataclasses import dataclass

from .numkit import SerializationError, deserialize_params

HEADER = struct.Struct(">IBI")
MAX_PAYLOAD = 256 * 1024 * 1024


class TransportError(Exception):
    pass


class FramingError(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class Kind(enum.IntEnum):
    PARAM_BROADCAST = 1
    PARAM_UPDATE = 2
    METRICS_REPORT = 3
    GRAPH_DISTRIBUTION = 4
    SHUTDOWN = 5
    HELLO = 6
    FEATURE_REPORT = 7


JSON_KINDS = {Kind.METRICS_REPORT, Kind.GRAPH_DISTRIBUTION, Kind.HELLO, Kind.FEATURE_REPORT}
PARAM_KINDS = {Kind.PARAM_BROADCAST, Kind.PARAM_UPDATE}


@dataclass(frozen=True)
class Message:
    kind: Kind
    round: int
    payload: bytes = b""

    @classmethod
    def json(cls, kind: Kind, round: int, doc) -> "Message":
        return cls(kind, round, json.dumps(doc, sort_keys=True).encode())

    def doc(self):
        return json.loads(self.payload.decode("utf-8"))


def encode_message(msg: Message) -> bytes:
    if not 0 <= msg.round <= 0xFFFF_FFFF:
        raise ProtocolError(f"round index {msg.round} does not fit in u32")
    return HEADER.pack(len(msg.payload), int(msg.kind), msg.round) + msg.payload


def _check_payload(kind: Kind, payload: bytes) -> None:
    try:
        if kind in PARAM_KINDS:
            deserialize_params(payload)
        elif kind in JSON_KINDS:
            if not isinstance(json.loads(payload.decode("utf-8")), dict):
                raise ProtocolError(f"{kind.name} payload must be a JSON object")
        else:
            payload.decode("utf-8")
    except (SerializationError, UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"malformed {kind.name} payload: {exc}") from None


def decode_header(header: bytes, max_payload: int = MAX_PAYLOAD) -> tuple[int, Kind, int]:
    if len(header) < HEADER.size:
        raise FramingError(f"truncated header: {len(header)} of {HEADER.size} bytes")
    length, tag, rnd = HEADER.unpack(header[:HEADER.size])
    if length > max_payload:
        raise FramingError(f"payload length {length} exceeds limit {max_payload}")
    try:
        kind = Kind(tag)
    except ValueError:
        raise ProtocolError(f"unknown message kind {tag}") from None
    return length, kind, rnd


def decode_message(data: bytes, max_payload: int = MAX_PAYLOAD) -> Message:
    """Parse exactly one frame; any malformation raises a TransportError."""
    data = bytes(data)
    length, kind, rnd = decode_header(data, max_payload)
    body = data[HEADER.size:]
    if len(body) < length:
        raise FramingError(f"truncated payload: {len(body)} of {length} bytes")
    if len(body) > length:
        raise FramingError(f"{len(body) - length} trailing bytes after frame")
    _check_payload(kind, body)
    return Message(kind, rnd, body)


# -- socket helpers -------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise FramingError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, max_payload: int = MAX_PAYLOAD) -> bytes:
    header = _recv_exact(sock, HEADER.size)
    length, _, _ = decode_header(header, max_payload)
    return header + _recv_exact(sock, length)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)
