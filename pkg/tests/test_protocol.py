import json
import socket
import struct

import numpy as np
import pytest

from frames import classify, fuzz_frames, sample_messages
from fedhf.protocol import (HEADER, MAX_PAYLOAD, FramingError, Kind, Message, ProtocolError,
                            decode_message, encode_message, parse_address, read_frame)


def test_empty_shutdown_frame_layout():
    frame = encode_message(Message(Kind.SHUTDOWN, 0))
    assert frame == struct.pack(">IBI", 0, 5, 0)
    assert len(frame) == 9


def test_header_is_big_endian():
    frame = encode_message(Message(Kind.HELLO, 0x01020304, b"{}"))
    assert frame[:9] == bytes([0, 0, 0, 2, 6, 1, 2, 3, 4])


def test_round_trip():
    for msg in sample_messages(np.random.default_rng(0)):
        assert decode_message(encode_message(msg)) == msg


def test_every_truncation_rejected():
    for msg in sample_messages(np.random.default_rng(1)):
        frame = encode_message(msg)
        for cut in range(len(frame)):
            with pytest.raises(FramingError):
                decode_message(frame[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(FramingError, match="trailing"):
        decode_message(encode_message(Message(Kind.SHUTDOWN, 0)) + b"x")


def test_unknown_kind():
    with pytest.raises(ProtocolError, match="unknown message kind 99"):
        decode_message(struct.pack(">IBI", 0, 99, 0))


def test_oversize_length_rejected_before_reading():
    header = HEADER.pack(MAX_PAYLOAD + 1, int(Kind.SHUTDOWN), 0)
    with pytest.raises(FramingError, match="exceeds"):
        decode_message(header)


@pytest.mark.parametrize("kind,payload", [
    (Kind.PARAM_UPDATE, b"not parameters"),
    (Kind.METRICS_REPORT, b"[1, 2]"),
    (Kind.HELLO, b"{broken"),
    (Kind.SHUTDOWN, b"\xff\xfe"),
])
def test_malformed_payloads(kind, payload):
    with pytest.raises(ProtocolError):
        decode_message(HEADER.pack(len(payload), int(kind), 0) + payload)


def test_round_out_of_range():
    with pytest.raises(ProtocolError):
        encode_message(Message(Kind.SHUTDOWN, -1))


def test_message_json_is_canonical():
    a = Message.json(Kind.HELLO, 0, {"b": 1, "a": 2})
    assert a.payload == json.dumps({"a": 2, "b": 1}).encode()
    assert a.doc() == {"a": 2, "b": 1}


def test_fuzz_never_crashes():
    outcomes = {classify(f) for f in fuzz_frames(2000, 0)}
    assert outcomes <= {"ok", "rejected"}


def test_parse_address():
    assert parse_address("127.0.0.1:5000") == ("127.0.0.1", 5000)
    for bad in ("localhost", ":80", "host:port"):
        with pytest.raises(ValueError):
            parse_address(bad)


def test_read_frame_over_socket_pair():
    a, b = socket.socketpair()
    try:
        msgs = sample_messages(np.random.default_rng(2))
        for m in msgs:
            a.sendall(encode_message(m))
        assert [decode_message(read_frame(b)) for _ in msgs] == msgs
        a.sendall(encode_message(msgs[2])[:-3])
        a.close()
        with pytest.raises(FramingError, match="closed"):
            read_frame(b)
    finally:
        b.close()
