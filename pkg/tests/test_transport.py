import hashlib
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vflkit.errors import ChannelClosed, ChannelTimeout, FormatError
from vflkit.transport import (
    Envelope,
    MessageLog,
    MsgType,
    accept_channel,
    connect_tcp,
    decode_envelope,
    encode_envelope,
    listen_tcp,
    loopback_pair,
)

SESSION = b"\x01\x02\x03\x04\x05\x06\x07\x08"


def env(payload=b"", msg_type=MsgType.FORWARD, sender=0):
    return Envelope(session_id=SESSION, sender=sender, msg_type=msg_type, payload=payload)


# ---------------------------------------------------------------------------
# Envelope codec
# ---------------------------------------------------------------------------


def test_envelope_roundtrip():
    e = env(b"hello", MsgType.PSI_BLIND, sender=2)
    assert decode_envelope(encode_envelope(e)) == e


def test_empty_payload_is_20_byte_frame():
    assert len(encode_envelope(env())) == 20


def test_corrupted_magic_rejected():
    frame = bytearray(encode_envelope(env(b"x")))
    frame[0] ^= 0xFF
    with pytest.raises(FormatError):
        decode_envelope(bytes(frame))


def test_unsupported_version_rejected():
    frame = bytearray(encode_envelope(env()))
    frame[4:6] = struct.pack(">H", 9)
    with pytest.raises(FormatError):
        decode_envelope(bytes(frame))


def test_truncated_frame_rejected():
    frame = encode_envelope(env(b"payload"))
    with pytest.raises(FormatError):
        decode_envelope(frame[:-1])
    with pytest.raises(FormatError):
        decode_envelope(frame[:10])


def test_unregistered_msg_type_rejected():
    frame = bytearray(encode_envelope(env()))
    frame[15] = 200
    with pytest.raises(FormatError):
        decode_envelope(bytes(frame))


def test_bad_session_id_length_rejected():
    with pytest.raises(FormatError):
        encode_envelope(Envelope(b"\x00" * 7, 0, MsgType.GRAD, b""))


@settings(max_examples=40, deadline=None)
@given(
    payload=st.binary(max_size=512),
    sender=st.integers(0, 255),
    msg_type=st.sampled_from(list(MsgType)),
)
def test_envelope_roundtrip_property(payload, sender, msg_type):
    e = Envelope(SESSION, sender, msg_type, payload)
    assert decode_envelope(encode_envelope(e)) == e


# ---------------------------------------------------------------------------
# Channel backends
# ---------------------------------------------------------------------------


@pytest.fixture(params=["loopback", "tcp"])
def channel_pair(request):
    if request.param == "loopback":
        a, b = loopback_pair("a", "b", default_timeout=10.0)
        yield a, b
        a.close()
        b.close()
    else:
        listener, port = listen_tcp("127.0.0.1", 0)
        result = {}

        def do_accept():
            result["server"] = accept_channel(listener, timeout=5.0, default_timeout=10.0)

        t = threading.Thread(target=do_accept)
        t.start()
        client = connect_tcp("127.0.0.1", port, timeout=5.0, default_timeout=10.0)
        t.join()
        listener.close()
        yield client, result["server"]
        client.close()
        result["server"].close()


def test_fifo_order(channel_pair):
    a, b = channel_pair
    a.send(env(b"first"))
    a.send(env(b"second"))
    assert b.recv().payload == b"first"
    assert b.recv().payload == b"second"


def test_recv_timeout(channel_pair):
    a, b = channel_pair
    with pytest.raises(ChannelTimeout):
        b.recv(timeout=0.01)


def test_both_directions_independent(channel_pair):
    a, b = channel_pair
    a.send(env(b"a-to-b"))
    b.send(env(b"b-to-a"))
    assert a.recv().payload == b"b-to-a"
    assert b.recv().payload == b"a-to-b"


def test_peer_close_surfaces(channel_pair):
    a, b = channel_pair
    a.send(env(b"last"))
    a.close()
    assert b.recv().payload == b"last"
    with pytest.raises(ChannelClosed):
        b.recv()


def test_large_payload_roundtrip(channel_pair):
    a, b = channel_pair
    blob = np.random.default_rng(0).bytes(1024 * 1024)
    digest = hashlib.sha256(blob).digest()
    sender = threading.Thread(target=lambda: a.send(env(blob)))
    sender.start()
    received = b.recv()
    sender.join()
    assert hashlib.sha256(received.payload).digest() == digest


def test_burst_no_loss_no_reorder_no_dup(channel_pair):
    a, b = channel_pair
    count = 10_000

    def produce():
        for i in range(count):
            a.send(env(struct.pack(">I", i), MsgType.METRICS))

    producer = threading.Thread(target=produce)
    producer.start()
    seen = []
    for _ in range(count):
        seen.append(struct.unpack(">I", b.recv().payload)[0])
    producer.join()
    assert seen == list(range(count))
    with pytest.raises(ChannelTimeout):
        b.recv(timeout=0.05)  # nothing extra arrives


def test_loopback_message_log_records_sender_receiver():
    log = MessageLog()
    a, b = loopback_pair("scientist", "owner0", log=log, default_timeout=5.0)
    a.send(env(b"x", MsgType.PSI_BLIND))
    b.recv()
    b.send(env(b"y", MsgType.PSI_EVAL, sender=1))
    a.recv()
    assert [r.msg_type for r in log.between("scientist", "owner0")] == [MsgType.PSI_BLIND]
    assert [r.msg_type for r in log.between("owner0", "scientist")] == [MsgType.PSI_EVAL]
