import struct

import pytest

from selcc.gcl import GlobalAddress
from selcc.messages import (
    ECHO_SIZE, MESSAGE_SIZE, InvalidationCase, InvalidationMessage,
    compose_reply, parse_reply,
)


def test_message_wire_layout():
    msg = InvalidationMessage(
        target=GlobalAddress(2, 8192),
        case=InvalidationCase.READER_INVALIDATES_MODIFIED,
        sender=7,
        priority=3,
        epoch=41,
        reply_slot=GlobalAddress(7, 2049),
    )
    wire = msg.pack()
    assert len(wire) == MESSAGE_SIZE == 26
    # independently assembled little-endian image
    expected = (
        ((2 << 48) | 8192).to_bytes(8, "little")
        + bytes([2, 7])
        + (3).to_bytes(4, "little")
        + (41).to_bytes(4, "little")
        + ((7 << 48) | 2049).to_bytes(8, "little")
    )
    assert wire == expected
    assert InvalidationMessage.unpack(wire) == msg


def test_message_rejects_bad_length():
    with pytest.raises(ValueError):
        InvalidationMessage.unpack(b"\x00" * 25)


def test_case_kinds():
    assert InvalidationCase.WRITER_INVALIDATES_MODIFIED.wants_write
    assert InvalidationCase.WRITER_INVALIDATES_SHARED.wants_write
    assert not InvalidationCase.READER_INVALIDATES_MODIFIED.wants_write


def test_reply_roundtrip_with_dirty_bounds():
    body = bytes(range(100))
    payload = compose_reply(77, body, dirty=(24, 640))
    assert len(payload) == ECHO_SIZE + 100
    epoch, dirty, got = parse_reply(payload)
    assert (epoch, dirty, got) == (77, (24, 640), body)


def test_reply_clean_sentinel_and_flag_only():
    epoch, dirty, body = parse_reply(compose_reply(5))
    assert epoch == 5 and dirty is None and body == b""
    # epoch wraps into 32 bits on the wire
    epoch, _, _ = parse_reply(compose_reply(1 << 33))
    assert epoch == 0
