"""Wire formats for the coherence traffic between compute nodes.

An invalidation message is 26 bytes:

    [target address: 8][case: 1][sender: 1][priority: 4][epoch: 4][reply slot: 8]

The reply travels one-sidedly into the sender's registered reply slot, whose
layout is [payload: line-size bytes][status: 1 byte] with status 0x00 =
pending, 0x01 = acknowledged, 0x02 = dropped.

Within the payload the first 8 bytes — which would hold the forwarded copy's
latch word, meaningless in flight — carry an echo header instead:

    [epoch echo: 4][dirty lower: 2][dirty upper: 2]

followed by the line's bytes from offset 8 on.  The dirty bounds ride along
when ownership moves between writers without a flush, so the new owner knows
which byte range memory is still missing.  (0, 0) means clean.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from selcc.gcl import GlobalAddress

MESSAGE_SIZE = 26
_MSG_FMT = "<QBBIIQ"

REPLY_PENDING = 0x00
REPLY_ACK = 0x01
REPLY_DROPPED = 0x02

_ECHO_FMT = "<IHH"
ECHO_SIZE = 8


class InvalidationCase(enum.IntEnum):
    WRITER_INVALIDATES_MODIFIED = 1
    READER_INVALIDATES_MODIFIED = 2
    WRITER_INVALIDATES_SHARED = 3
    # not a request at all: a releasing holder pushed its exclusive word to
    # the receiver, which must now claim the line.  Fire-and-forget, no reply.
    EXCLUSIVE_GRANT = 4

    @property
    def wants_write(self) -> bool:
        return self is not InvalidationCase.READER_INVALIDATES_MODIFIED


@dataclass(frozen=True)
class InvalidationMessage:
    target: GlobalAddress
    case: InvalidationCase
    sender: int
    priority: int
    epoch: int
    reply_slot: GlobalAddress   # node_id = sender's compute node, offset = slot

    def pack(self) -> bytes:
        return struct.pack(
            _MSG_FMT,
            self.target.pack(),
            int(self.case),
            self.sender,
            min(self.priority, 0xFFFFFFFF),
            self.epoch & 0xFFFFFFFF,
            self.reply_slot.pack(),
        )

    @classmethod
    def unpack(cls, data: bytes) -> "InvalidationMessage":
        if len(data) != MESSAGE_SIZE:
            raise ValueError(f"invalidation message must be {MESSAGE_SIZE} bytes")
        target, case, sender, priority, epoch, slot = struct.unpack(_MSG_FMT, data)
        return cls(
            target=GlobalAddress.unpack(target),
            case=InvalidationCase(case),
            sender=sender,
            priority=priority,
            epoch=epoch,
            reply_slot=GlobalAddress.unpack(slot),
        )


def compose_reply(epoch: int, body: bytes = b"", dirty: tuple[int, int] | None = None) -> bytes:
    """Build a reply payload: echo header plus (optionally) line bytes [8:]."""
    lo, hi = dirty if dirty is not None else (0, 0)
    return struct.pack(_ECHO_FMT, epoch & 0xFFFFFFFF, lo, hi) + body


def parse_reply(payload: bytes) -> tuple[int, tuple[int, int] | None, bytes]:
    """Split a reply payload into (epoch echo, dirty bounds or None, body)."""
    epoch, lo, hi = struct.unpack_from(_ECHO_FMT, payload, 0)
    dirty = None if (lo, hi) == (0, 0) else (lo, hi)
    return epoch, dirty, payload[ECHO_SIZE:]
