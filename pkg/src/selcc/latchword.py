"""Algebra of the 64-bit global latch word.

Every cache line in remote memory starts with one 8-byte word that encodes
its latch state:

  bits 63..58   exclusive holder ID (0 = none, valid holders are 1..58)
  bits 57..0    reader bitmap; node N owns bit (N - 1)

A word is well formed when the exclusive field and the reader bitmap are not
both populated.  All state transitions are expressed as operands for one-sided
atomics: compare-and-swap pairs (expect, swap) and fetch-and-add deltas.  The
deltas exploit plain wrapping arithmetic mod 2^64, so two field updates can be
folded into a single add (for example "drop the old exclusive holder and set
two reader bits" is one FAA).  Negative adjustments are expressed as the
two's-complement of the positive value.

Functions here are pure: they build operands and interpret words, they never
touch memory.
"""

from __future__ import annotations

MAX_NODE_ID = 58
EXCLUSIVE_SHIFT = 58
WORD_MASK = (1 << 64) - 1
READER_MASK = (1 << EXCLUSIVE_SHIFT) - 1


def _check_node(node: int) -> None:
    if not 1 <= node <= MAX_NODE_ID:
        raise ValueError(f"node ID {node} outside 1..{MAX_NODE_ID}")


def reader_bit(node: int) -> int:
    """Bitmap contribution of one shared holder."""
    _check_node(node)
    return 1 << (node - 1)


def encode(exclusive: int | None, readers=()) -> int:
    """Pack an exclusive holder (or None) and a set of reader IDs into a word.

    Rejects words that claim both an exclusive holder and shared holders,
    since no legal transition produces that state.
    """
    readers = frozenset(readers)
    if exclusive is not None and exclusive != 0:
        _check_node(exclusive)
        if readers:
            raise ValueError("exclusive holder and reader bitmap are mutually exclusive")
        return (exclusive << EXCLUSIVE_SHIFT) & WORD_MASK
    word = 0
    for r in readers:
        word |= reader_bit(r)
    return word


def decode(word: int) -> tuple[int | None, frozenset[int]]:
    """Split a word into (exclusive holder or None, frozenset of readers).

    Any 64-bit value decodes; validity is the caller's concern.
    """
    if not 0 <= word <= WORD_MASK:
        raise ValueError("latch word out of 64-bit range")
    excl = word >> EXCLUSIVE_SHIFT
    bits = word & READER_MASK
    readers = frozenset(i + 1 for i in range(MAX_NODE_ID) if bits & (1 << i))
    return (excl or None, readers)


def is_free(word: int) -> bool:
    return word == 0


def wrap_add(word: int, delta: int) -> int:
    """Apply an FAA delta with mod-2^64 wraparound (what the fabric does)."""
    return (word + delta) & WORD_MASK


def negate(delta: int) -> int:
    """Two's-complement negation: the delta that undoes another delta."""
    return (-delta) & WORD_MASK


def cas_acquire_exclusive(node: int) -> tuple[int, int]:
    """CAS operands claiming the latch as exclusive holder: free -> (node, {})."""
    _check_node(node)
    return 0, node << EXCLUSIVE_SHIFT


def faa_acquire_shared(node: int) -> int:
    """FAA delta setting this node's reader bit.

    The add succeeds unconditionally; the caller inspects the prior value and,
    if it shows an exclusive holder, must compensate with faa_release_shared
    before invalidating that holder.
    """
    return reader_bit(node)


def faa_release_shared(node: int) -> int:
    """FAA delta clearing this node's reader bit (wrapping negation)."""
    return negate(reader_bit(node))


def faa_release_exclusive(node: int) -> int:
    """FAA delta dropping this node from the exclusive field.

    Release deliberately uses an add, not a CAS: concurrent reader-bit adds
    cannot make it spin, and it composes with them bit-exactly.
    """
    _check_node(node)
    return negate(node << EXCLUSIVE_SHIFT)


def cas_upgrade(node: int) -> tuple[int, int]:
    """CAS operands promoting a sole shared holder to exclusive.

    expect = only our reader bit set, swap = us as exclusive holder.  Fails
    whenever any other reader bit is set, or an exclusive holder exists.
    """
    _check_node(node)
    return reader_bit(node), node << EXCLUSIVE_SHIFT


def handover_exclusive_delta(to_node: int, from_node: int) -> int:
    """FAA delta moving the exclusive field from one holder to another.

    Applied to a word holding (from_node, {}) it yields (to_node, {}) without
    ever passing through the free state, so nobody can sneak in between.
    Computed as ((to - from) << 58) mod 2^64.
    """
    _check_node(to_node)
    _check_node(from_node)
    return wrap_add(to_node << EXCLUSIVE_SHIFT, negate(from_node << EXCLUSIVE_SHIFT))


def downgrade_shared_delta(reader_node: int, owner_node: int) -> int:
    """FAA delta demoting an exclusive holder to shared while admitting a reader.

    Applied to (owner, {}) it yields (None, {reader, owner}) in one add:
    -(owner << 58) + bit(reader) + bit(owner).  Requires the reader's bit to
    be clear at application time (the reader compensates a failed shared
    acquire before requesting this transition).
    """
    _check_node(reader_node)
    _check_node(owner_node)
    delta = negate(owner_node << EXCLUSIVE_SHIFT)
    delta = wrap_add(delta, reader_bit(reader_node))
    delta = wrap_add(delta, reader_bit(owner_node))
    return delta
