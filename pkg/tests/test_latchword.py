import random

import pytest
from hypothesis import given, strategies as st

from selcc import latchword as lw


def oracle_word(exclusive, readers):
    # Independent construction: assemble the word as a bit string, top-down.
    head = format(exclusive or 0, "06b")
    tail = "".join("1" if n in readers else "0" for n in range(58, 0, -1))
    return int(head + tail, 2)


def test_encode_matches_bitstring_oracle():
    rng = random.Random(7)
    for _ in range(500):
        if rng.random() < 0.5:
            excl, readers = rng.randint(1, 58), frozenset()
        else:
            excl = None
            readers = frozenset(rng.sample(range(1, 59), rng.randint(0, 10)))
        assert lw.encode(excl, readers) == oracle_word(excl, readers)


def test_known_words():
    assert lw.encode(None, {1, 2}) == 3
    assert lw.encode(7, ()) == 7 << 58 == 2017612633061982208
    assert lw.encode(None, ()) == 0
    assert lw.decode(0) == (None, frozenset())
    assert lw.decode(3) == (None, frozenset({1, 2}))
    assert lw.decode(7 << 58) == (7, frozenset())


def test_encode_rejects_mixed_state():
    with pytest.raises(ValueError):
        lw.encode(3, {1})
    with pytest.raises(ValueError):
        lw.encode(59, ())
    with pytest.raises(ValueError):
        lw.encode(None, {0})
    with pytest.raises(ValueError):
        lw.encode(None, {59})


def test_acquire_and_release_operands():
    expect, swap = lw.cas_acquire_exclusive(5)
    assert expect == 0 and swap == lw.encode(5, ())

    assert lw.faa_acquire_shared(3) == 4
    # releasing reader 3 from {1, 3} leaves {1}
    word = lw.encode(None, {1, 3})
    assert lw.wrap_add(word, lw.faa_release_shared(3)) == lw.encode(None, {1})
    assert lw.faa_release_shared(3) == 0xFFFFFFFFFFFFFFFC

    word = lw.encode(9, ())
    assert lw.wrap_add(word, lw.faa_release_exclusive(9)) == 0

    expect, swap = lw.cas_upgrade(4)
    assert expect == lw.encode(None, {4}) and swap == lw.encode(4, ())


def test_handover_exclusive_known_delta():
    # moving exclusive ownership 9 -> 3 is an add of ((3 - 9) << 58) mod 2^64
    assert lw.handover_exclusive_delta(3, 9) == 0xE800000000000000


def test_downgrade_shared_known_delta():
    # owner 5 demotes itself and admits reader 2: -(5 << 58) + bit(2) + bit(5)
    assert lw.downgrade_shared_delta(2, 5) == 0xEC00000000000012


def test_handover_exhaustive_all_pairs():
    for frm in range(1, 59):
        start = lw.encode(frm, ())
        for to in range(1, 59):
            if to == frm:
                continue
            moved = lw.wrap_add(start, lw.handover_exclusive_delta(to, frm))
            assert moved == oracle_word(to, frozenset())


def test_downgrade_exhaustive_all_pairs():
    for owner in range(1, 59):
        start = lw.encode(owner, ())
        for reader in range(1, 59):
            if reader == owner:
                continue
            shared = lw.wrap_add(start, lw.downgrade_shared_delta(reader, owner))
            assert shared == oracle_word(None, frozenset({reader, owner}))


def test_deltas_do_not_disturb_other_readers():
    # FAA composes: a downgrade applied while unrelated reader bits are set
    # (transient overlap from a concurrent failed shared acquire) keeps them.
    word = lw.wrap_add(lw.encode(7, ()), lw.faa_acquire_shared(12))
    word = lw.wrap_add(word, lw.downgrade_shared_delta(3, 7))
    assert lw.decode(word) == (None, frozenset({3, 7, 12}))


@given(st.integers(min_value=1, max_value=58))
def test_release_undoes_acquire(node):
    assert lw.wrap_add(lw.faa_acquire_shared(node), lw.faa_release_shared(node)) == 0
    assert lw.wrap_add(node << 58, lw.faa_release_exclusive(node)) == 0


@given(
    st.one_of(
        st.tuples(st.integers(1, 58), st.just(frozenset())),
        st.tuples(st.none(), st.frozensets(st.integers(1, 58), max_size=58)),
    )
)
def test_encode_decode_roundtrip(state):
    excl, readers = state
    assert lw.decode(lw.encode(excl, readers)) == (excl, frozenset(readers))


def test_decode_rejects_out_of_range():
    with pytest.raises(ValueError):
        lw.decode(1 << 64)
    with pytest.raises(ValueError):
        lw.decode(-1)
