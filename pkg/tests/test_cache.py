import random
import threading
import time

import pytest
from hypothesis import given, strategies as st

from selcc.cache import CacheFrame, CacheFull, LocalRwLatch, Ownership, ShardedCache
from selcc.gcl import GclLayout, GlobalAddress

LAYOUT = GclLayout(gcl_size=2048, header_size=16)


def frame(off=0):
    return CacheFrame(GlobalAddress(1, off), LAYOUT)


def test_dirty_range_widens():
    f = frame()
    f.memo = Ownership.MODIFIED
    assert f.dirty_range() is None
    f.mark_dirty(100, 200)
    assert f.dirty_range() == (100, 200)
    f.mark_dirty(50, 120)
    assert f.dirty_range() == (50, 200)
    f.clear_dirty()
    assert f.dirty_range() is None


@given(st.lists(st.tuples(st.integers(8, 2048), st.integers(8, 2048)), min_size=1, max_size=20))
def test_dirty_range_is_min_max_envelope(ranges):
    f = frame()
    f.memo = Ownership.MODIFIED
    norm = [(min(a, b), max(a, b)) for a, b in ranges]
    for lo, hi in norm:
        f.mark_dirty(lo, hi)
    assert f.dirty_range() == (min(lo for lo, _ in norm), max(hi for _, hi in norm))


def test_dirty_errors():
    f = frame()
    with pytest.raises(RuntimeError):
        f.mark_dirty(100, 200)        # not Modified
    f.memo = Ownership.MODIFIED
    with pytest.raises(ValueError):
        f.mark_dirty(0, 16)           # would overwrite the latch word
    with pytest.raises(ValueError):
        f.mark_dirty(100, 4096)


def test_latch_modes():
    latch = LocalRwLatch()
    assert latch.acquire_shared() is False
    assert latch.try_exclusive() is False
    latch.release_shared()
    assert latch.try_exclusive() is True
    assert latch.try_exclusive() is False
    latch.release_exclusive()
    latch.acquire_exclusive()
    latch.downgrade_to_shared()
    assert latch.acquire_shared() is False   # another reader walks in
    latch.release_shared()
    latch.release_shared()


def test_latch_reports_waiting():
    latch = LocalRwLatch()
    latch.acquire_exclusive()
    waited = []

    def blocked():
        waited.append(latch.acquire_shared())
        latch.release_shared()

    t = threading.Thread(target=blocked)
    t.start()
    time.sleep(0.05)
    latch.release_exclusive()
    t.join()
    assert waited == [True]


def test_writer_queue_blocks_new_readers():
    latch = LocalRwLatch()
    latch.acquire_shared()
    order = []

    def writer():
        latch.acquire_exclusive()
        order.append("w")
        latch.release_exclusive()

    def reader():
        latch.acquire_shared()
        order.append("r")
        latch.release_shared()

    tw = threading.Thread(target=writer)
    tw.start()
    time.sleep(0.05)
    tr = threading.Thread(target=reader)
    tr.start()
    time.sleep(0.05)
    latch.release_shared()
    tw.join()
    tr.join()
    assert order == ["w", "r"]


def test_cache_capacity_and_lru_order():
    cache = ShardedCache(capacity=3, layout=LAYOUT, shards=1)
    frames = [cache.get_or_insert(GlobalAddress(1, i * 2048)) for i in range(3)]
    with pytest.raises(CacheFull):
        cache.get_or_insert(GlobalAddress(1, 99 * 2048))
    # touch the oldest so it moves to the MRU end
    assert cache.lookup(frames[0].addr) is frames[0]
    victims = cache.pick_victims(2)
    assert [v.addr for v in victims] == [frames[1].addr, frames[2].addr]
    for v in victims:
        assert v.dead
        v.latch.release_exclusive()
    assert cache.free_frames() == 2


def test_pick_victims_skips_latched_frames():
    cache = ShardedCache(capacity=3, layout=LAYOUT, shards=1)
    a = cache.get_or_insert(GlobalAddress(1, 0))
    b = cache.get_or_insert(GlobalAddress(1, 2048))
    a.latch.acquire_shared()
    victims = cache.pick_victims(2)
    assert victims == [b]
    b.latch.release_exclusive()
    a.latch.release_shared()
    assert cache.lookup(a.addr) is a


def test_single_frame_per_address_under_races():
    cache = ShardedCache(capacity=64, layout=LAYOUT, shards=4)
    addr = GlobalAddress(1, 4096)
    got = []
    barrier = threading.Barrier(8)

    def hammer():
        barrier.wait()
        got.append(cache.get_or_insert(addr))

    ts = [threading.Thread(target=hammer) for _ in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert len({id(f) for f in got}) == 1
    assert len(cache) == 1


def test_record_request_keeps_highest_priority():
    f = frame()
    f.record_request(3, 2, True)
    f.record_request(3, 1, True)
    f.record_request(4, 5, False)
    assert f.pending_requests == {3: (2, True), 4: (5, False)}
    assert f.counters_active
    f.reset_fairness()
    assert not f.counters_active and not f.pending_requests
