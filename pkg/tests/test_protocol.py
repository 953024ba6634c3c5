"""Scripted coherence scenarios with exact fabric budgets.

Deterministic mode runs everything on one thread: whenever an engine waits
for a reply it pumps every node's message ring inline, so conflict flows
execute step by step and the fabric counters can be compared exactly.
"""

import threading

import pytest

from selcc import latchword as lw
from selcc.api import ApiError, Cluster, ClusterConfig
from selcc.cache import Ownership


def make_cluster(**kw):
    defaults = dict(compute_nodes=3, memory_nodes=1, gcl_capacity=64,
                    cache_frames=32, deterministic=True)
    defaults.update(kw)
    return Cluster(ClusterConfig(**defaults)).start()


def label_delta(cluster, fn):
    before = cluster.fabric.metrics.snapshot()
    fn()
    after = cluster.fabric.metrics.snapshot()
    delta = {}
    for label, count in after["by_label"].items():
        diff = count - before["by_label"].get(label, 0)
        if diff:
            delta[label] = diff
    return delta, after["round_trips"] - before["round_trips"]


def latch_word(cluster, addr):
    region = cluster.fabric.region(addr.node_id)
    return int.from_bytes(region.data[addr.offset:addr.offset + 8], "little")


def test_uncontended_write_is_one_round_trip():
    with make_cluster() as c:
        n1 = c.node(1)
        addr = n1.allocate()
        labels, rts = label_delta(c, lambda: setattr_h(n1.xlock(addr)))
        assert labels == {"acquire": 1}
        assert rts == 1
        assert lw.decode(latch_word(c, addr)) == (1, frozenset())


def setattr_h(handle):
    # keep the handle alive long enough to unlock it cleanly
    handle.unlock()


def test_unlock_is_local_and_reacquire_hits():
    with make_cluster() as c:
        n1 = c.node(1)
        addr = n1.allocate()
        h = n1.xlock(addr)
        labels, rts = label_delta(c, h.unlock)
        assert rts == 0                       # lazy release: nothing on the wire
        labels, rts = label_delta(c, lambda: n1.xlock(addr).unlock())
        assert rts == 0                       # ownership memo makes this a local hit
        m = n1.metrics()
        assert m["hits"] == 1 and m["misses"] == 1
        # latch word still shows us as the exclusive holder
        assert lw.decode(latch_word(c, addr)) == (1, frozenset())


def test_read_then_read_hits_locally():
    with make_cluster() as c:
        n1 = c.node(1)
        addr = n1.allocate()
        n1.slock(addr).unlock()
        labels, rts = label_delta(c, lambda: n1.slock(addr).unlock())
        assert rts == 0
        assert lw.decode(latch_word(c, addr)) == (None, frozenset({1}))


def test_writer_takes_modified_line_in_three_extra_round_trips():
    """Ownership moves writer-to-writer without touching memory."""
    with make_cluster() as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        h = n1.xlock(addr)
        h.write(0, b"payload-x")
        h.unlock()

        got = {}
        labels, rts = label_delta(c, lambda: got.setdefault("h", n2.xlock(addr)))
        assert labels == {"acquire": 1, "send_inv": 1, "reply": 1, "handover": 1}
        assert rts == 4
        h2 = got["h"]
        assert h2.read(0, 9) == b"payload-x"
        # dirty responsibility travels with the line: n2 now owes the flush
        lo, hi = h2.frame.dirty_range()
        assert hi - lo == 9
        # memory was never written
        region = c.fabric.region(addr.node_id)
        data_start = addr.offset + c.layout.data_offset
        assert region.data[data_start:data_start + 9] == bytes(9)
        assert lw.decode(latch_word(c, addr)) == (2, frozenset())
        h2.unlock()
        # the previous owner is left with nothing
        f1 = n1.engine.cache.lookup(addr)
        assert f1.memo is Ownership.INVALID


def test_reader_downgrades_modified_line_with_flush():
    with make_cluster() as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        h = n1.xlock(addr)
        h.write(0, b"flushed-bytes")
        h.unlock()

        got = {}
        labels, rts = label_delta(c, lambda: got.setdefault("h", n2.slock(addr)))
        assert labels == {"acquire": 1, "compensate": 1, "send_inv": 1,
                          "handover_flush": 1, "reply": 1}
        assert rts == 5
        h2 = got["h"]
        assert h2.read(0, 13) == b"flushed-bytes"
        # this time memory has the bytes: the old owner flushed before forwarding
        region = c.fabric.region(addr.node_id)
        data_start = addr.offset + c.layout.data_offset
        assert region.data[data_start:data_start + 13] == b"flushed-bytes"
        assert lw.decode(latch_word(c, addr)) == (None, frozenset({1, 2}))
        h2.unlock()
        assert n1.engine.cache.lookup(addr).memo is Ownership.SHARED


def test_writer_clears_single_reader_in_four_extra_round_trips():
    with make_cluster() as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        n1.slock(addr).unlock()

        got = {}
        labels, rts = label_delta(c, lambda: got.setdefault("h", n2.xlock(addr)))
        assert labels == {"acquire": 2, "send_inv": 1, "release_shared": 1, "reply": 1}
        assert rts == 5
        assert lw.decode(latch_word(c, addr)) == (2, frozenset())
        got["h"].unlock()
        assert n1.engine.cache.lookup(addr).memo is Ownership.INVALID


def test_writer_clears_many_readers_then_wins():
    with make_cluster() as c:
        addr = c.node(1).allocate()
        c.node(1).slock(addr).unlock()
        c.node(2).slock(addr).unlock()
        h = c.node(3).xlock(addr)
        assert lw.decode(latch_word(c, addr)) == (3, frozenset())
        h.unlock()
        assert c.node(1).engine.cache.lookup(addr).memo is Ownership.INVALID
        assert c.node(2).engine.cache.lookup(addr).memo is Ownership.INVALID


def test_upgrade_alone_is_one_round_trip_and_no_data_transfer():
    with make_cluster() as c:
        n1 = c.node(1)
        addr = n1.allocate()
        n1.slock(addr).unlock()
        labels, rts = label_delta(c, lambda: n1.xlock(addr).unlock())
        assert labels == {"upgrade": 1}
        assert rts == 1
        assert lw.decode(latch_word(c, addr)) == (1, frozenset())


def test_upgrade_invalidates_sibling_readers():
    with make_cluster() as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        n1.slock(addr).unlock()
        n2.slock(addr).unlock()
        labels, rts = label_delta(c, lambda: n1.xlock(addr).unlock())
        assert labels == {"upgrade": 2, "send_inv": 1, "release_shared": 1, "reply": 1}
        assert rts == 5
        assert lw.decode(latch_word(c, addr)) == (1, frozenset())
        assert n2.engine.cache.lookup(addr).memo is Ownership.INVALID


def test_third_node_reads_flushed_data_from_memory():
    """After a reader downgrade, later readers go straight to memory."""
    with make_cluster() as c:
        addr = c.node(1).allocate()
        h = c.node(1).xlock(addr)
        h.write(10, b"zzz")
        h.unlock()
        h2 = c.node(2).slock(addr)
        assert h2.read(10, 3) == b"zzz"
        h2.unlock()
        labels, rts = label_delta(c, lambda: None)
        h3 = c.node(3).slock(addr)
        assert h3.read(10, 3) == b"zzz"
        h3.unlock()
        assert lw.decode(latch_word(c, addr)) == (None, frozenset({1, 2, 3}))


def test_dirty_bounds_follow_two_ownership_hops():
    """A range dirtied by the first writer is flushed by the second owner."""
    with make_cluster() as c:
        addr = c.node(1).allocate()
        h = c.node(1).xlock(addr)
        h.write(100, b"ab")
        h.unlock()
        h = c.node(2).xlock(addr)       # ownership moves, memory still stale
        h.unlock()
        h = c.node(3).slock(addr)       # forces node 2 to flush node 1's bytes
        assert h.read(100, 2) == b"ab"
        h.unlock()
        region = c.fabric.region(addr.node_id)
        start = addr.offset + c.layout.data_offset + 100
        assert region.data[start:start + 2] == b"ab"


def test_try_xlock_gives_up_against_held_latch_then_succeeds():
    with make_cluster() as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        h1 = n1.xlock(addr)
        assert n2.try_xlock(addr) is None       # holder is busy; request dropped
        h1.unlock()
        h2 = n2.try_xlock(addr)
        assert h2 is not None                   # lazy-held line moves over now
        h2.unlock()


def test_try_slock_against_exclusive_holder():
    with make_cluster() as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        h1 = n1.xlock(addr)
        assert n2.try_slock(addr) is None
        h1.unlock()
        h = n2.try_slock(addr)
        assert h is not None
        h.unlock()
        assert lw.decode(latch_word(c, addr)) == (None, frozenset({1, 2}))


def test_many_lines_evict_and_stay_correct():
    """A cache far smaller than the working set still serves correct bytes."""
    with make_cluster(cache_frames=4, gcl_capacity=64) as c:
        n1 = c.node(1)
        addrs = [n1.allocate() for _ in range(12)]
        for i, addr in enumerate(addrs):
            h = n1.xlock(addr)
            h.write_u64(0, i * 1000 + 7)
            h.unlock()
        for i, addr in enumerate(addrs):
            h = n1.slock(addr)
            assert h.read_u64(0) == i * 1000 + 7
            h.unlock()
        assert len(n1.engine.cache) <= 4
        assert n1.metrics()["evicted_frames"] > 0


def test_eviction_groups_one_batch_per_memory_node():
    with make_cluster(memory_nodes=2, cache_frames=5, gcl_capacity=64,
                      free_threshold_frac=1.0) as c:
        n1 = c.node(1)
        # five resident lines: three on memory node 1, two on node 2
        lines = []
        while len([a for a in lines if a.node_id == 1]) < 3 or \
              len([a for a in lines if a.node_id == 2]) < 2:
            lines.append(n1.allocate())
        picked = [a for a in lines if a.node_id == 1][:3] + \
                 [a for a in lines if a.node_id == 2][:2]
        for i, addr in enumerate(picked):
            h = n1.xlock(addr)
            h.write_u64(0, i + 1)
            h.unlock()
        assert len(n1.engine.cache) == 5

        labels, rts = label_delta(c, lambda: n1.engine.evict_cycle())
        assert labels == {"evict": 2}           # one batched round trip per memory node
        assert rts == 2
        assert len(n1.engine.cache) == 0
        # every latch word went back to free and every value reached memory
        for i, addr in enumerate(picked):
            assert latch_word(c, addr) == 0
            region = c.fabric.region(addr.node_id)
            start = addr.offset + c.layout.data_offset
            assert int.from_bytes(region.data[start:start + 8], "little") == i + 1
        for qp in c.fabric.queue_pairs():
            assert qp.outstanding_peak <= c.config.l_out


def test_eviction_flushes_only_dirty_bytes():
    with make_cluster(cache_frames=2, gcl_capacity=64, free_threshold_frac=1.0) as c:
        n1 = c.node(1)
        addr = n1.allocate()
        h = n1.xlock(addr)
        h.write(0, b"x" * 64)                  # 64 dirty bytes out of ~2000
        h.unlock()
        before = n1.metrics()["flush_bytes"]
        n1.engine.evict_cycle()
        flushed = n1.metrics()["flush_bytes"] - before
        assert flushed == 64
        assert flushed < c.layout.gcl_size


def test_shared_frames_evict_with_reader_bit_release():
    with make_cluster(cache_frames=2, free_threshold_frac=1.0) as c:
        n1 = c.node(1)
        addr = n1.allocate()
        n1.slock(addr).unlock()
        assert lw.decode(latch_word(c, addr)) == (None, frozenset({1}))
        n1.engine.evict_cycle()
        assert latch_word(c, addr) == 0
        assert n1.engine.cache.lookup(addr) is None


def test_uncached_mode_goes_remote_every_time():
    with make_cluster(caching=False) as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        h = n1.xlock(addr)
        h.write(0, b"shared-nothing")
        labels, rts = label_delta(c, h.unlock)
        assert labels == {"sel_release": 1}     # eager release flushes and frees
        assert latch_word(c, addr) == 0
        h2 = n2.slock(addr)
        assert h2.read(0, 14) == b"shared-nothing"
        h2.unlock()
        assert latch_word(c, addr) == 0
        assert n1.metrics()["hits"] == 0 and n2.metrics()["hits"] == 0


def test_uncached_read_release_budget():
    with make_cluster(caching=False) as c:
        n1 = c.node(1)
        addr = n1.allocate()
        h = n1.slock(addr)
        labels, rts = label_delta(c, h.unlock)
        assert labels == {"sel_release": 1}
        assert rts == 1


def test_fault_unsynced_writer_leaves_stale_readers():
    with make_cluster(fault_skip_reader_invalidation=True) as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        n1.slock(addr).unlock()                 # node 1 caches zeros as Shared
        h = n2.xlock(addr)                      # fault: takes the line by force
        h.write(0, b"updated!")
        h.unlock()
        assert lw.decode(latch_word(c, addr))[0] == 2
        h = n1.slock(addr)                      # stale hit: never invalidated
        assert h.read(0, 8) == bytes(8)
        h.unlock()
        assert n1.metrics()["hits"] == 1


def test_fault_skipped_flush_serves_stale_memory():
    with make_cluster(fault_skip_handover_flush=True) as c:
        n1, n2, n3 = c.node(1), c.node(2), c.node(3)
        addr = n1.allocate()
        h = n1.xlock(addr)
        h.write(0, b"secret")
        h.unlock()
        h2 = n2.slock(addr)                     # forwarded copy is fine...
        assert h2.read(0, 6) == b"secret"
        h2.unlock()
        h3 = n3.slock(addr)                     # ...but memory never got it
        assert h3.read(0, 6) == bytes(6)
        h3.unlock()


def test_lease_hands_hot_line_to_recorded_writer():
    """With a zero tolerance budget, one recorded wait forces a handover."""
    cfg = ClusterConfig(compute_nodes=2, gcl_capacity=64, cache_frames=32,
                        gamma=0.0)
    with Cluster(cfg).start() as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        h = n1.xlock(addr)
        h.write(0, b"hot")

        # a remote writer knocks while we hold the latch: dropped + recorded
        assert n2.try_xlock(addr) is None
        frame = n1.engine.cache.lookup(addr)
        assert 2 in frame.pending_requests

        # a second local thread waits on the latch, arming the wait counters
        waits = []

        def local_writer():
            hh = n1.xlock(addr)
            waits.append(True)
            hh.unlock()                         # this unlock sees the lease as due

        t = threading.Thread(target=local_writer)
        t.start()
        while not frame.latch._next_ticket > 1:
            pass
        h.unlock()
        t.join()

        assert n1.metrics()["lease_handovers"] >= 1
        # ownership was pushed: the latch word already names node 2
        assert lw.decode(latch_word(c, addr))[0] == 2
        # node 2 discovers the grant on its own next attempt, no signal needed
        h2 = n2.xlock(addr)
        assert h2.read(0, 3) == b"hot"          # pushed flush made memory current
        h2.unlock()
        c.stop()


def test_handle_misuse_raises():
    with make_cluster() as c:
        n1 = c.node(1)
        addr = n1.allocate()
        h = n1.slock(addr)
        with pytest.raises(ApiError):
            h.write(0, b"no")
        h.unlock()
        with pytest.raises(ApiError):
            h.read(0, 1)
        with pytest.raises(ApiError):
            h.unlock()
        h2 = n1.xlock(addr)
        with pytest.raises(ApiError):
            n1.sunlock(h2)
        with pytest.raises(ApiError):
            h2.write(c.layout.data_size - 2, b"abcd")   # spills past the line
        h2.unlock()


def test_atomic_counter_word():
    with make_cluster() as c:
        n1, n2 = c.node(1), c.node(2)
        addr = n1.allocate()
        word = addr.word(c.layout.data_offset)
        assert n1.atomic(word, 5) == 0
        assert n2.atomic(word, 3) == 5
        assert n1.atomic(word, 0) == 8
        with pytest.raises(ApiError):
            n1.atomic(addr, 1)                  # latch words are off limits


def test_free_releases_standing_and_reuses_line():
    with make_cluster() as c:
        n1 = c.node(1)
        addr = n1.allocate()
        h = n1.xlock(addr)
        h.write(0, b"gone")
        h.unlock()
        n1.free(addr)
        assert latch_word(c, addr) == 0
        assert n1.engine.cache.lookup(addr) is None
        assert n1.allocate() == addr


def test_free_while_latched_raises():
    with make_cluster() as c:
        n1 = c.node(1)
        addr = n1.allocate()
        h = n1.xlock(addr)
        with pytest.raises(ApiError):
            n1.free(addr)
        h.unlock()


def test_threaded_smoke_readers_and_writers():
    """Three nodes, two threads each, shared counters stay exact."""
    cfg = ClusterConfig(compute_nodes=3, gcl_capacity=64, cache_frames=32)
    with Cluster(cfg).start() as c:
        lines = [c.node(1).allocate() for _ in range(4)]
        for addr in lines:
            h = c.node(1).xlock(addr)
            h.write_u64(0, 0)
            h.unlock()
        per_thread = 50
        errors = []

        def worker(node_id):
            node = c.node(node_id)
            try:
                for i in range(per_thread):
                    addr = lines[i % len(lines)]
                    h = node.xlock(addr)
                    h.write_u64(0, h.read_u64(0) + 1)
                    h.unlock()
            except Exception as exc:            # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(nid,))
                   for nid in (1, 2, 3) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        total = 0
        for addr in lines:
            h = c.node(2).slock(addr)
            total += h.read_u64(0)
            h.unlock()
        assert total == 6 * per_thread
