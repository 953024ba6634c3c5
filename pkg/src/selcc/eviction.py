"""Background eviction: keep a slice of the local cache free.

The worker wakes when the count of free frames drops under a threshold
(default 5% of capacity, at least one), picks the coldest unreferenced
frames, and returns them to memory:

  * Modified and dirty: flush the dirty byte range and release the exclusive
    latch field, batched together;
  * Modified and clean: release the exclusive field;
  * Shared: clear this node's reader bit;
  * Invalid: nothing on the wire, the frame is just recycled.

Victims are grouped by their memory node and each group goes out as a single
batched work request, so reclaiming k frames on one node costs one round
trip.  Flush payloads are staged in a small ring of per-node buffers, and the
worker never waits for completions: it posts, moves on, and only harvests
the completion queue when it needs a free buffer or queue-pair room.  The
queue pair's outstanding cap is the hard backstop — the fabric refuses
batches that would exceed it.
"""

from __future__ import annotations

import threading
from collections import deque

from selcc import latchword as lw
from selcc.cache import Ownership
from selcc.fabric import Faa, Write


class EvictionWorker:
    def __init__(self, engine):
        self.engine = engine
        self.config = engine.config
        self.cache = engine.cache
        self.fabric = engine.fabric
        self.threshold = max(1, int(self.config.free_threshold_frac * self.cache.capacity))
        # one flush-buffer ring and one dedicated queue pair per memory node
        self._rings: dict[int, deque] = {}
        self._buffers: dict[int, list[bytearray]] = {}
        self._lock = threading.Lock()

    def _qp(self, mem_id: int):
        return self.fabric.qp((self.engine.node_id, "evict"), mem_id)

    def _ring(self, mem_id: int) -> deque:
        with self._lock:
            ring = self._rings.get(mem_id)
            if ring is None:
                bufs = [bytearray(self.config.layout.gcl_size)
                        for _ in range(self.config.l_out)]
                self._buffers[mem_id] = bufs
                ring = deque(range(self.config.l_out))
                self._rings[mem_id] = ring
            return ring

    def _take_buffer(self, mem_id: int) -> int:
        """Claim a flush buffer, harvesting completions until one is free."""
        ring = self._ring(mem_id)
        qp = self._qp(mem_id)
        while True:
            if ring:
                return ring.popleft()
            made_room = False
            for tag in self.fabric.poll_completions(qp):
                ring.extend(tag)
                made_room = True
            if not made_room:
                raise RuntimeError("flush ring empty with no completions pending")

    def _make_room(self, mem_id: int, need: int):
        qp = self._qp(mem_id)
        while qp.outstanding + need > self.config.l_out:
            harvested = False
            for tag in self.fabric.poll_completions(qp):
                self._ring(mem_id).extend(tag)
                harvested = True
            if not harvested:
                raise RuntimeError("queue pair full with no completions pending")

    def cycle(self) -> int:
        """Run one eviction pass; returns the number of frames reclaimed."""
        free = self.cache.free_frames()
        if free >= self.threshold:
            return 0
        victims = self.cache.pick_victims(self.threshold - free)
        if not victims:
            return 0

        groups: dict[int, list] = {}
        for frame in victims:
            groups.setdefault(frame.addr.node_id, []).append(frame)

        wave = max(1, self.config.l_out // 2)   # two work requests per dirty frame
        for mem_id, frames in groups.items():
            for start in range(0, len(frames), wave):
                self._post_group(mem_id, frames[start:start + wave])
        for frame in victims:
            frame.latch.release_exclusive()
        self.engine.metrics.add("evicted_frames", len(victims))
        return len(victims)

    def _post_group(self, mem_id: int, frames) -> None:
        requests = []
        used_buffers = []
        node = self.engine.node_id
        for frame in frames:
            off = frame.addr.offset
            if frame.memo is Ownership.MODIFIED:
                dirty = frame.dirty_range()
                if dirty:
                    lo, hi = (dirty if self.config.dirty_boundaries
                              else (8, self.config.layout.gcl_size))
                    buf_idx = self._take_buffer(mem_id)
                    buf = self._buffers[mem_id][buf_idx]
                    buf[0:hi - lo] = frame.copy[lo:hi]
                    requests.append(Write(off + lo, bytes(buf[0:hi - lo])))
                    used_buffers.append(buf_idx)
                    self.engine.metrics.add("flush_bytes", hi - lo)
                requests.append(Faa(off, lw.faa_release_exclusive(node)))
            elif frame.memo is Ownership.SHARED:
                requests.append(Faa(off, lw.faa_release_shared(node)))
            frame.memo = Ownership.INVALID
            frame.clear_dirty()
        if not requests:
            return
        self._make_room(mem_id, len(requests))
        self.fabric.post_batch(self._qp(mem_id), requests, label="evict",
                               tag=used_buffers)
