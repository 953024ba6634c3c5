"""Compute-node local cache of global cache lines.

Frames live in a sharded hash table with per-shard LRU order.  Each frame
carries a full local copy of its line, an ownership memo (Invalid / Shared /
Modified), a local reader-writer latch, dirty-range bounds, and the fairness
bookkeeping that the contention machinery updates.

The local latch is the only blocking primitive in the system: message
handlers and the eviction worker only ever try-acquire it, so they can never
deadlock against a worker thread that is holding a frame while it waits on
the fabric.
"""

from __future__ import annotations

import enum
import threading

from selcc.gcl import GlobalAddress, GclLayout


class Ownership(enum.Enum):
    INVALID = "invalid"
    SHARED = "shared"
    MODIFIED = "modified"


class LocalRwLatch:
    """Frame-granular reader-writer latch.

    Writers are served in ticket order among themselves and block new
    readers while queued.  acquire_* report whether the caller had to wait,
    which feeds the lease counters.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._readers = 0
        self._writer = False
        self._next_ticket = 0
        self._serving = 0
        self._barged = 0

    def acquire_shared(self) -> bool:
        waited = False
        with self._cond:
            while self._writer or self._next_ticket != self._serving:
                waited = True
                self._cond.wait()
            self._readers += 1
        return waited

    def release_shared(self):
        with self._cond:
            self._readers -= 1
            if self._readers < 0:
                raise RuntimeError("release_shared without holder")
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_exclusive(self) -> bool:
        waited = False
        with self._cond:
            ticket = self._next_ticket
            self._next_ticket += 1
            while self._writer or self._readers or ticket != self._serving:
                waited = True
                self._cond.wait()
            self._writer = True
        return waited

    def try_exclusive(self) -> bool:
        with self._cond:
            if self._writer or self._readers or self._next_ticket != self._serving:
                return False
            self._next_ticket += 1
            self._writer = True
            return True

    def try_exclusive_barge(self) -> bool:
        """Claim the latch ahead of queued tickets when nobody actively
        holds it.  For invalidation handling: once the line is taken away
        the queued locals miss and refetch anyway, so making the remote
        request wait behind them is pure convoy.  Must be released with
        release_exclusive (never downgrade) so the ticket count stays true.
        """
        with self._cond:
            if self._writer or self._readers:
                return False
            self._writer = True
            self._barged += 1
            return True

    def try_shared(self) -> bool:
        with self._cond:
            if self._writer or self._next_ticket != self._serving:
                return False
            self._readers += 1
            return True

    def release_exclusive(self):
        with self._cond:
            if not self._writer:
                raise RuntimeError("release_exclusive without holder")
            self._writer = False
            if self._barged:
                self._barged -= 1     # no ticket was consumed on the way in
            else:
                self._serving += 1
            self._cond.notify_all()

    def downgrade_to_shared(self):
        """Exclusive holder becomes a reader with no release window."""
        with self._cond:
            if not self._writer:
                raise RuntimeError("downgrade without exclusive holder")
            self._writer = False
            self._serving += 1
            self._readers += 1
            self._cond.notify_all()

    def held(self) -> bool:
        with self._lock:
            return self._writer or self._readers > 0


class CacheFrame:
    def __init__(self, addr: GlobalAddress, layout: GclLayout):
        self.addr = addr
        self.layout = layout
        self.copy = bytearray(layout.gcl_size)
        self.memo = Ownership.INVALID
        self.latch = LocalRwLatch()
        self.dead = False            # set once the frame left the cache
        self.d_lower: int | None = None
        self.d_higher: int | None = None
        # fairness state, guarded by meta (handlers touch it without the latch)
        self.meta = threading.Lock()
        self.counters_active = False
        self.r_waits = 0
        self.w_waits = 0
        self.pending_requests: dict[int, tuple[int, bool]] = {}
        self.spin_flag = False
        self.starved_writer_priority = 0

    # ---- dirty range ----------------------------------------------------

    def mark_dirty(self, start: int, end: int):
        """Record that copy[start:end) diverged from the memory node.

        Only the latch word itself is off limits; header bytes must be
        trackable because index structures mutate them.
        """
        if self.memo is not Ownership.MODIFIED:
            raise RuntimeError("dirtying a frame not held as Modified")
        if not (GclLayout.LATCH_SIZE <= start <= end <= self.layout.gcl_size):
            raise ValueError(f"dirty range [{start}, {end}) out of bounds")
        if self.d_lower is None:
            self.d_lower, self.d_higher = start, end
        else:
            self.d_lower = min(self.d_lower, start)
            self.d_higher = max(self.d_higher, end)

    def dirty_range(self) -> tuple[int, int] | None:
        if self.d_lower is None:
            return None
        return self.d_lower, self.d_higher

    def clear_dirty(self):
        self.d_lower = self.d_higher = None

    # ---- fairness helpers ------------------------------------------------

    def record_request(self, sender: int, priority: int, wants_write: bool):
        with self.meta:
            self.counters_active = True
            prev = self.pending_requests.get(sender)
            if prev is None or prev[0] < priority:
                self.pending_requests[sender] = (priority, wants_write)

    def reset_fairness(self):
        with self.meta:
            self.counters_active = False
            self.r_waits = 0
            self.w_waits = 0
            self.pending_requests.clear()


class CacheFull(Exception):
    pass


class ShardedCache:
    """Hash-sharded frame table with per-shard LRU and a global frame budget."""

    def __init__(self, capacity: int, layout: GclLayout, shards: int = 64):
        if capacity < 1:
            raise ValueError("cache needs at least one frame")
        self.capacity = capacity
        self.layout = layout
        self.shard_count = shards
        self._shards = [dict() for _ in range(shards)]
        self._locks = [threading.Lock() for _ in range(shards)]
        self._count = 0
        self._count_lock = threading.Lock()
        self._victim_shard = 0

    def _shard_of(self, addr: GlobalAddress) -> int:
        return hash(addr) % self.shard_count

    def __len__(self) -> int:
        with self._count_lock:
            return self._count

    def free_frames(self) -> int:
        with self._count_lock:
            return self.capacity - self._count

    def lookup(self, addr: GlobalAddress) -> CacheFrame | None:
        idx = self._shard_of(addr)
        shard = self._shards[idx]
        with self._locks[idx]:
            frame = shard.get(addr)
            if frame is not None:
                # dict preserves insertion order; re-append = move to MRU end
                del shard[addr]
                shard[addr] = frame
            return frame

    def get_or_insert(self, addr: GlobalAddress) -> CacheFrame:
        """Return the existing frame or install a fresh Invalid one.

        Raises CacheFull when no frame budget is left; the caller is expected
        to run an eviction pass and retry.
        """
        idx = self._shard_of(addr)
        shard = self._shards[idx]
        with self._locks[idx]:
            frame = shard.get(addr)
            if frame is not None:
                del shard[addr]
                shard[addr] = frame
                return frame
        with self._count_lock:
            if self._count >= self.capacity:
                raise CacheFull()
            self._count += 1
        new = CacheFrame(addr, self.layout)
        with self._locks[idx]:
            frame = shard.get(addr)
            if frame is not None:
                # lost the install race; give the budget back
                del shard[addr]
                shard[addr] = frame
                with self._count_lock:
                    self._count -= 1
                return frame
            shard[addr] = new
        return new

    def remove(self, frame: CacheFrame):
        """Unlink a frame (caller holds its exclusive latch)."""
        idx = self._shard_of(frame.addr)
        shard = self._shards[idx]
        with self._locks[idx]:
            if shard.get(frame.addr) is frame:
                del shard[frame.addr]
                removed = True
            else:
                removed = False
        if removed:
            frame.dead = True
            with self._count_lock:
                self._count -= 1

    def pick_victims(self, want: int) -> list[CacheFrame]:
        """Collect up to `want` cold frames, exclusive latch held on each.

        Walks shards round-robin from the LRU end; frames whose latch cannot
        be try-acquired are skipped, never waited on.  Victims are unlinked
        from the table before being returned.
        """
        victims: list[CacheFrame] = []
        for step in range(self.shard_count):
            if len(victims) >= want:
                break
            idx = (self._victim_shard + step) % self.shard_count
            shard = self._shards[idx]
            with self._locks[idx]:
                candidates = list(shard.values())
            for frame in candidates:
                if len(victims) >= want:
                    break
                if not frame.latch.try_exclusive():
                    continue
                with self._locks[idx]:
                    if shard.get(frame.addr) is frame:
                        del shard[frame.addr]
                    else:
                        frame.latch.release_exclusive()
                        continue
                frame.dead = True
                with self._count_lock:
                    self._count -= 1
                victims.append(frame)
        self._victim_shard = (self._victim_shard + 1) % self.shard_count
        return victims
