"""Global cache line layout, addressing, and allocation.

A global cache line (GCL) is a fixed-size block in some memory node's
region: an 8-byte latch word, a small user header, then the data area.
Addresses pack (node_id, offset) into one 64-bit value with 16 bits of node
and 48 bits of offset.

Allocation is a bump pointer per memory node, advanced with a remote FAA on
a reserved word kept in the last 8 bytes of each region, plus a local free
list so freed lines are reused without any fabric traffic.  Placement
round-robins across memory nodes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from selcc.fabric import Faa, Fabric

_OFFSET_BITS = 48
_OFFSET_MASK = (1 << _OFFSET_BITS) - 1


@dataclass(frozen=True, order=True)
class GlobalAddress:
    node_id: int
    offset: int

    def pack(self) -> int:
        if not 0 <= self.node_id < (1 << 16):
            raise ValueError(f"node_id {self.node_id} out of range")
        if not 0 <= self.offset <= _OFFSET_MASK:
            raise ValueError(f"offset {self.offset} out of range")
        return (self.node_id << _OFFSET_BITS) | self.offset

    @classmethod
    def unpack(cls, value: int) -> "GlobalAddress":
        if not 0 <= value < (1 << 64):
            raise ValueError("packed address out of 64-bit range")
        return cls(node_id=value >> _OFFSET_BITS, offset=value & _OFFSET_MASK)

    def word(self, offset: int) -> "GlobalAddress":
        """Address of a word inside this line (offset in bytes from its start)."""
        return GlobalAddress(self.node_id, self.offset + offset)


@dataclass(frozen=True)
class GclLayout:
    gcl_size: int = 2048
    header_size: int = 16

    LATCH_SIZE = 8

    def __post_init__(self):
        if self.gcl_size <= self.LATCH_SIZE + self.header_size:
            raise ValueError("gcl_size leaves no data area")
        if self.gcl_size > 0xFFFF:
            raise ValueError("gcl_size above 65535 overflows dirty-range fields")
        if self.gcl_size % 8 != 0:
            raise ValueError("gcl_size must be 8-byte aligned")

    @property
    def header_offset(self) -> int:
        return self.LATCH_SIZE

    @property
    def data_offset(self) -> int:
        return self.LATCH_SIZE + self.header_size

    @property
    def data_size(self) -> int:
        return self.gcl_size - self.data_offset


class AllocationError(Exception):
    pass


class GclAllocator:
    """One compute node's view of the shared bump-pointer allocator."""

    def __init__(self, fabric: Fabric, compute_id: int, memory_ids, layout: GclLayout,
                 rr_start: int = 0):
        self.fabric = fabric
        self.compute_id = compute_id
        self.memory_ids = sorted(memory_ids)
        self.layout = layout
        self._lock = threading.Lock()
        self._rr = rr_start % len(self.memory_ids)
        self._free: dict[int, list[int]] = {m: [] for m in self.memory_ids}
        self._freed: set[GlobalAddress] = set()

    def _bump_limits(self, mem_id: int) -> tuple[int, int]:
        region = self.fabric.region(mem_id)
        if region.size % 8 != 0:
            raise AllocationError("region size must be 8-byte aligned")
        bump_word = region.size - 8
        capacity = (region.size - 8) // self.layout.gcl_size
        return bump_word, capacity * self.layout.gcl_size

    def allocate(self) -> GlobalAddress:
        size = self.layout.gcl_size
        with self._lock:
            order = [self.memory_ids[(self._rr + i) % len(self.memory_ids)]
                     for i in range(len(self.memory_ids))]
            self._rr = (self._rr + 1) % len(self.memory_ids)
            for mem_id in order:
                if self._free[mem_id]:
                    addr = GlobalAddress(mem_id, self._free[mem_id].pop())
                    self._freed.discard(addr)
                    return addr

        for mem_id in order:
            bump_word, limit = self._bump_limits(mem_id)
            qp = self.fabric.qp(self.compute_id, mem_id)
            prior, = self.fabric.post_batch(qp, [Faa(bump_word, size)], label="alloc")
            self.fabric.poll_completions(qp)
            if prior + size <= limit:
                return GlobalAddress(mem_id, prior)
            # overshoot: give the slot back and try the next memory node
            self.fabric.post_batch(qp, [Faa(bump_word, (-size) & ((1 << 64) - 1))],
                                   label="alloc")
            self.fabric.poll_completions(qp)
        raise AllocationError("pool exhausted")

    def free(self, addr: GlobalAddress):
        if addr.node_id not in self._free:
            raise AllocationError(f"{addr} is not in this pool")
        if addr.offset % self.layout.gcl_size != 0:
            raise AllocationError(f"{addr} is not line-aligned")
        with self._lock:
            if addr in self._freed:
                raise AllocationError(f"double free of {addr}")
            self._freed.add(addr)
            self._free[addr.node_id].append(addr.offset)
