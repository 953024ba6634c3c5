"""Concurrent B-link tree over globally latched cache lines.

One tree node per line.  The header carries the node's level and key count
plus two link fields that make concurrent splits safe without latch
coupling: a right-sibling pointer and the high key that bounds this node
since its last split.  Any traversal that lands on a node whose range moved
right simply follows the sibling pointer; readers latch one node at a time
and writers latch at most a node and its freshly allocated sibling.

Splits go bottom-up: split the full node while holding its exclusive latch,
publish the sibling, release both, then insert the separator one level up
(found by a fresh descent, so no ancestor stack can go stale).  The root is
named by a small metadata line; growing the tree re-checks the root under
that line's exclusive latch.

Keys and values are unsigned 64-bit integers.
"""

from __future__ import annotations

import struct
from bisect import bisect_left, bisect_right

from selcc.api import ComputeNode, Handle
from selcc.gcl import GlobalAddress

_HEAD_FMT = "<HH4xQQ"          # level, key_count, right sibling, high key
_HEAD_SIZE = struct.calcsize(_HEAD_FMT)


class BTreeError(Exception):
    pass


class BTree:
    """Handle to a shared tree; any compute node may operate on it."""

    def __init__(self, meta: GlobalAddress, max_keys: int):
        if max_keys < 2:
            raise BTreeError("max_keys must be at least 2")
        self.meta = meta
        self.max_keys = max_keys
        self._slots_off = 8 * max_keys     # children / values array after the keys

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def create(cls, node: ComputeNode, max_keys: int | None = None) -> "BTree":
        layout = node.engine.layout
        if layout.header_size < _HEAD_SIZE:
            raise BTreeError(f"tree nodes need a {_HEAD_SIZE}-byte line header")
        capacity = layout.data_size // 8
        fit = (capacity - 1) // 2          # keys plus one extra slot pointer
        if max_keys is None:
            max_keys = fit
        elif max_keys > fit:
            raise BTreeError(f"max_keys {max_keys} does not fit a line ({fit})")
        tree = cls(node.allocate(), max_keys)
        root = node.allocate()
        with node.xlock(root) as h:
            tree._write_head(h, level=0, count=0, right=0, high=0)
        with node.xlock(tree.meta) as mh:
            mh.write_u64(0, root.pack())
            mh.write_u64(8, 0)             # tree height == root level
        return tree

    @classmethod
    def attach(cls, meta: GlobalAddress, max_keys: int) -> "BTree":
        return cls(meta, max_keys)

    # ------------------------------------------------------------------
    # node accessors (offsets relative to the data area)

    @staticmethod
    def _read_head(h: Handle) -> tuple[int, int, int, int]:
        return struct.unpack(_HEAD_FMT, h.read_header(0, _HEAD_SIZE))

    @staticmethod
    def _write_head(h: Handle, level: int, count: int, right: int, high: int):
        h.write_header(0, struct.pack(_HEAD_FMT, level, count, right, high))

    @staticmethod
    def _set_count(h: Handle, count: int):
        h.write_header(2, struct.pack("<H", count))

    def _keys(self, h: Handle, count: int) -> list[int]:
        return list(struct.unpack(f"<{count}Q", h.read(0, 8 * count)))

    def _slots(self, h: Handle, n: int) -> list[int]:
        return list(struct.unpack(f"<{n}Q", h.read(self._slots_off, 8 * n)))

    def _write_keys(self, h: Handle, at: int, keys: list[int]):
        if keys:
            h.write(8 * at, struct.pack(f"<{len(keys)}Q", *keys))

    def _write_slots(self, h: Handle, at: int, slots: list[int]):
        if slots:
            h.write(self._slots_off + 8 * at, struct.pack(f"<{len(slots)}Q", *slots))

    def _root(self, node: ComputeNode) -> tuple[GlobalAddress, int]:
        with node.slock(self.meta) as mh:
            return GlobalAddress.unpack(mh.read_u64(0)), mh.read_u64(8)

    # ------------------------------------------------------------------
    # lookups

    def search(self, node: ComputeNode, key: int) -> int | None:
        addr, _ = self._root(node)
        while True:
            h = node.slock(addr)
            level, count, right, high = self._read_head(h)
            if right and key >= high:
                h.unlock()
                addr = GlobalAddress.unpack(right)
                continue
            keys = self._keys(h, count)
            if level == 0:
                idx = bisect_left(keys, key)
                value = None
                if idx < count and keys[idx] == key:
                    value = struct.unpack("<Q", h.read(self._slots_off + 8 * idx, 8))[0]
                h.unlock()
                return value
            child = self._slots(h, count + 1)[bisect_right(keys, key)]
            h.unlock()
            addr = GlobalAddress.unpack(child)

    def scan(self, node: ComputeNode, lo: int, hi: int) -> list[tuple[int, int]]:
        """All (key, value) pairs with lo <= key < hi, in key order."""
        out: list[tuple[int, int]] = []
        addr = self._leaf_for(node, lo)
        while addr is not None:
            h = node.slock(addr)
            level, count, right, high = self._read_head(h)
            if right and lo >= high:            # raced with a split: keep walking
                h.unlock()
                addr = GlobalAddress.unpack(right)
                continue
            keys = self._keys(h, count)
            values = self._slots(h, count)
            for k, v in zip(keys, values):
                if lo <= k < hi:
                    out.append((k, v))
            done = not right or high >= hi
            h.unlock()
            addr = None if done else GlobalAddress.unpack(right)
        return out

    def _leaf_for(self, node: ComputeNode, key: int) -> GlobalAddress:
        addr, _ = self._root(node)
        while True:
            h = node.slock(addr)
            level, count, right, high = self._read_head(h)
            if right and key >= high:
                h.unlock()
                addr = GlobalAddress.unpack(right)
                continue
            if level == 0:
                h.unlock()
                return addr
            child = self._slots(h, count + 1)[bisect_right(self._keys(h, count), key)]
            h.unlock()
            addr = GlobalAddress.unpack(child)

    # ------------------------------------------------------------------
    # insertion

    def insert(self, node: ComputeNode, key: int, value: int):
        addr = self._leaf_for(node, key)
        h = self._xlock_covering(node, addr, key)
        level, count, right, high = self._read_head(h)
        keys = self._keys(h, count)
        idx = bisect_left(keys, key)
        if idx < count and keys[idx] == key:    # upsert in place
            h.write(self._slots_off + 8 * idx, struct.pack("<Q", value))
            h.unlock()
            return
        if count < self.max_keys:
            self._write_keys(h, idx, [key] + keys[idx:])
            values = self._slots(h, count)
            self._write_slots(h, idx, [value] + values[idx:])
            self._set_count(h, count + 1)
            h.unlock()
            return
        sep, new_addr = self._split(node, h, key, value, leaf=True)
        self._insert_sep(node, level + 1, sep, new_addr, addr)

    def _xlock_covering(self, node: ComputeNode, addr: GlobalAddress, key: int) -> Handle:
        h = node.xlock(addr)
        while True:
            _, _, right, high = self._read_head(h)
            if not right or key < high:
                return h
            h.unlock()
            addr = GlobalAddress.unpack(right)
            h = node.xlock(addr)

    def _split(self, node: ComputeNode, h: Handle, key: int, value: int,
               leaf: bool) -> tuple[int, GlobalAddress]:
        """Split the full, exclusively latched node behind h.

        The pending (key, value/child) lands in the proper half before either
        latch is released.  Returns the separator and the new right sibling.
        """
        level, count, right, high = self._read_head(h)
        keys = self._keys(h, count)
        slots = self._slots(h, count + (0 if leaf else 1))
        mid = count // 2
        new_addr = node.allocate()
        nh = node.xlock(new_addr)
        if leaf:
            sep = keys[mid]
            r_keys, r_slots = keys[mid:], slots[mid:]
            l_keys, l_slots = keys[:mid], slots[:mid]
        else:
            sep = keys[mid]                     # promoted, kept by neither half
            r_keys, r_slots = keys[mid + 1:], slots[mid + 1:]
            l_keys, l_slots = keys[:mid], slots[:mid + 1]
        self._write_keys(nh, 0, r_keys)
        self._write_slots(nh, 0, r_slots)
        self._write_head(nh, level, len(r_keys), right, high)
        self._write_head(h, level, len(l_keys), new_addr.pack(), sep)

        target, t_keys, t_count = (h, l_keys, len(l_keys)) if key < sep \
            else (nh, r_keys, len(r_keys))
        idx = bisect_left(t_keys, key)
        if leaf:
            self._write_keys(target, idx, [key] + t_keys[idx:])
            t_values = self._slots(target, t_count)
            self._write_slots(target, idx, [value] + t_values[idx:])
        else:
            self._write_keys(target, idx, [key] + t_keys[idx:])
            t_children = self._slots(target, t_count + 1)
            self._write_slots(target, idx + 1, [value] + t_children[idx + 1:])
        self._set_count(target, t_count + 1)
        nh.unlock()
        h.unlock()
        return sep, new_addr

    def _insert_sep(self, node: ComputeNode, level: int, sep: int,
                    right_addr: GlobalAddress, left_addr: GlobalAddress):
        """Insert a separator at `level`, growing the root when needed."""
        while True:
            root, height = self._root(node)
            if height < level:
                if self._grow_root(node, level, sep, right_addr, left_addr):
                    return
                continue                        # somebody else grew it; retry
            addr = root
            while True:                         # descend to the target level
                h = node.slock(addr)
                lvl, count, right, high = self._read_head(h)
                if right and sep >= high:
                    h.unlock()
                    addr = GlobalAddress.unpack(right)
                    continue
                if lvl == level:
                    h.unlock()
                    break
                child = self._slots(h, count + 1)[bisect_right(self._keys(h, count), sep)]
                h.unlock()
                addr = GlobalAddress.unpack(child)
            h = self._xlock_covering(node, addr, sep)
            _, count, right, high = self._read_head(h)
            keys = self._keys(h, count)
            idx = bisect_left(keys, sep)
            if count < self.max_keys:
                self._write_keys(h, idx, [sep] + keys[idx:])
                children = self._slots(h, count + 1)
                self._write_slots(h, idx + 1, [right_addr.pack()] + children[idx + 1:])
                self._set_count(h, count + 1)
                h.unlock()
                return
            sep2, new2 = self._split(node, h, sep, right_addr.pack(), leaf=False)
            left_addr = addr
            sep, right_addr, level = sep2, new2, level + 1

    def _grow_root(self, node: ComputeNode, new_level: int, sep: int,
                   right_addr: GlobalAddress, left_addr: GlobalAddress) -> bool:
        with node.xlock(self.meta) as mh:
            root = GlobalAddress.unpack(mh.read_u64(0))
            height = mh.read_u64(8)
            if height >= new_level:
                return False                    # raced: a parent level exists now
            if root != left_addr:
                # a sibling of the old root split first; wait for the root
                # splitter to publish the new top level, then insert there
                return False
            new_root = node.allocate()
            with node.xlock(new_root) as rh:
                self._write_head(rh, new_level, 1, 0, 0)
                self._write_keys(rh, 0, [sep])
                self._write_slots(rh, 0, [left_addr.pack(), right_addr.pack()])
            mh.write_u64(0, new_root.pack())
            mh.write_u64(8, new_level)
            return True
