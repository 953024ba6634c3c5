"""Tree behavior: ordering, splits, growth, cross-node visibility."""

import random
import threading

import pytest

from selcc.api import Cluster, ClusterConfig
from selcc.apps.btree import BTree, BTreeError


def make_cluster(**kw):
    defaults = dict(compute_nodes=3, memory_nodes=1, gcl_capacity=512,
                    cache_frames=256, header_size=24, deterministic=True)
    defaults.update(kw)
    return Cluster(ClusterConfig(**defaults)).start()


def test_insert_and_search_small():
    with make_cluster() as c:
        n1 = c.node(1)
        tree = BTree.create(n1, max_keys=8)
        for k in range(50):
            tree.insert(n1, k, k * 10)
        for k in range(50):
            assert tree.search(n1, k) == k * 10
        assert tree.search(n1, 999) is None


def test_sequential_inserts_force_root_growth():
    with make_cluster() as c:
        n1 = c.node(1)
        tree = BTree.create(n1, max_keys=4)
        for k in range(200):
            tree.insert(n1, k, k)
        with n1.slock(tree.meta) as mh:
            height = mh.read_u64(8)
        assert height >= 2
        for k in range(200):
            assert tree.search(n1, k) == k


def test_random_order_inserts():
    with make_cluster() as c:
        n1 = c.node(1)
        tree = BTree.create(n1, max_keys=6)
        keys = list(range(0, 3000, 3))
        rng = random.Random(7)
        rng.shuffle(keys)
        for k in keys:
            tree.insert(n1, k, k + 1)
        for k in keys:
            assert tree.search(n1, k) == k + 1
        assert tree.search(n1, 1) is None       # between stored keys
        assert tree.search(n1, 2999) is None


def test_upsert_overwrites():
    with make_cluster() as c:
        n1 = c.node(1)
        tree = BTree.create(n1, max_keys=8)
        tree.insert(n1, 42, 1)
        tree.insert(n1, 42, 2)
        assert tree.search(n1, 42) == 2
        assert len(tree.scan(n1, 0, 100)) == 1


def test_scan_returns_sorted_window():
    with make_cluster() as c:
        n1 = c.node(1)
        tree = BTree.create(n1, max_keys=5)
        keys = list(range(1, 500, 2))
        rng = random.Random(3)
        rng.shuffle(keys)
        for k in keys:
            tree.insert(n1, k, k * 2)
        got = tree.scan(n1, 100, 200)
        expect = [(k, k * 2) for k in range(101, 200, 2)]
        assert got == expect
        assert tree.scan(n1, 0, 1000) == [(k, k * 2) for k in sorted(keys)]


def test_other_nodes_see_inserts():
    with make_cluster() as c:
        n1, n2, n3 = c.node(1), c.node(2), c.node(3)
        tree = BTree.create(n1, max_keys=8)
        for k in range(100):
            tree.insert(n1, k, k + 7)
        for k in range(0, 100, 7):
            assert tree.search(n2, k) == k + 7
        tree.insert(n2, 1000, 1)
        assert tree.search(n3, 1000) == 1
        assert tree.search(n1, 1000) == 1


def test_interleaved_writers_from_all_nodes():
    with make_cluster() as c:
        tree = BTree.create(c.node(1), max_keys=4)
        for k in range(300):
            tree.insert(c.node(1 + k % 3), k, k)
        for k in range(300):
            assert tree.search(c.node(1 + (k + 1) % 3), k) == k


def test_create_rejects_thin_header():
    with Cluster(ClusterConfig(compute_nodes=1, gcl_capacity=16,
                               header_size=16, deterministic=True)) as c:
        with pytest.raises(BTreeError):
            BTree.create(c.node(1))


def test_threaded_inserts_with_concurrent_readers():
    cfg = ClusterConfig(compute_nodes=3, gcl_capacity=1024, cache_frames=512,
                        header_size=24)
    with Cluster(cfg).start() as c:
        tree = BTree.create(c.node(1), max_keys=8)
        n_keys = 300
        errors = []
        stop = threading.Event()

        def writer(node_id, base):
            try:
                for k in range(base, base + n_keys):
                    tree.insert(c.node(node_id), k, k ^ 0xABCD)
            except Exception as exc:            # pragma: no cover
                errors.append(exc)

        def reader(node_id):
            rng = random.Random(node_id)
            try:
                while not stop.is_set():
                    k = rng.randrange(3 * n_keys)
                    v = tree.search(c.node(node_id), k)
                    if v is not None and v != k ^ 0xABCD:
                        errors.append(AssertionError(f"key {k} -> {v}"))
            except Exception as exc:            # pragma: no cover
                errors.append(exc)

        writers = [threading.Thread(target=writer, args=(i + 1, i * n_keys))
                   for i in range(3)]
        readers = [threading.Thread(target=reader, args=(i + 1,)) for i in range(3)]
        for t in writers + readers:
            t.start()
        for t in writers:
            t.join()
        stop.set()
        for t in readers:
            t.join()
        assert errors == []
        for k in range(3 * n_keys):
            assert tree.search(c.node(1 + k % 3), k) == k ^ 0xABCD
        scan = tree.scan(c.node(2), 0, 3 * n_keys)
        assert [k for k, _ in scan] == list(range(3 * n_keys))
