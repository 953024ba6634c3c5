"""Cache-coherent shared memory over an emulated one-sided RDMA fabric.

The package simulates a small cluster in one process: passive memory nodes
hold the data, compute nodes cache 2 KB global cache lines locally, and a
shared-exclusive latch embedded in each line keeps the copies coherent with
one-sided reads, writes, CAS and FAA only.
"""

from selcc.gcl import GlobalAddress
from selcc.api import Cluster, ClusterConfig, ComputeNode, Handle

__all__ = [
    "Cluster",
    "ClusterConfig",
    "ComputeNode",
    "GlobalAddress",
    "Handle",
]

__version__ = "0.1.0"
