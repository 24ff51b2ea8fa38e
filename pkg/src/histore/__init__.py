"""Replicated key-value store with a hybrid index (hash table + skiplists)."""

from histore.client import Client, ClusterView
from histore.cluster import Cluster, make_cluster
from histore.config import Topology, default_topology, load_topology

__all__ = ["Client", "ClusterView", "Cluster", "make_cluster", "Topology",
           "default_topology", "load_topology"]
__version__ = "0.1.0"
