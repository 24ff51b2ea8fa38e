"""Topology files.

A single TOML file drives both backends::

    [net]                 # NetConfig fields, durations as *_us
    one_sided_rtt_us = 2
    [cost]                # optional CostModel overrides (*_us)
    [nodes]
    control = [0]
    index = [1, 2, 3]
    data = [4]
    [groups]
    slices = 1
    [[groups.group]]
    id = 0
    slice = [0]
    primary = 1
    backups = [2, 3]
    capacity = 1000000
    [log]
    partitions = 4
    batch_size = 64
    batch_delay_us = 50
    capacity = 1048576
    [bench]               # free-form defaults for the bench harness

Missing ``[nodes]``/``[groups]`` give the default five-node layout: one
control node, three index nodes forming one group and one data server.
``SEED`` and ``BACKEND`` environment variables override the seed and the
backend, nothing else.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from histore.errors import ConfigError
from histore.index_group import MODES, GroupConfig, NodeParams
from histore.transport.base import US, CostModel, NetConfig

BACKENDS = ("sim", "socket")
NODE_ROLES = ("control", "index", "data")
DEFAULT_CAPACITY = 1_000_000


@dataclass
class NodeSpec:
    node_id: int
    role: str


@dataclass
class Topology:
    nodes: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    slices: int = 1
    net: NetConfig = field(default_factory=NetConfig)
    costs: CostModel = field(default_factory=CostModel)
    params: NodeParams = field(default_factory=NodeParams)
    bench: dict = field(default_factory=dict)
    mode: str = "hybrid"
    seed: int = 0
    backend: str = "sim"

    def ids(self, role: str) -> list:
        return [n.node_id for n in self.nodes if n.role == role]

    @property
    def control_node(self) -> int:
        return self.ids("control")[0]

    @property
    def data_nodes(self) -> list:
        return self.ids("data")

    def group_for_slice(self) -> dict:
        out = {}
        for g in self.groups:
            for s in g.hash_slice:
                out[s] = g.group_id
        return out

    def validate(self) -> "Topology":
        seen = {}
        for i, n in enumerate(self.nodes):
            if n.role not in NODE_ROLES:
                raise ConfigError(f"nodes[{i}].role: unknown role {n.role!r}")
            if n.node_id in seen:
                raise ConfigError(f"nodes.{n.role}: node {n.node_id} listed twice")
            if n.node_id < 0 or n.node_id >= 1000:
                raise ConfigError(f"nodes.{n.role}: node id {n.node_id} outside 0..999")
            seen[n.node_id] = n.role
        if len(self.ids("control")) != 1:
            raise ConfigError("nodes.control: exactly one control node required")
        if 0 in seen and seen[0] != "control":
            raise ConfigError("nodes: node 0 is reserved for the control plane")
        if not self.data_nodes:
            raise ConfigError("nodes.data: at least one data server required")
        if len(self.data_nodes) > 255:
            raise ConfigError("nodes.data: at most 255 data servers")
        if not self.groups:
            raise ConfigError("groups.group: at least one group required")
        if self.slices < 1 or self.slices > 0x10000:
            raise ConfigError("groups.slices: must be in 1..65536")
        owner = {}
        used = set()
        for i, g in enumerate(self.groups):
            where = f"groups.group[{i}]"
            g.validate(where)
            for nid in g.members:
                if seen.get(nid) != "index":
                    raise ConfigError(f"{where}: node {nid} is not an index node")
                if nid in used:
                    raise ConfigError(f"{where}: node {nid} already belongs to another group")
                used.add(nid)
            for ds in g.data_servers:
                if seen.get(ds) != "data":
                    raise ConfigError(f"{where}.data_servers: node {ds} is not a data node")
            for s in g.hash_slice:
                if not 0 <= s < self.slices:
                    raise ConfigError(f"{where}.slice: {s} outside 0..{self.slices - 1}")
                if s in owner:
                    raise ConfigError(f"{where}.slice: slice {s} overlaps group {owner[s]}")
                owner[s] = g.group_id
        if len(owner) != self.slices:
            missing = sorted(set(range(self.slices)) - set(owner))
            raise ConfigError(f"groups: slices {missing} not owned by any group")
        if len({g.group_id for g in self.groups}) != len(self.groups):
            raise ConfigError("groups.group: duplicate group id")
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown mode {self.mode!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend: unknown backend {self.backend!r}")
        return self


def default_topology(groups: int = 1, capacity: int = DEFAULT_CAPACITY, **kw) -> Topology:
    """Control node 0, ``3 * groups`` index nodes, one data server."""
    nodes = [NodeSpec(0, "control")]
    gcfgs = []
    data = 3 * groups + 1
    for g in range(groups):
        a = 1 + 3 * g
        nodes += [NodeSpec(a, "index"), NodeSpec(a + 1, "index"), NodeSpec(a + 2, "index")]
        gcfgs.append(GroupConfig(g, (g,), a, (a + 1, a + 2), (data,), capacity))
    nodes.append(NodeSpec(data, "data"))
    return Topology(nodes=nodes, groups=gcfgs, slices=groups, **kw).validate()


_LOG_KEYS = {
    "partitions": ("partitions", int, 1),
    "batch_size": ("batch_size", int, 1),
    "batch_delay_us": ("batch_delay", float, US),
    "capacity": ("log_capacity", int, 1),
    "write_wait_us": ("write_wait", float, US),
    "retry_delay_us": ("retry_delay", float, US),
    "dedup_window": ("dedup_window", int, 1),
}


def _params_from(section: dict, costs: CostModel) -> NodeParams:
    kw = {}
    for key, value in section.items():
        if key not in _LOG_KEYS:
            raise ConfigError(f"log.{key}: unknown field")
        name, typ, scale = _LOG_KEYS[key]
        kw[name] = typ(value) * scale if scale != 1 else typ(value)
    p = NodeParams(costs=costs, **kw)
    if p.partitions < 1 or p.partitions > 256:
        raise ConfigError("log.partitions: must be in 1..256")
    if p.batch_size < 1:
        raise ConfigError("log.batch_size: must be >= 1")
    if p.log_capacity < p.batch_size:
        raise ConfigError("log.capacity: must hold at least one batch")
    if p.batch_delay < 0:
        raise ConfigError("log.batch_delay_us: must be >= 0")
    return p


def _int_list(value, where: str) -> list:
    if isinstance(value, int):
        return [value]
    if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
        raise ConfigError(f"{where}: expected a list of integers")
    return list(value)


def topology_from_dict(doc: dict, env: dict | None = None) -> Topology:
    env = os.environ if env is None else env
    known = {"net", "cost", "nodes", "groups", "log", "bench", "cluster"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown section")
    net = NetConfig.from_section(doc.get("net", {}))
    costs = CostModel.from_section(doc.get("cost", {}))
    params = _params_from(doc.get("log", {}), costs)
    cluster = doc.get("cluster", {})
    mode = cluster.get("mode", "hybrid")
    seed = int(cluster.get("seed", 0))
    backend = cluster.get("backend", "sim")
    if "SEED" in env:
        try:
            seed = int(env["SEED"])
        except ValueError:
            raise ConfigError("SEED: not an integer") from None
    if env.get("BACKEND"):
        backend = env["BACKEND"]

    if "nodes" not in doc and "groups" not in doc:
        topo = default_topology(net=net, costs=costs, params=params, mode=mode, seed=seed,
                                backend=backend, bench=dict(doc.get("bench", {})))
        return topo
    nodes_sec = doc.get("nodes", {})
    nodes = []
    for role in NODE_ROLES:
        for nid in _int_list(nodes_sec.get(role, []), f"nodes.{role}"):
            nodes.append(NodeSpec(nid, role))
    for key in nodes_sec:
        if key not in NODE_ROLES:
            raise ConfigError(f"nodes.{key}: unknown node role")
    data_nodes = [n.node_id for n in nodes if n.role == "data"]
    gsec = doc.get("groups", {})
    glist = gsec.get("group", [])
    if not isinstance(glist, list):
        raise ConfigError("groups.group: expected an array of tables")
    groups = []
    for i, g in enumerate(glist):
        where = f"groups.group[{i}]"
        for req in ("primary", "backups"):
            if req not in g:
                raise ConfigError(f"{where}.{req}: missing")
        extra = set(g) - {"id", "slice", "primary", "backups", "data_servers", "capacity"}
        if extra:
            raise ConfigError(f"{where}.{sorted(extra)[0]}: unknown field")
        groups.append(GroupConfig(
            group_id=int(g.get("id", i)),
            hash_slice=tuple(_int_list(g.get("slice", [i]), f"{where}.slice")),
            primary=int(g["primary"]),
            backups=tuple(_int_list(g["backups"], f"{where}.backups")),
            data_servers=tuple(_int_list(g.get("data_servers", data_nodes), f"{where}.data_servers")),
            capacity=int(g.get("capacity", DEFAULT_CAPACITY)),
        ))
    slices = int(gsec.get("slices", len(groups) or 1))
    return Topology(nodes=nodes, groups=groups, slices=slices, net=net, costs=costs,
                    params=params, bench=dict(doc.get("bench", {})), mode=mode, seed=seed,
                    backend=backend).validate()


def load_topology(path, env: dict | None = None) -> Topology:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return topology_from_dict(doc, env)
