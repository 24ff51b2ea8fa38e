"""Control plane: membership, failover and index rebuilds.

The control plane is one logical actor living on the control node.  Every
membership change bumps the group's epoch and is pushed to the members with
``role_change``.  Clients fetch the resulting view through ``cluster_view``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

from histore.errors import GroupUnavailable, RpcError, TransportError
from histore.index_group import GroupConfig, GroupView, Role, index_kind

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 0.1
HEARTBEAT_MISSES = 3
CONTROL_TIMEOUT = 1.0


@dataclass
class RecoveryRecord:
    group: int
    role: str
    keys: int
    started: float
    finished: float
    new_node: int
    restarts: int = 0

    @property
    def duration(self) -> float:
        return self.finished - self.started


@dataclass
class GroupState:
    config: GroupConfig
    view: GroupView
    failed: set = field(default_factory=set)


class ControlPlane:
    def __init__(self, cluster, node_id: int = 0):
        self.cluster = cluster
        self.net = cluster.net
        self.rt = cluster.rt
        self.node_id = node_id
        self.port = self.net.port(node_id)
        self.groups: dict[int, GroupState] = {}
        self.records: list[RecoveryRecord] = []
        self.events: list[tuple[float, str]] = []
        self._monitor_on = False
        self.net.serve(node_id, "cluster_view", self.handle_cluster_view)

    # -- views -----------------------------------------------------------------

    def make_view(self, cfg: GroupConfig, epoch: int, writer, writer_role: Role, backups,
                  degraded: bool = False, pause_truncation: bool = False) -> GroupView:
        mode = self.cluster.mode
        members = ([writer] if writer is not None else []) + list(backups)
        if mode == "all-skiplist":
            scan_nodes = list(members)
            get_nodes = list(members)
        elif mode == "all-hash":
            scan_nodes = []
            get_nodes = list(backups) if degraded else list(members)
        else:
            scan_nodes = list(backups)
            get_nodes = list(members) if degraded else list(backups)
        layout = None
        if writer is not None and writer_role == Role.PRIMARY and not degraded:
            node = self.cluster.index_nodes[writer]
            if node.layout is not None:
                layout = node.layout.to_dict()
        wm = {n: self.cluster.index_nodes[n].wm_region.region_id for n in members}
        return GroupView(group_id=cfg.group_id, epoch=epoch, mode=mode, writer=writer,
                         writer_role=writer_role.value, backups=list(backups), members=members,
                         scan_nodes=scan_nodes, get_nodes=get_nodes, wm_regions=wm,
                         hash_layout=layout, degraded=degraded, available=writer is not None,
                         pause_truncation=pause_truncation, hash_slice=list(cfg.hash_slice))

    def install(self, cfg: GroupConfig) -> GroupView:
        view = self.make_view(cfg, 1, cfg.primary, Role.PRIMARY, cfg.backups)
        self.groups[cfg.group_id] = GroupState(cfg, view)
        return view

    def cluster_view(self) -> dict:
        c = self.cluster
        return {"slices": c.topology.slices, "partitions": c.params.partitions,
                "groups": [s.view.to_dict() for _, s in sorted(self.groups.items())],
                "data_servers": [d.info.to_dict() for d in c.data_servers]}

    def handle_cluster_view(self, payload: bytes, ctx):
        return json.dumps(self.cluster_view()).encode()
        yield  # pragma: no cover

    def _note(self, msg: str) -> None:
        self.events.append((self.rt.now(), msg))
        log.info("control: %s", msg)

    # -- pushing changes -------------------------------------------------------------

    def _role_change(self, node: int, role: Role, view: GroupView, cfg: GroupConfig):
        msg = {"epoch": view.epoch, "role": role.value, "view": view.to_dict(), "group": cfg.to_dict()}
        body = yield from self.port.call(node, "role_change", json.dumps(msg).encode(),
                                         timeout=CONTROL_TIMEOUT, tag="control")
        return json.loads(body)

    def _push(self, state: GroupState, roles: list[tuple[int, Role]]):
        """Send role changes in order; unreachable nodes are marked failed."""
        for node, role in roles:
            try:
                yield from self._role_change(node, role, state.view, state.config)
            except (TransportError, RpcError) as exc:
                log.warning("role change to node %d failed: %r", node, exc)
                state.failed.add(node)

    # -- failure handling ----------------------------------------------------------

    def fail_over_primary(self, gid: int):
        """Promote backup[0] to temporary primary; backup[1] keeps serving scans."""
        st = self.groups[gid]
        cfg = st.config
        v = st.view
        if v.writer_role != Role.PRIMARY.value:
            raise GroupUnavailable(f"group {gid} is already degraded")
        dead = v.writer
        st.failed.add(dead)
        live = [b for b in v.backups if b not in st.failed]
        if not live:
            st.view = replace(v, epoch=v.epoch + 1, writer=None, available=False)
            raise GroupUnavailable(f"group {gid}: no live backup to promote")
        temp, rest = live[0], live[1:]
        st.view = self.make_view(cfg, v.epoch + 1, temp, Role.TEMP_PRIMARY, rest, degraded=True,
                                 pause_truncation=True)
        self._note(f"group {gid}: primary {dead} failed, node {temp} is temporary primary")
        yield from self._push(st, [(n, Role.BACKUP) for n in rest] + [(temp, Role.TEMP_PRIMARY)])
        if temp in st.failed:
            raise GroupUnavailable(f"group {gid}: promotion of node {temp} failed")
        return st.view

    def remove_backup(self, gid: int, dead: int):
        st = self.groups[gid]
        cfg = st.config
        v = st.view
        st.failed.add(dead)
        backups = [b for b in v.backups if b != dead and b not in st.failed]
        if not backups:
            st.view = replace(v, epoch=v.epoch + 1, writer=None, available=False)
            raise GroupUnavailable(f"group {gid}: both backups down")
        role = Role(v.writer_role)
        st.view = self.make_view(cfg, v.epoch + 1, v.writer, role, backups, degraded=v.degraded,
                                 pause_truncation=True)
        self._note(f"group {gid}: backup {dead} removed")
        yield from self._push(st, [(b, Role.BACKUP) for b in backups] + [(v.writer, role)])
        return st.view

    def handle_failure(self, node: int):
        for gid, st in self.groups.items():
            v = st.view
            if node == v.writer:
                if v.writer_role == Role.PRIMARY.value:
                    yield from self.fail_over_primary(gid)
                else:
                    st.failed.add(node)
                    st.view = replace(v, epoch=v.epoch + 1, writer=None, available=False)
                    self._note(f"group {gid}: temporary primary {node} failed, group unavailable")
                return gid
            if node in v.backups:
                yield from self.remove_backup(gid, node)
                return gid
        return None

    # -- heartbeats --------------------------------------------------------------------

    def monitor(self, interval: float = HEARTBEAT_INTERVAL, misses: int = HEARTBEAT_MISSES,
                until: float | None = None):
        """Heartbeat every member; declare a node dead after ``misses`` silent rounds."""
        self._monitor_on = True
        missed: dict[int, int] = {}
        while self._monitor_on and (until is None or self.rt.now() < until):
            for gid, st in list(self.groups.items()):
                for node in list(st.view.members):
                    try:
                        yield from self.port.call(node, "heartbeat", b"", timeout=interval,
                                                  tag="heartbeat")
                        missed[node] = 0
                    except (TransportError, RpcError):
                        missed[node] = missed.get(node, 0) + 1
                        if missed[node] >= misses:
                            missed.pop(node)
                            self._note(f"node {node} missed {misses} heartbeats")
                            try:
                                yield from self.handle_failure(node)
                            except GroupUnavailable as exc:
                                log.warning("%s", exc)
            yield from self.rt.sleep(interval)

    def stop_monitor(self) -> None:
        self._monitor_on = False

    # -- rebuilds ------------------------------------------------------------------------

    def _stream(self, new: int, msg: dict):
        body = yield from self.port.call(new, "rebuild_start", json.dumps(msg).encode(),
                                         timeout=CONTROL_TIMEOUT, tag="control")
        status = json.loads(body)
        while not status["done"]:
            body = yield from self.port.call(new, "rebuild_chunk", b"{}", timeout=CONTROL_TIMEOUT,
                                             tag="control")
            status = json.loads(body)
        # replay the tail until the lag is below one batch
        batch = self.cluster.params.batch_size
        for _ in range(100):
            body = yield from self.port.call(new, "rebuild_done", b'{"final": false}',
                                             timeout=CONTROL_TIMEOUT, tag="control")
            if json.loads(body)["lag"] <= batch:
                break
        return status["records"]

    def rebuild_primary(self, gid: int, new: int | None = None, max_restarts: int = 3):
        """Build a hash table on a fresh node from the temporary primary's skiplist."""
        st = self.groups[gid]
        v = st.view
        if v.writer_role != Role.TEMP_PRIMARY.value:
            raise GroupUnavailable(f"group {gid} has no temporary primary to rebuild from")
        temp = v.writer
        new = self.cluster.add_index_node(gid) if new is None else new
        node = self.cluster.index_nodes[new]
        started = self.rt.now()
        restarts = 0
        while True:
            try:
                msg = {"epoch": v.epoch, "view": v.to_dict(), "group": st.config.to_dict(),
                       "source": temp, "source_kind": self.cluster.index_nodes[temp].kind,
                       "target_role": Role.PRIMARY.value}
                keys = yield from self._stream(new, msg)
                pause = {"epoch": v.epoch, "on": True, "timeout": 0.05}
                yield from self.port.call(temp, "write_pause", json.dumps(pause).encode(),
                                          timeout=CONTROL_TIMEOUT, tag="control")
                yield from self.port.call(new, "rebuild_done", b'{"final": true}',
                                          timeout=CONTROL_TIMEOUT, tag="control")
                break
            except (TransportError, RpcError) as exc:
                restarts += 1
                self._note(f"group {gid}: primary rebuild interrupted ({exc!r})")
                if restarts > max_restarts or self.net.is_crashed(temp):
                    raise GroupUnavailable(f"group {gid}: primary rebuild failed") from exc
                if self.net.is_crashed(new):
                    new = self.cluster.add_index_node(gid)
                    node = self.cluster.index_nodes[new]
                try:
                    yield from self.port.call(temp, "write_pause",
                                              json.dumps({"epoch": v.epoch, "on": False}).encode(),
                                              timeout=CONTROL_TIMEOUT, tag="control")
                except (TransportError, RpcError):
                    pass
        others = [b for b in v.backups if b not in st.failed]
        cfg = GroupConfig(gid, st.config.hash_slice, new, tuple([temp] + others)[:2],
                          st.config.data_servers, st.config.capacity)
        st.config = cfg
        backups = [temp] + others
        # the view must name the new node's layout, so build it after the node is populated
        st.view = self.make_view(cfg, v.epoch + 1, new, Role.PRIMARY, backups)
        yield from self._push(st, [(temp, Role.BACKUP)] + [(b, Role.BACKUP) for b in others]
                              + [(new, Role.PRIMARY)])
        rec = RecoveryRecord(gid, "primary", keys, started, self.rt.now(), new, restarts)
        self.records.append(rec)
        self._note(f"group {gid}: node {new} rebuilt as primary in {rec.duration:.6f}s")
        assert node.role == Role.PRIMARY
        return rec

    def rebuild_backup(self, gid: int, new: int | None = None, max_restarts: int = 3):
        """Build a sorted index on a fresh node from the writer's index and log."""
        st = self.groups[gid]
        v = st.view
        if v.writer is None:
            raise GroupUnavailable(f"group {gid} has no writer")
        source = v.writer
        new = self.cluster.add_index_node(gid) if new is None else new
        started = self.rt.now()
        restarts = 0
        while True:
            try:
                msg = {"epoch": v.epoch, "view": v.to_dict(), "group": st.config.to_dict(),
                       "source": source, "source_kind": self.cluster.index_nodes[source].kind,
                       "target_role": Role.BACKUP.value}
                keys = yield from self._stream(new, msg)
                break
            except (TransportError, RpcError) as exc:
                restarts += 1
                self._note(f"group {gid}: backup rebuild interrupted ({exc!r})")
                if restarts > max_restarts or self.net.is_crashed(source):
                    raise GroupUnavailable(f"group {gid}: backup rebuild failed") from exc
                if self.net.is_crashed(new):
                    new = self.cluster.add_index_node(gid)
        v = st.view
        backups = [b for b in v.backups if b not in st.failed] + [new]
        role = Role(v.writer_role)
        if role == Role.PRIMARY:
            cfg = GroupConfig(gid, st.config.hash_slice, v.writer, tuple(backups[:2]),
                              st.config.data_servers, st.config.capacity)
            st.config = cfg
        st.view = self.make_view(st.config, v.epoch + 1, v.writer, role, backups,
                                 degraded=v.degraded, pause_truncation=v.degraded)
        yield from self._push(st, [(new, Role.BACKUP)] + [(b, Role.BACKUP) for b in backups[:-1]]
                              + [(v.writer, role)])
        rec = RecoveryRecord(gid, "backup", keys, started, self.rt.now(), new, restarts)
        self.records.append(rec)
        self._note(f"group {gid}: node {new} rebuilt as backup in {rec.duration:.6f}s")
        return rec

    def kind_for(self, role: Role) -> str:
        return index_kind(self.cluster.mode, role)
