"""The tick-driven engine: a simulated shared-nothing cluster running feed pipelines.

Every tick runs the same phases in a fixed order (faults, heartbeats and
failure handling, recovery deployment, source intake, per-node processing,
routing and replay, reports and metrics), so a run is a pure function of
its configuration and seed.  Real mode drives the identical loop from the
wall clock with socket-backed adaptors.
"""
from __future__ import annotations

import logging
import os
import time
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable

from . import adaptors
from .adaptors import (REAL_RETRY, SIM_RETRY, AdaptorDescriptor, RetryPolicy, SimEndpoint,
                       SimTransport, SourceStatus, TweetGenerator)
from .catalog import (Catalog, CatalogError, ConnectRequest, DisconnectRequest, FailEvery,
                      IngestionPolicy, ShowRequest, conforms)
from .dataflow import (FRAME_CAPACITY, ErrorEntry, ErrorLog, FeedJoint, Frame, FrameQueue,
                       OperatorInstance, Record, max_record_bytes, meta_process_frame, pack)
from .ddl import CreateDataset, CreateIndex, parse_statement, split_statements
from .fault import (FaultEvent, FaultScript, HeartbeatMonitor, RecoveryError, SlotNeed, classify,
                    plan_recovery)
from .pipeline import (ClusterView, JointRegistry, PipelinePlan, ScheduleError, StageView,
                       compile_connect, compile_disconnect, render_pipeline, schedule)
from .runtime import (Escalation, FeedManager, FeedMemoryManager, FeedReport, SavedState,
                      SpillLedger, SuperFeedManager, collect_reports, elect_leader)
from .storage import PartitionRoutingError, Storage, hash_partition

log = logging.getLogger(__name__)

ERRORS_DATASET = "feed_errors"


@dataclass
class EngineConfig:
    nodes: list[str]
    seed: int = 0
    mode: str = "sim"  # sim | real
    tick_seconds: float = 0.01
    frame_capacity: int = FRAME_CAPACITY
    fmm_budget: int = 64
    grant_cap: int = 8
    node_cpu: float = 60.0  # work units per tick
    node_disk: float = 40.0
    cost_intake: float = 1.0
    cost_compute: float = 2.0
    cost_store: float = 3.0
    heartbeat_period: int = 10
    heartbeat_timeout: int = 3
    report_period: int = 20
    window_ticks: int = 200
    deploy_delay: int = 10
    handoff: int = 4096
    workdir: str | None = None
    run_name: str = "run"


@dataclass
class Accounting:
    generated: int = 0
    ingested: int = 0
    discarded: int = 0
    skipped: int = 0
    filtered: int = 0
    rejected: int = 0
    spilled_pending: int = 0
    in_flight: int = 0
    lost: int = 0
    dropped: int = 0

    @property
    def accounted(self) -> int:
        return (self.ingested + self.discarded + self.skipped + self.filtered + self.rejected
                + self.spilled_pending + self.in_flight + self.lost + self.dropped)

    @property
    def holds(self) -> bool:
        return self.generated == self.accounted


@dataclass
class RecoveryEvent:
    kill_tick: int
    node: str
    detect_tick: int
    deploy_tick: int | None = None
    first_insert_tick: int | None = None

    @property
    def latency(self) -> int | None:
        if self.first_insert_tick is None:
            return None
        return self.first_insert_tick - self.kill_tick


@dataclass
class KillEvent:
    tick: int
    node: str
    resident_records: int
    resident_frames: int


# -------------------------------------------------------------- structure

class Pipeline:
    """One feed-to-dataset connection and the stages it currently owns."""

    def __init__(self, cid: int, plan: PipelinePlan, start_tick: int):
        self.cid = cid
        self.plan = plan
        self.feed = plan.feed
        self.dataset = plan.dataset
        self.policy: IngestionPolicy = plan.policy
        self.stages: list[Stage] = []
        self.entry: Stage | None = None
        self.store: Stage | None = None
        self.state = "active"  # active | recovering | terminated | disconnected
        self.reason: str | None = None
        self.start_tick = start_tick
        self.end_tick: int | None = None
        self.acct = Accounting()
        self.clean_start = True
        self.needs: dict[Slot, str] = {}
        self.recoveries: list[RecoveryEvent] = []
        self.failures = 0
        self.final_generated = 0
        self.final_held = 0
        self.gen_base = 0  # source output that predates this connection

    @property
    def alive(self) -> bool:
        return self.state in ("active", "recovering")

    def __repr__(self) -> str:
        return f"Pipeline({self.cid}, {self.feed}->{self.dataset}, {self.state})"


class Stage:
    def __init__(self, sid: int, owner: Pipeline, kind: str, index: int):
        self.sid = sid
        self.owner = owner
        self.creator = owner
        self.kind = kind  # adaptor | head | compute | store
        self.index = index
        self.slots: list[Slot] = []
        self.next: Stage | None = None
        self.prev: list[Stage] = []
        self.hash_key: str | None = None  # key used when dispatching to ``next``
        self.udfs: list[Callable] = []
        self.udf_names: list[str] = []
        self.poison: FailEvery | None = None
        self.joint_feeds: tuple[str, ...] | None = None
        self.descriptor: AdaptorDescriptor | None = None
        self.partitions: list = []
        self.check: Callable[[dict], None] | None = None
        self.rr = 0
        self.core: Callable[[dict], dict | None] = lambda d: d

    @property
    def role(self) -> str:
        return "intake" if self.kind in ("adaptor", "head") else self.kind

    @property
    def joints(self) -> list[FeedJoint]:
        return [s.joint for s in self.slots if s.joint is not None]

    @property
    def produces(self) -> tuple[str, ...]:
        return self.joint_feeds or ()

    def __repr__(self) -> str:
        return f"Stage({self.sid}, {self.creator.feed}:{self.kind})"


class Slot:
    def __init__(self, stage: Stage, index: int, node: str):
        self.stage = stage
        self.index = index
        self.node = node
        self.instance: OperatorInstance | None = None
        self.joint: FeedJoint | None = None
        self.source_joint: str | None = None  # heads: id of the joint subscribed to
        self.own: OwnSub | None = None
        self.ended = False

    @property
    def head_key(self) -> tuple:
        return ("head", self.stage.sid, self.index)

    @property
    def state_key(self) -> tuple:
        st = self.stage
        return (st.creator.feed, st.creator.dataset, st.role, st.kind, self.index)

    def __repr__(self) -> str:
        return f"Slot({self.stage!r}[{self.index}]@{self.node})"


class OwnSub:
    """A joint's own-pipeline subscriber forwarding frames to the next stage."""

    def __init__(self, slot: Slot):
        self.slot = slot
        self.pending: deque = deque()

    @property
    def key(self) -> tuple:
        return ("own", self.slot.stage.sid, self.slot.index)

    @property
    def node(self) -> str:
        return self.slot.node


class Node:
    def __init__(self, nid: str, cfg: EngineConfig, spill_root: str | None):
        self.id = nid
        self.alive = True
        self.cfg = cfg
        self.spill_root = spill_root
        self.reset()

    def reset(self) -> None:
        self.fmm = FeedMemoryManager(self.id, self.cfg.fmm_budget, self.cfg.grant_cap,
                                     self.cfg.frame_capacity)
        self.fm = FeedManager(self.id, self.fmm, self.spill_root)
        self.instances: dict[int, OperatorInstance] = {}
        self.cpu_used = 0.0
        self.disk_used = 0.0


def waterfill(demands: list[float], capacity: float) -> list[float]:
    """Max-min fair split of ``capacity`` over ``demands``."""
    n = len(demands)
    alloc = [0.0] * n
    remaining = capacity
    left = n
    for i in sorted(range(n), key=lambda k: demands[k]):
        share = remaining / left
        a = min(demands[i], share)
        alloc[i] = a
        remaining -= a
        left -= 1
    return alloc


class _KeyMissing(KeyError):
    pass


def _key_check(key: str) -> Callable[[dict], dict]:
    def check(d: dict) -> dict:
        if d.get(key) is None:
            raise _KeyMissing(f"missing partitioning key {key!r}")
        return d
    return check


# ------------------------------------------------------------------ engine

class Engine:
    def __init__(self, config: EngineConfig, catalog: Catalog | None = None, transport=None):
        self.cfg = config
        if "master" in config.nodes:
            raise ValueError("'master' is reserved for the coordinator")
        self.catalog = catalog or Catalog()
        self.catalog.default_nodegroup = tuple(config.nodes)
        self.root = config.workdir
        self.nodes = {n: Node(n, config, self.root) for n in config.nodes}
        self.storage = Storage()
        self.registry = JointRegistry()
        self.joints: dict[str, FeedJoint] = {}
        self.joint_slot: dict[str, Slot] = {}
        self.pipelines: list[Pipeline] = []
        self.stages: list[Stage] = []
        self.errors = ErrorLog(self.root, sink=self._persist_error)
        self.monitor = HeartbeatMonitor(config.nodes, config.heartbeat_period,
                                        config.heartbeat_timeout)
        if transport is None:
            transport = SimTransport(config.handoff) if config.mode == "sim" else \
                adaptors.SocketTransport(config.handoff)
        self.transport = transport
        self.retry: RetryPolicy = SIM_RETRY if config.mode == "sim" else REAL_RETRY
        self.tick = 0
        self.sources: dict[str, Any] = {}
        self._src_seen: dict[str, int] = {}
        self.faults = FaultScript()
        self.statements: dict[int, list[str]] = defaultdict(list)
        self.deployments: dict[int, list[tuple[Pipeline, Slot, str]]] = defaultdict(list)
        self.kills: list[KillEvent] = []
        self.warnings: list[str] = []
        self.leader = elect_leader(config.nodes)
        self.sfm = SuperFeedManager(self.leader)
        self.nodes[self.leader].fm.is_leader = True
        self._next_iid = 0
        self._next_sid = 0
        self._topo = 0
        self._down_cache: tuple[int, dict[int, tuple[Pipeline, ...]]] = (-1, {})
        self._win: dict[tuple[int, str], list[float]] = defaultdict(lambda: [0, 0, 0, 0, 0])
        self._src_win: dict[tuple[str, str], int] = defaultdict(int)
        self._rep: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
        self.rows: list[tuple[int, int | str, str, list[float]]] = []
        self._window_members: dict[int, set[str]] = defaultdict(set)
        self._error_seq = 0
        self.max_allocated = 0

    # ------------------------------------------------------------ control
    def execute(self, text: str) -> list[str]:
        """Run DDL statements; returns the output of any ``show`` statements."""
        out = []
        for chunk, line in split_statements(text):
            stmt = parse_statement(chunk, line)
            action = self.catalog.apply(stmt)
            if isinstance(stmt, CreateDataset):
                ds = self.catalog.dataset(stmt.name)
                self.storage.create(ds.name, ds.primary_key, list(ds.nodegroup))
            elif isinstance(stmt, CreateIndex):
                self.storage.set_index(stmt.dataset, stmt.field)
            if isinstance(action, ConnectRequest):
                try:
                    self.connect(action.feed, action.dataset, action.policy)
                except (ScheduleError, CatalogError, adaptors.AdaptorError):
                    del self.catalog.connections[(action.feed, action.dataset)]
                    raise
            elif isinstance(action, DisconnectRequest):
                self.disconnect(action.feed, action.dataset)
            elif isinstance(action, ShowRequest):
                out.append(self.show(action.what))
        return out

    def show(self, what: str) -> str:
        if what == "pipelines":
            return self.show_pipelines()
        if what == "catalog":
            return self.catalog.dump()
        if what == "joints":
            return "\n".join(f"{j.joint_id} feeds={','.join(j.feeds)} node={j.node} "
                             f"subscribers={len(j.queues)}" for j in self.registry.all())
        raise CatalogError(f"unknown show target {what!r}")

    def add_source(self, address: str, generator: TweetGenerator | None = None,
                   lines: Iterable[bytes | str] | None = None, refuse: int = 0) -> SimEndpoint:
        ep = self.transport.register(SimEndpoint(address, generator, lines, refuse))
        self.sources[address] = ep
        return ep

    def count_source(self, address: str, counter) -> None:
        """Track an external source (anything with ``.generated``) for accounting."""
        self.sources[address] = counter

    def load_faults(self, script: FaultScript | str) -> None:
        if isinstance(script, str):
            script = FaultScript.parse(script)
        self.faults = FaultScript(sorted(self.faults.events + script.events, key=lambda e: e.tick))

    def at(self, tick: int, statement: str) -> None:
        self.statements[tick].append(statement)

    # ------------------------------------------------------ topology utils
    def _bump(self) -> None:
        self._topo += 1

    def _path(self, p: Pipeline) -> set[int]:
        seen: set[int] = set()
        stack = [p.store] if p.store is not None else []
        while stack:
            s = stack.pop()
            if s.sid in seen:
                continue
            seen.add(s.sid)
            stack.extend(s.prev)
        return seen

    def downstream(self, stage: Stage) -> tuple[Pipeline, ...]:
        version, cache = self._down_cache
        if version != self._topo:
            cache = defaultdict(tuple)
            tmp: dict[int, list[Pipeline]] = defaultdict(list)
            for p in self.pipelines:
                if p.alive:
                    for sid in self._path(p):
                        tmp[sid].append(p)
            for sid, ps in tmp.items():
                cache[sid] = tuple(ps)
            self._down_cache = (self._topo, cache)
        return cache.get(stage.sid, ())

    def _count(self, stage: Stage, attr: str, n: int) -> None:
        if n:
            for p in self.downstream(stage):
                setattr(p.acct, attr, getattr(p.acct, attr) + n)

    def _win_add(self, stage: Stage, node: str, col: int, n: float) -> None:
        if n:
            for p in self.downstream(stage):
                self._win[(p.cid, node)][col] += n

    def _owner_of(self, key) -> Pipeline | None:
        if key[0] == "head":
            for s in self.stages:
                if s.sid == key[1]:
                    return s.owner
        return None

    def _new_instance(self, slot: Slot, node: str) -> OperatorInstance:
        st = slot.stage
        core = {"adaptor": f"adaptor:{st.descriptor.name if st.descriptor else ''}",
                "head": f"joint:{slot.source_joint}", "compute": "udf:" + ",".join(st.udf_names),
                "store": f"store:{st.creator.dataset}"}[st.kind]
        inst = OperatorInstance(st.role, node, st.creator.feed, core, st.index, slot.index,
                                iid=self._next_iid, input=FrameQueue(self.cfg.frame_capacity))
        self._next_iid += 1
        inst.slot = slot
        slot.instance = inst
        slot.node = node
        n = self.nodes[node]
        n.instances[inst.iid] = inst
        n.fm.register(inst)
        return inst

    def _new_joint(self, slot: Slot) -> FeedJoint:
        st = slot.stage
        jid = f"{st.joint_feeds[-1]}.{slot.index}"
        node = self.nodes[slot.node]

        def release(frame: Frame, node=node, jid=jid) -> None:
            if node.alive and node.fmm.holding(("joint", jid)):
                node.fmm.release(("joint", jid), 1)

        joint = FeedJoint(jid, st.joint_feeds, slot.node, on_release=release)
        slot.joint = joint
        self.joints[jid] = joint
        self.joint_slot[jid] = slot
        self.registry.register(joint)
        if st.next is not None:
            if slot.own is None:
                slot.own = OwnSub(slot)
            joint.subscribe(slot.own.key)
        return joint

    def _open_handle(self, slot: Slot) -> None:
        st = slot.stage
        inst = slot.instance

        def reject(raw: bytes, why: str, slot=slot) -> None:
            self._log_error(slot, raw.decode(errors="replace")[:200], why)

        inst.handle = adaptors.AdaptorInstanceHandle(
            st.descriptor, slot.index, st.creator.plan.source_feed, self.transport,
            retry=self.retry, tick_seconds=self.cfg.tick_seconds,
            max_bytes=max_record_bytes(self.cfg.frame_capacity), on_reject=reject)
        inst.handle.open(self.tick)

    # --------------------------------------------------------- connect
    def _cluster_view(self) -> ClusterView:
        live = [n for n in sorted(self.nodes) if self.nodes[n].alive]
        load = {n: len(self.nodes[n].instances) for n in live}
        return ClusterView(live, load, self.cfg.seed)

    def connect(self, feed: str, dataset: str, policy: IngestionPolicy) -> Pipeline:
        plan = compile_connect(feed, dataset, policy, self.catalog, self.registry)
        preferred = {}
        for n in self.nodes.values():
            if n.alive:
                for key in n.fm.saved:
                    if key[0] == feed and key[1] == dataset and key[3] == "compute":
                        preferred[("compute", key[4])] = n.id
        plan = schedule(plan, self._cluster_view(), preferred)
        p = Pipeline(len(self.pipelines), plan, self.tick)
        ds = self.catalog.dataset(dataset)
        rtype = self.catalog.types[ds.record_type]
        prev: Stage | None = None
        for index, sp in enumerate(plan.stages):
            kind = sp.role
            if kind == "intake":
                kind = "head" if sp.source == "joint" else "adaptor"
            st = Stage(self._next_sid, p, kind, index)
            self._next_sid += 1
            if sp.joint is not None:
                st.joint_feeds = sp.joint.feeds
            if kind == "adaptor":
                st.descriptor = plan.adaptor
            elif kind == "head":
                st.prev = [self.joint_slot[j].stage for j in sp.subscriptions]
                st.prev = list({s.sid: s for s in st.prev}.values())
            elif kind == "compute":
                st.udf_names = [str(u) for u in sp.udfs]
                st.udfs = [self.catalog.functions.build(u) for u in sp.udfs]
            elif kind == "store":
                st.partitions = self.storage.partitions(dataset)
                types = self.catalog.types
                st.check = lambda d, rtype=rtype, types=types: conforms(d, rtype, types)
            if prev is not None:
                prev.next = st
                st.prev = [prev]
                if sp.hash_key:
                    prev.hash_key = sp.hash_key
            for i, node in enumerate(sp.nodes):
                slot = Slot(st, i, node)
                if kind == "head":
                    slot.source_joint = sp.subscriptions[i]
                st.slots.append(slot)
            p.stages.append(st)
            self.stages.append(st)
            prev = st
        p.entry = p.stages[0]
        p.store = p.stages[-1]
        for st in p.stages:
            self._build_core(st)
        self.pipelines.append(p)
        self._bump()
        # materialize: store, then intake, then compute (placement order)
        order = [p.store, p.entry] + [s for s in p.stages if s.kind == "compute"]
        restored = 0
        for st in order:
            for slot in st.slots:
                inst = self._new_instance(slot, slot.node)
                state = self.nodes[slot.node].fm.claim(slot.state_key)
                if state is not None:
                    restored += state.records
                    self._restore(inst, state)
        for st in reversed(p.stages):
            for slot in st.slots:
                if st.joint_feeds is not None:
                    self._new_joint(slot)
        before = self._root_generated_now(p)
        if p.entry.kind == "adaptor" and p.entry.creator is p:
            # a fresh connection sees what the endpoints still retain plus
            # everything generated from now on, and any restored saved state
            retained = sum(self.sources[a].retained for a in p.entry.descriptor.instance_endpoints
                           if hasattr(self.sources.get(a), "retained"))
            p.gen_base = before - retained - restored
            p.clean_start = True
        else:
            p.clean_start = before == 0
        for slot in p.entry.slots:
            if p.entry.kind == "head":
                self.joints[slot.source_joint].subscribe(slot.head_key)
            else:
                self._open_handle(slot)
        return p

    def _build_core(self, st: Stage) -> None:
        check_key = st.hash_key if (st.joint_feeds is None and st.next is not None) else None
        if st.kind == "compute":
            udfs = st.udfs
            keyf = _key_check(check_key) if check_key else None

            def core(d: dict, st=st, udfs=udfs, keyf=keyf):
                if st.poison is not None:
                    st.poison(d)
                for f in udfs:
                    d = f(d)
                    if d is None:
                        return None
                return keyf(d) if keyf else d
            st.core = core
        elif st.kind == "store":
            check = st.check

            def core(d: dict, st=st, check=check):
                check(d)
                part = st.partitions[st._current_partition]
                part.insert(d)
                return d
            st.core = core
        else:
            keyf = _key_check(check_key) if check_key else None

            def core(d: dict, st=st, keyf=keyf):
                if st.poison is not None:
                    st.poison(d)
                return keyf(d) if keyf else d
            st.core = core

    def disconnect(self, feed: str, dataset: str) -> None:
        for p in self.pipelines:
            if p.feed == feed and p.dataset == dataset and p.alive:
                self._teardown(p, "disconnected", "disconnect")
                return
        raise CatalogError(f"feed {feed!r} is not connected to {dataset!r}")

    def _teardown(self, p: Pipeline, state: str, reason: str, save: bool = False) -> None:
        plan = compile_disconnect(p, self._owner_of)
        removed_ids = {s.sid for s in plan.removed}
        # whatever sits in the stages another pipeline adopts never reaches ``p``
        held, spilled = self._resident(p, only={s.sid for s in plan.retained})
        p.acct.dropped += held + spilled
        p.final_generated = self._root_generated_now(p)
        for st in reversed(plan.removed):
            for slot in st.slots:
                self._dispose_slot(slot, save)
        for st in plan.retained:
            if st.next is not None and st.next.sid in removed_ids:
                for slot in st.slots:
                    if slot.own is not None:
                        self._drop_pending(slot.own.pending, st.next, "dropped")
                        if slot.joint is not None and slot.own.key in slot.joint.queues:
                            self._drop_joint_queue(slot.joint, slot.own.key, st.next)
                        slot.own = None
                st.next = None
                st.hash_key = None
                self._build_core(st)
            st.owner = plan.adopter
        if plan.adopter is not None:
            plan.adopter.stages = plan.retained + plan.adopter.stages
        self.stages = [s for s in self.stages if s.sid not in removed_ids]
        p.stages = []
        p.final_held = sum(st.records for n in self.nodes.values() for k, st in n.fm.saved.items()
                           if k[0] == p.feed and k[1] == p.dataset)
        p.state = state
        p.reason = reason
        p.end_tick = self.tick
        p.needs.clear()
        for tick, items in self.deployments.items():
            self.deployments[tick] = [it for it in items if it[0] is not p]
        self.catalog.mark_disconnected(p.feed, p.dataset, reason)
        self._bump()

    def _dispose_slot(self, slot: Slot, save: bool = False) -> None:
        st = slot.stage
        node = self.nodes[slot.node]
        inst = slot.instance
        if slot.joint is not None:
            joint = slot.joint
            for key in list(joint.queues):
                target = self._sub_target(key)
                self._drop_joint_queue(joint, key, target or st)
            self.registry.unregister(joint)
            self.joints.pop(joint.joint_id, None)
            self.joint_slot.pop(joint.joint_id, None)
            slot.joint = None
        if slot.own is not None:
            self._drop_pending(slot.own.pending, st.next or st, "dropped")
            slot.own = None
        if st.kind == "head" and slot.source_joint in self.joints:
            joint = self.joints[slot.source_joint]
            if slot.head_key in joint.queues:
                self._drop_joint_queue(joint, slot.head_key, st)
        if inst is None:
            return
        if save and node.alive and inst.lifecycle == "live" and st.kind != "adaptor":
            self._save_state(inst, slot)
        elif inst.lifecycle == "zombie":
            state = node.fm.saved.pop(slot.state_key, None)
            if state is not None and not save:
                self._count(st, "dropped", state.records)
                if node.alive:
                    node.fmm.release_all(("saved", slot.state_key))
                if state.spill is not None:
                    state.spill.delete()
            elif state is not None:
                node.fm.saved[slot.state_key] = state
        else:
            n = inst.input.records + sum(len(f) for _, f in inst.pending)
            if inst.spill is not None:
                n += inst.spill.records
                inst.spill.delete()
            if inst.handle is not None:
                n += inst.handle.close()
            self._count(st, "dropped", n)
            if node.alive:
                node.fmm.release_all(inst.iid)
        if node.alive:
            node.fm.unregister(inst)
        node.instances.pop(inst.iid, None)
        inst.lifecycle = "dead" if inst.lifecycle != "zombie" else inst.lifecycle
        slot.instance = None

    def _sub_target(self, key) -> Stage | None:
        if key[0] == "own":
            for s in self.stages:
                if s.sid == key[1]:
                    return s.next
        else:
            for s in self.stages:
                if s.sid == key[1]:
                    return s
        return None

    def _drop_joint_queue(self, joint: FeedJoint, key, target: Stage) -> None:
        n = joint.pending_records(key)
        self._count(target, "dropped", n)
        joint.unsubscribe(key)

    def _drop_pending(self, pending: deque, stage: Stage, attr: str) -> None:
        n = sum(len(f) for _, f in pending)
        self._count(stage, attr, n)
        pending.clear()

    # ----------------------------------------------------------- delivery
    def _deliverable(self, slot: Slot) -> bool:
        inst = slot.instance
        return (inst is not None and inst.lifecycle == "live" and self.nodes[inst.node].alive)

    def _admit(self, slot: Slot, frame: Frame) -> bool:
        """Offer a frame to a slot's input queue; False means the sender must hold it."""
        if not self._deliverable(slot):
            return False
        inst = slot.instance
        st = slot.stage
        node = self.nodes[inst.node]
        fm = node.fm
        if inst.spill is None or not len(inst.spill):
            need = inst.input.buffers_needed(frame)
            if need == 0 or fm.request(inst, need):
                inst.input.put(frame)
                fm.unstall(inst)
                self.max_allocated = max(self.max_allocated, node.fmm.allocated)
                return True
        elif fm.mark_stalled(inst):
            pass
        self._win_add(st, inst.node, 2, 1 if inst.iid in fm.stalled else 0)
        ledger = fm.ledger.setdefault(inst.iid, SpillLedger())
        before = ledger.bytes_spilled
        action = fm.handle_stalled(inst, frame, (st.owner or st.creator).policy)
        if action == "spill":
            self._win_add(st, inst.node, 3, ledger.bytes_spilled - before)
            return True
        if action == "discard":
            self._count(st, "discarded", len(frame))
            self._win_add(st, inst.node, 4, len(frame))
            return True
        self.sfm.escalate(Escalation(self.tick, inst.node, st.creator.feed, inst.name))
        return False

    def _deliver(self, target, frame: Frame) -> bool:
        if isinstance(target, FeedJoint):
            joint = target
            if self.joints.get(joint.joint_id) is not joint:
                return False
            node = self.nodes[joint.node]
            if not node.alive:
                return False
            if not joint.queues:
                joint.publish(frame)
                return True
            if node.fmm.request(("joint", joint.joint_id), 1) == 0:
                return False
            self.max_allocated = max(self.max_allocated, node.fmm.allocated)
            joint.publish(frame)
            return True
        return self._admit(target, frame)

    def _flush(self, pending: deque) -> None:
        if not pending:
            return
        blocked: set[int] = set()
        keep: deque = deque()
        for target, frame in pending:
            tid = id(target)
            if tid in blocked or not self._deliver(target, frame):
                blocked.add(tid)
                keep.append((target, frame))
        pending.clear()
        pending.extend(keep)

    def _split(self, st: Stage, records: list[Record]) -> list[tuple[Slot, Frame]]:
        nxt = st.next
        n = len(nxt.slots)
        cap = self.cfg.frame_capacity
        groups: dict[int, list[Record]] = defaultdict(list)
        if st.hash_key is not None:
            key = st.hash_key
            for rec in records:
                groups[hash_partition(rec.data[key], n)].append(rec)
        else:
            for rec in records:
                groups[st.rr % n].append(rec)
                st.rr += 1
        out = []
        for idx in sorted(groups):
            for frame in pack(groups[idx], cap):
                out.append((nxt.slots[idx], frame))
        return out

    def _emit(self, inst: OperatorInstance, records: list[Record]) -> None:
        slot = inst.slot
        st = slot.stage
        if not records:
            return
        if slot.joint is not None:
            for frame in pack(records, self.cfg.frame_capacity):
                inst.pending.append((slot.joint, frame))
        elif st.next is not None:
            inst.pending.extend(self._split(st, records))
        self._flush(inst.pending)

    # ------------------------------------------------------------- errors
    def _log_error(self, slot: Slot, record: Any, error: str) -> None:
        st = slot.stage
        policy = (st.owner or st.creator).policy
        payload = record if isinstance(record, dict) else {"raw": record}
        entry = ErrorEntry(self.tick * self.cfg.tick_seconds, st.creator.feed, st.role, slot.node,
                           error, payload)
        self.errors.append(entry, persist=policy.collect_statistics)

    def _persist_error(self, entry: ErrorEntry) -> None:
        if ERRORS_DATASET not in self.storage.datasets:
            self.storage.create(ERRORS_DATASET, "id", [sorted(self.nodes)[0]])
        self._error_seq += 1
        rec = asdict(entry)
        rec["id"] = self._error_seq
        self.storage.insert(ERRORS_DATASET, rec)

    # ---------------------------------------------------------- processing
    def _work(self, inst: OperatorInstance) -> int:
        slot = inst.slot
        if inst.pending:
            return 0
        if slot.stage.kind == "head":
            joint = self.joints.get(slot.source_joint)
            if joint is None or slot.head_key not in joint.queues:
                return 0
            return joint.pending_records(slot.head_key)
        return inst.input.records

    def _cost(self, st: Stage) -> float:
        c = self.cfg
        return {"adaptor": c.cost_intake, "head": c.cost_intake, "compute": c.cost_compute,
                "store": c.cost_store}[st.kind]

    def _capacity(self, node: str, res: str) -> float:
        cap = self.cfg.node_cpu if res == "cpu" else self.cfg.node_disk
        return cap[node] if isinstance(cap, dict) else cap

    def _process_node(self, node: Node) -> None:
        insts = [i for _, i in sorted(node.instances.items())
                 if i.lifecycle == "live" and i.slot is not None and i.slot.instance is i]
        for res in ("cpu", "disk"):
            group = [i for i in insts if (i.slot.stage.kind == "store") == (res == "disk")]
            if not group:
                continue
            demands = []
            for i in group:
                d = self._cost(i.slot.stage) * self._work(i) - i.credit
                demands.append(max(0.0, d))
            alloc = waterfill(demands, self._capacity(node.id, res))
            used = 0.0
            for i, a in zip(group, alloc):
                i.credit += a
                used += a
                while i.credit > 0 and self._work(i) > 0 and i.lifecycle == "live":
                    if not self._process_one(i):
                        break
                if self._work(i) == 0 and i.credit > 0:
                    i.credit = 0.0
            if res == "cpu":
                node.cpu_used += used
            else:
                node.disk_used += used

    def _process_one(self, inst: OperatorInstance) -> bool:
        slot = inst.slot
        st = slot.stage
        node = self.nodes[inst.node]
        joint = None
        if st.kind == "head":
            joint = self.joints[slot.source_joint]
            frame = joint.peek(slot.head_key)
        else:
            frame = inst.input.pop()
            node.fmm.release(inst.iid, 1)
        inst.credit -= self._cost(st) * len(frame)
        if st.kind == "store":
            st._current_partition = slot.index
        pipe = st.owner or st.creator
        res = meta_process_frame(inst, frame, pipe.policy, st.core,
                                 lambda i, rec, exc: self._log_error(slot, rec.data, str(exc)),
                                 fatal=(PartitionRoutingError,))
        if joint is not None:
            joint.ack(slot.head_key)
        self._count(st, "skipped", res.failures)
        self._count(st, "filtered", res.filtered)
        if pipe.entry is st and st.kind == "head":
            self._win[(pipe.cid, inst.node)][0] += len(frame)
            self._rep[(pipe.feed, inst.node)][0] += len(frame)
        if st.kind == "store":
            n = len(res.outputs)
            self._count(st, "ingested", n)
            self._win_add(st, inst.node, 1, n)
            self._rep[(pipe.feed, inst.node)][1] += n
            if n:
                for ev in pipe.recoveries:
                    if ev.first_insert_tick is None and ev.deploy_tick is not None:
                        ev.first_insert_tick = self.tick
        if res.terminated:
            # records after the failing one never reach the core
            rest = len(frame) - res.failures - res.filtered - len(res.outputs)
            self._count(st, "skipped", rest)
            self._emit(inst, res.outputs) if st.kind != "store" else None
            self._terminate(pipe, res.reason)
            return False
        if st.kind != "store":
            self._emit(inst, res.outputs)
        return True

    def _terminate(self, p: Pipeline, reason: str, save: bool = False) -> None:
        if not p.alive:
            return
        log.info("terminating %s -> %s: %s", p.feed, p.dataset, reason)
        self._teardown(p, "terminated", reason, save)

    # -------------------------------------------------------------- phases
    def _sources(self) -> None:
        t = (self.tick + 1) * self.cfg.tick_seconds
        self.transport.advance(t)
        for addr, src in self.sources.items():
            now = src.generated
            self._src_win[(addr, "gen")] += now - self._src_seen.get(addr, 0)
            self._src_seen[addr] = now
        cap = self.cfg.frame_capacity
        for st in list(self.stages):
            if st.kind != "adaptor":
                continue
            for slot in st.slots:
                inst = slot.instance
                if inst is None or inst.lifecycle != "live" or inst.handle is None:
                    continue
                if not self.nodes[inst.node].alive:
                    continue
                h = inst.handle
                errs = h.parse_errors + h.rejected
                res = h.next_batch(self.tick, self.cfg.handoff)
                self._count(st, "rejected", h.parse_errors + h.rejected - errs)
                if res is SourceStatus.FAILED:
                    self._terminate(st.owner or st.creator, "adaptor failed")
                    break
                if res is SourceStatus.END:
                    slot.ended = True
                    continue
                if res is SourceStatus.GAP or not res:
                    continue
                self._src_win[(st.descriptor.instance_endpoints[slot.index], "read")] += len(res)
                frames = pack(res, cap)
                for k, frame in enumerate(frames):
                    if not self._admit(slot, frame):
                        back = [r for f in frames[k:] for r in f.records]
                        h.push_back(back)
                        break
                    owner = st.owner or st.creator
                    if owner.entry is st:
                        self._win[(owner.cid, inst.node)][0] += len(frame)
                        self._rep[(owner.feed, inst.node)][0] += len(frame)

    def _route(self) -> None:
        for st in list(self.stages):
            for slot in st.slots:
                inst = slot.instance
                if inst is not None and inst.pending and self.nodes[inst.node].alive:
                    self._flush(inst.pending)
                own = slot.own
                if own is None or slot.joint is None or not self.nodes[slot.node].alive:
                    continue
                if st.next is None:
                    continue
                self._drain_own(own)
        for st in list(self.stages):
            for slot in st.slots:
                inst = slot.instance
                if inst is not None and inst.spill is not None and len(inst.spill):
                    self._replay(inst)

    def _drain_own(self, own: OwnSub) -> None:
        slot = own.slot
        st = slot.stage
        joint = slot.joint
        self._flush(own.pending)
        key = st.hash_key
        while not own.pending and joint.peek(own.key) is not None:
            frame = joint.ack(own.key)
            records = frame.records
            if key is not None:
                good = []
                for rec in records:
                    if rec.data.get(key) is None:
                        self._count(st.next, "skipped", 1)
                        self._log_error(slot, rec.data, f"missing partitioning key {key!r}")
                        if not st.next.owner.policy.recover_soft_failure:
                            self._terminate(st.next.owner, "soft failure: missing key")
                            return
                    else:
                        good.append(rec)
                records = good
            if records:
                own.pending.extend(self._split(st, records))
                self._flush(own.pending)

    def _replay(self, inst: OperatorInstance) -> None:
        if not self._deliverable(inst.slot):
            return
        fm = self.nodes[inst.node].fm
        spill = inst.spill
        while len(spill):
            need = 1
            if fm.fmm.request(inst.iid, need) == 0:
                return
            frame = spill.read_next()
            inst.input.frames.append(frame)
            inst.input.records += len(frame)
        fm.unstall(inst)

    # ------------------------------------------------------------- faults
    def _fire(self, ev: FaultEvent) -> None:
        if ev.kind == "kill-node":
            self.kill_node(ev.args[0])
        elif ev.kind == "revive-node":
            self.revive_node(ev.args[0])
        else:
            feed, n = ev.args[0], int(ev.args[1])
            hit = False
            for st in self.stages:
                if st.creator.feed == feed and (st.kind == "compute" or
                                                (feed in st.produces and st.kind != "store")):
                    st.poison = FailEvery(n)
                    hit = True
                    break
            if not hit:
                self.warnings.append(f"tick {self.tick}: poison-udf: no stage produces {feed}")

    def kill_node(self, nid: str) -> None:
        node = self.nodes.get(nid)
        if node is None:
            raise ValueError(f"unknown node {nid!r}")
        if not node.alive:
            msg = f"tick {self.tick}: kill-node {nid}: node already dead"
            log.warning(msg)
            self.warnings.append(msg)
            return
        node.alive = False
        records = 0
        frames = 0
        for st in self.stages:
            for slot in st.slots:
                if slot.joint is not None and slot.joint.node == nid:
                    joint = slot.joint
                    for key in list(joint.queues):
                        n = joint.pending_records(key)
                        target = self._sub_target(key) or st
                        self._count(target, "lost", n)
                    records += sum(len(f) for f in joint.held_frames())
                    frames += joint.occupancy
                    joint.clear()
                    self.registry.unregister(joint)
                    self.joints.pop(joint.joint_id, None)
                    slot.joint = None
                if slot.own is not None and slot.node == nid:
                    n = sum(len(f) for _, f in slot.own.pending)
                    records += n
                    frames += len(slot.own.pending)
                    self._drop_pending(slot.own.pending, st.next or st, "lost")
                inst = slot.instance
                if inst is None or inst.node != nid:
                    continue
                n = inst.input.records + sum(len(f) for _, f in inst.pending)
                frames += len(inst.input) + len(inst.pending)
                inst.input.drain()
                inst.pending.clear()
                if inst.spill is not None:
                    n += inst.spill.records
                    frames += len(inst.spill)
                    inst.spill.delete()
                if inst.handle is not None:
                    n += inst.handle.close()
                records += n
                self._count(st, "lost", n)
                inst.lifecycle = "dead"
        for key, state in node.fm.saved.items():
            slot = self._slot_by_state_key(key)
            records += state.records
            frames += len(state.input_frames) + len(state.pending)
            if slot is not None:
                self._count(slot.stage, "lost", state.records)
            if state.spill is not None:
                state.spill.delete()
        node.fm.saved.clear()
        node.instances.clear()
        self.kills.append(KillEvent(self.tick, nid, records, frames))
        if self.leader == nid:
            self._elect()

    def _slot_by_state_key(self, key) -> Slot | None:
        for st in self.stages:
            for slot in st.slots:
                if slot.state_key == key:
                    return slot
        return None

    def revive_node(self, nid: str) -> None:
        node = self.nodes[nid]
        if node.alive:
            self.warnings.append(f"tick {self.tick}: revive-node {nid}: node already live")
            return
        node.alive = True
        node.reset()
        self.monitor.rejoin(nid, self.tick)
        self._elect()

    def _elect(self) -> None:
        live = [n for n in self.nodes if self.nodes[n].alive]
        if not live:
            return
        for n in self.nodes.values():
            n.fm.is_leader = False
        self.leader = elect_leader(live)
        self.nodes[self.leader].fm.is_leader = True
        self.sfm.leader = self.leader

    def _heartbeats(self) -> None:
        alive = [n for n in self.nodes if self.nodes[n].alive]
        for nid in self.monitor.step(self.tick, alive):
            self.on_node_failure(nid)

    def _slot_on(self, slot: Slot, nid: str) -> bool:
        inst = slot.instance
        return inst is not None and inst.node == nid

    def _pipe_order(self, pipes: list[Pipeline]) -> list[Pipeline]:
        """Owners of upstream stages first."""
        depth = {}
        for p in pipes:
            depth[p.cid] = min((len(self._path_stages(s)) for s in p.stages), default=0)
        return sorted(pipes, key=lambda p: (depth[p.cid], p.cid))

    def _path_stages(self, st: Stage) -> list[Stage]:
        out = []
        stack = [st]
        seen = set()
        while stack:
            s = stack.pop()
            if s.sid in seen:
                continue
            seen.add(s.sid)
            out.append(s)
            stack.extend(s.prev)
        return out

    def on_node_failure(self, nid: str) -> None:
        by_sid = {s.sid: s for s in self.stages}
        affected = []
        for p in self.pipelines:
            if not p.alive:
                continue
            if any(self._slot_on(slot, nid) for sid in self._path(p) for slot in by_sid[sid].slots):
                affected.append(p)
        if not affected:
            return
        kill_tick = max((k.tick for k in self.kills if k.node == nid), default=self.tick)
        recovering = []
        for p in affected:
            p.failures += 1
            if any(self._slot_on(slot, nid) for slot in p.store.slots):
                self._terminate(p, f"store node {nid} failed", save=p.policy.recover_hard_failure)
            elif not p.policy.recover_hard_failure:
                self._terminate(p, f"node {nid} failed")
            else:
                recovering.append(p)
        recovering = [p for p in recovering if p.alive]
        if not recovering:
            return
        recovering = self._pipe_order(recovering)
        needs: list[SlotNeed] = []
        for p in recovering:
            p.state = "recovering"
            for st in p.stages:
                for slot in st.slots:
                    inst = slot.instance
                    prior = p.needs.get(slot)
                    if inst is None:
                        status = "dead"
                    elif inst.node == nid or inst.lifecycle == "dead":
                        status = "dead"
                    elif prior == "zombie" or inst.lifecycle == "zombie":
                        status = "zombie"
                    else:
                        others = slot.joint is not None and any(
                            self._owner_of(k) not in (None, p) for k in slot.joint.queues)
                        status = classify(st.role, inst.node, nid, others)
                        if status == "zombie":
                            self._save_state(inst, slot)
                    if status != "live":
                        p.needs[slot] = status
            for st in p.stages:
                for slot in st.slots:
                    status = p.needs.get(slot)
                    if status is None:
                        continue
                    colocate = anchor = None
                    if st.kind == "head":
                        colocate = self.joint_slot.get(slot.source_joint)
                        if colocate is not None and colocate.instance is not None and \
                                colocate.instance.lifecycle != "dead":
                            anchor = colocate.instance.node
                    node = slot.instance.node if slot.instance is not None else slot.node
                    needs.append(SlotNeed(slot, st.role, status, node, colocate, anchor))
            p.recoveries.append(RecoveryEvent(kill_tick, nid, self.tick))
        live = [n for n in sorted(self.nodes) if self.nodes[n].alive]
        load = {n: sum(1 for i in self.nodes[n].instances.values() if i.lifecycle != "dead")
                for n in live}
        try:
            placement = plan_recovery(needs, live, load)
        except RecoveryError as exc:
            for p in recovering:
                self._terminate(p, str(exc))
            return
        due = self.tick + self.cfg.deploy_delay
        for tick, items in list(self.deployments.items()):
            self.deployments[tick] = [it for it in items if it[0] not in recovering]
        for need in needs:
            self.deployments[due].append((need.key.stage.owner, need.key, placement[need.key]))

    def _save_state(self, inst: OperatorInstance, slot: Slot) -> None:
        node = self.nodes[inst.node]
        key = slot.state_key
        frames = inst.input.drain()
        state = SavedState(key, inst.node, frames, list(inst.pending), inst.spill, inst.skip_count)
        inst.pending.clear()
        inst.spill = None
        held = node.fmm.holding(inst.iid)
        node.fmm.transfer(inst.iid, ("saved", key), held)
        node.fm.save(state)
        node.fm.unregister(inst)
        inst.lifecycle = "zombie"
        inst.saved_state = key

    def _restore(self, inst: OperatorInstance, state: SavedState) -> None:
        node = self.nodes[inst.node]
        node.fmm.transfer(("saved", state.key), inst.iid, node.fmm.holding(("saved", state.key)))
        inst.input.put_front(state.input_frames)
        inst.pending.extend(state.pending)
        inst.spill = state.spill
        inst.skip_count = state.skip_count

    def _deploy(self) -> None:
        items = self.deployments.pop(self.tick, [])
        touched: list[Pipeline] = []
        for p, slot, node in items:
            if not p.alive or slot not in p.needs:
                continue
            if not self.nodes[node].alive:
                node = self._cluster_view().least_loaded()
            old = slot.instance
            status = p.needs.pop(slot)
            if old is not None:
                self.nodes[old.node].instances.pop(old.iid, None)
            inst = self._new_instance(slot, node)
            if status == "zombie":
                state = self.nodes[node].fm.claim(slot.state_key)
                if state is not None:
                    self._restore(inst, state)
            st = slot.stage
            if st.joint_feeds is not None and slot.joint is None:
                self._new_joint(slot)
                for other in self.stages:
                    if other.kind == "head":
                        for hs in other.slots:
                            if hs.source_joint == slot.joint.joint_id and \
                                    self._deliverable(hs):
                                slot.joint.subscribe(hs.head_key)
            if st.kind == "head":
                joint = self.joints.get(slot.source_joint)
                if joint is not None:
                    joint.subscribe(slot.head_key)
            if st.kind == "adaptor":
                self._open_handle(slot)
            if p not in touched:
                touched.append(p)
        for p in touched:
            if not p.needs:
                p.state = "active"
                for ev in p.recoveries:
                    if ev.deploy_tick is None:
                        ev.deploy_tick = self.tick
        if items:
            self._bump()

    # ------------------------------------------------------ reports/metrics
    def _reports(self) -> None:
        secs = self.cfg.report_period * self.cfg.tick_seconds
        reports: dict[str, FeedReport | None] = {}
        for nid, node in sorted(self.nodes.items()):
            if not node.alive:
                reports[nid] = None
                continue
            rep = FeedReport(nid, self.tick // self.cfg.report_period)
            for (feed, n), (i, o) in self._rep.items():
                if n == nid:
                    if i:
                        rep.inflow[feed] = i / secs
                    if o:
                        rep.outflow[feed] = o / secs
            per = self.cfg.report_period
            rep.cpu = node.cpu_used / (self._capacity(nid, "cpu") * per)
            rep.disk = node.disk_used / (self._capacity(nid, "disk") * per)
            node.cpu_used = node.disk_used = 0.0
            for iid in sorted(node.fm.stalled):
                inst = node.fm.registered.get(iid)
                if inst is not None:
                    rep.stalled.append((inst.feed, inst.name))
            reports[nid] = rep
        stats = {p.feed for p in self.pipelines if p.alive and p.policy.collect_statistics}
        self.sfm.absorb(collect_reports(self.leader, self.tick // self.cfg.report_period,
                                        reports, stats))
        if len(self.sfm.views) > 64:
            del self.sfm.views[:-64]
        self._rep.clear()

    def _close_window(self) -> None:
        start = self.tick + 1 - self.cfg.window_ticks
        for p in self.pipelines:
            if p.alive or (p.end_tick is not None and p.end_tick >= start):
                nodes = {s.node for s in p.store.slots} if p.store and p.store.slots else set()
                for (cid, node) in self._win:
                    if cid == p.cid:
                        nodes.add(node)
                for node in sorted(nodes):
                    self.rows.append((start, p.cid, node, list(self._win.get((p.cid, node),
                                                                             [0, 0, 0, 0, 0]))))
        src: dict[str, list[int]] = defaultdict(lambda: [0, 0])
        ep_feed = self._endpoint_feeds()
        for (addr, what), n in self._src_win.items():
            feed = ep_feed.get(addr)
            if feed is None:
                continue
            src[feed][0 if what == "gen" else 1] += n
        for feed in sorted(src):
            self.rows.append((start, f"source:{feed}", "source", [src[feed][0], src[feed][1], 0, 0, 0]))
        self._win.clear()
        self._src_win.clear()

    def _endpoint_feeds(self) -> dict[str, str]:
        out = {}
        for name, fdef in self.catalog.feeds.items():
            if fdef.kind == "primary":
                try:
                    desc = adaptors.describe(fdef.adaptor)
                except adaptors.AdaptorError:
                    continue
                for ep in desc.instance_endpoints:
                    out.setdefault(ep, name)
        return out

    # ---------------------------------------------------------------- loop
    def step(self) -> None:
        for ev in self.faults.due(self.tick):
            self._fire(ev)
        for text in self.statements.pop(self.tick, []):
            self.execute(text)
        self._heartbeats()
        self._deploy()
        self._sources()
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            if node.alive:
                self._process_node(node)
        self._route()
        for node in self.nodes.values():
            if node.alive:
                self.max_allocated = max(self.max_allocated, node.fmm.allocated)
                node.fmm.check()
        if (self.tick + 1) % self.cfg.report_period == 0:
            self._reports()
        if (self.tick + 1) % self.cfg.window_ticks == 0:
            self._close_window()
        self.tick += 1

    def run(self, ticks: int) -> None:
        for _ in range(ticks):
            self.step()

    def run_until(self, tick: int) -> None:
        while self.tick < tick:
            self.step()

    def run_realtime(self, ticks: int) -> None:
        t0 = time.monotonic() - self.tick * self.cfg.tick_seconds
        for _ in range(ticks):
            self.step()
            delay = t0 + self.tick * self.cfg.tick_seconds - time.monotonic()
            if delay > 0:
                time.sleep(delay)

    def quiescent(self) -> bool:
        """Sources finished and nothing resident in any live pipeline."""
        for src in self.sources.values():
            gen = getattr(src, "generator", src)
            if gen is not None and not getattr(gen, "exhausted", True):
                return False
        if self.deployments and any(self.deployments.values()):
            return False
        for p in self.pipelines:
            if p.alive and (self._resident(p)[0] or self._resident(p)[1]):
                return False
        return True

    def drain(self, max_ticks: int = 100000, align: bool = True) -> int:
        """Run until quiescent, then to the end of the current metrics window."""
        start = self.tick
        while not self.quiescent() and self.tick - start < max_ticks:
            self.step()
        if align:
            while self.tick % self.cfg.window_ticks:
                self.step()
        return self.tick - start

    # ----------------------------------------------------------- accounting
    def _root_generated_now(self, p: Pipeline) -> int:
        by_sid = {s.sid: s for s in self.stages}
        n = 0
        eps = self.sources
        for sid in self._path(p):
            st = by_sid.get(sid)
            if st is not None and st.kind == "adaptor":
                for addr in st.descriptor.instance_endpoints:
                    ep = eps.get(addr)
                    if ep is not None:
                        n += ep.generated
        return n - p.gen_base

    def _resident(self, p: Pipeline, only: set[int] | None = None) -> tuple[int, int]:
        """(in-flight, spilled) records along ``p``'s path, or just the ``only`` stages."""
        by_sid = {s.sid: s for s in self.stages}
        path = self._path(p) if only is None else only
        in_flight = spilled = 0
        eps = getattr(self.transport, "endpoints", {})
        for sid in path:
            st = by_sid.get(sid)
            if st is None:
                continue
            for slot in st.slots:
                inst = slot.instance
                if inst is not None and inst.lifecycle != "dead":
                    in_flight += inst.input.records + sum(len(f) for _, f in inst.pending)
                    if inst.spill is not None:
                        spilled += inst.spill.records
                    if inst.handle is not None:
                        in_flight += len(inst.handle.unread)
                        conn = inst.handle.conn
                        if conn is not None and hasattr(conn, "buffer"):
                            in_flight += len(conn.buffer)
                if inst is not None and inst.lifecycle == "zombie":
                    state = self.nodes[inst.node].fm.saved.get(slot.state_key)
                    if state is not None:
                        in_flight += state.records - (state.spill.records if state.spill else 0)
                        spilled += state.spill.records if state.spill else 0
                if slot.joint is not None:
                    for key in slot.joint.queues:
                        target = self._sub_target(key)
                        if target is not None and target.sid in path:
                            in_flight += slot.joint.pending_records(key)
                if slot.own is not None and st.next is not None and st.next.sid in path:
                    in_flight += sum(len(f) for _, f in slot.own.pending)
                if st.kind == "head" and slot.source_joint in self.joints:
                    pass  # counted at the producing joint
            if st.kind == "adaptor":
                for addr in st.descriptor.instance_endpoints:
                    ep = eps.get(addr)
                    if ep is not None:
                        in_flight += ep.retained
                        if ep.conn is not None and not any(
                                s.instance is not None and s.instance.handle is not None
                                and s.instance.handle.conn is ep.conn for s in st.slots):
                            in_flight += len(ep.conn.buffer)
        return in_flight, spilled

    def accounting(self, p: Pipeline) -> Accounting:
        acct = Accounting(**asdict(p.acct))
        if not p.alive:
            acct.generated = p.final_generated
            acct.in_flight = p.final_held
            return acct
        acct.generated = self._root_generated_now(p)
        acct.in_flight, acct.spilled_pending = self._resident(p)
        return acct

    def label(self, p: Pipeline) -> str:
        datasets = {q.dataset for q in self.pipelines if q.feed == p.feed}
        return p.feed if len(datasets) == 1 else f"{p.feed}:{p.dataset}"

    # ---------------------------------------------------------------- views
    def pipeline(self, feed: str, dataset: str | None = None) -> Pipeline:
        cands = [p for p in self.pipelines if p.feed == feed and
                 (dataset is None or p.dataset == dataset)]
        if not cands:
            raise KeyError(f"no pipeline for {feed}")
        live = [p for p in cands if p.alive]
        return (live or cands)[-1]

    def show_pipelines(self) -> str:
        blocks = []
        for p in self.pipelines:
            if not p.alive:
                continue
            header = (f"pipeline {p.feed} -> {p.dataset} policy={p.policy.name} "
                      f"state={p.state}")
            views = []
            for st in p.stages:
                nodes = [s.instance.node if s.instance is not None else s.node for s in st.slots]
                bits = []
                if st.creator is not p:
                    bits.append(f"retained-from={st.creator.feed}")
                if st.kind == "adaptor":
                    bits.append(f"source=adaptor({st.descriptor.name})")
                elif st.kind == "head":
                    bits.append("source=joint(" + ",".join(s.source_joint for s in st.slots) + ")")
                if st.udf_names:
                    bits.append("udf=" + ",".join(st.udf_names))
                if st.hash_key is not None:
                    bits.append(f"out=hash({st.hash_key})")
                elif st.next is not None:
                    bits.append("out=random")
                if st.joint_feeds is not None:
                    js = [f"{s.joint.joint_id}@{s.joint.node}" for s in st.slots if s.joint]
                    bits.append("joints=" + ",".join(js))
                views.append(StageView(st.role, nodes, " ".join(bits)))
            blocks.append(render_pipeline(header, views))
        return "\n".join(blocks)
