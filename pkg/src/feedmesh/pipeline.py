"""Compiling connect/disconnect requests into placed ingestion pipelines."""
from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

from .adaptors import AdaptorDescriptor, describe
from .catalog import Catalog, IngestionPolicy
from .ddl import UdfRef


class PlanError(ValueError):
    pass


class ScheduleError(PlanError):
    pass


@dataclass(frozen=True)
class JointSpec:
    """Where a stage taps its output: the feeds its records form."""

    feeds: tuple[str, ...]


@dataclass(frozen=True)
class StagePlan:
    role: str  # intake | compute | store
    cardinality: int
    nodes: tuple[str, ...] = ()
    source: str | None = None  # adaptor | joint (intake only)
    connector: str | None = None  # how records arrive: random | hash(<field>) | joint
    udfs: tuple[UdfRef, ...] = ()
    joint: JointSpec | None = None
    subscriptions: tuple[str, ...] = ()  # joint ids, one per head instance

    @property
    def hash_key(self) -> str | None:
        if self.connector and self.connector.startswith("hash("):
            return self.connector[5:-1]
        return None


@dataclass(frozen=True)
class PipelinePlan:
    feed: str
    dataset: str
    policy: IngestionPolicy
    source_feed: str  # the feed whose records enter the intake stage
    adaptor: AdaptorDescriptor | None
    stages: tuple[StagePlan, ...]

    @property
    def sourced_from_joint(self) -> bool:
        return self.adaptor is None

    def stage(self, role: str) -> StagePlan | None:
        for s in self.stages:
            if s.role == role:
                return s
        return None

    @property
    def udf_chain(self) -> tuple[UdfRef, ...]:
        compute = self.stage("compute")
        return compute.udfs if compute else ()


class JointRegistry:
    """Feed name → live joints that currently produce that feed's records."""

    def __init__(self) -> None:
        self._by_feed: dict[str, list[Any]] = {}

    def register(self, joint) -> None:
        for feed in joint.feeds:
            lst = self._by_feed.setdefault(feed, [])
            if joint not in lst:
                lst.append(joint)

    def unregister(self, joint) -> None:
        for feed in joint.feeds:
            lst = self._by_feed.get(feed, [])
            if joint in lst:
                lst.remove(joint)
            if not lst:
                self._by_feed.pop(feed, None)

    def joints(self, feed: str) -> list[Any]:
        return sorted(self._by_feed.get(feed, []), key=lambda j: j.joint_id)

    def feeds(self) -> list[str]:
        return sorted(self._by_feed)

    def all(self) -> list[Any]:
        seen: dict[str, Any] = {}
        for lst in self._by_feed.values():
            for j in lst:
                seen[j.joint_id] = j
        return [seen[k] for k in sorted(seen)]


def compile_connect(feed: str, dataset: str, policy: IngestionPolicy, catalog: Catalog,
                    registry: JointRegistry) -> PipelinePlan:
    """Choose the source and stages for connecting ``feed`` to ``dataset``."""
    lineage = catalog.lineage(feed)
    ds = catalog.dataset(dataset)
    if not ds.nodegroup:
        raise PlanError(f"dataset {dataset!r} has an empty nodegroup")
    source_at = None
    for i in range(len(lineage) - 1, -1, -1):
        if registry.joints(lineage[i].name):
            source_at = i
            break
    stages: list[StagePlan] = []
    store_connector = f"hash({ds.primary_key})"
    if source_at is not None:
        src_feed = lineage[source_at].name
        chain = tuple(f.udf for f in lineage[source_at + 1:] if f.udf is not None)
        joints = registry.joints(src_feed)
        stages.append(StagePlan("intake", len(joints), tuple(j.node for j in joints),
                                source="joint", connector="joint",
                                subscriptions=tuple(j.joint_id for j in joints)))
        adaptor = None
    else:
        root = lineage[0]
        src_feed = root.name
        chain = tuple(f.udf for f in lineage if f.udf is not None)
        adaptor = describe(root.adaptor)
        prefix = []
        for f in lineage:
            if f.udf is not None:
                break
            prefix.append(f.name)
        stages.append(StagePlan("intake", adaptor.cardinality, source="adaptor",
                                joint=JointSpec(tuple(prefix)) if prefix else None))
    if chain:
        stages.append(StagePlan("compute", len(ds.nodegroup), connector="random", udfs=chain,
                                joint=JointSpec((feed,))))
    stages.append(StagePlan("store", len(ds.nodegroup), tuple(ds.nodegroup),
                            connector=store_connector))
    return PipelinePlan(feed, dataset, policy, src_feed, adaptor, tuple(stages))


@dataclass
class ClusterView:
    """What the scheduler needs to know about the cluster."""

    live: list[str]
    load: dict[str, int] = field(default_factory=dict)
    seed: int = 0

    def least_loaded(self, candidates: Iterable[str] | None = None) -> str:
        pool = sorted(candidates if candidates is not None else self.live)
        if not pool:
            raise ScheduleError("no live node available")
        return min(pool, key=lambda n: (self.load.get(n, 0), n))

    def add(self, node: str, n: int = 1) -> None:
        self.load[node] = self.load.get(node, 0) + n


def schedule(plan: PipelinePlan, cluster: ClusterView,
             preferred: dict[tuple[str, int], str] | None = None) -> PipelinePlan:
    """Assign nodes to every stage: store, then intake, then compute."""
    live = set(cluster.live)
    preferred = preferred or {}
    placed: dict[str, StagePlan] = {}
    store = plan.stage("store")
    down = [n for n in store.nodes if n not in live]
    if down:
        raise ScheduleError(f"dataset {plan.dataset!r} nodegroup member(s) {', '.join(down)} down")
    for n in store.nodes:
        cluster.add(n)
    placed["store"] = store
    intake = plan.stage("intake")
    if intake.source == "joint":
        nodes = intake.nodes
        bad = [n for n in nodes if n not in live]
        if bad:
            raise ScheduleError(f"joint node(s) {', '.join(bad)} down")
    elif plan.adaptor.locations is not None:
        nodes = plan.adaptor.locations
        bad = [n for n in nodes if n not in live]
        if bad:
            raise ScheduleError(f"adaptor location(s) {', '.join(bad)} down")
    else:
        # a random choice under the engine's seed, spreading instances over distinct nodes
        rng = random.Random(f"intake:{cluster.seed}:{plan.feed}:{plan.dataset}")
        pool = sorted(live)
        rng.shuffle(pool)
        nodes = tuple(pool[i % len(pool)] for i in range(intake.cardinality))
    for n in nodes:
        cluster.add(n)
    placed["intake"] = replace(intake, nodes=tuple(nodes))
    compute = plan.stage("compute")
    if compute is not None:
        cnodes = []
        for p in range(compute.cardinality):
            node = preferred.get(("compute", p))
            if node is None or node not in live:
                node = cluster.least_loaded()
            cluster.add(node)
            cnodes.append(node)
        placed["compute"] = replace(compute, nodes=tuple(cnodes))
    return replace(plan, stages=tuple(placed[s.role] for s in plan.stages))


# --------------------------------------------------------------- teardown

@dataclass
class TeardownPlan:
    removed: list
    retained: list
    adopter: Any = None


def compile_disconnect(pipeline, owner_of: Callable[[Any], Any]) -> TeardownPlan:
    """Split a pipeline's stages into those to remove and those to keep.

    A stage is kept when one of its joints has a subscriber outside this
    pipeline, or when the stage it feeds is kept.  Kept stages are handed
    to the external subscriber with the lowest connection id.
    """
    retained: list = []
    removed: list = []
    external: list = []
    kept: set[int] = set()
    for stage in reversed(pipeline.stages):
        subs = [owner_of(key) for joint in stage.joints for key in joint.subscribers]
        ext = [p for p in subs if p is not None and p is not pipeline]
        if ext or (stage.next is not None and id(stage.next) in kept):
            kept.add(id(stage))
            retained.append(stage)
            external.extend(ext)
        else:
            removed.append(stage)
    retained.reverse()
    removed.reverse()
    adopter = min(external, key=lambda p: p.cid) if external else None
    return TeardownPlan(removed, retained, adopter)


# ---------------------------------------------------------------- render

@dataclass
class StageView:
    role: str
    nodes: list[str]
    detail: str = ""


def render_pipeline(header: str, stages: list[StageView]) -> str:
    lines = [header]
    for s in stages:
        tail = f" {s.detail}" if s.detail else ""
        lines.append(f"  {s.role:<7} x{len(s.nodes)} [{', '.join(s.nodes)}]{tail}")
    return "\n".join(lines)


def plan_views(plan: PipelinePlan) -> list[StageView]:
    out = []
    for s in plan.stages:
        bits = []
        if s.role == "intake":
            bits.append(f"source={'adaptor(' + plan.adaptor.name + ')' if plan.adaptor else 'joint(' + plan.source_feed + ')'}")
        if s.udfs:
            bits.append("udf=" + ",".join(str(u) for u in s.udfs))
        if s.connector and s.connector != "joint":
            bits.append(f"connector={s.connector}")
        if s.joint:
            bits.append("joint=" + ",".join(s.joint.feeds))
        out.append(StageView(s.role, list(s.nodes), " ".join(bits)))
    return out
