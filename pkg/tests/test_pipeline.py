import pytest

from feedmesh.catalog import Catalog
from feedmesh.dataflow import FeedJoint
from feedmesh.ddl import parse_script
from feedmesh.pipeline import (ClusterView, JointRegistry, PlanError, ScheduleError,
                               compile_connect, compile_disconnect, plan_views, render_pipeline,
                               schedule)

DDL = """
create type Raw as open { id: string };
create dataset RawD(Raw) primary key id on nodegroup (G, H);
create dataset ProcD(Raw) primary key id on nodegroup (E, F);
create feed CNNFeed using CNNAdaptor ("datasource"="a:1, b:1", "locations"="A, B");
create feed Loose using Gen ("datasource"="x:1, y:1, z:1");
create secondary feed Proc from feed CNNFeed apply function addHashTags;
create secondary feed Proc2 from feed Proc apply function identity;
"""


@pytest.fixture
def cat():
    c = Catalog()
    for stmt in parse_script(DDL):
        c.apply(stmt)
    return c


def plan(cat, feed, ds, reg=None):
    return compile_connect(feed, ds, cat.resolve_policy("Basic"), cat, reg or JointRegistry())


def test_primary_plan(cat):
    p = plan(cat, "CNNFeed", "RawD")
    roles = [s.role for s in p.stages]
    assert roles == ["intake", "store"]
    intake = p.stage("intake")
    assert intake.cardinality == 2 and intake.source == "adaptor"
    assert intake.joint.feeds == ("CNNFeed",)
    assert p.stage("store").connector == "hash(id)"
    assert p.stage("store").hash_key == "id"


def test_secondary_from_joints(cat):
    reg = JointRegistry()
    for node in ("A", "B"):
        reg.register(FeedJoint(f"CNNFeed@{node}", ["CNNFeed"], node))
    p = plan(cat, "Proc", "ProcD", reg)
    intake = p.stage("intake")
    assert intake.source == "joint" and intake.nodes == ("A", "B")
    assert intake.subscriptions == ("CNNFeed@A", "CNNFeed@B")
    compute = p.stage("compute")
    assert [u.name for u in compute.udfs] == ["addHashTags"]
    assert compute.joint.feeds == ("Proc",)
    assert p.sourced_from_joint


def test_secondary_without_joints_uses_adaptor_and_full_chain(cat):
    p = plan(cat, "Proc2", "ProcD")
    assert p.adaptor is not None and p.source_feed == "CNNFeed"
    assert [u.name for u in p.udf_chain] == ["addHashTags", "identity"]
    # compute cardinality matches the store stage
    assert p.stage("compute").cardinality == 2


def test_deepest_joint_preferred(cat):
    reg = JointRegistry()
    reg.register(FeedJoint("CNNFeed@A", ["CNNFeed"], "A"))
    reg.register(FeedJoint("Proc@E", ["Proc"], "E"))
    p = plan(cat, "Proc2", "ProcD", reg)
    assert p.source_feed == "Proc"
    assert [u.name for u in p.udf_chain] == ["identity"]


def test_schedule_locations_and_compute(cat):
    placed = schedule(plan(cat, "Proc", "ProcD"), ClusterView(list("ABCDEFGHI")))
    assert placed.stage("intake").nodes == ("A", "B")
    assert placed.stage("store").nodes == ("E", "F")
    assert len(placed.stage("compute").nodes) == 2
    assert set(placed.stage("compute").nodes).isdisjoint({"A", "B", "E", "F"})


def test_schedule_seeded_determinism(cat):
    a = schedule(plan(cat, "Loose", "RawD"), ClusterView(list("ABCDEFGH"), seed=7))
    b = schedule(plan(cat, "Loose", "RawD"), ClusterView(list("ABCDEFGH"), seed=7))
    assert a == b
    nodes = a.stage("intake").nodes
    assert len(set(nodes)) == 3


def test_schedule_store_node_down(cat):
    with pytest.raises(ScheduleError, match="down"):
        schedule(plan(cat, "CNNFeed", "RawD"), ClusterView(list("ABCDEF")))


def test_schedule_location_down(cat):
    with pytest.raises(ScheduleError):
        schedule(plan(cat, "CNNFeed", "RawD"), ClusterView(list("BGH")))


def test_schedule_error_is_plan_error():
    assert issubclass(ScheduleError, PlanError)


def test_least_loaded_ties_by_id():
    cv = ClusterView(["C", "A", "B"], {"A": 2})
    assert cv.least_loaded() == "B"
    with pytest.raises(ScheduleError):
        cv.least_loaded([])


def test_joint_registry():
    reg = JointRegistry()
    j1, j2 = FeedJoint("b", ["F", "G"], "A"), FeedJoint("a", ["F"], "B")
    reg.register(j1)
    reg.register(j2)
    reg.register(j1)
    assert [j.joint_id for j in reg.joints("F")] == ["a", "b"]
    assert reg.feeds() == ["F", "G"]
    reg.unregister(j1)
    assert reg.feeds() == ["F"]
    assert [j.joint_id for j in reg.all()] == ["a"]


class _Stage:
    def __init__(self, name, joints=(), nxt=None):
        self.name, self.joints, self.next = name, list(joints), nxt


class _Pipe:
    def __init__(self, cid, stages):
        self.cid, self.stages = cid, stages


def test_disconnect_retains_shared_prefix():
    joint = FeedJoint("j", ["F"], "A")
    store = _Stage("store")
    compute = _Stage("compute", nxt=store)
    intake = _Stage("intake", [joint], compute)
    parent = _Pipe(1, [intake, compute, store])
    child = _Pipe(2, [])
    joint.subscribe("own")
    joint.subscribe("child")
    owners = {"own": parent, "child": child}
    td = compile_disconnect(parent, owners.get)
    assert [s.name for s in td.retained] == ["intake"]
    assert [s.name for s in td.removed] == ["compute", "store"]
    assert td.adopter is child


def test_disconnect_sole_pipeline_removes_all():
    joint = FeedJoint("j", ["F"], "A")
    store = _Stage("store")
    intake = _Stage("intake", [joint], store)
    p = _Pipe(1, [intake, store])
    joint.subscribe("own")
    td = compile_disconnect(p, {"own": p}.get)
    assert td.retained == [] and td.adopter is None
    assert [s.name for s in td.removed] == ["intake", "store"]


def test_render(cat):
    placed = schedule(plan(cat, "Proc", "ProcD"), ClusterView(list("ABCDEFGHI")))
    text = render_pipeline("Proc -> ProcD", plan_views(placed))
    lines = text.splitlines()
    assert lines[0] == "Proc -> ProcD"
    assert lines[1] == "  intake  x2 [A, B] source=adaptor(CNNAdaptor) joint=CNNFeed"
    assert lines[2].startswith("  compute x2 [") and "udf=addHashTags" in lines[2]
    assert lines[3] == "  store   x2 [E, F] connector=hash(id)"
