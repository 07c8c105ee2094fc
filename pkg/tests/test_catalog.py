import dataclasses

import pytest
from hypothesis import given, strategies as st

from feedmesh.catalog import (Catalog, CatalogError, ConnectRequest, DisconnectRequest, FailEvery,
                              TypeMismatch, add_hash_tags, conforms)
from feedmesh.ddl import parse_script, parse_statement

BASE = """
create type Tweet as open { tweetId: string, message-text: string };
create dataset Tweets(Tweet) primary key tweetId on nodegroup (A, B);
create dataset Other(Tweet) primary key tweetId on nodegroup (C);
create feed F using TweetGenAdaptor ("datasource"="g:9000");
"""


def catalog(extra: str = "") -> Catalog:
    cat = Catalog()
    for stmt in parse_script(BASE + extra):
        cat.apply(stmt)
    return cat


def run(cat, text):
    return cat.apply(parse_statement(text))


def test_connect_emits_request_with_default_policy():
    cat = catalog()
    req = run(cat, "connect feed F to dataset Tweets;")
    assert isinstance(req, ConnectRequest)
    assert req.policy.name == "Monitored"


def test_connect_unknown_feed():
    with pytest.raises(CatalogError, match="unknown feed"):
        run(catalog(), "connect feed Nope to dataset Tweets;")


def test_already_connected():
    cat = catalog()
    run(cat, "connect feed F to dataset Tweets;")
    with pytest.raises(CatalogError, match="already connected"):
        run(cat, "connect feed F to dataset Tweets;")


def test_reconnect_after_disconnect():
    cat = catalog()
    run(cat, "connect feed F to dataset Tweets;")
    assert isinstance(run(cat, "disconnect feed F from dataset Tweets;"), DisconnectRequest)
    run(cat, "connect feed F to dataset Tweets using policy Basic;")
    assert cat.connections[("F", "Tweets")].policy == "Basic"


def test_disconnect_not_connected():
    with pytest.raises(CatalogError, match="not connected"):
        run(catalog(), "disconnect feed F from dataset Tweets;")


def test_two_datasets_two_policies():
    cat = catalog()
    run(cat, "connect feed F to dataset Tweets using policy Basic;")
    run(cat, "connect feed F to dataset Other using policy FaultTolerant;")
    assert {c.policy for c in cat.connected()} == {"Basic", "Fault-Tolerant"}


def test_secondary_chain_depth():
    cat = catalog("create secondary feed S1 from feed F apply function addHashTags;"
                  "create secondary feed S2 from feed S1;")
    assert cat.depth("S2") == 2
    assert [f.name for f in cat.lineage("S2")] == ["F", "S1", "S2"]


def test_secondary_self_parent_rejected():
    with pytest.raises(CatalogError, match="cyclic"):
        run(catalog(), "create secondary feed S from feed S;")


def test_unknown_function():
    with pytest.raises(CatalogError, match="function registry"):
        run(catalog(), "create secondary feed S from feed F apply function nope;")


@pytest.mark.parametrize("text,match", [
    ("create type Tweet as open { x: string };", "duplicate"),
    ("create dataset X(Nope) primary key id;", "unknown type"),
    ("create dataset X(Tweet) primary key nope;", "primary key"),
    ("create type U as open { x: string? };", "non-optional"),
    ("create type U as open { x: string, x: int };", "duplicate field"),
    ("create type U as open { x: string, r: Missing };", "unknown type"),
    ("create index i on Nope(x);", "unknown dataset"),
    ("connect feed F to dataset Tweets using policy Nope;", "unknown policy"),
    ("create policy P from policy Nope;", "unknown policy"),
    ("create policy Basic from policy Basic;", "duplicate policy"),
    ('create policy P from policy Basic set (("no.such.key","1"));', "unknown policy key"),
    ('create policy P from policy Basic set (("excess.records.spill","maybe"));', "true"),
])
def test_referential_errors(text, match):
    with pytest.raises(CatalogError, match=match):
        run(catalog(), text)


def test_empty_nodegroup_without_default():
    cat = Catalog()
    run(cat, "create type T as open { id: string };")
    with pytest.raises(CatalogError, match="nodegroup"):
        run(cat, "create dataset D(T) primary key id;")
    cat.default_nodegroup = ("A",)
    run(cat, "create dataset D(T) primary key id;")
    assert cat.dataset("D").nodegroup == ("A",)


def test_resolve_policy():
    cat = catalog('create policy P from policy Basic set (("excess.records.spill","true"),'
                  '("max.consecutive.skipped","5"));')
    assert cat.resolve_policy().name == "Monitored"
    basic = cat.resolve_policy("Basic")
    assert not basic.collect_statistics and basic.excess_records_discard
    p = cat.resolve_policy("P")
    assert p.excess_records_spill and p.max_consecutive_skipped == 5
    assert p.excess_records_discard == basic.excess_records_discard
    ft = cat.resolve_policy("FaultTolerant")
    assert ft.excess_records_spill and not ft.excess_records_discard
    assert ft.recover_soft_failure and ft.recover_hard_failure
    assert cat.resolve_policy("P") is cat.resolve_policy("P")


def test_builtins_immutable():
    cat = catalog()
    with pytest.raises(dataclasses.FrozenInstanceError):
        cat.resolve_policy("Basic").collect_statistics = True


def test_index_once():
    cat = catalog("create index i on Tweets(user);")
    assert cat.dataset("Tweets").secondary_index == "user"
    with pytest.raises(CatalogError):
        run(cat, "create index j on Tweets(x);")


def test_conforms_open_type():
    cat = catalog("create type U as open { id: string, n: int?, loc: point?, tags: {{string}}? };")
    t = cat.types["U"]
    conforms({"id": "a", "extra": [1, 2]}, t, cat.types)
    conforms({"id": "a", "loc": "1.5,2", "tags": ["x"]}, t, cat.types)
    for bad in ({"n": 1}, {"id": 3}, {"id": "a", "n": "1"}, {"id": "a", "n": True},
                {"id": "a", "loc": "x,y"}, {"id": "a", "tags": [1]}):
        with pytest.raises(TypeMismatch):
            conforms(bad, t, cat.types)


def test_add_hash_tags():
    rec = {"tweetId": "1", "message-text": "love #sun and #sea-side", "user": {"screen-name": "bob"}}
    out = add_hash_tags(rec)
    assert out["referred-topics"] == ["sun", "sea-side"]
    assert out["userId"] == "bob"
    assert "user" not in out and "user" in rec


def test_fail_every():
    f = FailEvery(3)
    assert f({"a": 1}) == {"a": 1}
    f({})
    with pytest.raises(RuntimeError):
        f({})
    with pytest.raises(CatalogError):
        FailEvery(0)


def test_dump_and_snapshot():
    cat = catalog("connect feed F to dataset Tweets;")
    text = cat.dump()
    assert "F -> Tweets policy=Monitored connected" in text
    snap = cat.snapshot()
    run(cat, "disconnect feed F from dataset Tweets;")
    assert snap != cat
    assert "connected" in snap.dump()


STATEMENTS = [
    "create type T2 as open { id: string };",
    "create dataset D2(T2) primary key id on nodegroup (A);",
    "create index ix on D2(id);",
    "create secondary feed S from feed F apply function identity;",
    "create secondary feed S3 from feed S apply function addHashTags;",
    'create policy P1 from policy Monitored set (("collect.statistics","false"));',
    "connect feed F to dataset Tweets;",
    "connect feed S to dataset Other using policy Basic;",
    "disconnect feed F from dataset Tweets;",
    "connect feed F to dataset Tweets using policy FaultTolerant;",
    "connect feed S3 to dataset Tweets;",
]


@given(st.lists(st.sampled_from(STATEMENTS), max_size=25))
def test_replay_determinism(seq):
    """Replaying the accepted statements reproduces the same catalog."""
    cat = catalog()
    accepted = []
    for text in seq:
        try:
            run(cat, text)
        except CatalogError:
            continue
        accepted.append(text)
    replay = catalog()
    for text in accepted:
        run(replay, text)
    assert replay == cat
    assert replay.dump() == cat.dump()
