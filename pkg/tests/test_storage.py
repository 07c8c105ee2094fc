import json

import pytest
from hypothesis import given, strategies as st

from feedmesh.storage import DatasetPartition, PartitionRoutingError, Storage, hash_partition

keys = st.one_of(st.text(max_size=20), st.integers(-10**9, 10**9))


@given(keys, st.integers(1, 16))
def test_hash_partition_in_range_and_stable(key, n):
    p = hash_partition(key, n)
    assert 0 <= p < n
    assert hash_partition(key, n) == p


def test_hash_partition_known_values():
    # CRC-32 of the canonical JSON encoding, independent of interpreter salt
    import zlib
    for key in ["a", "tweet-1", 42]:
        expect = zlib.crc32(json.dumps(key).encode()) % 4
        assert hash_partition(key, 4) == expect


def test_hash_partition_rejects_zero():
    with pytest.raises(ValueError):
        hash_partition("x", 0)


def test_insert_routes_to_owning_partition():
    s = Storage()
    s.create("D", "id", ["A", "B", "C"])
    for i in range(100):
        part = s.insert("D", {"id": f"k{i}"})
        assert part.index == hash_partition(f"k{i}", 3)
    assert s.count("D") == 100
    assert s.keys("D") == {f"k{i}" for i in range(100)}


def test_wrong_partition_raises():
    part = DatasetPartition("D", 0, "A", 2, "id")
    key = next(k for k in (f"x{i}" for i in range(50)) if hash_partition(k, 2) == 1)
    with pytest.raises(PartitionRoutingError):
        part.insert({"id": key})


def test_upsert_replaces_and_updates_secondary():
    s = Storage()
    s.create("D", "id", ["A"], index_field="user")
    s.insert("D", {"id": 1, "user": "u1"})
    s.insert("D", {"id": 1, "user": "u2"})
    assert s.count("D") == 1
    assert s.lookup("D", "u1") == []
    assert s.lookup("D", "u2") == [{"id": 1, "user": "u2"}]


def test_missing_index_field_is_skipped():
    s = Storage()
    s.create("D", "id", ["A"], index_field="user")
    s.insert("D", {"id": 1})
    s.insert("D", {"id": 2, "user": None})
    part = s.partitions("D")[0]
    assert part.skipped_secondary == 2
    assert part.secondary_size() == 0


def test_lookup_without_index():
    s = Storage()
    s.create("D", "id", ["A"])
    with pytest.raises(KeyError):
        s.lookup("D", "x")


def test_unknown_dataset():
    with pytest.raises(KeyError):
        Storage().partitions("nope")


def test_set_index_after_load():
    s = Storage()
    s.create("D", "id", ["A", "B"])
    for i in range(20):
        s.insert("D", {"id": i, "g": i % 3})
    s.set_index("D", "g")
    assert sorted(r["id"] for r in s.lookup("D", 0)) == [0, 3, 6, 9, 12, 15, 18]


def test_snapshot(tmp_path):
    s = Storage()
    s.create("D", "id", ["A", "B"])
    for i in range(10):
        s.insert("D", {"id": i})
    paths = s.snapshot(str(tmp_path))
    assert len(paths) == 2
    rows = [json.loads(line) for p in paths for line in open(p)]
    assert sorted(r["id"] for r in rows) == list(range(10))


ops = st.lists(st.tuples(st.integers(0, 30), st.one_of(st.none(), st.sampled_from(["a", "b", "c"]),
                                                        st.lists(st.integers(0, 2), max_size=2))),
               max_size=80)


@given(ops)
def test_secondary_matches_rebuild(seq):
    s = Storage()
    s.create("D", "id", ["A", "B", "C"], index_field="tag")
    for key, tag in seq:
        rec = {"id": key}
        if tag is not None:
            rec["tag"] = tag
        s.insert("D", rec)
    for part in s.partitions("D"):
        assert part.secondary == part.rebuild_secondary()
