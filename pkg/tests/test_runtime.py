import pytest
from hypothesis import given, strategies as st

from feedmesh.catalog import IngestionPolicy
from feedmesh.dataflow import Frame, Record
from feedmesh.runtime import (BudgetViolation, FeedManager, FeedMemoryManager, FeedReport,
                              SavedState, SpillFile, collect_reports, elect_leader)


def frame(n, seq=0):
    return Frame([Record({"i": i}) for i in range(n)], seq)


def test_request_is_all_or_nothing():
    fmm = FeedMemoryManager("A", budget=10, grant_cap=8)
    assert fmm.request("a", 8) == 8
    assert fmm.request("b", 4) == 0
    assert fmm.denials == 1
    assert fmm.request("b", 2) == 2
    assert fmm.available == 0


def test_grant_cap_limits_request():
    fmm = FeedMemoryManager("A", budget=64, grant_cap=8)
    assert fmm.request("a", 20) == 8


def test_release_more_than_held():
    fmm = FeedMemoryManager("A", budget=4)
    fmm.request("a", 2)
    with pytest.raises(BudgetViolation):
        fmm.release("a", 3)


def test_transfer_moves_ownership():
    fmm = FeedMemoryManager("A", budget=4)
    fmm.request("a", 3)
    fmm.transfer("a", "b", 2)
    assert fmm.holding("a") == 1 and fmm.holding("b") == 2
    fmm.transfer("a", "b", 0)
    assert fmm.allocated == 3
    with pytest.raises(BudgetViolation):
        fmm.transfer("a", "b", 5)


def test_invalid_budget():
    with pytest.raises(ValueError):
        FeedMemoryManager("A", budget=0)


@given(st.integers(1, 40), st.integers(1, 8),
       st.lists(st.tuples(st.sampled_from("req rel all xfer".split()), st.sampled_from("abcd"),
                          st.sampled_from("abcd"), st.integers(0, 10)), max_size=120))
def test_fmm_never_exceeds_budget(budget, cap, ops):
    fmm = FeedMemoryManager("A", budget=budget, grant_cap=cap)
    for op, x, y, n in ops:
        if op == "req":
            got = fmm.request(x, n)
            assert got in (0, min(n, cap))
        elif op == "rel":
            fmm.release(x, min(n, fmm.holding(x)))
        elif op == "all":
            fmm.release_all(x)
        else:
            fmm.transfer(x, y, min(n, fmm.holding(x)))
        assert 0 <= fmm.allocated <= budget
        assert sum(fmm.held.values()) == fmm.allocated
        assert fmm.peak <= budget


def test_spill_file_fifo(tmp_path):
    path = tmp_path / "s" / "x.bin"
    sf = SpillFile(str(path))
    sizes = [3, 1, 5]
    for k, n in enumerate(sizes):
        sf.append(frame(n, k))
    assert sf.records == 9 and len(sf) == 3
    assert sf.peek_records() == 3
    out = [sf.read_next() for _ in sizes]
    assert [f.seq for f in out] == [0, 1, 2]
    assert [len(f) for f in out] == sizes
    assert sf.read_next() is None
    assert not path.exists()


def test_spill_file_discards_stale(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"junk")
    sf = SpillFile(str(path))
    sf.append(frame(2))
    assert len(sf.read_next()) == 2


class Inst:
    def __init__(self, iid, feed="F"):
        self.iid, self.feed, self.spill = iid, feed, None


def test_handle_stalled_spill_then_discard(tmp_path):
    fm = FeedManager("A", FeedMemoryManager("A", 4), spill_root=str(tmp_path))
    inst = Inst(1)
    fm.register(inst)
    pol = IngestionPolicy("P", excess_records_spill=True, excess_records_discard=True,
                          max_spill_bytes=1)
    assert fm.handle_stalled(inst, frame(3), pol) == "spill"
    assert fm.handle_stalled(inst, frame(3), pol) == "discard"
    assert fm.ledger[1].discarded == 3
    assert inst.spill.records == 3


def test_handle_stalled_escalates_without_options():
    fm = FeedManager("A", FeedMemoryManager("A", 4))
    pol = IngestionPolicy("P", excess_records_spill=False, excess_records_discard=False)
    assert fm.handle_stalled(Inst(2), frame(1), pol) == "escalate"


def test_request_failure_marks_stalled_once():
    fm = FeedManager("A", FeedMemoryManager("A", 2))
    inst = Inst(1)
    assert fm.request(inst, 4) == 0 or fm.fmm.allocated <= 2
    fm.fmm.request("other", 2)
    assert fm.request(inst, 1) == 0
    assert 1 in fm.stalled
    assert not fm.mark_stalled(inst)


def test_saved_state_claimed_once():
    fm = FeedManager("A", FeedMemoryManager("A", 2))
    st_ = SavedState(("F", "D", "compute", 0, 0), "A", [frame(2)], [(None, frame(3))])
    assert st_.records == 5
    fm.save(st_)
    assert fm.claim(st_.key) is st_
    assert fm.claim(st_.key) is None


def test_elect_leader_lowest_id():
    assert elect_leader(["C", "B", "D"]) == "B"
    with pytest.raises(ValueError):
        elect_leader([])


def test_collect_reports_marks_missing_as_suspect():
    reps = {"A": FeedReport("A", 1, {"F": 10.0, "G": 1.0}, {"F": 8.0}, stalled=[("F", "i1")]),
            "B": FeedReport("B", 1, {"F": 5.0}),
            "C": None}
    view = collect_reports("A", 1, reps, stats_feeds={"F"})
    assert view.inflow == {"F": 15.0}
    assert view.outflow == {"F": 8.0}
    assert view.suspects == ["C"]
    assert view.stalled == [("A", "F", "i1")]
