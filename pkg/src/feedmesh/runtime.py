"""Per-node buffer budgets, Feed Managers, spill files and the leader's global view."""
from __future__ import annotations

import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable

from .dataflow import FRAME_CAPACITY, Frame

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 64
DEFAULT_GRANT_CAP = 8


class BudgetViolation(AssertionError):
    pass


class FeedMemoryManager:
    """Grants fixed-size buffers against a per-node budget.

    Thread-safe so the real-mode reader threads and the tick loop may share
    one instance.  ``check`` runs after every grant and raises if the
    allocated count ever exceeds the budget.
    """

    def __init__(self, node: str, budget: int = DEFAULT_BUDGET, grant_cap: int = DEFAULT_GRANT_CAP,
                 buffer_size: int = FRAME_CAPACITY):
        if budget <= 0 or grant_cap <= 0:
            raise ValueError("budget and grant cap must be positive")
        self.node = node
        self.budget = budget
        self.grant_cap = grant_cap
        self.buffer_size = buffer_size
        self.allocated = 0
        self.held: dict[Hashable, int] = {}
        self.peak = 0
        self.grants = 0
        self.denials = 0
        self._lock = threading.Lock()

    @property
    def available(self) -> int:
        return self.budget - self.allocated

    def request(self, owner: Hashable, n: int) -> int:
        """Grant all ``n`` buffers (``n`` must not exceed the cap) or none."""
        if n <= 0:
            return 0
        n = min(n, self.grant_cap)
        with self._lock:
            if self.allocated + n > self.budget:
                self.denials += 1
                return 0
            self.allocated += n
            self.held[owner] = self.held.get(owner, 0) + n
            self.grants += 1
            self.peak = max(self.peak, self.allocated)
            self.check()
            return n

    def release(self, owner: Hashable, n: int = 1) -> None:
        if n <= 0:
            return
        with self._lock:
            have = self.held.get(owner, 0)
            if n > have:
                raise BudgetViolation(f"{owner!r} releases {n} buffers but holds {have}")
            self.allocated -= n
            if have == n:
                del self.held[owner]
            else:
                self.held[owner] = have - n

    def release_all(self, owner: Hashable) -> int:
        with self._lock:
            n = self.held.pop(owner, 0)
            self.allocated -= n
            return n

    def transfer(self, src: Hashable, dst: Hashable, n: int) -> None:
        with self._lock:
            have = self.held.get(src, 0)
            if n > have:
                raise BudgetViolation(f"{src!r} transfers {n} buffers but holds {have}")
            if n == 0:
                return
            if have == n:
                del self.held[src]
            else:
                self.held[src] = have - n
            if n:
                self.held[dst] = self.held.get(dst, 0) + n

    def holding(self, owner: Hashable) -> int:
        return self.held.get(owner, 0)

    def check(self) -> None:
        if self.allocated > self.budget:
            raise BudgetViolation(f"node {self.node}: {self.allocated} buffers allocated, "
                                  f"budget {self.budget}")


class SpillFile:
    """Append-only file of length-prefixed encoded frames, replayed in order."""

    def __init__(self, path: str):
        self.path = path
        self._read_offset = 0
        self._write_offset = 0
        self.frames = 0
        self.records = 0
        self.bytes_written = 0
        self._sizes: list[int] = []  # record count of each unread frame
        if os.path.exists(path):
            os.remove(path)  # leftovers from an earlier run are not ours

    @property
    def pending_bytes(self) -> int:
        return self._write_offset - self._read_offset

    def append(self, frame: Frame) -> int:
        payload = frame.encode()
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        with open(self.path, "ab") as fh:
            fh.write(struct.pack(">I", len(payload)))
            fh.write(payload)
        n = len(payload) + 4
        self._write_offset += n
        self.bytes_written += n
        self.frames += 1
        self.records += len(frame)
        self._sizes.append(len(frame))
        return n

    def peek_records(self) -> int:
        return self._sizes[0] if self._sizes else 0

    def read_next(self) -> Frame | None:
        if self.frames == 0:
            return None
        with open(self.path, "rb") as fh:
            fh.seek(self._read_offset)
            (n,) = struct.unpack(">I", fh.read(4))
            frame = Frame.decode(fh.read(n))
        self._read_offset += n + 4
        self.frames -= 1
        self.records -= len(frame)
        self._sizes.pop(0)
        if self.frames == 0:
            self.delete()
        return frame

    def delete(self) -> None:
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass
        self._read_offset = self._write_offset = 0
        self.frames = self.records = 0
        self._sizes.clear()

    def __len__(self) -> int:
        return self.frames


@dataclass
class SpillLedger:
    bytes_spilled: int = 0
    discarded: int = 0


@dataclass
class Escalation:
    tick: int
    node: str
    feed: str
    instance: str


@dataclass
class SavedState:
    """Pending frames of a zombie, held in Feed Manager memory until claimed."""

    key: tuple  # (feed, dataset, role, stage index, partition)
    node: str
    input_frames: list[Frame] = field(default_factory=list)
    pending: list = field(default_factory=list)
    spill: SpillFile | None = None
    skip_count: int = 0
    claimed: bool = False

    @property
    def records(self) -> int:
        n = sum(len(f) for f in self.input_frames)
        n += sum(len(frame) for _, frame in self.pending)
        if self.spill is not None:
            n += self.spill.records
        return n


class FeedManager:
    """Node-local control agent: registration, stalled handling, saved state."""

    def __init__(self, node: str, fmm: FeedMemoryManager, spill_root: str | None = None):
        self.node = node
        self.fmm = fmm
        self.spill_root = spill_root
        self.registered: dict[int, Any] = {}
        self.stalled: set[int] = set()
        self.ledger: dict[int, SpillLedger] = {}
        self.saved: dict[tuple, SavedState] = {}
        self.is_leader = False
        self.stall_events = 0
        self.spill_failures = 0

    def register(self, instance) -> None:
        self.registered[instance.iid] = instance
        self.ledger.setdefault(instance.iid, SpillLedger())

    def unregister(self, instance) -> None:
        self.registered.pop(instance.iid, None)
        self.stalled.discard(instance.iid)

    def request(self, instance, n: int) -> int:
        granted = self.fmm.request(instance.iid, n)
        if granted < n:
            if granted:
                self.fmm.release(instance.iid, granted)
            self.mark_stalled(instance)
            return 0
        return granted

    def mark_stalled(self, instance) -> bool:
        if instance.iid in self.stalled:
            return False
        self.stalled.add(instance.iid)
        self.stall_events += 1
        return True

    def unstall(self, instance) -> None:
        self.stalled.discard(instance.iid)

    def spill_path(self, instance) -> str:
        root = self.spill_root or "."
        return os.path.join(root, "spill", instance.feed, self.node, f"{instance.iid}.bin")

    def handle_stalled(self, instance, frame: Frame, policy) -> str:
        """Local resolution for an overflow frame: 'spill', 'discard' or 'escalate'."""
        ledger = self.ledger.setdefault(instance.iid, SpillLedger())
        if policy.excess_records_spill:
            limit = policy.max_spill_bytes
            if limit is None or ledger.bytes_spilled < limit:
                try:
                    if instance.spill is None:
                        instance.spill = SpillFile(self.spill_path(instance))
                    ledger.bytes_spilled += instance.spill.append(frame)
                    return "spill"
                except OSError as exc:
                    self.spill_failures += 1
                    log.warning("spill write failed on %s: %s", self.node, exc)
        if policy.excess_records_discard:
            ledger.discarded += len(frame)
            return "discard"
        return "escalate"

    def save(self, state: SavedState) -> None:
        self.saved[state.key] = state

    def claim(self, key: tuple) -> SavedState | None:
        state = self.saved.pop(key, None)
        if state is not None:
            if state.claimed:
                raise AssertionError(f"saved state {key} claimed twice")
            state.claimed = True
        return state


def elect_leader(live_nodes: Iterable[str]) -> str:
    nodes = sorted(live_nodes)
    if not nodes:
        raise ValueError("no live node to elect")
    return nodes[0]


@dataclass
class FeedReport:
    node: str
    window: int
    inflow: dict[str, float] = field(default_factory=dict)
    outflow: dict[str, float] = field(default_factory=dict)
    cpu: float = 0.0
    disk: float = 0.0
    stalled: list[tuple[str, str]] = field(default_factory=list)  # (feed, instance)


@dataclass
class GlobalView:
    window: int
    leader: str
    inflow: dict[str, float] = field(default_factory=dict)
    outflow: dict[str, float] = field(default_factory=dict)
    stalled: list[tuple[str, str, str]] = field(default_factory=list)  # (node, feed, instance)
    suspects: list[str] = field(default_factory=list)


def collect_reports(leader: str, window: int, reports: dict[str, FeedReport | None],
                    stats_feeds: set[str] | None = None) -> GlobalView:
    """Aggregate node reports; feeds outside ``stats_feeds`` are left out of the rate table."""
    view = GlobalView(window, leader)
    for node in sorted(reports):
        rep = reports[node]
        if rep is None:
            view.suspects.append(node)
            continue
        for feed, rate in rep.inflow.items():
            if stats_feeds is None or feed in stats_feeds:
                view.inflow[feed] = view.inflow.get(feed, 0.0) + rate
        for feed, rate in rep.outflow.items():
            if stats_feeds is None or feed in stats_feeds:
                view.outflow[feed] = view.outflow.get(feed, 0.0) + rate
        for feed, inst in rep.stalled:
            view.stalled.append((node, feed, inst))
    return view


class SuperFeedManager:
    """The elected leader: keeps the latest global view and escalation log."""

    def __init__(self, leader: str):
        self.leader = leader
        self.escalations: list[Escalation] = []
        self.views: list[GlobalView] = []

    def escalate(self, event: Escalation) -> None:
        self.escalations.append(event)

    def absorb(self, view: GlobalView) -> None:
        self.views.append(view)

    @property
    def latest(self) -> GlobalView | None:
        return self.views[-1] if self.views else None
