"""Failure detection, fault scripts, and recovery placement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable

log = logging.getLogger(__name__)

MASTER = "master"


class FaultScriptError(ValueError):
    pass


class RecoveryError(RuntimeError):
    pass


class HeartbeatMonitor:
    """Master-side view of node liveness.

    Live nodes beat every ``period`` ticks; a node whose last beat is
    ``timeout`` periods old is declared failed, once.
    """

    def __init__(self, nodes: Iterable[str], period: int = 10, timeout: int = 3,
                 master: str = MASTER):
        self.period = period
        self.timeout = timeout
        self.master = master
        self.last: dict[str, int] = {n: 0 for n in nodes}
        self.declared: set[str] = set()

    def step(self, now: int, alive: Iterable[str]) -> list[str]:
        """Record beats from ``alive`` at beat ticks; return newly failed nodes."""
        if now % self.period:
            return []
        for n in alive:
            if n in self.last:
                self.last[n] = now
        failed = []
        for n in sorted(self.last):
            if n in self.declared:
                continue
            if now - self.last[n] >= self.timeout * self.period:
                self.declared.add(n)
                failed.append(n)
        return failed

    def rejoin(self, node: str, now: int) -> None:
        self.declared.discard(node)
        self.last[node] = now


@dataclass(frozen=True)
class FaultEvent:
    tick: int
    kind: str  # kill-node | revive-node | poison-udf
    args: tuple[str, ...]

    def __str__(self) -> str:
        return f"{self.tick} {self.kind} {' '.join(self.args)}"


_ARITY = {"kill-node": 1, "revive-node": 1, "poison-udf": 2}


@dataclass
class FaultScript:
    events: list[FaultEvent] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str) -> "FaultScript":
        events = []
        last = -1
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                tick = int(parts[0])
            except ValueError:
                raise FaultScriptError(f"line {lineno}: bad tick {parts[0]!r}") from None
            if len(parts) < 2 or parts[1] not in _ARITY:
                raise FaultScriptError(f"line {lineno}: unknown event in {line!r}")
            kind = parts[1]
            args = tuple(parts[2:])
            if len(args) != _ARITY[kind]:
                raise FaultScriptError(f"line {lineno}: {kind} takes {_ARITY[kind]} argument(s)")
            if kind == "poison-udf":
                try:
                    if int(args[1]) <= 0:
                        raise ValueError
                except ValueError:
                    raise FaultScriptError(f"line {lineno}: poison-udf needs a positive n") from None
            if kind in ("kill-node", "revive-node") and args[0] == MASTER:
                raise FaultScriptError(f"line {lineno}: the master node cannot be scripted")
            if tick < last:
                raise FaultScriptError(f"line {lineno}: ticks must be non-decreasing")
            last = tick
            events.append(FaultEvent(tick, kind, args))
        return cls(events)

    def due(self, tick: int) -> list[FaultEvent]:
        return [e for e in self.events if e.tick == tick]

    def __len__(self) -> int:
        return len(self.events)


def classify(role: str, node: str, failed: str, joint_has_other_live_subscribers: bool) -> str:
    """Fate of one instance of an affected pipeline: dead, live or zombie."""
    if node == failed:
        return "dead"
    if role == "intake" or joint_has_other_live_subscribers:
        return "live"
    return "zombie"


@dataclass
class SlotNeed:
    """One instance that needs a successor."""

    key: Hashable
    role: str
    status: str  # dead | zombie
    node: str  # node of the predecessor
    colocate_with: Hashable | None = None  # a slot key, or None
    anchor_node: str | None = None  # node of that slot when it is not being re-placed


def plan_recovery(needs: list[SlotNeed], live: Iterable[str], load: dict[str, int]) -> dict:
    """Place successors.

    Zombie successors stay with their zombie.  A dead head follows the
    joint it subscribes to.  Any other dead instance goes to an idle node
    (no instances) with the lowest id, else the least-loaded node.
    ``needs`` must list producers before the heads that follow them.
    """
    live = sorted(live)
    if not live:
        raise RecoveryError("no live node can host the recovered pipeline")
    load = {n: load.get(n, 0) for n in live}
    out: dict = {}
    for need in needs:
        if need.status == "zombie":
            if need.node not in load:
                raise RecoveryError(f"zombie host {need.node} is not live")
            out[need.key] = need.node
            continue
        if need.colocate_with is not None:
            node = out.get(need.colocate_with, need.anchor_node)
            if node is not None and node in load:
                out[need.key] = node
                load[node] += 1
                continue
        node = min(live, key=lambda n: (load[n], n))
        out[need.key] = node
        load[node] += 1
    return out
