"""Frames, feed joints and the MetaFeed wrapper around core operators."""
from __future__ import annotations

import json
import os
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable

from .storage import DatasetPartition, hash_partition  # noqa: F401  (re-exported)

FRAME_CAPACITY = 32 * 1024
FRAME_HEADER = 12  # sequence number (8) + record count (4)
RECORD_PREFIX = 4


def encode_record(data: dict) -> bytes:
    return json.dumps(data, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class Record:
    """One feed record plus its encoded size in bytes."""

    __slots__ = ("data", "size")

    def __init__(self, data: dict, size: int | None = None):
        self.data = data
        self.size = len(encode_record(data)) if size is None else size

    def __repr__(self) -> str:
        return f"Record({self.data!r})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Record) and other.data == self.data


class Frame:
    __slots__ = ("records", "seq", "nbytes")

    def __init__(self, records: list[Record] | None = None, seq: int = 0):
        self.records = records if records is not None else []
        self.seq = seq
        self.nbytes = FRAME_HEADER + sum(r.size + RECORD_PREFIX for r in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def fits(self, record: Record, capacity: int) -> bool:
        return self.nbytes + record.size + RECORD_PREFIX <= capacity

    def append(self, record: Record) -> None:
        self.records.append(record)
        self.nbytes += record.size + RECORD_PREFIX

    def extend(self, other: "Frame") -> None:
        self.records.extend(other.records)
        self.nbytes += other.nbytes - FRAME_HEADER

    def subset(self, start: int) -> "Frame":
        return Frame(self.records[start:], self.seq)

    def encode(self) -> bytes:
        parts = [struct.pack(">QI", self.seq, len(self.records))]
        for rec in self.records:
            raw = encode_record(rec.data)
            parts.append(struct.pack(">I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        seq, count = struct.unpack_from(">QI", data, 0)
        off = FRAME_HEADER
        records = []
        for _ in range(count):
            (n,) = struct.unpack_from(">I", data, off)
            off += RECORD_PREFIX
            raw = data[off:off + n]
            off += n
            records.append(Record(json.loads(raw.decode("utf-8")), n))
        if off != len(data):
            raise ValueError("trailing bytes after frame")
        return cls(records, seq)

    def __repr__(self) -> str:
        return f"Frame(seq={self.seq}, records={len(self.records)}, bytes={self.nbytes})"


def max_record_bytes(capacity: int = FRAME_CAPACITY) -> int:
    return capacity - FRAME_HEADER - RECORD_PREFIX


def pack(records: Iterable[Record], capacity: int = FRAME_CAPACITY, seq: int = 0) -> list[Frame]:
    """Pack records in order into frames no larger than ``capacity``."""
    frames: list[Frame] = []
    cur: Frame | None = None
    for rec in records:
        if rec.size > max_record_bytes(capacity):
            raise ValueError(f"record of {rec.size} bytes exceeds the frame capacity")
        if cur is None or not cur.fits(rec, capacity):
            cur = Frame([], seq + len(frames))
            frames.append(cur)
        cur.append(rec)
    return frames


class FrameQueue:
    """An operator input queue made of fixed-size buffers.

    Arriving frames are coalesced into the tail buffer when they fit, so
    the queue holds ``len(self)`` buffers for ``self.records`` records.
    """

    def __init__(self, capacity: int = FRAME_CAPACITY):
        self.capacity = capacity
        self.frames: deque[Frame] = deque()
        self.records = 0

    def buffers_needed(self, frame: Frame) -> int:
        if self.frames and self.frames[-1].nbytes + frame.nbytes - FRAME_HEADER <= self.capacity:
            return 0
        return 1

    def put(self, frame: Frame) -> None:
        if self.buffers_needed(frame) == 0:
            self.frames[-1].extend(frame)
        else:
            self.frames.append(Frame(list(frame.records), frame.seq))
        self.records += len(frame)

    def put_front(self, frames: list[Frame]) -> None:
        for frame in reversed(frames):
            self.frames.appendleft(frame)
            self.records += len(frame)

    def pop(self) -> Frame:
        frame = self.frames.popleft()
        self.records -= len(frame)
        return frame

    def drain(self) -> list[Frame]:
        frames = list(self.frames)
        self.frames.clear()
        self.records = 0
        return frames

    def __len__(self) -> int:
        return len(self.frames)

    def __bool__(self) -> bool:
        return bool(self.frames)


# ------------------------------------------------------------------ joints

class FeedJoint:
    """A subscribable tap on a pipeline edge.

    Every published frame is queued once per current subscriber and held
    until the last of them acknowledges it.  ``on_release`` is called with
    the frame at that point so the owner can return its buffer.
    """

    def __init__(self, joint_id: str, feeds: Iterable[str], node: str,
                 on_release: Callable[[Frame], None] | None = None):
        self.joint_id = joint_id
        self.feeds = list(feeds)
        self.node = node
        self.on_release = on_release
        self.queues: dict[Hashable, deque[Frame]] = {}
        self._refs: dict[int, int] = {}
        self._frames: dict[int, Frame] = {}
        self.published = 0
        self.dropped = 0

    @property
    def feed(self) -> str:
        return self.feeds[-1]

    @property
    def subscribers(self) -> list[Hashable]:
        return list(self.queues)

    @property
    def occupancy(self) -> int:
        """Distinct frames currently held."""
        return len(self._frames)

    def subscribe(self, key: Hashable) -> None:
        if key in self.queues:
            return
        self.queues[key] = deque()

    def unsubscribe(self, key: Hashable) -> None:
        try:
            queue = self.queues.pop(key)
        except KeyError:
            raise KeyError(f"unknown subscriber {key!r} on joint {self.joint_id}") from None
        for frame in queue:
            self._unref(frame)

    def publish(self, frame: Frame) -> bool:
        """Queue ``frame`` for every subscriber; False when there are none."""
        self.published += 1
        if not self.queues:
            self.dropped += 1
            return False
        fid = id(frame)
        self._frames[fid] = frame
        self._refs[fid] = len(self.queues)
        for queue in self.queues.values():
            queue.append(frame)
        return True

    def pending(self, key: Hashable) -> int:
        return len(self.queues[key])

    def pending_records(self, key: Hashable) -> int:
        return sum(len(f) for f in self.queues[key])

    def peek(self, key: Hashable) -> Frame | None:
        queue = self.queues[key]
        return queue[0] if queue else None

    def ack(self, key: Hashable) -> Frame:
        frame = self.queues[key].popleft()
        self._unref(frame)
        return frame

    def consume(self, key: Hashable) -> list[Frame]:
        out = []
        while self.queues[key]:
            out.append(self.ack(key))
        return out

    def _unref(self, frame: Frame) -> None:
        fid = id(frame)
        self._refs[fid] -= 1
        if self._refs[fid] == 0:
            del self._refs[fid]
            del self._frames[fid]
            if self.on_release is not None:
                self.on_release(frame)

    def held_frames(self) -> list[Frame]:
        return list(self._frames.values())

    def clear(self) -> list[Frame]:
        """Drop everything (node loss or teardown); returns the frames dropped."""
        frames = self.held_frames()
        for queue in self.queues.values():
            queue.clear()
        self._refs.clear()
        self._frames.clear()
        return frames


# ---------------------------------------------------------- operator state

@dataclass(eq=False)
class OperatorInstance:
    role: str  # intake | compute | store
    node: str
    feed: str
    core: str  # descriptor of the wrapped operator, e.g. "udf:addHashTags"
    stage_index: int = 0
    partition: int = 0
    iid: int = 0
    lifecycle: str = "live"  # live | dead | zombie
    skip_count: int = 0
    saved_state: Any = None
    # runtime plumbing used by the engine
    input: FrameQueue = field(default_factory=FrameQueue)
    pending: deque = field(default_factory=deque)
    credit: float = 0.0
    spill: Any = None
    handle: Any = None
    slot: Any = None

    @property
    def name(self) -> str:
        return f"{self.feed}/{self.role}{self.stage_index}.{self.partition}@{self.node}"


@dataclass
class ErrorEntry:
    time: float
    feed: str
    role: str
    node: str
    error: str
    record: dict


class ErrorLog:
    """Per-feed error log; one tab-separated line per skipped record."""

    def __init__(self, root: str | None = None, sink: Callable[[ErrorEntry], None] | None = None):
        self.root = root
        self.sink = sink
        self.entries: list[ErrorEntry] = []

    def path(self, feed: str) -> str | None:
        if self.root is None:
            return None
        return os.path.join(self.root, "logs", f"{feed}.errors.log")

    def append(self, entry: ErrorEntry, persist: bool = False) -> None:
        self.entries.append(entry)
        path = self.path(entry.feed)
        if path is not None:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(f"{entry.time:.2f}\t{entry.feed}\t{entry.role}\t{entry.node}\t"
                         f"{entry.error}\t{json.dumps(entry.record, sort_keys=True)}\n")
        if persist and self.sink is not None:
            self.sink(entry)

    def count(self, feed: str | None = None) -> int:
        if feed is None:
            return len(self.entries)
        return sum(1 for e in self.entries if e.feed == feed)


# --------------------------------------------------------------- MetaFeed

@dataclass
class MetaResult:
    outputs: list[Record]
    failures: int = 0
    filtered: int = 0
    terminated: bool = False
    reason: str | None = None


def meta_process_frame(instance: OperatorInstance, frame: Frame, policy,
                       core: Callable[[dict], dict | None],
                       on_error: Callable[[OperatorInstance, Record, BaseException], None]
                       | None = None, fatal: tuple = ()) -> MetaResult:
    """Apply ``core`` record-wise inside the soft-failure sandbox.

    On an exception at record ``i`` the frame is sliced to the subset
    ``i+1..end`` and processing continues on that subset.  The instance's
    consecutive-skip counter resets on every successful record.  Exception
    types listed in ``fatal`` are engine bugs and propagate unchanged.
    """
    result = MetaResult([])
    current = frame
    while current.records:
        records = current.records
        i = 0
        try:
            for i, rec in enumerate(records):
                out = core(rec.data)
                instance.skip_count = 0
                if out is None:
                    result.filtered += 1
                elif out is rec.data:
                    result.outputs.append(rec)
                else:
                    result.outputs.append(Record(out))
            break
        except Exception as exc:  # the sandbox catches anything the core raises
            if fatal and isinstance(exc, fatal):
                raise
            result.failures += 1
            instance.skip_count += 1
            if on_error is not None:
                on_error(instance, records[i], exc)
            bound = policy.max_consecutive_skipped
            if not policy.recover_soft_failure:
                result.terminated = True
                result.reason = f"soft failure: {exc}"
                return result
            if bound is not None and instance.skip_count > bound:
                result.terminated = True
                result.reason = f"more than {bound} consecutive records skipped"
                return result
            current = current.subset(i + 1)
    return result


def store_apply(instance: OperatorInstance, frame: Frame, partition: DatasetPartition,
                check: Callable[[dict], None] | None = None) -> int:
    """Insert every record of ``frame`` into ``partition``; returns the count."""
    n = 0
    for rec in frame.records:
        if check is not None:
            check(rec.data)
        partition.insert(rec.data)
        n += 1
    return n
