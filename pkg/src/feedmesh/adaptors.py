"""Feed adaptors: descriptors, instance handles, transports and the tweet generator."""
from __future__ import annotations

import enum
import json
import logging
import math
import queue
import random
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Callable, Iterable

from .dataflow import Record, max_record_bytes

log = logging.getLogger(__name__)

DEFAULT_HANDOFF = 4096  # records held in one instance's hand-off queue


class AdaptorError(ValueError):
    pass


class SourceStatus(enum.Enum):
    END = "end-of-source"
    GAP = "transient-gap"
    FAILED = "failed-terminal"


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff: float = 5  # ticks before the second attempt; doubles afterwards


SIM_RETRY = RetryPolicy(3, 5)
REAL_RETRY = RetryPolicy(3, 50)  # 500 ms at 10 ms per tick


def _split_list(value: Any) -> list[str]:
    return [part.strip() for part in str(value).split(",") if part.strip()]


@dataclass(frozen=True)
class AdaptorDescriptor:
    name: str
    mode: str  # push | pull
    instance_endpoints: tuple[str, ...]
    config: tuple[tuple[str, Any], ...] = ()
    locations: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.instance_endpoints:
            raise AdaptorError(f"adaptor {self.name!r} declares no endpoints")
        if self.mode not in ("push", "pull"):
            raise AdaptorError(f"unknown adaptor mode {self.mode!r}")
        if self.mode == "pull" and self.interval is None:
            raise AdaptorError(f"pull adaptor {self.name!r} needs an interval")

    @property
    def interval(self) -> float | None:
        value = dict(self.config).get("interval")
        return None if value is None else float(value)

    @property
    def cardinality(self) -> int:
        return len(self.instance_endpoints)


_ENDPOINT_KEYS = ("datasource", "sockets", "endpoints", "topics", "query")


def describe(spec) -> AdaptorDescriptor:
    """Build a descriptor from a catalog ``AdaptorSpec``."""
    cfg = spec.config_map
    endpoints: list[str] = []
    for key in _ENDPOINT_KEYS:
        if key in cfg:
            endpoints = _split_list(cfg[key])
            break
    mode = "pull" if str(cfg.get("api", "push")).lower() == "pull" else "push"
    locations = tuple(_split_list(cfg["locations"])) if "locations" in cfg else None
    if locations is not None and len(locations) != len(endpoints):
        raise AdaptorError(f"adaptor {spec.name!r}: {len(endpoints)} endpoints but "
                           f"{len(locations)} locations")
    return AdaptorDescriptor(spec.name, mode, tuple(endpoints), tuple(spec.config), locations)


# ----------------------------------------------------------------- generator

_WORDS = ("good bad phone camera battery screen signal network price service update app "
          "love hate today tomorrow city game music movie traffic weather coffee deal "
          "launch review fast slow new old").split()
_TOPICS = ("iphone android samsung verizon att tmobile sprint election sports music "
           "movies nba nfl weather tech news").split()
_LANGS = ("en", "en", "en", "es", "fr", "de")
_EPOCH = datetime(2014, 1, 1)


class TweetGenerator:
    """Deterministic synthetic tweets emitted at a steady rate.

    Record ``i`` is due at ``i / rate`` seconds after ``start``; content
    comes from one seeded RNG stream consumed strictly in order, so two
    generators with equal arguments produce byte-identical output.
    """

    def __init__(self, rate: float, duration: float, seed: int = 0, instance: int = 0,
                 start: float = 0.0):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.duration = duration
        self.seed = seed
        self.instance = instance
        self.start = start
        self.total = int(round(rate * duration))
        self.emitted = 0
        self.log: list[tuple[float, int]] = []
        self._rng = random.Random(f"tweetgen:{seed}:{instance}")

    def due(self, t: float) -> int:
        """Records that should have been emitted by time ``t`` (seconds)."""
        if t <= self.start:
            return 0
        return min(self.total, int(math.floor(self.rate * (t - self.start) + 1e-9)))

    @property
    def exhausted(self) -> bool:
        return self.emitted >= self.total

    @property
    def generated(self) -> int:
        return self.emitted

    def key(self, i: int) -> str:
        return f"{self.seed}-{self.instance}-{i}"

    def keys(self) -> list[str]:
        return [self.key(i) for i in range(self.total)]

    def record(self, i: int) -> dict:
        rng = self._rng
        words = [rng.choice(_WORDS) for _ in range(rng.randint(5, 10))]
        for _ in range(rng.randint(0, 3)):
            words.insert(rng.randrange(len(words) + 1), "#" + rng.choice(_TOPICS))
        sent = _EPOCH + timedelta(seconds=self.start + i / self.rate)
        user_no = rng.randrange(100000)
        return {
            "tweetId": self.key(i),
            "user": {
                "screen-name": f"user{user_no}",
                "lang": rng.choice(_LANGS),
                "friends_count": rng.randrange(2000),
                "statuses_count": rng.randrange(50000),
                "name": f"User {user_no}",
                "followers_count": rng.randrange(10000),
            },
            "location-lat": round(rng.uniform(24.0, 49.0), 4),
            "location-long": round(rng.uniform(-125.0, -67.0), 4),
            "send-time": sent.strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3],
            "message-text": " ".join(words),
        }

    def take(self, n: int, now: float | None = None) -> list[bytes]:
        n = min(n, self.total - self.emitted)
        lines = [json.dumps(self.record(self.emitted + j), separators=(",", ":")).encode()
                 for j in range(n)]
        self.emitted += n
        if n and now is not None:
            self.log.append((now, self.emitted))
        return lines

    def take_due(self, t: float) -> list[bytes]:
        return self.take(self.due(t) - self.emitted, now=t)


def generator_run(rate: float, duration: float, seed: int = 0, instance: int = 0) -> TweetGenerator:
    return TweetGenerator(rate, duration, seed, instance)


# ------------------------------------------------------------- transports

class SimConnection:
    """Receiver side of a simulated push connection: a bounded hand-off queue."""

    def __init__(self, endpoint: "SimEndpoint", capacity: int):
        self.endpoint = endpoint
        self.capacity = capacity
        self.buffer: deque[bytes] = deque()
        self.closed = False
        self.broken = False

    def space(self) -> int:
        return self.capacity - len(self.buffer)

    def read_lines(self, max_n: int) -> list[bytes]:
        # lines already received stay readable after the link breaks
        if self.broken and not self.buffer:
            raise ConnectionError(f"connection to {self.endpoint.address} lost")
        if not self.broken:
            self.endpoint.push()
        n = min(max_n, len(self.buffer))
        return [self.buffer.popleft() for _ in range(n)]

    def at_eof(self) -> bool:
        return not self.buffer and self.endpoint.finished

    def close(self) -> int:
        """Close; returns the number of delivered-but-unread lines dropped."""
        dropped = len(self.buffer)
        self.buffer.clear()
        self.closed = True
        self.endpoint.detach(self)
        return dropped


class SimEndpoint:
    """A simulated external source at ``address``.

    Lines produced while no receiver is attached are retained and flushed
    after the next handshake.
    """

    def __init__(self, address: str, generator: TweetGenerator | None = None,
                 lines: Iterable[bytes | str] | None = None, refuse: int = 0):
        self.address = address
        self.generator = generator
        self.outbox: deque[bytes] = deque()
        if lines is not None:
            self.outbox.extend(l.encode() if isinstance(l, str) else l for l in lines)
        self._static = generator is None
        self.generated = len(self.outbox)
        self.conn: SimConnection | None = None
        self.refuse = refuse  # refuse this many handshakes (-1 = always)
        self.handshakes = 0
        self.requests = 0
        self.delivered = 0

    @property
    def finished(self) -> bool:
        done = self._static or self.generator.exhausted
        return done and not self.outbox

    @property
    def retained(self) -> int:
        return len(self.outbox)

    def advance(self, t: float) -> None:
        if self.generator is not None:
            lines = self.generator.take_due(t)
            self.generated += len(lines)
            self.outbox.extend(lines)
        self.push()

    def push(self) -> None:
        conn = self.conn
        if conn is None or conn.broken:
            return
        n = min(conn.space(), len(self.outbox))
        for _ in range(n):
            conn.buffer.append(self.outbox.popleft())
        self.delivered += n

    def handshake(self) -> None:
        self.handshakes += 1
        if self.refuse < 0 or self.handshakes <= self.refuse:
            raise ConnectionError(f"{self.address} refused the connection")

    def attach(self, conn: SimConnection) -> None:
        self.conn = conn
        self.push()

    def detach(self, conn: SimConnection) -> None:
        if self.conn is conn:
            self.conn = None

    def break_connection(self) -> None:
        if self.conn is not None:
            self.conn.broken = True
            self.conn = None

    def request(self) -> list[bytes]:
        self.requests += 1
        out = list(self.outbox)
        self.outbox.clear()
        self.delivered += len(out)
        return out


class SimTransport:
    def __init__(self, handoff: int = DEFAULT_HANDOFF):
        self.endpoints: dict[str, SimEndpoint] = {}
        self.handoff = handoff

    def register(self, endpoint: SimEndpoint) -> SimEndpoint:
        self.endpoints[endpoint.address] = endpoint
        return endpoint

    def _lookup(self, address: str) -> SimEndpoint:
        ep = self.endpoints.get(address)
        if ep is None:
            raise ConnectionError(f"no source registered at {address}")
        return ep

    def connect(self, address: str, feed: str) -> SimConnection:
        ep = self._lookup(address)
        ep.handshake()
        conn = SimConnection(ep, self.handoff)
        ep.attach(conn)
        return conn

    def request(self, address: str, feed: str) -> list[bytes]:
        ep = self._lookup(address)
        ep.handshake()
        return ep.request()

    def advance(self, t: float) -> None:
        for ep in self.endpoints.values():
            ep.advance(t)


def _parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ConnectionError(f"bad socket address {address!r}")
    return host, int(port)


class SocketConnection:
    """Push connection over TCP; a reader thread fills a bounded queue."""

    def __init__(self, address: str, feed: str, capacity: int = DEFAULT_HANDOFF,
                 timeout: float = 2.0):
        host, port = _parse_address(address)
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.sendall(f"FEED-REQ {feed}\n".encode())
        self.sock.settimeout(None)
        self.queue: queue.Queue[bytes] = queue.Queue(maxsize=capacity)
        self.eof = False
        self.error: str | None = None
        self.closed = False
        self.thread = threading.Thread(target=self._reader, daemon=True)
        self.thread.start()

    def _reader(self) -> None:
        try:
            with self.sock.makefile("rb") as fh:
                for line in fh:
                    if self.closed:
                        return
                    line = line.rstrip(b"\r\n")
                    if line:
                        self.queue.put(line)
        except OSError as exc:
            if not self.closed:
                self.error = str(exc)
            return
        self.eof = True

    def read_lines(self, max_n: int) -> list[bytes]:
        out = []
        while len(out) < max_n:
            try:
                out.append(self.queue.get_nowait())
            except queue.Empty:
                break
        if not out and self.error is not None:
            raise ConnectionError(self.error)
        return out

    def at_eof(self) -> bool:
        return self.eof and self.queue.empty()

    def close(self) -> int:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        dropped = 0
        while True:
            try:
                self.queue.get_nowait()
                dropped += 1
            except queue.Empty:
                return dropped


class SocketTransport:
    def __init__(self, handoff: int = DEFAULT_HANDOFF, timeout: float = 2.0):
        self.handoff = handoff
        self.timeout = timeout

    def connect(self, address: str, feed: str) -> SocketConnection:
        try:
            return SocketConnection(address, feed, self.handoff, self.timeout)
        except OSError as exc:
            raise ConnectionError(str(exc)) from exc

    def request(self, address: str, feed: str) -> list[bytes]:
        host, port = _parse_address(address)
        try:
            with socket.create_connection((host, port), timeout=self.timeout) as sock:
                sock.sendall(f"FEED-REQ {feed}\n".encode())
                with sock.makefile("rb") as fh:
                    return [l.rstrip(b"\r\n") for l in fh if l.strip()]
        except OSError as exc:
            raise ConnectionError(str(exc)) from exc

    def advance(self, t: float) -> None:
        pass


# ------------------------------------------------------------------ handle

class AdaptorInstanceHandle:
    """One adaptor instance: connection state machine plus record parsing."""

    def __init__(self, descriptor: AdaptorDescriptor, index: int, feed: str, transport,
                 retry: RetryPolicy = SIM_RETRY, tick_seconds: float = 0.01,
                 max_bytes: int = max_record_bytes(),
                 on_reject: Callable[[bytes, str], None] | None = None):
        if not 0 <= index < descriptor.cardinality:
            raise AdaptorError(f"adaptor {descriptor.name!r} has no instance {index}")
        self.descriptor = descriptor
        self.index = index
        self.endpoint = descriptor.instance_endpoints[index]
        self.feed = feed
        self.transport = transport
        self.retry = retry
        self.tick_seconds = tick_seconds
        self.max_bytes = max_bytes
        self.on_reject = on_reject
        self.state = "connecting"
        self.conn = None
        self.attempts = 0
        self.total_attempts = 0
        self.next_attempt = 0.0
        self.next_request = 0.0
        self.bytes = 0
        self.records = 0
        self.parse_errors = 0
        self.rejected = 0
        self.unread: deque[Record] = deque()

    @property
    def adaptor(self) -> str:
        return self.descriptor.name

    @property
    def buffered(self) -> int:
        n = len(self.unread)
        conn = self.conn
        if conn is not None and isinstance(conn, SimConnection):
            n += len(conn.buffer)
        return n

    def _attempt(self, now: float) -> None:
        self.attempts += 1
        self.total_attempts += 1
        try:
            if self.descriptor.mode == "push":
                self.conn = self.transport.connect(self.endpoint, self.feed)
            else:
                # pull mode holds no connection between requests
                self.conn = None
            self.state = "receiving"
            self.attempts = 0
        except ConnectionError as exc:
            log.info("adaptor %s[%d] attempt %d failed: %s", self.adaptor, self.index,
                     self.attempts, exc)
            if self.attempts >= self.retry.attempts:
                self.state = "failed-terminal"
            else:
                self.state = "retrying"
                self.next_attempt = now + self.retry.backoff * 2 ** (self.attempts - 1)

    def open(self, now: float = 0.0) -> "AdaptorInstanceHandle":
        self._attempt(now)
        return self

    def _lost(self, now: float) -> None:
        self.conn = None
        self.attempts = 0
        self.state = "retrying"
        self.next_attempt = now + self.retry.backoff

    def _parse(self, lines: list[bytes]) -> list[Record]:
        out = []
        for raw in lines:
            self.bytes += len(raw) + 1
            try:
                data = json.loads(raw)
                if not isinstance(data, dict):
                    raise ValueError("not a JSON object")
            except (ValueError, UnicodeDecodeError):
                self.parse_errors += 1
                continue
            if len(raw) > self.max_bytes:
                self.rejected += 1
                if self.on_reject is not None:
                    self.on_reject(raw, f"record of {len(raw)} bytes exceeds the frame capacity")
                continue
            self.records += 1
            out.append(Record(data, len(raw)))
        return out

    def next_batch(self, now: float = 0.0, max_records: int = DEFAULT_HANDOFF):
        """Records, or a ``SourceStatus`` sentinel."""
        if self.state == "failed-terminal":
            return SourceStatus.FAILED
        if self.state in ("retrying", "connecting"):
            if now < self.next_attempt:
                return SourceStatus.GAP
            self._attempt(now)
            if self.state == "failed-terminal":
                return SourceStatus.FAILED
            if self.state != "receiving":
                return SourceStatus.GAP
        out: list[Record] = []
        while self.unread and len(out) < max_records:
            out.append(self.unread.popleft())
        if len(out) >= max_records:
            return out
        if self.descriptor.mode == "pull":
            if now >= self.next_request:
                try:
                    lines = self.transport.request(self.endpoint, self.feed)
                except ConnectionError:
                    self._lost(now)
                    return out or SourceStatus.GAP
                self.next_request = now + self.descriptor.interval / self.tick_seconds
                self.unread.extend(self._parse(lines))
                while self.unread and len(out) < max_records:
                    out.append(self.unread.popleft())
            return out
        try:
            lines = self.conn.read_lines(max_records - len(out))
        except ConnectionError:
            self._lost(now)
            return out or SourceStatus.GAP
        out.extend(self._parse(lines))
        if not out and self.conn.at_eof() and not self.unread:
            return SourceStatus.END
        return out

    def push_back(self, records: list[Record]) -> None:
        """Return records the pipeline could not accept; they are read first next time."""
        self.unread.extendleft(reversed(records))

    def close(self) -> int:
        dropped = len(self.unread)
        self.unread.clear()
        if self.conn is not None:
            dropped += self.conn.close()
            self.conn = None
        if self.state != "failed-terminal":
            self.state = "closed"
        return dropped


def open(descriptor: AdaptorDescriptor, instance: int, feed: str = "", transport=None,
         now: float = 0.0, **kwargs) -> AdaptorInstanceHandle:
    """Handshake with one endpoint of ``descriptor``; never blocks on retries."""
    handle = AdaptorInstanceHandle(descriptor, instance, feed or descriptor.name,
                                   transport if transport is not None else SimTransport(),
                                   **kwargs)
    return handle.open(now)


# ------------------------------------------------------------- real server

@dataclass
class ServeStats:
    connections: int = 0
    sent: int = 0
    requests: list[str] = field(default_factory=list)


def serve(gen: TweetGenerator, host: str = "127.0.0.1", port: int = 0, pull: bool = False,
          ready: Callable[[int], None] | None = None, poll: float = 0.01,
          stop: threading.Event | None = None, idle_timeout: float = 30.0) -> ServeStats:
    """Serve ``gen`` over the socket protocol until every record is delivered.

    Records come due on the wall clock from the moment the server starts;
    any that are due while no receiver is connected wait for the next one.
    """
    stats = ServeStats()
    pending: deque[bytes] = deque()
    with socket.create_server((host, port)) as srv:
        srv.settimeout(0.2)
        if ready is not None:
            ready(srv.getsockname()[1])
        t0 = time.monotonic()
        idle_since = t0
        while not (gen.exhausted and not pending):
            if stop is not None and stop.is_set():
                break
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                if time.monotonic() - idle_since > idle_timeout:
                    break
                continue
            stats.connections += 1
            with conn:
                try:
                    hello = conn.makefile("rb").readline().decode().strip()
                except OSError:
                    continue
                stats.requests.append(hello)
                if not hello.startswith("FEED-REQ"):
                    continue
                if pull:
                    pending.extend(gen.take_due(time.monotonic() - t0))
                    chunk = list(pending)
                    try:
                        conn.sendall(b"".join(l + b"\n" for l in chunk))
                        pending.clear()
                        stats.sent += len(chunk)
                    except OSError:
                        pass
                    idle_since = time.monotonic()
                    continue
                while not (gen.exhausted and not pending):
                    if stop is not None and stop.is_set():
                        break
                    pending.extend(gen.take_due(time.monotonic() - t0))
                    chunk = list(pending)
                    if chunk:
                        try:
                            conn.sendall(b"".join(l + b"\n" for l in chunk))
                        except OSError:
                            break
                        pending.clear()
                        stats.sent += len(chunk)
                    time.sleep(poll)
                idle_since = time.monotonic()
    return stats
