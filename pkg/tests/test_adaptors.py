import json
import threading

import pytest

from feedmesh import adaptors
from feedmesh.adaptors import (AdaptorDescriptor, AdaptorError, RetryPolicy, SimEndpoint,
                               SimTransport, SocketTransport, SourceStatus, TweetGenerator,
                               describe, generator_run)
from feedmesh.catalog import AdaptorSpec


def push_desc(*endpoints):
    return AdaptorDescriptor("Gen", "push", tuple(endpoints))


def drain(handle, now=0, limit=10000):
    out = []
    for t in range(now, now + limit):
        batch = handle.next_batch(t)
        if batch is SourceStatus.END:
            return out, batch
        if isinstance(batch, list):
            out.extend(batch)
        elif batch is SourceStatus.FAILED:
            return out, batch
    return out, None


def test_generator_count_and_determinism():
    a = generator_run(5000, 2, seed=1)
    b = generator_run(5000, 2, seed=1)
    lines_a = a.take(10**6)
    assert len(lines_a) == 10000
    assert lines_a == b.take(10**6)
    assert generator_run(5000, 2, seed=2).take(5) != lines_a[:5]


def test_generator_record_shape():
    rec = json.loads(generator_run(10, 1, seed=3).take(1)[0])
    assert rec["tweetId"] == "3-0-0"
    assert {"user", "message-text", "send-time", "location-lat"} <= set(rec)
    assert "screen-name" in rec["user"]


def test_generator_pacing_within_one_percent():
    gen = TweetGenerator(20000, 3, seed=0)
    per_window = []
    prev = 0
    for tick in range(1, 301):
        gen.take_due(tick * 0.01)
        if tick % 100 == 0:
            per_window.append(gen.emitted - prev)
            prev = gen.emitted
    assert all(abs(n - 20000) <= 200 for n in per_window)


def test_generator_rejects_zero_rate():
    with pytest.raises(ValueError):
        TweetGenerator(0, 1)


def test_describe_endpoints_and_locations():
    spec = AdaptorSpec("TweetGenAdaptor", (("datasource", "a:1, b:2"), ("locations", "A, B")))
    d = describe(spec)
    assert d.instance_endpoints == ("a:1", "b:2") and d.locations == ("A", "B")
    assert d.cardinality == 2 and d.mode == "push"
    with pytest.raises(AdaptorError):
        describe(AdaptorSpec("X", (("datasource", "a:1"), ("locations", "A, B"))))


def test_descriptor_invariants():
    with pytest.raises(AdaptorError):
        AdaptorDescriptor("X", "push", ())
    with pytest.raises(AdaptorError):
        AdaptorDescriptor("X", "pull", ("a:1",))
    assert AdaptorDescriptor("X", "pull", ("a:1",), (("interval", "60"),)).interval == 60.0


def test_open_receiving_and_two_instances():
    tr = SimTransport()
    for addr in ("g0:1", "g1:1"):
        tr.register(SimEndpoint(addr, lines=['{"a":1}']))
    d = push_desc("g0:1", "g1:1")
    handles = [adaptors.open(d, i, transport=tr) for i in range(d.cardinality)]
    assert [h.state for h in handles] == ["receiving", "receiving"]
    with pytest.raises(AdaptorError):
        adaptors.open(d, 2, transport=tr)


def test_unreachable_endpoint_fails_after_three_attempts():
    tr = SimTransport()
    ep = tr.register(SimEndpoint("g:1", lines=[], refuse=-1))
    h = adaptors.open(push_desc("g:1"), 0, transport=tr, retry=RetryPolicy(3, 5))
    assert h.state == "retrying"
    statuses = [h.next_batch(t) for t in range(0, 40)]
    assert SourceStatus.GAP in statuses
    assert statuses[-1] is SourceStatus.FAILED
    assert ep.handshakes == 3 and h.total_attempts == 3
    assert h.next_batch(100) is SourceStatus.FAILED


def test_malformed_line_counted():
    lines = [json.dumps({"i": i}) for i in range(9)]
    lines.insert(4, "{not json")
    tr = SimTransport()
    tr.register(SimEndpoint("g:1", lines=lines))
    h = adaptors.open(push_desc("g:1"), 0, transport=tr)
    recs, status = drain(h)
    assert len(recs) == 9 and h.parse_errors == 1
    assert status is SourceStatus.END


def test_push_source_sum_equals_n_across_reconnect():
    tr = SimTransport(handoff=50)
    gen = TweetGenerator(1000, 1, seed=4)
    ep = tr.register(SimEndpoint("g:1", generator=gen))
    h = adaptors.open(push_desc("g:1"), 0, transport=tr)
    got = []
    for t in range(400):
        tr.advance(t * 0.01)
        if t == 30:
            ep.break_connection()
        batch = h.next_batch(t, max_records=20)
        if isinstance(batch, list):
            got.extend(batch)
        elif batch is SourceStatus.END:
            break
        assert batch is not SourceStatus.FAILED
    assert len(got) == 1000
    assert len({r.data["tweetId"] for r in got}) == 1000
    assert ep.handshakes == 2


def test_push_back_is_read_first():
    tr = SimTransport()
    tr.register(SimEndpoint("g:1", lines=['{"i":1}', '{"i":2}']))
    h = adaptors.open(push_desc("g:1"), 0, transport=tr)
    batch = h.next_batch(0)
    h.push_back(batch[1:])
    assert [r.data["i"] for r in h.next_batch(1)] == [2]


def test_oversized_record_rejected():
    seen = []
    tr = SimTransport()
    tr.register(SimEndpoint("g:1", lines=[json.dumps({"x": "y" * 100}), '{"ok":1}']))
    h = adaptors.open(push_desc("g:1"), 0, transport=tr, max_bytes=50,
                      on_reject=lambda raw, why: seen.append(why))
    recs, _ = drain(h)
    assert len(recs) == 1 and h.rejected == 1 and seen


def test_pull_interval_and_empty_batch():
    tr = SimTransport()
    ep = tr.register(SimEndpoint("g:1", lines=['{"i":1}']))
    d = AdaptorDescriptor("Pull", "pull", ("g:1",), (("interval", "60"),))
    h = adaptors.open(d, 0, transport=tr, tick_seconds=0.01)
    assert len(h.next_batch(0)) == 1
    assert ep.requests == 1
    # interval of 60 s is 6000 ticks; no request before it elapses
    for t in (1, 100, 5999):
        assert h.next_batch(t) == []
    assert ep.requests == 1
    assert h.next_batch(6000) == []
    assert ep.requests == 2


def test_close_reports_dropped():
    tr = SimTransport()
    tr.register(SimEndpoint("g:1", lines=['{"i":1}', '{"i":2}']))
    h = adaptors.open(push_desc("g:1"), 0, transport=tr)
    assert h.close() == 2
    assert h.state == "closed"


def _start_server(gen, pull=False):
    ready = threading.Event()
    box = {}

    def on_ready(port):
        box["port"] = port
        ready.set()

    def target():
        box["stats"] = adaptors.serve(gen, pull=pull, ready=on_ready, idle_timeout=5)

    th = threading.Thread(target=target, daemon=True)
    th.start()
    assert ready.wait(5)
    return th, box


def test_socket_push_round_trip():
    gen = TweetGenerator(2000, 0.25, seed=9)
    th, box = _start_server(gen)
    addr = f"127.0.0.1:{box['port']}"
    h = adaptors.open(push_desc(addr), 0, feed="F", transport=SocketTransport(),
                      retry=adaptors.REAL_RETRY)
    got = []
    for t in range(2000):
        batch = h.next_batch(t)
        if batch is SourceStatus.END:
            break
        if isinstance(batch, list):
            got.extend(batch)
        threading.Event().wait(0.005)
    h.close()
    th.join(5)
    assert [r.data["tweetId"] for r in got] == TweetGenerator(2000, 0.25, seed=9).keys()
    assert box["stats"].requests == ["FEED-REQ F"]


def test_socket_pull_request():
    gen = TweetGenerator(1000, 0.05, seed=1)
    th, box = _start_server(gen, pull=True)
    threading.Event().wait(0.1)
    lines = SocketTransport().request(f"127.0.0.1:{box['port']}", "F")
    th.join(5)
    assert len(lines) == 50


def test_socket_connect_refused():
    with pytest.raises(ConnectionError):
        SocketTransport(timeout=0.5).connect("127.0.0.1:1", "F")
