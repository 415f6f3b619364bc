import socket
import time

import pytest

from coloc.bus import STATUS_TOPIC, Bus, LoopbackSink, connect_stream, encode_frame, ranging_topic, serve_stream
from coloc.bus.codec import to_millimetres
from coloc.geometry import canonical_geometry, canonical_topology
from coloc.twr import ErrorModel, RangingEngine, TransportError, run_ranging_schedule


def _wait(pred, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(0.005)
    return pred()


def test_engine_loopback_equivalence():
    bus = Bus(queue_size=None)
    subs = {t: bus.subscribe(ranging_topic(t)) for t in (1, 2, 3)}
    sent = []
    with serve_stream(bus) as server:
        with LoopbackSink(server.address, (1, 2, 3)) as sink:
            def tee(m):
                sent.append(m)
                sink(m)

            n = run_ranging_schedule(canonical_topology(), canonical_geometry("square"),
                                     RangingEngine(ErrorModel(seed=42)), 10, 3, tee)
        expected = {1: 30, 2: 60, 3: 60}
        assert n == 30
        for t, sub in subs.items():
            assert sub.wait_for(expected[t], timeout=5.0)
    for t, sub in subs.items():
        got = sub.drain()
        want = [m for m in sent if m.pair.tag == t]
        assert len(got) == len(want)
        for g, w in zip(got, want):
            assert g.pair == w.pair and g.quality == w.quality
            assert g.timestamp == pytest.approx(w.timestamp, abs=1e-9)
            assert round(g.distance * 1000) == to_millimetres(w.distance)
        # in order per pair
        for pair in {m.pair for m in want}:
            assert [g.timestamp for g in got if g.pair == pair] == sorted(g.timestamp for g in got if g.pair == pair)


def test_two_tags_on_two_connections():
    bus = Bus()
    s2, s3 = bus.subscribe(ranging_topic(2)), bus.subscribe(ranging_topic(3))
    with serve_stream(bus) as server:
        c2, c3 = connect_stream(server.address), connect_stream(server.address)
        for k in range(50):
            c2.send_bytes(encode_frame(2, k, [(0, 1000 + k, 100), (1, 2000 + k, 100)]))
            c3.send_bytes(encode_frame(3, k, [(0, 3000 + k, 100), (1, 4000 + k, 100)]))
        c2.close()
        c3.close()
        assert s2.wait_for(100, 5.0) and s3.wait_for(100, 5.0)
    got2 = s2.drain()
    assert [m.distance for m in got2[::2]] == [(1000 + k) / 1000 for k in range(50)]
    assert [m.sequence for m in got2] == list(range(100))
    assert all(m.pair.tag == 3 for m in s3.drain())


def test_status_reports_and_heartbeat():
    bus = Bus()
    status = bus.subscribe(STATUS_TOPIC)
    seen = []

    def until(prefix):
        while True:
            seen.append(status.get(timeout=5.0))
            if seen[-1].startswith(prefix):
                return

    with serve_stream(bus, heartbeat_interval=0.05) as server:
        until("waiting")
        client = connect_stream(server.address)
        until("connected")
        assert server.active_connections == 1
        client.close()
        until("disconnected")
        assert _wait(lambda: server.active_connections == 0)
    assert seen[0].startswith("listening")


def test_garbage_and_crc_errors_counted():
    bus = Bus()
    sub = bus.subscribe(ranging_topic(1))
    good = encode_frame(1, 7, [(0, 1234, 100)])
    bad = bytearray(good)
    bad[-1] ^= 0xFF
    with serve_stream(bus) as server:
        with connect_stream(server.address) as c:
            c.send_bytes(b"\x01\x02\x03" + bytes(bad) + good)
        assert sub.wait_for(1, 5.0)
        assert _wait(lambda: server.crc_errors == 1)
        assert server.resync_bytes >= 3
    assert sub.drain()[0].distance == 1.234


def test_connection_refused():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(TransportError, match="cannot connect"):
        connect_stream(f"127.0.0.1:{port}", timeout=1.0)


def test_bind_failure():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        with pytest.raises(TransportError):
            serve_stream(Bus(), f"127.0.0.1:{s.getsockname()[1]}")


def test_sink_rejects_unknown_tag():
    bus = Bus()
    with serve_stream(bus) as server:
        with LoopbackSink(server.address, (2,)) as sink:
            from coloc.twr import RangeMeasurement
            from coloc.geometry import RangingPair

            with pytest.raises(TransportError):
                sink(RangeMeasurement(RangingPair(3, 0), 1.0, 0.0, 0))
