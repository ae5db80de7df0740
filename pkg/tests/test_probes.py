import socket
import statistics
import threading

import pytest

from edgeperf.aggregator.client import AggregatorClient
from edgeperf.core import Direction, MetricKind
from edgeperf.probes.client import (
    BandwidthProbeConfig,
    CapacityProbeConfig,
    LatencyProbeConfig,
    PlanItem,
    ProbeSession,
    measure_echo_latency,
    measure_packet_pair_capacity,
    measure_stream_bandwidth,
    run_active_suite,
    stream_mbps,
)
from edgeperf.probes.shaping import UP, ShapedLink, reference_transfer
from edgeperf.probes.wire import HEADER, MAGIC, HandshakeError, MeasurementError, Op, SessionError
from edgeperf.profiles import BUNDLED, expand, expected_records

pytestmark = pytest.mark.network

UPSTREAM, DOWNSTREAM = Direction.UPSTREAM, Direction.DOWNSTREAM


def session(addr, transport="tcp"):
    return ProbeSession("client", addr, transport, "access_mec")


def dead_address():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    addr = s.getsockname()
    s.close()
    return addr


def test_stream_arithmetic():
    # 1024 packets of 1420 bytes in exactly one second
    assert stream_mbps(1024 * 1420, 1_000_000_000) == pytest.approx(11.63264, abs=1e-9)
    with pytest.raises(MeasurementError):
        stream_mbps(10, 0)


def test_unshaped_bandwidth_records(responder):
    cfg = BandwidthProbeConfig(num_packets=256, repetitions=3)
    for direction in (UPSTREAM, DOWNSTREAM):
        res = measure_stream_bandwidth(session(responder.address), cfg, direction)
        assert len(res) == 3
        assert {r.run_id for r in res} == {res[0].run_id}
        assert [r.attrs["repetition"] for r in res] == [0, 1, 2]
        assert all(r.attrs["bytes"] == 256 * 1420 for r in res)
        assert res[0].descriptor.direction is direction
        assert res[0].descriptor.metric.kind is MetricKind.TCP_BANDWIDTH


@pytest.mark.parametrize("rate", [10, 40])
def test_shaped_bandwidth_near_reference(responder, rate):
    cfg = BandwidthProbeConfig(repetitions=3)
    with ShapedLink(rate_mbps=rate) as link:
        relay = link.relay(*responder.address)
        got = statistics.median(r.value for r in measure_stream_bandwidth(session(relay.address), cfg, DOWNSTREAM))
        ref = reference_transfer(link, cfg.num_packets * cfg.packet_size)
    assert abs(got - ref) / ref < 0.05
    assert abs(ref - rate) / rate < 0.05


@pytest.mark.parametrize("transport", ["tcp", "udp"])
@pytest.mark.parametrize("direction", [UPSTREAM, DOWNSTREAM])
def test_latency_tracks_injected_delay(responder, transport, direction):
    cfg = LatencyProbeConfig(num_probes=9)
    with ShapedLink(delay_ms=20) as link:
        relay = link.relay(*responder.address)
        res = measure_echo_latency(session(relay.address, transport), cfg, direction)
    assert len(res) == 9 and res.timeouts == 0
    kind = MetricKind.TCP_LATENCY if transport == "tcp" else MetricKind.UDP_LATENCY
    assert res[0].descriptor.metric.kind is kind
    assert 20.0 <= statistics.median(r.value for r in res) < 22.0


def test_udp_timeouts_counted(responder):
    lost = {3, 7, 11}

    def drop(data, direction):
        if direction != UP or len(data) < HEADER.size:
            return False
        magic, op, _f, _t, seq, _l = HEADER.unpack_from(data)
        return magic == MAGIC and op == Op.ECHO and seq in lost

    with ShapedLink(drop=drop) as link:
        relay = link.relay(*responder.address)
        res = measure_echo_latency(session(relay.address, "udp"), LatencyProbeConfig(25, timeout_s=0.3))
    assert res.timeouts == 3
    assert len(res) == 22
    assert sorted(r.attrs["probe"] for r in res) == sorted(set(range(25)) - lost)
    assert all(r.attrs["timeouts"] == 3 for r in res)


def test_all_probes_lost_is_an_error(responder):
    with ShapedLink(drop=lambda data, d: d == UP) as link:
        relay = link.relay(*responder.address)
        with pytest.raises(MeasurementError):
            measure_echo_latency(session(relay.address, "udp"), LatencyProbeConfig(3, timeout_s=0.1))


def test_capacity_through_bottleneck(responder):
    cfg = CapacityProbeConfig(num_pairs=15, pair_gap_s=0.005)
    with ShapedLink(rate_mbps=20) as link:
        relay = link.relay(*responder.address)
        res = measure_packet_pair_capacity(session(relay.address, "udp"), cfg, DOWNSTREAM)
    *pairs, median = res
    assert all(r.attrs["estimate"] == "pair" for r in pairs)
    assert median.attrs["estimate"] == "median"
    assert median.value == statistics.median(r.value for r in pairs)
    assert abs(median.value - 20) / 20 < 0.15


def test_capacity_upstream_unshaped(responder):
    res = measure_packet_pair_capacity(session(responder.address, "udp"), CapacityProbeConfig(5), UPSTREAM)
    assert res[-1].attrs["estimate"] == "median"
    assert res[-1].value > 0


def test_unreachable_peer():
    with pytest.raises(SessionError):
        measure_echo_latency(session(dead_address()), LatencyProbeConfig(1))


def test_garbage_reply_is_handshake_error():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)

    def serve():
        conn, _ = srv.accept()
        with conn:
            conn.recv(64)
            conn.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    try:
        with pytest.raises(HandshakeError):
            measure_echo_latency(session(srv.getsockname()), LatencyProbeConfig(1))
    finally:
        t.join(5)
        srv.close()


def test_peer_error_message_surfaces(responder):
    # the responder refuses an unknown opcode with an ERROR message
    with socket.create_connection(responder.address) as s:
        s.sendall(HEADER.pack(MAGIC, int(Op.CAP_RESULT), 0, 0, 0, 0))
        s.settimeout(5)
        magic, op, *_ = HEADER.unpack(s.recv(HEADER.size))
    assert magic == MAGIC and op == Op.ERROR


def test_suite_isolates_failures(responder, aggregator):
    good = session(responder.address)
    plan = [
        PlanItem(good, LatencyProbeConfig(3)),
        PlanItem(session(dead_address()), LatencyProbeConfig(3)),
        PlanItem(good, BandwidthProbeConfig(num_packets=64, repetitions=2), DOWNSTREAM),
    ]
    res = run_active_suite(plan, AggregatorClient(aggregator.url))
    assert [i for i, _ in res.errors] == [1]
    assert "SessionError" in res.errors[0][1]
    assert len(res.records) == 5
    assert len(res.batch_ids) == 2
    assert AggregatorClient(aggregator.url).health()["records"] == 5
    for (_, end), (start, _) in zip(res.intervals, res.intervals[1:]):
        assert end <= start


def test_empty_plan_submits_nothing():
    class Recorder:
        calls = 0

        def submit_batch(self, *a, **k):
            Recorder.calls += 1

    res = run_active_suite([], Recorder())
    assert res.ok and res.records == [] and Recorder.calls == 0


def test_default_profile_record_count():
    plan = expand(BUNDLED["default"], {"observer": ("127.0.0.1", 1), "remote": ("127.0.0.1", 2)})
    assert len(plan) == 12
    # 4 x (10 bandwidth + 25 pairs + 1 median + 25 RTT)
    assert expected_records(plan) == 4 * (10 + 25 + 1 + 25)
    segments = {(p.session.segment.value, p.session.peer[1]) for p in plan}
    assert segments == {("access_mec", 1), ("access_cloud", 2)}
