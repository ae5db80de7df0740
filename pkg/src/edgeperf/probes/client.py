"""Initiator side of the active measurement procedures."""
from __future__ import annotations

import logging
import selectors
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence, Union

from ..core import (
    AccessTechnology,
    Direction,
    MeasurementRecord,
    Method,
    Metric,
    MetricKind,
    SegmentId,
    TraceDescriptor,
    new_id,
    now_us,
)
from .capacity import estimate_capacity
from .wire import (
    FLAG_DOWN,
    FLAG_UDP,
    HEADER_SIZE,
    Header,
    HandshakeError,
    MeasurementError,
    Op,
    ProbeError,
    SessionError,
    datagram,
    expect,
    message,
    recv_message,
    unpack_i64_list,
)

log = logging.getLogger(__name__)

ROLES = ("client", "observer", "remote_server")


@dataclass(frozen=True)
class ProbeSession:
    local_role: str
    peer: tuple[str, int]
    transport: str
    segment: SegmentId
    access_technology: AccessTechnology = AccessTechnology.WIFI
    cross_traffic_mbps: float = 0.0
    connect_timeout: float = 5.0

    def __post_init__(self):
        if self.local_role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.transport not in ("tcp", "udp"):
            raise ValueError("transport must be tcp or udp")
        object.__setattr__(self, "segment", SegmentId(self.segment))
        object.__setattr__(self, "access_technology", AccessTechnology(self.access_technology))
        object.__setattr__(self, "peer", (self.peer[0], int(self.peer[1])))

    def descriptor(self, kind: MetricKind, direction: Direction) -> TraceDescriptor:
        return TraceDescriptor(
            Method.ACTIVE,
            Metric(kind),
            self.segment,
            Direction(direction),
            self.access_technology,
            self.cross_traffic_mbps,
        )

    def connect(self) -> socket.socket:
        try:
            sock = socket.create_connection(self.peer, timeout=self.connect_timeout)
        except OSError as exc:
            raise SessionError(f"cannot reach {self.peer[0]}:{self.peer[1]}: {exc}") from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock


@dataclass(frozen=True)
class BandwidthProbeConfig:
    num_packets: int = 1024
    packet_size: int = 1420
    repetitions: int = 10
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.num_packets < 2 or self.packet_size < 1 or self.repetitions < 1:
            raise ValueError("need num_packets >= 2, packet_size >= 1, repetitions >= 1")


@dataclass(frozen=True)
class CapacityProbeConfig:
    num_pairs: int = 25
    packet_size: int = 1420
    pair_gap_s: float = 0.01
    timeout_s: float = 2.0

    def __post_init__(self):
        if self.num_pairs < 1 or self.packet_size < HEADER_SIZE:
            raise ValueError(f"need num_pairs >= 1 and packet_size >= {HEADER_SIZE}")


@dataclass(frozen=True)
class LatencyProbeConfig:
    num_probes: int = 25
    payload_size: int = 1
    timeout_s: float = 2.0

    def __post_init__(self):
        if self.num_probes < 1 or self.payload_size < 1:
            raise ValueError("need num_probes >= 1 and payload_size >= 1")


ProbeConfig = Union[BandwidthProbeConfig, CapacityProbeConfig, LatencyProbeConfig]


class ProbeResult(list):
    """Records from one procedure plus loss bookkeeping."""

    def __init__(self, records=(), timeouts: int = 0, lost: int = 0, discarded: int = 0):
        super().__init__(records)
        self.timeouts = timeouts
        self.lost = lost
        self.discarded = discarded


def _flags(direction: Direction, udp: bool = False) -> int:
    return (FLAG_DOWN if Direction(direction) is Direction.DOWNSTREAM else 0) | (FLAG_UDP if udp else 0)


def _receive_stream(sock: socket.socket, total: int) -> tuple[int, int]:
    received, first, last = 0, None, None
    while received < total:
        chunk = sock.recv(min(65536, total - received))
        if not chunk:
            raise SessionError("stream truncated")
        last = time.perf_counter_ns()
        if first is None:
            first = last
        received += len(chunk)
    return received, last - first


def stream_mbps(nbytes: int, elapsed_ns: int) -> float:
    """Receiver-side stream bandwidth in Mbps."""
    if elapsed_ns <= 0:
        raise MeasurementError("zero elapsed time at the receiver")
    return nbytes * 8 * 1000 / elapsed_ns


def measure_stream_bandwidth(
    session: ProbeSession,
    cfg: BandwidthProbeConfig,
    direction: Direction,
    run_id: str | None = None,
) -> ProbeResult:
    """TCP bandwidth of a fixed-size stream, timed at the receiver.

    Each repetition uses a fresh connection.  The window runs from the first to
    the last payload byte received, so connection setup is excluded.
    """
    if session.transport != "tcp":
        raise ValueError("stream bandwidth needs a TCP session")
    direction = Direction(direction)
    run_id = run_id or new_id()
    desc = session.descriptor(MetricKind.TCP_BANDWIDTH, direction)
    total = cfg.num_packets * cfg.packet_size
    out = ProbeResult()
    for rep in range(cfg.repetitions):
        with session.connect() as sock:
            sock.settimeout(cfg.timeout_s)
            try:
                start = struct.pack("!II", cfg.num_packets, cfg.packet_size)
                sock.sendall(message(Op.BW_START, start, _flags(direction)))
                if direction is Direction.UPSTREAM:
                    block = bytes(cfg.packet_size)
                    for _ in range(cfg.num_packets):
                        sock.sendall(block)
                    _, payload = expect(sock, Op.BW_RESULT)
                    nbytes, elapsed = struct.unpack("!QQ", payload)
                else:
                    nbytes, elapsed = _receive_stream(sock, total)
            except socket.timeout:
                raise SessionError("bandwidth probe timed out") from None
            except OSError as exc:
                raise SessionError(str(exc)) from None
        mbps = stream_mbps(nbytes, elapsed)
        out.append(
            MeasurementRecord(
                desc, now_us(), mbps, run_id,
                attrs={"repetition": rep, "bytes": nbytes, "elapsed_ns": elapsed},
            )
        )
    return out


def _register(udp: socket.socket, token: int, stop_when, timeout: float) -> None:
    """Send REGISTER datagrams until ``stop_when()`` or the timeout."""
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        udp.send(datagram(Op.REGISTER, HEADER_SIZE, FLAG_UDP, token))
        if stop_when(0.05):
            return
    raise SessionError("responder never started the UDP exchange")


def measure_packet_pair_capacity(
    session: ProbeSession,
    cfg: CapacityProbeConfig,
    direction: Direction,
    run_id: str | None = None,
) -> ProbeResult:
    """Bottleneck capacity from back-to-back UDP pairs (median of per-pair estimates).

    The result holds one record per usable pair (``attrs.estimate == "pair"``)
    followed by the median record (``attrs.estimate == "median"``).
    """
    if session.transport != "udp":
        raise ValueError("packet-pair capacity needs a UDP session")
    direction = Direction(direction)
    run_id = run_id or new_id()
    desc = session.descriptor(MetricKind.UDP_CAPACITY, direction)
    with session.connect() as ctl:
        ctl.settimeout(cfg.timeout_s * 4 + cfg.num_pairs * cfg.pair_gap_s + 5)
        udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            udp.connect(session.peer)
            params = struct.pack(
                "!IIII", cfg.num_pairs, cfg.packet_size, round(cfg.pair_gap_s * 1e6), round(cfg.timeout_s * 1000)
            )
            ctl.sendall(message(Op.CAP_START, params, _flags(direction, udp=True)))
            hdr, _ = expect(ctl, Op.READY)
            token = hdr.token
            if direction is Direction.UPSTREAM:
                for i in range(cfg.num_pairs):
                    udp.send(datagram(Op.PAIR, cfg.packet_size, FLAG_UDP, token, 2 * i))
                    udp.send(datagram(Op.PAIR, cfg.packet_size, FLAG_UDP, token, 2 * i + 1))
                    if cfg.pair_gap_s > 0 and i + 1 < cfg.num_pairs:
                        time.sleep(cfg.pair_gap_s)
                ctl.sendall(message(Op.CAP_END, token=token))
                _, payload = expect(ctl, Op.CAP_RESULT)
                dispersions = [None if d < 0 else d for d in unpack_i64_list(payload)]
            else:
                dispersions = _receive_pairs(udp, token, cfg)
        except socket.timeout:
            raise SessionError("capacity probe timed out") from None
        finally:
            udp.close()
    est = estimate_capacity(cfg.packet_size, dispersions)
    ts = now_us()
    out = ProbeResult(lost=est.lost, discarded=est.discarded)
    for idx, disp, mbps in est.pairs:
        out.append(
            MeasurementRecord(desc, ts, mbps, run_id, attrs={"estimate": "pair", "pair": idx, "dispersion_ns": disp})
        )
    out.append(
        MeasurementRecord(
            desc, ts, est.capacity_mbps, run_id,
            attrs={"estimate": "median", "pairs_used": len(est.pairs), "pairs_lost": est.lost,
                   "pairs_discarded": est.discarded},
        )
    )
    return out


def _receive_pairs(udp: socket.socket, token: int, cfg: CapacityProbeConfig) -> list[int | None]:
    arrivals: dict[int, int] = {}
    expected = 2 * cfg.num_pairs

    def pump(wait: float) -> bool:
        udp.settimeout(wait)
        try:
            while len(arrivals) < expected:
                data = udp.recv(65535)
                t = time.perf_counter_ns()
                try:
                    hdr = Header.unpack(data)
                except HandshakeError:
                    continue
                if hdr.op is Op.PAIR and hdr.token == token:
                    arrivals.setdefault(hdr.seq, t)
                    udp.settimeout(cfg.timeout_s)
        except socket.timeout:
            pass
        return bool(arrivals)

    _register(udp, token, pump, cfg.timeout_s * 4)
    out = []
    for i in range(cfg.num_pairs):
        a, b = arrivals.get(2 * i), arrivals.get(2 * i + 1)
        out.append(None if a is None or b is None else b - a)
    return out


def measure_echo_latency(
    session: ProbeSession,
    cfg: LatencyProbeConfig,
    direction: Direction = Direction.UPSTREAM,
    run_id: str | None = None,
) -> ProbeResult:
    """Round-trip time samples in ms.

    Upstream probes are initiated here; downstream probes are initiated by the
    responder, which reports its samples back.  TCP reuses one connection;
    UDP probes are independent datagrams and may time out.
    """
    direction = Direction(direction)
    kind = MetricKind.TCP_LATENCY if session.transport == "tcp" else MetricKind.UDP_LATENCY
    run_id = run_id or new_id()
    desc = session.descriptor(kind, direction)
    try:
        if direction is Direction.DOWNSTREAM:
            rtts = _downstream_echo(session, cfg)
        elif session.transport == "tcp":
            rtts = _tcp_echo(session, cfg)
        else:
            rtts = _udp_echo(session, cfg)
    except socket.timeout:
        raise SessionError("latency probe timed out") from None
    timeouts = sum(r is None for r in rtts)
    if timeouts == len(rtts):
        raise MeasurementError(f"all {timeouts} probes timed out")
    out = ProbeResult(timeouts=timeouts)
    for i, rtt in enumerate(rtts):
        if rtt is None:
            continue
        out.append(
            MeasurementRecord(desc, now_us(), rtt / 1e6, run_id, attrs={"probe": i, "timeouts": timeouts})
        )
    return out


def _tcp_echo(session: ProbeSession, cfg: LatencyProbeConfig) -> list[int | None]:
    body = bytes(cfg.payload_size)
    rtts = []
    with session.connect() as sock:
        sock.settimeout(cfg.timeout_s)
        for i in range(cfg.num_probes):
            t0 = time.perf_counter_ns()
            sock.sendall(message(Op.ECHO, body, seq=i))
            hdr, _ = expect(sock, Op.ECHO_REPLY)
            if hdr.seq != i:
                raise HandshakeError(f"echo reply {hdr.seq} for probe {i}")
            rtts.append(time.perf_counter_ns() - t0)
    return rtts


def _udp_echo(session: ProbeSession, cfg: LatencyProbeConfig) -> list[int | None]:
    body = bytes(cfg.payload_size)
    rtts: list[int | None] = []
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as udp:
        udp.connect(session.peer)
        for i in range(cfg.num_probes):
            t0 = time.perf_counter_ns()
            udp.send(datagram(Op.ECHO, HEADER_SIZE + len(body), 0, 0, i, body))
            deadline = time.monotonic() + cfg.timeout_s
            rtt = None
            while (left := deadline - time.monotonic()) > 0:
                udp.settimeout(left)
                try:
                    data = udp.recv(65535)
                except socket.timeout:
                    break
                except ConnectionRefusedError:
                    raise SessionError("UDP port unreachable") from None
                t = time.perf_counter_ns()
                try:
                    hdr = Header.unpack(data)
                except HandshakeError:
                    continue
                if hdr.op is Op.ECHO_REPLY and hdr.seq == i:
                    rtt = t - t0
                    break
            rtts.append(rtt)
    return rtts


def _downstream_echo(session: ProbeSession, cfg: LatencyProbeConfig) -> list[int | None]:
    udp_plane = session.transport == "udp"
    params = struct.pack("!III", cfg.num_probes, cfg.payload_size, round(cfg.timeout_s * 1000))
    with session.connect() as ctl:
        ctl.settimeout(cfg.timeout_s * (cfg.num_probes + 4) + 5)
        ctl.sendall(message(Op.LAT_START, params, _flags(Direction.DOWNSTREAM, udp_plane)))
        if not udp_plane:
            while True:
                hdr, payload = recv_message(ctl)
                if hdr.op is Op.ECHO:
                    ctl.sendall(message(Op.ECHO_REPLY, payload, seq=hdr.seq))
                elif hdr.op is Op.LAT_RESULT:
                    break
                else:
                    raise HandshakeError(f"unexpected {hdr.op.name}")
        else:
            hdr, _ = expect(ctl, Op.READY)
            token = hdr.token
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as udp:
                udp.connect(session.peer)
                seen = []

                def first_probe(wait: float) -> bool:
                    udp.settimeout(wait)
                    try:
                        data = udp.recv(65535)
                    except socket.timeout:
                        return False
                    seen.append(data)
                    return True

                _register(udp, token, first_probe, cfg.timeout_s * 4)
                hdr, payload = _echo_until_result(ctl, udp, token, seen)
            if hdr.op is not Op.LAT_RESULT:
                raise HandshakeError(f"unexpected {hdr.op.name}")
    return [None if r < 0 else r for r in unpack_i64_list(payload)]


def _echo_until_result(ctl, udp, token, pending) -> tuple[Header, bytes]:
    """Answer responder ECHO datagrams until LAT_RESULT arrives on the control channel."""

    def answer(data: bytes) -> None:
        try:
            h = Header.unpack(data)
        except HandshakeError:
            return
        if h.op is Op.ECHO and h.token == token:
            udp.send(datagram(Op.ECHO_REPLY, len(data), FLAG_UDP, token, h.seq))

    for data in pending:
        answer(data)
    udp.setblocking(False)
    with selectors.DefaultSelector() as sel:
        sel.register(ctl, selectors.EVENT_READ, "ctl")
        sel.register(udp, selectors.EVENT_READ, "udp")
        while True:
            events = sel.select(ctl.gettimeout())
            if not events:
                raise socket.timeout()
            for key, _ in events:
                if key.data == "udp":
                    try:
                        answer(udp.recv(65535))
                    except BlockingIOError:
                        pass
            if any(key.data == "ctl" for key, _ in events):
                return recv_message(ctl)


@dataclass(frozen=True)
class PlanItem:
    session: ProbeSession
    config: ProbeConfig
    direction: Direction = Direction.UPSTREAM

    @property
    def metric(self) -> MetricKind:
        if isinstance(self.config, BandwidthProbeConfig):
            return MetricKind.TCP_BANDWIDTH
        if isinstance(self.config, CapacityProbeConfig):
            return MetricKind.UDP_CAPACITY
        return MetricKind.TCP_LATENCY if self.session.transport == "tcp" else MetricKind.UDP_LATENCY

    def describe(self) -> str:
        s = self.session
        return (
            f"{self.metric.value} {Direction(self.direction).value} {s.segment.value} "
            f"via {s.peer[0]}:{s.peer[1]} ({s.transport})"
        )


def run_probe(item: PlanItem, run_id: str | None = None) -> ProbeResult:
    cfg = item.config
    if isinstance(cfg, BandwidthProbeConfig):
        return measure_stream_bandwidth(item.session, cfg, item.direction, run_id)
    if isinstance(cfg, CapacityProbeConfig):
        return measure_packet_pair_capacity(item.session, cfg, item.direction, run_id)
    if isinstance(cfg, LatencyProbeConfig):
        return measure_echo_latency(item.session, cfg, item.direction, run_id)
    raise TypeError(f"unknown probe config {type(cfg).__name__}")


@dataclass
class SuiteResult:
    records: list[MeasurementRecord] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)
    intervals: list[tuple[int, int]] = field(default_factory=list)  # perf_counter_ns per item
    batch_ids: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def run_active_suite(
    plan: Sequence[PlanItem],
    aggregator=None,
    submitter: str = "client",
) -> SuiteResult:
    """Execute plan items one at a time; failures are recorded and skipped.

    Each item is one run (its own run id); its records go to the aggregator as
    one batch.
    """
    result = SuiteResult()
    batches = []
    for i, item in enumerate(plan):
        run_id = new_id()
        t0 = time.perf_counter_ns()
        try:
            records = run_probe(item, run_id)
        except (ProbeError, OSError, ValueError) as exc:
            log.warning("plan item %d (%s) failed: %s", i, item.describe(), exc)
            result.errors.append((i, f"{type(exc).__name__}: {exc}"))
            continue
        finally:
            result.intervals.append((t0, time.perf_counter_ns()))
        result.records.extend(records)
        if records:
            batches.append((run_id, list(records)))
    if aggregator is not None:
        for run_id, records in batches:
            try:
                result.batch_ids.append(
                    aggregator.submit_batch(records, source="active", submitter=submitter, idempotency_key=run_id)
                )
            except Exception as exc:  # noqa: BLE001
                result.errors.append((-1, f"submit {run_id}: {exc}"))
    return result
