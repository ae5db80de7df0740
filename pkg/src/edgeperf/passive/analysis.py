"""Binned throughput and ACK-matched latency for captured flows."""
from __future__ import annotations

import hashlib
import logging
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field, replace
from itertools import accumulate

from ..core import (
    Direction,
    MeasurementRecord,
    Method,
    Metric,
    MetricKind,
    TraceDescriptor,
)
from .flows import AB, BA, Flow, FlowKey, extract_flows, filter_ports, parse_filter
from .pcap import CaptureResult, PacketRecord, parse_capture

log = logging.getLogger(__name__)

SEQ_MOD = 1 << 32


class UnsupportedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ThroughputBin:
    bin_start_ns: int
    bin_width: float
    bytes: int

    @property
    def throughput(self) -> float:
        """Mbps."""
        return self.bytes * 8 / self.bin_width / 1e6

    @property
    def bin_start(self) -> float:
        return self.bin_start_ns / 1e9


def binned_throughput(records: list[PacketRecord], bin_width: float = 0.5) -> list[ThroughputBin]:
    """Payload bytes per bin, bins anchored at the first payload-carrying packet.

    Bins are left-closed/right-open and tile the span from the first to the last
    packet with payload (bare handshake and ACK segments neither open nor extend
    the span); interior bins without traffic are emitted with zero bytes.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    carrying = [p for p in records if p.payload_length > 0]
    if not carrying:
        return []
    width_ns = round(bin_width * 1e9)
    t0 = min(p.timestamp_ns for p in carrying)
    last = max(p.timestamp_ns for p in carrying)
    counts = [0] * ((last - t0) // width_ns + 1)
    for p in carrying:
        counts[(p.timestamp_ns - t0) // width_ns] += p.payload_length
    return [ThroughputBin(t0 + i * width_ns, bin_width, b) for i, b in enumerate(counts)]


class _Unwrap:
    """Map 32-bit sequence numbers onto a monotone-ish integer line."""

    def __init__(self, isn: int):
        self.isn = isn
        self.last = 0

    def __call__(self, seq: int) -> int:
        rel = (seq - self.isn) % SEQ_MOD
        base = self.last - self.last % SEQ_MOD
        best = min((base - SEQ_MOD + rel, base + rel, base + SEQ_MOD + rel), key=lambda v: abs(v - self.last))
        self.last = max(self.last, best)
        return best


@dataclass(frozen=True)
class AckSample:
    data_ns: int
    ack_ns: int
    seq_end: int

    @property
    def rtt_ms(self) -> float:
        return (self.ack_ns - self.data_ns) / 1e6


def ack_samples(data: list[PacketRecord], reverse: list[PacketRecord]) -> list[AckSample]:
    """Latency samples for the data packets of one flow half.

    Each payload-carrying packet is matched with the first strictly later packet of
    the other half whose cumulative ACK covers it.  Retransmitted byte ranges are
    ambiguous: neither the original nor the retransmission yields a sample.
    """
    segs = [p for p in data if p.payload_length > 0 and p.tcp_seq is not None]
    if not segs:
        return []
    unwrap = _Unwrap(segs[0].tcp_seq)
    ranges = []
    for p in segs:
        s = unwrap(p.tcp_seq)
        ranges.append((s, s + p.payload_length))

    ambiguous: set[int] = set()
    # first transmissions only; they never overlap, so starts and ends are both sorted
    sent: list[tuple[int, int, int]] = []
    highest_end = None
    for i, (s, e) in enumerate(ranges):
        if highest_end is not None and s < highest_end:
            ambiguous.add(i)
            j = bisect_left(sent, (e, -1, -1))
            while j > 0:
                j -= 1
                _s2, e2, k = sent[j]
                if e2 <= s:
                    break
                ambiguous.add(k)
        else:
            insort(sent, (s, e, i))
        highest_end = e if highest_end is None else max(highest_end, e)

    acks = [p for p in reverse if p.has_ack and p.tcp_ack is not None]
    ack_times = [p.timestamp_ns for p in acks]
    ack_unwrap = _Unwrap(segs[0].tcp_seq)
    ack_vals = [ack_unwrap(p.tcp_ack) for p in acks]
    prefix_max = list(accumulate(ack_vals, max))

    out = []
    for i, (p, (_s, e)) in enumerate(zip(segs, ranges)):
        if i in ambiguous:
            continue
        j0 = bisect_right(ack_times, p.timestamp_ns)
        if j0 >= len(acks):
            continue
        if j0 > 0 and prefix_max[j0 - 1] >= e:
            j = next((k for k in range(j0, len(acks)) if ack_vals[k] >= e), None)
        else:
            j = bisect_left(prefix_max, e, lo=j0)
            j = j if j < len(acks) else None
        if j is not None:
            out.append(AckSample(p.timestamp_ns, ack_times[j], e))
    return out


def _record_id(digest: str, *parts) -> str:
    h = hashlib.sha256(digest.encode())
    for part in parts:
        h.update(b"\0" + str(part).encode())
    return h.hexdigest()[:32]


def ack_latency(
    flow: Flow,
    descriptor: TraceDescriptor,
    run_id: str,
    data_side: str | None = None,
    id_seed: str = "",
) -> list[MeasurementRecord]:
    """passive_latency records for ``flow`` (both halves unless ``data_side`` is given)."""
    if flow.key.transport != "tcp":
        raise UnsupportedMetricError("passive latency is only defined for TCP flows")
    desc = replace(descriptor, metric=Metric(MetricKind.PASSIVE_LATENCY))
    sides = [data_side] if data_side else [AB, BA]
    out = []
    for side in sides:
        other = BA if side == AB else AB
        for k, s in enumerate(ack_samples(flow.half(side), flow.half(other))):
            out.append(
                MeasurementRecord(
                    descriptor=desc,
                    timestamp_us=s.data_ns // 1000,
                    value=s.rtt_ms,
                    run_id=run_id,
                    id=_record_id(id_seed, run_id, flow.key, side, "lat", k),
                    attrs={"flow": str(flow.key), "side": side, "transport": "tcp"},
                )
            )
    return out


def throughput_records(
    flow: Flow,
    side: str,
    descriptor: TraceDescriptor,
    run_id: str,
    bin_width: float = 0.5,
    id_seed: str = "",
) -> list[MeasurementRecord]:
    desc = replace(descriptor, metric=Metric(MetricKind.PASSIVE_THROUGHPUT))
    return [
        MeasurementRecord(
            descriptor=desc,
            timestamp_us=b.bin_start_ns // 1000,
            value=b.throughput,
            run_id=run_id,
            id=_record_id(id_seed, run_id, flow.key, side, "bin", k),
            attrs={
                "flow": str(flow.key),
                "side": side,
                "transport": flow.key.transport,
                "bytes": b.bytes,
                "bin_width": bin_width,
            },
        )
        for k, b in enumerate(binned_throughput(flow.half(side), bin_width))
    ]


@dataclass
class AnalysisResult:
    records: list[MeasurementRecord] = field(default_factory=list)
    flows: dict[FlowKey, Flow] = field(default_factory=dict)
    bins: dict[FlowKey, list[ThroughputBin]] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    skipped: int = 0
    truncated: int = 0
    batch_ids: list = field(default_factory=list)

    def by_metric(self, kind: MetricKind) -> list[MeasurementRecord]:
        return [r for r in self.records if r.descriptor.metric.kind is kind]


def analyze_capture(
    data: bytes | CaptureResult,
    filter_expr: str | None,
    descriptor: TraceDescriptor,
    bin_width: float = 0.5,
    run_id: str | None = None,
    aggregator=None,
    submitter: str = "observer",
) -> AnalysisResult:
    """Parse, group, bin and ACK-match one capture; optionally submit the records.

    For each kept flow the half travelling in ``descriptor.direction`` (downstream =
    server to client) is analysed.  Throughput and latency records are submitted as
    separate batches, since a batch holds a single descriptor.  Output is a pure
    function of the capture bytes: record ids and default run ids are content hashes.
    """
    if descriptor.method is not Method.PASSIVE:
        raise ValueError("descriptor.method must be passive")
    if isinstance(data, CaptureResult):
        capture = data
        digest = hashlib.sha256(repr(capture.packets).encode()).hexdigest()
    else:
        digest = hashlib.sha256(data).hexdigest()
        capture = parse_capture(data)
    result = AnalysisResult(skipped=capture.skipped, truncated=capture.truncated)
    predicate = parse_filter(filter_expr)
    result.flows = extract_flows(capture.packets, predicate)
    if not result.flows:
        result.warnings.append("no flows match the filter")
        log.warning("no flows match filter %r", filter_expr)
    base_run = run_id or f"passive-{digest[:16]}"
    hints = filter_ports(filter_expr)
    for key, flow in sorted(result.flows.items()):
        server = flow.server_side(hints)
        side = server if descriptor.direction is Direction.DOWNSTREAM else (BA if server == AB else AB)
        if not flow.half(side):
            continue
        result.bins[key] = binned_throughput(flow.half(side), bin_width)
        result.records.extend(
            throughput_records(flow, side, descriptor, f"{base_run}-throughput", bin_width, digest)
        )
        if key.transport == "tcp":
            try:
                result.records.extend(
                    ack_latency(flow, descriptor, f"{base_run}-latency", side, digest)
                )
            except UnsupportedMetricError as exc:  # pragma: no cover - guarded above
                result.errors.append(f"{key}: {exc}")
    if aggregator is not None:
        for kind in (MetricKind.PASSIVE_THROUGHPUT, MetricKind.PASSIVE_LATENCY):
            batch = result.by_metric(kind)
            if not batch:
                continue
            try:
                result.batch_ids.append(
                    aggregator.submit_batch(
                        batch,
                        source="passive",
                        submitter=submitter,
                        idempotency_key=f"{base_run}-{kind.value}-{digest[:16]}",
                    )
                )
            except Exception as exc:  # noqa: BLE001 - summarised for the caller
                result.errors.append(f"submit {kind.value}: {exc}")
    return result
