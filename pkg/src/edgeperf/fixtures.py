"""Deterministic synthetic inputs: captures, trace repositories and the bimodal RTT pool.

Everything here is a pure function of its arguments (including the seed), so
regenerating a fixture reproduces it byte for byte.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from .aggregator.store import export_payload, write_export
from .core import (
    AccessTechnology,
    Direction,
    MeasurementRecord,
    Method,
    Metric,
    MetricKind,
    SegmentId,
    TraceDescriptor,
)
from .passive.pcap import TCP_ACK, TCP_PSH, TCP_SYN, PacketRecord, write_capture
from .traces import ManifestEntry, atomic_write, manifest_text

KINDS = ("synthetic-pcap", "synthetic-traces", "bimodal-rtt-pool")
FIXTURE_MANIFEST = "fixtures.json"
EPOCH_US = 1_600_000_000_000_000
CLIENT, SERVER = ("10.0.0.2", 40000), ("10.0.0.1", 8080)
BASELINE_MS = 0.8
MS = 1_000_000  # ns

# Simulation settings that pair each client's two traces from the bimodal pool.
BIMODAL_STUDY = {
    "trace_query_op1": {"access_technology": "wifi"},
    "trace_query_op2": {"access_technology": "lte"},
    "paired_traces": True,
}


@dataclass(frozen=True)
class FlowSpec:
    rate_mbps: float = 10.0
    duration_s: float = 5.0
    payload: int = 1250
    delay_ms: float = 0.0
    baseline_ms: float = BASELINE_MS
    retransmit: tuple[int, ...] = ()
    start_ns: int = 1_000 * MS
    client: tuple[str, int] = CLIENT
    server: tuple[str, int] = SERVER
    isn: int = 1000


def tcp_flow(spec: FlowSpec = FlowSpec()) -> list[PacketRecord]:
    """Server-to-client bulk TCP transfer at a constant rate, as seen at the server side.

    Data packet ``k`` is captured at ``start + k * interval``; its ACK is captured
    one RTT (``delay_ms + baseline_ms``) later.  Indices in ``retransmit`` are
    sent twice (the copy half an interval later) and only the copy is ACKed.
    All times are whole microseconds so microsecond pcaps are exact.
    """
    interval_ns = round(spec.payload * 8 / (spec.rate_mbps * 1e6) * 1e9)
    rtt_ns = round((spec.delay_ms + spec.baseline_ms) * MS)
    if interval_ns % 1000 or rtt_ns % 1000:
        raise ValueError("packet interval and RTT must be whole microseconds")
    n = round(spec.duration_s * 1e9 / interval_ns)
    (ca, cp), (sa, sp) = spec.client, spec.server
    t0 = spec.start_ns
    syn_t = t0 - 2 * rtt_ns - MS
    pkts = [
        PacketRecord(syn_t, ca, sa, cp, sp, "tcp", 0, 5000, 0, TCP_SYN),
        PacketRecord(syn_t + 50_000, sa, ca, sp, cp, "tcp", 0, spec.isn, 5001, TCP_SYN | TCP_ACK),
        PacketRecord(syn_t + 50_000 + rtt_ns, ca, sa, cp, sp, "tcp", 0, 5001, spec.isn + 1, TCP_ACK),
    ]
    retrans = set(spec.retransmit)
    for k in range(n):
        t = t0 + k * interval_ns
        seq = spec.isn + 1 + k * spec.payload
        flags = TCP_ACK | TCP_PSH
        pkts.append(PacketRecord(t, sa, ca, sp, cp, "tcp", spec.payload, seq, 5001, flags))
        if k in retrans:
            t_copy = t + (interval_ns // 2000) * 1000
            pkts.append(PacketRecord(t_copy, sa, ca, sp, cp, "tcp", spec.payload, seq, 5001, flags))
            t_ack = t_copy + rtt_ns
        else:
            t_ack = t + rtt_ns
        pkts.append(PacketRecord(t_ack, ca, sa, cp, sp, "tcp", 0, 5001, seq + spec.payload, TCP_ACK))
    pkts.sort(key=lambda p: p.timestamp_ns)
    return pkts


def udp_flow(
    rate_mbps: float = 10.0,
    duration_s: float = 5.0,
    payload: int = 1250,
    start_ns: int = 1_000 * MS,
    src: tuple[str, int] = SERVER,
    dst: tuple[str, int] = CLIENT,
) -> list[PacketRecord]:
    interval_ns = round(payload * 8 / (rate_mbps * 1e6) * 1e9)
    n = round(duration_s * 1e9 / interval_ns)
    return [
        PacketRecord(start_ns + k * interval_ns, src[0], dst[0], src[1], dst[1], "udp", payload)
        for k in range(n)
    ]


def background_traffic(seed: int, duration_s: float = 5.0, start_ns: int = 1_000 * MS) -> list[PacketRecord]:
    """Random-size UDP chatter on another port pair; it should never pass a port-8080 filter."""
    rng = random.Random(seed)
    out, t = [], start_ns
    end = start_ns + round(duration_s * 1e9)
    while t < end:
        out.append(PacketRecord(t, "10.0.0.3", "10.0.0.9", 5353, 5353, "udp", rng.randint(40, 1400)))
        t += rng.randint(1, 50) * MS
    return out


def merge(*flows: list[PacketRecord]) -> list[PacketRecord]:
    return sorted((p for f in flows for p in f), key=lambda p: p.timestamp_ns)


def capture_bytes(packets: list[PacketRecord], byte_order: str = "<", nanosecond: bool = False) -> bytes:
    return write_capture(packets, byte_order=byte_order, nanosecond=nanosecond)


def synthetic_pcaps(seed: int = 42) -> dict[str, tuple[bytes, dict]]:
    """Named captures with the parameters that produced them."""
    noise = background_traffic(seed)
    out: dict[str, tuple[bytes, dict]] = {}

    def add(name: str, packets, **meta):
        out[name] = (capture_bytes(packets), meta)

    add("constant-10mbps.pcap", merge(tcp_flow(FlowSpec()), noise),
        flow="tcp", rate_mbps=10.0, duration_s=5.0, delay_ms=0.0, baseline_ms=BASELINE_MS, filter="port 8080")
    for d in (10, 50, 100):
        add(f"delay-{d}ms.pcap", merge(tcp_flow(FlowSpec(delay_ms=d)), noise),
            flow="tcp", rate_mbps=10.0, duration_s=5.0, delay_ms=float(d), baseline_ms=BASELINE_MS,
            filter="port 8080")
    add("retransmit.pcap", tcp_flow(FlowSpec(duration_s=0.1, retransmit=(10, 40))),
        flow="tcp", rate_mbps=10.0, duration_s=0.1, retransmit=[10, 40], baseline_ms=BASELINE_MS,
        filter="port 8080")
    add("udp-only.pcap", merge(udp_flow(), noise), flow="udp", rate_mbps=10.0, duration_s=5.0,
        filter="port 8080")
    return out


# -- trace repositories ----------------------------------------------------

def _series(rng: random.Random, start_us: int, n: int, mean: float, spread: float, drop: float = 0.0):
    """(timestamp_us, value) pairs roughly one second apart, with jitter and dropped samples."""
    out, t = [], start_us
    for _ in range(n):
        if rng.random() >= drop:
            out.append((t, max(0.1, round(rng.gauss(mean, spread), 3))))
        t += 1_000_000 + rng.randint(-50_000, 50_000)
    return out


def _records(desc: TraceDescriptor, series, run_id: str, experiment: str, rng: random.Random):
    return [
        MeasurementRecord(desc, t, v, run_id, id=f"{rng.getrandbits(128):032x}", attrs={"experiment": experiment})
        for t, v in series
    ]


def synthetic_trace_records(seed: int = 42, samples: int = 30) -> list[MeasurementRecord]:
    """Active bandwidth + latency experiments over the descriptor grid.

    One experiment per (segment, direction, technology, cross-traffic in {0, 50});
    the Wi-Fi, access-MEC, downstream, zero-cross-traffic cell has three so that
    seeded selection has a real choice.
    """
    rng = random.Random(seed)
    records: list[MeasurementRecord] = []
    idx = 0
    for seg in (SegmentId.ACCESS_MEC, SegmentId.ACCESS_CLOUD):
        for dirn in (Direction.UPSTREAM, Direction.DOWNSTREAM):
            for tech in (AccessTechnology.WIFI, AccessTechnology.LTE):
                for cross in (0.0, 50.0):
                    reps = 3 if (seg, dirn, tech, cross) == (
                        SegmentId.ACCESS_MEC, Direction.DOWNSTREAM, AccessTechnology.WIFI, 0.0) else 1
                    for _ in range(reps):
                        exp = f"exp-{idx:03d}"
                        base = EPOCH_US + idx * 600_000_000
                        bw_mean = (35.0 if tech is AccessTechnology.WIFI else 18.0) - cross * 0.2
                        rtt_mean = (9.0 if tech is AccessTechnology.WIFI else 38.0) + cross * 0.15
                        if seg is SegmentId.ACCESS_CLOUD:
                            rtt_mean += 25.0
                        bw_desc = TraceDescriptor(Method.ACTIVE, Metric(MetricKind.TCP_BANDWIDTH), seg, dirn, tech, cross)
                        rtt_desc = TraceDescriptor(Method.ACTIVE, Metric(MetricKind.TCP_LATENCY), seg, dirn, tech, cross)
                        bw = _series(rng, base + rng.randint(0, 2_000_000), samples, bw_mean, bw_mean * 0.1)
                        rtt = _series(rng, base + rng.randint(0, 2_000_000), samples, rtt_mean, rtt_mean * 0.15,
                                      drop=0.1)
                        records += _records(bw_desc, bw, f"{exp}-bw", exp, rng)
                        records += _records(rtt_desc, rtt, f"{exp}-rtt", exp, rng)
                        idx += 1
    return records


def bimodal_pool_entries(seed: int = 42, per_technology: int = 20, samples: int = 60):
    """Good (~10 ms) and bad (~100 ms) RTT traces for the federation study.

    The Wi-Fi list alternates good, bad, good, ... and the LTE list the opposite,
    so a shared selection seed gives every client one good and one bad trace.
    Returns (files, manifest entries) with entries in pool order.
    """
    if per_technology % 2:
        raise ValueError("per_technology must be even")
    rng = random.Random(seed)
    files: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    for t_i, tech in enumerate((AccessTechnology.WIFI, AccessTechnology.LTE)):
        desc = TraceDescriptor(
            Method.ACTIVE, Metric(MetricKind.TCP_LATENCY), SegmentId.ACCESS_MEC, Direction.UPSTREAM, tech, 0.0
        )
        for i in range(per_technology):
            good = (i + t_i) % 2 == 0
            base_ms = rng.uniform(6, 14) if good else rng.uniform(80, 120)
            spread = 1.0 if good else 5.0
            run_id = f"pool-{tech.value}-{i:02d}"
            series = _series(rng, EPOCH_US + (t_i * per_technology + i) * 600_000_000, samples, base_ms, spread)
            recs = _records(desc, series, run_id, run_id, rng)
            name = f"run-{run_id}.ndjson"
            file_text, _ = export_payload(recs)
            files[name] = file_text[name]
            entries.append(ManifestEntry(name, desc, run_id, run_id, {"quality": "good" if good else "bad"}))
    return files, entries


# -- writers ---------------------------------------------------------------

def write_synthetic_pcaps(dest, seed: int = 42) -> list[Path]:
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    written, index = [], {}
    for name, (data, meta) in synthetic_pcaps(seed).items():
        tmp = dest / f".{name}.tmp"
        tmp.write_bytes(data)
        tmp.replace(dest / name)
        written.append(dest / name)
        index[name] = meta
    atomic_write(dest / FIXTURE_MANIFEST, json.dumps({"kind": "synthetic-pcap", "seed": seed, "captures": index},
                                                     indent=2, sort_keys=True) + "\n")
    return written


def write_synthetic_traces(dest, seed: int = 42) -> list[Path]:
    files, manifest = export_payload(synthetic_trace_records(seed))
    return write_export(files, manifest, dest)


def write_bimodal_pool(dest, seed: int = 42) -> list[Path]:
    files, entries = bimodal_pool_entries(seed)
    return write_export(files, manifest_text(entries), dest)


WRITERS = {
    "synthetic-pcap": write_synthetic_pcaps,
    "synthetic-traces": write_synthetic_traces,
    "bimodal-rtt-pool": write_bimodal_pool,
}


def generate_fixtures(kind: str, seed: int, destination) -> list[Path]:
    if kind not in WRITERS:
        raise ValueError(f"unknown fixture kind {kind!r}; choose from {', '.join(KINDS)}")
    return WRITERS[kind](destination, seed)


def bundled_path(name: str) -> Path:
    """Directory of a bundled fixture: ``synthetic-traces`` or ``bimodal-rtt-pool``."""
    from importlib.resources import files

    return Path(str(files("edgeperf") / "data" / name))
