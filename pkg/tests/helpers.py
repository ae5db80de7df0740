"""Record factories and independent oracles shared by the test modules."""
from __future__ import annotations

import math
from pathlib import Path

from edgeperf.aggregator.store import export_payload, write_export
from edgeperf.core import (
    AccessTechnology,
    Direction,
    MeasurementRecord,
    Method,
    Metric,
    SegmentId,
    TraceDescriptor,
)
from edgeperf.traces import ManifestEntry, manifest_text

T0 = 1_700_000_000_000_000


def descriptor(
    method="active",
    metric="tcp_bandwidth",
    segment="access_mec",
    direction="downstream",
    tech="wifi",
    cross=0.0,
    num_clients=None,
) -> TraceDescriptor:
    return TraceDescriptor(
        Method(method),
        Metric.parse(metric),
        SegmentId(segment),
        Direction(direction),
        AccessTechnology(tech),
        cross,
        num_clients,
    )


def series_records(desc: TraceDescriptor, series, run_id: str, experiment: str | None = None, t0: int = T0):
    """Records for ``[(offset_seconds, value), ...]``; ids are deterministic."""
    attrs = {"experiment": experiment} if experiment else {}
    return [
        MeasurementRecord(desc, t0 + round(t * 1e6), v, run_id, id=f"{run_id}-{i:05d}", attrs=attrs)
        for i, (t, v) in enumerate(series)
    ]


def write_repo(root: Path, runs) -> Path:
    """``runs``: iterable of (descriptor, series, run_id, experiment); manifest keeps this order."""
    files, entries = {}, []
    for desc, series, run_id, experiment in runs:
        recs = series_records(desc, series, run_id, experiment)
        f, _ = export_payload(recs)
        files.update(f)
        name = next(iter(f))
        entries.append(ManifestEntry(name, desc, run_id, experiment))
    write_export(files, manifest_text(entries), root)
    return root


def rtt_only_repo(root: Path, traces) -> Path:
    """Repository of latency-only traces; ``traces`` maps run_id -> (tech, series)."""
    runs = [
        (descriptor(metric="tcp_latency", direction="upstream", tech=tech), series, run_id, None)
        for run_id, (tech, series) in traces.items()
    ]
    return write_repo(root, runs)


# -- sample-and-hold oracle --------------------------------------------------

def hold_oracle(series_us, t_us: int, duration_us: int, circular: bool) -> float:
    """Linear scan: value of the latest sample at or before the effective time."""
    offsets = [t for t, _ in series_us]
    if circular:
        t_eff = t_us % duration_us
    else:
        t_eff = min(t_us, offsets[-1])
    value = series_us[0][1]
    for t, v in series_us:
        if t <= t_eff:
            value = v
        else:
            break
    return value


# -- statistics oracle ---------------------------------------------------------

def t_half_width_df2(values) -> float:
    """95% half-width for three values using the closed-form df=2 Student quantile."""
    assert len(values) == 3
    p = 0.975
    q = (2 * p - 1) / math.sqrt(2 * p * (1 - p))
    m = sum(values) / 3
    sd = math.sqrt(sum((v - m) ** 2 for v in values) / 2)
    return q * sd / math.sqrt(3)


# -- raw trace reading oracle ------------------------------------------------

def raw_series(path: Path):
    """(timestamp_us, value) from an NDJSON file with plain json; pair estimates skipped."""
    import json

    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if (doc.get("attrs") or {}).get("estimate") == "pair":
            continue
        out[doc["timestamp_us"]] = doc["value"]
    return sorted(out.items())


def aligned_oracle(bw, rtt, circular):
    """Common-origin alignment; returns (bw_rel, rtt_rel, duration_us)."""
    series = [s for s in (bw, rtt) if s]
    origin = max(s[0][0] for s in series)
    end = min(s[-1][0] for s in series)
    rel = [[(t - origin, v) for t, v in s if origin <= t <= end] for s in series]
    duration = end - origin
    if circular:
        gaps = [max(1, round((s[-1][0] - s[0][0]) / (len(s) - 1))) for s in rel if len(s) > 1]
        duration += min(gaps) if gaps else 1_000_000
    if bw and rtt:
        return rel[0], rel[1], duration
    return (rel[0], [], duration) if bw else ([], rel[0], duration)


class HoldWalker:
    """Sample-and-hold for non-decreasing query times, by a forward linear scan."""

    def __init__(self, series_us):
        self.series = series_us
        self.i = 0

    def at(self, t_us):
        s = self.series
        while self.i + 1 < len(s) and s[self.i + 1][0] <= t_us:
            self.i += 1
        return s[self.i][1]


# -- bundled trace sweep -------------------------------------------------------

BANDWIDTH = {"tcp_bandwidth", "udp_capacity", "passive_throughput"}
LATENCY = {"tcp_latency", "udp_latency", "passive_latency"}


def seed_for_each_unit(n):
    """Smallest seed selecting each of ``n`` candidates, found by search."""
    from edgeperf.prng import SplitMix64

    found = {}
    s = 0
    while len(found) < n:
        found.setdefault(SplitMix64(s).choice_index(n), s)
        s += 1
    return [found[i] for i in range(n)]


def manifest_units(root):
    """Manifest entries grouped by experiment key, read with plain json."""
    import json

    doc = json.loads((Path(root) / "manifest.json").read_text())
    units, keyed = [], {}
    for e in doc["traces"]:
        exp = e.get("experiment")
        if exp is None:
            units.append([e])
        elif exp in keyed:
            keyed[exp].append(e)
        else:
            keyed[exp] = [e]
            units.append(keyed[exp])
    return units


def first_file(unit, kinds):
    for e in unit:
        if e["descriptor"]["metric"] in kinds:
            return e["file"]
    return None


def sweep_against_oracle(root, extra_ms: int = 2000):
    """1 ms sweep of every unit in ``root``, both replay modes; returns (checked, mismatches).

    The sweep covers the whole trace plus ``extra_ms`` past its end, so the circular
    wrap and the non-circular hold are both exercised.
    """
    from edgeperf.traces import TraceRepository, open_trace

    root = Path(root)
    repo = TraceRepository.open(root)
    units = manifest_units(root)
    checked = mismatches = 0
    for unit, seed in zip(units, seed_for_each_unit(len(units))):
        bw_file, rtt_file = first_file(unit, BANDWIDTH), first_file(unit, LATENCY)
        bw = raw_series(root / bw_file) if bw_file else []
        rtt = raw_series(root / rtt_file) if rtt_file else []
        for circular in (True, False):
            trace = open_trace(repo, {}, seed, circular)
            if trace.sources != tuple(f for f in (bw_file, rtt_file) if f):
                mismatches += 1
                continue
            bw_rel, rtt_rel, dur = aligned_oracle(bw, rtt, circular)
            if round(trace.duration * 1e6) != dur:
                mismatches += 1
            for get, rel in ((trace.get_bandwidth, bw_rel), (trace.get_rtt, rtt_rel)):
                if not rel:
                    continue
                w = HoldWalker(rel)
                for ms in range(dur // 1000 + extra_ms):
                    t_us = ms * 1000
                    if circular and t_us >= dur:
                        want = hold_oracle(rel, t_us, dur, True)
                    else:
                        want = w.at(min(t_us, rel[-1][0]))
                    checked += 1
                    mismatches += get(ms / 1000) != want
    return checked, mismatches
