"""Trace selection and sample-and-hold replay for simulators.

A trace repository is a directory holding newline-delimited JSON record files and a
``manifest.json`` describing them::

    {
      "format": "edgeperf-traces",
      "version": 1,
      "traces": [
        {"file": "run-abc.ndjson", "descriptor": {...}, "run_id": "abc",
         "experiment": "exp-7", "tags": {}}
      ]
    }

Entries that share an ``experiment`` key form one selectable unit, so a bandwidth
file and a latency file recorded together are replayed together.  Entries without
one are units of their own.

Internally all times are integer microseconds; this keeps modular wrap-around and
sample lookups exact.
"""
from __future__ import annotations

import json
import os
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .core import (
    BANDWIDTH_KINDS,
    LATENCY_KINDS,
    QUERY_FIELDS,
    DescriptorQuery,
    MeasurementRecord,
    Metric,
    TraceDescriptor,
    ValidationError,
    descriptor_matches,
    read_ndjson,
)
from .prng import SplitMix64

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "edgeperf-traces"
US = 1_000_000


class TraceError(Exception):
    pass


class TraceNotFoundError(TraceError, LookupError):
    def __init__(self, query: DescriptorQuery, nearest: Sequence[TraceDescriptor]):
        self.query = query
        self.nearest = list(nearest)
        near = "; ".join(json.dumps(d.to_dict(), sort_keys=True) for d in self.nearest)
        super().__init__(
            f"no trace matches {json.dumps(query.to_dict(), sort_keys=True)}"
            + (f"; nearest: {near}" if near else "")
        )


class TraceFormatError(TraceError, ValueError):
    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{path}: {reason}")


@dataclass(frozen=True)
class ManifestEntry:
    file: str
    descriptor: TraceDescriptor
    run_id: str | None = None
    experiment: str | None = None
    tags: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out = {"file": self.file, "descriptor": self.descriptor.to_dict()}
        if self.run_id is not None:
            out["run_id"] = self.run_id
        if self.experiment is not None:
            out["experiment"] = self.experiment
        if self.tags:
            out["tags"] = dict(self.tags)
        return out


def manifest_text(entries: Iterable[ManifestEntry]) -> str:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "traces": [e.to_dict() for e in entries],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_manifest(root: str | os.PathLike, entries: Iterable[ManifestEntry]) -> Path:
    path = Path(root) / MANIFEST_NAME
    atomic_write(path, manifest_text(entries))
    return path


def parse_manifest(path: Path) -> list[ManifestEntry]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise TraceFormatError(path, f"unreadable manifest ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise TraceFormatError(path, "not a trace manifest")
    entries = []
    for i, item in enumerate(doc.get("traces", [])):
        try:
            entries.append(
                ManifestEntry(
                    file=item["file"],
                    descriptor=TraceDescriptor.from_dict(item["descriptor"]),
                    run_id=item.get("run_id"),
                    experiment=item.get("experiment"),
                    tags=item.get("tags") or {},
                )
            )
        except (KeyError, TypeError, ValidationError) as exc:
            raise TraceFormatError(path, f"entry {i}: {exc}") from None
    return entries


def _series_from_records(records: Iterable[MeasurementRecord]) -> list[tuple[int, float]]:
    """Absolute (timestamp_us, value) series; later duplicates of a timestamp win."""
    by_time: dict[int, float] = {}
    for r in records:
        if r.attrs.get("estimate") == "pair":
            continue
        by_time[r.timestamp_us] = r.value
    return sorted(by_time.items())


class TraceRepository:
    """A directory of trace files plus its manifest.

    Parsed files are cached; one handle should be used by one task at a time.
    """

    def __init__(self, root: str | os.PathLike, entries: Sequence[ManifestEntry]):
        self.root = Path(root)
        self.entries = list(entries)
        for e in self.entries:
            if not (self.root / e.file).is_file():
                raise TraceFormatError(self.root / e.file, "listed in manifest but missing")
        self._records: dict[str, list[MeasurementRecord]] = {}
        self._traces: dict[tuple, NetworkTrace] = {}
        self._units = self._group_units()

    @classmethod
    def open(cls, root: str | os.PathLike) -> TraceRepository:
        root = Path(root)
        return cls(root, parse_manifest(root / MANIFEST_NAME))

    def _group_units(self) -> list[list[ManifestEntry]]:
        units: list[list[ManifestEntry]] = []
        keyed: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            if e.experiment is None:
                units.append([e])
            elif e.experiment in keyed:
                keyed[e.experiment].append(e)
            else:
                keyed[e.experiment] = [e]
                units.append(keyed[e.experiment])
        return units

    @property
    def units(self) -> list[list[ManifestEntry]]:
        return self._units

    def records(self, entry: ManifestEntry) -> list[MeasurementRecord]:
        if entry.file not in self._records:
            path = self.root / entry.file
            try:
                recs = read_ndjson(path.read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise TraceFormatError(path, f"unparsable trace file ({exc})") from None
            self._records[entry.file] = recs
        return self._records[entry.file]

    def validate(self) -> None:
        """Parse every listed file; raises TraceFormatError on the first bad one."""
        for e in self.entries:
            self.records(e)

    def matching_units(self, query) -> list[list[ManifestEntry]]:
        q = DescriptorQuery.from_mapping(query)
        return [u for u in self._units if any(descriptor_matches(e.descriptor, q) for e in u)]

    def nearest(self, query, limit: int = 3) -> list[TraceDescriptor]:
        q = DescriptorQuery.from_mapping(query)
        wanted = q.set_fields()

        def misses(d: TraceDescriptor) -> int:
            return sum(getattr(d, k) != v for k, v in wanted.items())

        ranked = sorted(
            {e.descriptor for e in self.entries}, key=lambda d: (misses(d), json.dumps(d.to_dict()))
        )
        return ranked[:limit]


@dataclass(frozen=True)
class NetworkTrace:
    """Aligned bandwidth (Mbps) and RTT (ms) series keyed by offsets in seconds.

    Lookups use sample-and-hold.  Circular traces wrap the query modulo
    ``duration``; non-circular traces hold the last value past the end.  Queries
    before the first sample return the first value.
    """

    bandwidth_series: tuple[tuple[float, float], ...]
    rtt_series: tuple[tuple[float, float], ...]
    duration: float
    circular: bool = False
    descriptor: TraceDescriptor | None = None
    sources: tuple[str, ...] = ()
    _bw_t: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _bw_v: tuple[float, ...] = field(init=False, repr=False, compare=False)
    _rtt_t: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _rtt_v: tuple[float, ...] = field(init=False, repr=False, compare=False)
    _dur_us: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        bw = tuple((float(t), float(v)) for t, v in self.bandwidth_series)
        rtt = tuple((float(t), float(v)) for t, v in self.rtt_series)
        set_("bandwidth_series", bw)
        set_("rtt_series", rtt)
        dur_us = to_us(self.duration)
        for name, series in (("bandwidth", bw), ("rtt", rtt)):
            offs = [to_us(t) for t, _ in series]
            if any(b <= a for a, b in zip(offs, offs[1:])):
                raise ValueError(f"{name} offsets must be strictly increasing")
            if offs and offs[-1] > dur_us:
                raise ValueError(f"duration shorter than last {name} offset")
            set_(f"_{'bw' if name == 'bandwidth' else 'rtt'}_t", tuple(offs))
            set_(f"_{'bw' if name == 'bandwidth' else 'rtt'}_v", tuple(v for _, v in series))
        if self.circular and dur_us <= 0:
            raise ValueError("circular traces need a positive duration")
        set_("_dur_us", dur_us)

    @classmethod
    def from_us(
        cls,
        bandwidth: Sequence[tuple[int, float]],
        rtt: Sequence[tuple[int, float]],
        duration_us: int,
        circular: bool = False,
        descriptor: TraceDescriptor | None = None,
        sources: tuple[str, ...] = (),
    ) -> NetworkTrace:
        return cls(
            tuple((t / US, v) for t, v in bandwidth),
            tuple((t / US, v) for t, v in rtt),
            duration_us / US,
            circular,
            descriptor,
            sources,
        )

    def effective_us(self, timestamp, offsets: Sequence[int]) -> int:
        t = to_us(timestamp)
        if self.circular:
            return t % self._dur_us
        return min(t, offsets[-1])

    def _lookup(self, timestamp, offsets, values, what) -> float:
        if not offsets:
            raise LookupError(f"trace has no {what} samples")
        t = self.effective_us(timestamp, offsets)
        i = bisect_right(offsets, t) - 1
        return values[max(i, 0)]

    def get_bandwidth(self, timestamp) -> float:
        """Bandwidth in Mbps at ``timestamp`` seconds from the trace origin."""
        return self._lookup(timestamp, self._bw_t, self._bw_v, "bandwidth")

    def get_rtt(self, timestamp) -> float:
        """RTT in ms at ``timestamp`` seconds from the trace origin."""
        return self._lookup(timestamp, self._rtt_t, self._rtt_v, "rtt")

    @property
    def has_bandwidth(self) -> bool:
        return bool(self._bw_t)

    @property
    def has_rtt(self) -> bool:
        return bool(self._rtt_t)


def to_us(seconds) -> int:
    if seconds < 0:
        raise ValueError("timestamps must be non-negative")
    return round(seconds * US)


def _mean_interval(series: Sequence[tuple[int, float]]) -> int | None:
    if len(series) < 2:
        return None
    return max(1, round((series[-1][0] - series[0][0]) / (len(series) - 1)))


def _circular_tail(*series_list) -> int:
    gaps = [g for g in map(_mean_interval, series_list) if g is not None]
    return min(gaps) if gaps else US


def align_us(
    bandwidth: Sequence[tuple[int, float]],
    rtt: Sequence[tuple[int, float]],
    circular: bool = False,
    descriptor: TraceDescriptor | None = None,
    sources: tuple[str, ...] = (),
) -> NetworkTrace:
    """Align two absolute integer-microsecond series onto a common origin.

    The origin is the later of the two first samples; samples before it, and
    samples after the earlier of the two last samples, are dropped.
    """
    if not bandwidth or not rtt:
        raise ValueError("cannot align an empty series")
    origin = max(bandwidth[0][0], rtt[0][0])
    end = min(bandwidth[-1][0], rtt[-1][0])
    if end < origin:
        raise ValueError("series do not overlap in time")
    bw = [(t - origin, v) for t, v in bandwidth if origin <= t <= end]
    rt = [(t - origin, v) for t, v in rtt if origin <= t <= end]
    duration = end - origin
    if circular:
        duration += _circular_tail(bw, rt)
    return NetworkTrace.from_us(bw, rt, duration, circular, descriptor, sources)


def align(
    bandwidth_series: Sequence[tuple[float, float]],
    rtt_series: Sequence[tuple[float, float]],
    circular: bool = False,
    descriptor: TraceDescriptor | None = None,
) -> NetworkTrace:
    """Seconds-based front end to :func:`align_us`."""
    if not bandwidth_series or not rtt_series:
        raise ValueError("cannot align an empty series")
    base = min(bandwidth_series[0][0], rtt_series[0][0])
    bw = [(round((t - base) * US), v) for t, v in bandwidth_series]
    rt = [(round((t - base) * US), v) for t, v in rtt_series]
    return align_us(bw, rt, circular, descriptor)


def single_series_trace(
    series: Sequence[tuple[int, float]],
    kind: str,
    circular: bool = False,
    descriptor: TraceDescriptor | None = None,
    sources: tuple[str, ...] = (),
) -> NetworkTrace:
    if not series:
        raise ValueError("empty series")
    origin = series[0][0]
    shifted = [(t - origin, v) for t, v in series]
    duration = shifted[-1][0]
    if circular:
        duration += _circular_tail(shifted)
    bw, rt = (shifted, []) if kind == "bandwidth" else ([], shifted)
    return NetworkTrace.from_us(bw, rt, duration, circular, descriptor, sources)


def _first(unit, q, kinds, metric):
    for e in unit:
        if not descriptor_matches(e.descriptor, q):
            continue
        if metric is not None:
            if e.descriptor.metric == metric:
                return e
        elif e.descriptor.metric.kind in kinds:
            return e
    return None


def select_unit(repo: TraceRepository, query, seed: int) -> list[ManifestEntry]:
    """The seeded choice among matching units (manifest order, SplitMix64 mod n)."""
    q = DescriptorQuery.from_mapping(query)
    candidates = repo.matching_units(q)
    if not candidates:
        raise TraceNotFoundError(q, repo.nearest(q))
    return candidates[SplitMix64(seed).choice_index(len(candidates))]


def open_trace(
    repo: TraceRepository,
    query: DescriptorQuery | Mapping[str, Any] | None,
    seed: int,
    circular: bool = False,
    *,
    bandwidth_metric=None,
    rtt_metric=None,
) -> NetworkTrace:
    """Pick one matching experiment by seed and build its replayable trace.

    Within the chosen unit the first matching bandwidth-like file and first matching
    latency file (manifest order) are used, unless a specific metric is requested.
    """
    q = DescriptorQuery.from_mapping(query)
    unit = select_unit(repo, q, seed)
    bw_metric = Metric.parse(bandwidth_metric) if bandwidth_metric is not None else None
    rtt_m = Metric.parse(rtt_metric) if rtt_metric is not None else None
    bw_entry = _first(unit, q, BANDWIDTH_KINDS, bw_metric)
    rtt_entry = _first(unit, q, LATENCY_KINDS, rtt_m)
    if bw_entry is None and rtt_entry is None:
        raise TraceFormatError(
            repo.root / unit[0].file, "selected experiment has no bandwidth or latency series"
        )
    key = (
        bw_entry.file if bw_entry else None,
        rtt_entry.file if rtt_entry else None,
        circular,
    )
    cached = repo._traces.get(key)
    if cached is not None:
        return cached
    sources = tuple(e.file for e in (bw_entry, rtt_entry) if e is not None)
    descriptor = (bw_entry or rtt_entry).descriptor
    bw = _series_from_records(repo.records(bw_entry)) if bw_entry else []
    rt = _series_from_records(repo.records(rtt_entry)) if rtt_entry else []
    try:
        if bw and rt:
            trace = align_us(bw, rt, circular, descriptor, sources)
        elif bw:
            trace = single_series_trace(bw, "bandwidth", circular, descriptor, sources)
        elif rt:
            trace = single_series_trace(rt, "rtt", circular, descriptor, sources)
        else:
            raise ValueError("no samples")
    except ValueError as exc:
        raise TraceFormatError(repo.root / sources[0], str(exc)) from None
    repo._traces[key] = trace
    return trace


class NetworkTraceManager:
    """Convenience wrapper: one repository, one descriptor query, one seed."""

    def __init__(self, root, query=None, seed: int = 0, circular: bool = False):
        self.repository = TraceRepository.open(root)
        self.trace = open_trace(self.repository, query, seed, circular)

    def get_bandwidth(self, timestamp) -> float:
        return self.trace.get_bandwidth(timestamp)

    def get_rtt(self, timestamp) -> float:
        return self.trace.get_rtt(timestamp)


def sweep(trace: NetworkTrace, start: float, stop: float, step: float):
    """Yield (t, bandwidth|None, rtt|None) rows for t in [start, stop)."""
    n = int(round((stop - start) / step))
    for i in range(n):
        t = start + i * step
        yield (
            t,
            trace.get_bandwidth(t) if trace.has_bandwidth else None,
            trace.get_rtt(t) if trace.has_rtt else None,
        )


__all__ = [
    "MANIFEST_NAME",
    "ManifestEntry",
    "NetworkTrace",
    "NetworkTraceManager",
    "QUERY_FIELDS",
    "TraceFormatError",
    "TraceNotFoundError",
    "TraceRepository",
    "align",
    "align_us",
    "open_trace",
    "select_unit",
    "sweep",
    "write_manifest",
]
