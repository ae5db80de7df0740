"""Domain model shared by every collector, the aggregator and the replay library.

Records are immutable values.  The canonical wire encoding is one JSON object per
record (see ``record_to_dict``); trace files are newline-delimited JSON of the same
objects.  Units are fixed per metric: Mbps for bandwidth-like metrics, milliseconds
for latency.  Self metrics carry whatever unit the application reports.
"""
from __future__ import annotations

import enum
import json
import math
import time
import uuid
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant.

    ``field`` names the offending attribute (dotted path) when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
        self.reason = message


class Method(str, enum.Enum):
    ACTIVE = "active"
    PASSIVE = "passive"
    SELF = "self"


class MetricKind(str, enum.Enum):
    TCP_BANDWIDTH = "tcp_bandwidth"
    UDP_CAPACITY = "udp_capacity"
    TCP_LATENCY = "tcp_latency"
    UDP_LATENCY = "udp_latency"
    PASSIVE_THROUGHPUT = "passive_throughput"
    PASSIVE_LATENCY = "passive_latency"  # TCP only, there is no UDP variant
    SELF_METRIC = "self_metric"


class SegmentId(str, enum.Enum):
    ACCESS_MEC = "access_mec"
    MEC_CLOUD = "mec_cloud"
    ACCESS_CLOUD = "access_cloud"


class Direction(str, enum.Enum):
    UPSTREAM = "upstream"
    DOWNSTREAM = "downstream"


class AccessTechnology(str, enum.Enum):
    WIFI = "wifi"
    LTE = "lte"


METHOD_METRICS = {
    Method.ACTIVE: {
        MetricKind.TCP_BANDWIDTH,
        MetricKind.UDP_CAPACITY,
        MetricKind.TCP_LATENCY,
        MetricKind.UDP_LATENCY,
    },
    Method.PASSIVE: {MetricKind.PASSIVE_THROUGHPUT, MetricKind.PASSIVE_LATENCY},
    Method.SELF: {MetricKind.SELF_METRIC},
}

BANDWIDTH_KINDS = frozenset(
    {MetricKind.TCP_BANDWIDTH, MetricKind.UDP_CAPACITY, MetricKind.PASSIVE_THROUGHPUT}
)
LATENCY_KINDS = frozenset(
    {MetricKind.TCP_LATENCY, MetricKind.UDP_LATENCY, MetricKind.PASSIVE_LATENCY}
)

CANONICAL_UNITS = {kind: "Mbps" for kind in BANDWIDTH_KINDS} | {
    kind: "ms" for kind in LATENCY_KINDS
}

# Accepted at ingestion and converted to the canonical unit.
_UNIT_FACTORS = {
    "Mbps": {"bps": 1e-6, "Kbps": 1e-3, "kbps": 1e-3, "Mbps": 1.0, "Gbps": 1e3},
    "ms": {"us": 1e-3, "ms": 1.0, "s": 1e3},
}


@dataclass(frozen=True)
class Metric:
    """A metric kind, plus the application label for self metrics."""

    kind: MetricKind
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        if self.kind is MetricKind.SELF_METRIC:
            if not self.label:
                raise ValidationError("self_metric requires a non-empty label", "metric")
        elif self.label is not None:
            raise ValidationError(f"{self.kind.value} takes no label", "metric")

    @classmethod
    def parse(cls, text: str | Metric) -> Metric:
        if isinstance(text, Metric):
            return text
        if isinstance(text, MetricKind):
            return cls(text)
        kind, sep, label = str(text).partition(":")
        try:
            mk = MetricKind(kind)
        except ValueError:
            raise ValidationError(f"unknown metric {text!r}", "metric") from None
        return cls(mk, label if sep else None)

    def __str__(self) -> str:
        if self.label is None:
            return self.kind.value
        return f"{self.kind.value}:{self.label}"

    @property
    def canonical_unit(self) -> str | None:
        return CANONICAL_UNITS.get(self.kind)


def _enum(cls, value, name):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ValidationError(f"{value!r} not one of {allowed}", name) from None


@dataclass(frozen=True)
class TraceDescriptor:
    """The property tuple used to tag and select measurement traces."""

    method: Method
    metric: Metric
    segment: SegmentId
    direction: Direction
    access_technology: AccessTechnology
    cross_traffic_mbps: float = 0.0
    num_clients: int | None = None

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("method", _enum(Method, self.method, "method"))
        set_("metric", Metric.parse(self.metric))
        set_("segment", _enum(SegmentId, self.segment, "segment"))
        set_("direction", _enum(Direction, self.direction, "direction"))
        set_(
            "access_technology",
            _enum(AccessTechnology, self.access_technology, "access_technology"),
        )
        ct = self.cross_traffic_mbps
        if isinstance(ct, bool) or not isinstance(ct, (int, float)):
            raise ValidationError("must be a number", "cross_traffic_mbps")
        if not math.isfinite(ct) or ct < 0:
            raise ValidationError("must be finite and non-negative", "cross_traffic_mbps")
        set_("cross_traffic_mbps", float(ct))
        if self.metric.kind not in METHOD_METRICS[self.method]:
            raise ValidationError(
                f"metric {self.metric} not available for method {self.method.value}", "metric"
            )
        if self.num_clients is not None:
            if self.method is Method.ACTIVE:
                raise ValidationError("must be absent for active measurements", "num_clients")
            if isinstance(self.num_clients, bool) or not isinstance(self.num_clients, int):
                raise ValidationError("must be an integer", "num_clients")
            if self.num_clients < 1:
                raise ValidationError("must be positive", "num_clients")

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method.value,
            "metric": str(self.metric),
            "segment": self.segment.value,
            "direction": self.direction.value,
            "access_technology": self.access_technology.value,
            "cross_traffic_mbps": self.cross_traffic_mbps,
            "num_clients": self.num_clients,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TraceDescriptor:
        if not isinstance(data, Mapping):
            raise ValidationError("must be an object", "descriptor")
        required = ("method", "metric", "segment", "direction", "access_technology")
        for key in required:
            if key not in data:
                raise ValidationError("missing", f"descriptor.{key}")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown fields {sorted(unknown)}", "descriptor")
        try:
            return cls(
                method=data["method"],
                metric=data["metric"],
                segment=data["segment"],
                direction=data["direction"],
                access_technology=data["access_technology"],
                cross_traffic_mbps=data.get("cross_traffic_mbps", 0.0),
                num_clients=data.get("num_clients"),
            )
        except ValidationError as exc:
            raise ValidationError(exc.reason, f"descriptor.{exc.field}") from None

    def without_metric(self) -> tuple:
        """Identity of the experimental setup, ignoring which metric was taken."""
        return (
            self.method,
            self.segment,
            self.direction,
            self.access_technology,
            self.cross_traffic_mbps,
            self.num_clients,
        )


QUERY_FIELDS = (
    "method",
    "metric",
    "segment",
    "direction",
    "access_technology",
    "cross_traffic_mbps",
    "num_clients",
)


@dataclass(frozen=True)
class DescriptorQuery:
    """A partial descriptor; ``None`` fields are wildcards."""

    method: Method | None = None
    metric: Metric | None = None
    segment: SegmentId | None = None
    direction: Direction | None = None
    access_technology: AccessTechnology | None = None
    cross_traffic_mbps: float | None = None
    num_clients: int | None = None

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.method is not None:
            set_("method", _enum(Method, self.method, "method"))
        if self.metric is not None:
            set_("metric", Metric.parse(self.metric))
        if self.segment is not None:
            set_("segment", _enum(SegmentId, self.segment, "segment"))
        if self.direction is not None:
            set_("direction", _enum(Direction, self.direction, "direction"))
        if self.access_technology is not None:
            set_(
                "access_technology",
                _enum(AccessTechnology, self.access_technology, "access_technology"),
            )
        if self.cross_traffic_mbps is not None:
            set_("cross_traffic_mbps", float(self.cross_traffic_mbps))
        if self.num_clients is not None:
            set_("num_clients", int(self.num_clients))

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | DescriptorQuery | None) -> DescriptorQuery:
        if data is None:
            return cls()
        if isinstance(data, DescriptorQuery):
            return data
        if isinstance(data, TraceDescriptor):
            return cls(**{k: getattr(data, k) for k in QUERY_FIELDS})
        unknown = set(data) - set(QUERY_FIELDS)
        if unknown:
            raise ValidationError(f"unknown query fields {sorted(unknown)}", "query")
        return cls(**{k: v for k, v in data.items() if v is not None})

    def set_fields(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in QUERY_FIELDS if getattr(self, k) is not None}

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for k, v in self.set_fields().items():
            out[k] = str(v) if isinstance(v, Metric) else getattr(v, "value", v)
        return out


def descriptor_matches(
    descriptor: TraceDescriptor, query: DescriptorQuery | Mapping[str, Any] | None
) -> bool:
    """True iff every set field of ``query`` equals the descriptor's field."""
    q = DescriptorQuery.from_mapping(query)
    return all(getattr(descriptor, k) == v for k, v in q.set_fields().items())


def now_us() -> int:
    return time.time_ns() // 1000


def new_id() -> str:
    return uuid.uuid4().hex


def _check_attr_value(key, value):
    if value is None or isinstance(value, (bool, int, str)):
        return
    if isinstance(value, float) and math.isfinite(value):
        return
    raise ValidationError("attribute values must be JSON scalars", f"attrs.{key}")


@dataclass(frozen=True)
class MeasurementRecord:
    """One KPI sample with its experiment metadata.

    ``timestamp_us`` is wall-clock microseconds since the Unix epoch.  ``attrs``
    holds free-form scalar annotations (e.g. which packet pair produced an estimate).
    """

    descriptor: TraceDescriptor
    timestamp_us: int
    value: float
    run_id: str
    unit: str = ""
    id: str = field(default_factory=new_id)
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.descriptor, TraceDescriptor):
            raise ValidationError("must be a TraceDescriptor", "descriptor")
        if isinstance(self.timestamp_us, bool) or not isinstance(self.timestamp_us, int):
            raise ValidationError("must be integer microseconds", "timestamp_us")
        if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
            raise ValidationError("must be a number", "value")
        value = float(self.value)
        if math.isnan(value) or value < 0:
            raise ValidationError("must be non-negative", "value")
        canonical = self.descriptor.metric.canonical_unit
        unit = self.unit or canonical or ""
        if canonical is not None and unit != canonical:
            factor = _UNIT_FACTORS[canonical].get(unit)
            if factor is None:
                raise ValidationError(f"unit {unit!r} not convertible to {canonical}", "unit")
            value *= factor
            unit = canonical
        if canonical is not None and not math.isfinite(value):
            raise ValidationError("must be finite", "value")
        if self.descriptor.metric.kind is MetricKind.SELF_METRIC and not unit:
            raise ValidationError("self metrics need a unit", "unit")
        if not self.run_id or not isinstance(self.run_id, str):
            raise ValidationError("must be a non-empty string", "run_id")
        if not self.id or not isinstance(self.id, str):
            raise ValidationError("must be a non-empty string", "id")
        if not isinstance(self.attrs, Mapping):
            raise ValidationError("must be an object", "attrs")
        for k, v in self.attrs.items():
            _check_attr_value(k, v)
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "unit", unit)
        object.__setattr__(self, "attrs", dict(self.attrs))

    def __hash__(self):
        return hash((self.id, self.timestamp_us, self.value))

    @property
    def time(self) -> datetime:
        return datetime.fromtimestamp(self.timestamp_us / 1e6, tz=timezone.utc)

    def with_attrs(self, **attrs) -> MeasurementRecord:
        return replace(self, attrs={**self.attrs, **attrs})


def record_to_dict(record: MeasurementRecord) -> dict[str, Any]:
    return {
        "id": record.id,
        "run_id": record.run_id,
        "timestamp_us": record.timestamp_us,
        "value": record.value,
        "unit": record.unit,
        "descriptor": record.descriptor.to_dict(),
        "attrs": dict(sorted(record.attrs.items())),
    }


def record_from_dict(data: Mapping[str, Any]) -> MeasurementRecord:
    if not isinstance(data, Mapping):
        raise ValidationError("record must be an object")
    for key in ("run_id", "timestamp_us", "value", "descriptor"):
        if key not in data:
            raise ValidationError("missing", key)
    known = {"id", "run_id", "timestamp_us", "value", "unit", "descriptor", "attrs"}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown fields {sorted(unknown)}", "record")
    kwargs = dict(
        descriptor=TraceDescriptor.from_dict(data["descriptor"]),
        timestamp_us=data["timestamp_us"],
        value=data["value"],
        run_id=data["run_id"],
        unit=data.get("unit") or "",
        attrs=data.get("attrs") or {},
    )
    if data.get("id") is not None:
        kwargs["id"] = data["id"]
    return MeasurementRecord(**kwargs)


def encode_record(record: MeasurementRecord) -> str:
    """Stable single-line JSON encoding (sorted keys, no whitespace)."""
    return json.dumps(record_to_dict(record), sort_keys=True, separators=(",", ":"))


def decode_record(text: str | bytes) -> MeasurementRecord:
    return record_from_dict(json.loads(text))


def write_ndjson(records: Iterable[MeasurementRecord]) -> str:
    return "".join(encode_record(r) + "\n" for r in records)


def read_ndjson(text: str) -> list[MeasurementRecord]:
    return [decode_record(line) for line in text.splitlines() if line.strip()]
