from hypothesis import strategies as st

from edgeperf.core import (
    QUERY_FIELDS,
    AccessTechnology,
    DescriptorQuery,
    Direction,
    MeasurementRecord,
    Method,
    Metric,
    METHOD_METRICS,
    MetricKind,
    SegmentId,
    TraceDescriptor,
)

labels = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12)


@st.composite
def metrics_for(draw, method: Method):
    kind = draw(st.sampled_from(sorted(METHOD_METRICS[method], key=lambda k: k.value)))
    if kind is MetricKind.SELF_METRIC:
        return Metric(kind, draw(labels))
    return Metric(kind)


@st.composite
def descriptors(draw, cross=st.sampled_from([0.0, 10.0, 25.0, 50.0])):
    method = draw(st.sampled_from(list(Method)))
    return TraceDescriptor(
        method,
        draw(metrics_for(method)),
        draw(st.sampled_from(list(SegmentId))),
        draw(st.sampled_from(list(Direction))),
        draw(st.sampled_from(list(AccessTechnology))),
        draw(cross),
        None if method is Method.ACTIVE else draw(st.none() | st.integers(1, 8)),
    )


scalars = st.none() | st.booleans() | st.integers(-(2**53), 2**53) | st.text(max_size=8) | st.floats(
    allow_nan=False, allow_infinity=False
)


@st.composite
def records(draw, descs=None, times=st.integers(0, 2**52), run_ids=st.text("abcdef0123", min_size=1, max_size=6)):
    desc = draw(descs if descs is not None else descriptors())
    unit = "" if desc.metric.kind is not MetricKind.SELF_METRIC else draw(st.sampled_from(["Mbps", "kbps", "frames", "ms"]))
    return MeasurementRecord(
        desc,
        draw(times),
        draw(st.floats(0, 1e9, allow_nan=False, allow_infinity=False)),
        draw(run_ids),
        unit=unit,
        id=draw(st.uuids()).hex,
        attrs=draw(st.dictionaries(st.text("xyz_", min_size=1, max_size=4), scalars, max_size=3)),
    )


@st.composite
def subqueries(draw, desc: TraceDescriptor):
    """A query made of a random subset of ``desc``'s fields."""
    keep = draw(st.sets(st.sampled_from(QUERY_FIELDS)))
    return DescriptorQuery(**{k: getattr(desc, k) for k in keep if getattr(desc, k) is not None})
