import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgeperf.core import (
    DescriptorQuery,
    MeasurementRecord,
    Method,
    Metric,
    MetricKind,
    TraceDescriptor,
    ValidationError,
    decode_record,
    descriptor_matches,
    encode_record,
    read_ndjson,
    record_from_dict,
    record_to_dict,
    write_ndjson,
)
from helpers import descriptor
from strategies import descriptors, records, subqueries


def test_matches_single_field_wildcard():
    d = descriptor("active", "tcp_bandwidth", "access_mec", "downstream", "wifi", 0)
    assert descriptor_matches(d, {"segment": "access_mec"})


def test_empty_query_matches_anything():
    assert descriptor_matches(descriptor(), {})
    assert descriptor_matches(descriptor(), None)


def test_field_mismatch():
    assert not descriptor_matches(descriptor(tech="wifi"), {"access_technology": "lte"})


def test_unknown_query_field_rejected():
    with pytest.raises(ValidationError) as exc:
        DescriptorQuery.from_mapping({"colour": "red"})
    assert exc.value.field == "query"


@given(descriptors())
def test_full_descriptor_matches_itself(d):
    assert descriptor_matches(d, DescriptorQuery.from_mapping(d))


@given(st.data())
def test_removing_query_fields_preserves_match(data):
    d = data.draw(descriptors())
    q = data.draw(subqueries(d))
    assert descriptor_matches(d, q)
    fields = q.set_fields()
    if fields:
        drop = data.draw(st.sampled_from(sorted(fields)))
        smaller = {k: v for k, v in fields.items() if k != drop}
        assert descriptor_matches(d, smaller)


@given(records())
def test_record_round_trip(r):
    assert decode_record(encode_record(r)) == r
    back = decode_record(encode_record(r))
    assert back.value.hex() == r.value.hex()


@given(st.lists(records(), max_size=5))
def test_ndjson_round_trip(rs):
    assert read_ndjson(write_ndjson(rs)) == rs


def test_encoding_is_stable():
    r = MeasurementRecord(descriptor(), 5, 1.5, "run", id="abc", attrs={"b": 1, "a": 2})
    assert encode_record(r) == (
        '{"attrs":{"a":2,"b":1},"descriptor":{"access_technology":"wifi","cross_traffic_mbps":0.0,'
        '"direction":"downstream","method":"active","metric":"tcp_bandwidth","num_clients":null,'
        '"segment":"access_mec"},"id":"abc","run_id":"run","timestamp_us":5,"unit":"Mbps","value":1.5}'
    )


def test_self_metric_needs_label():
    with pytest.raises(ValidationError):
        Metric(MetricKind.SELF_METRIC)
    with pytest.raises(ValidationError):
        Metric.parse("self_metric:")
    m = Metric.parse("self_metric:dash_bitrate")
    assert m.label == "dash_bitrate" and str(m) == "self_metric:dash_bitrate"


def test_no_udp_passive_latency_kind():
    assert {k.value for k in MetricKind} == {
        "tcp_bandwidth", "udp_capacity", "tcp_latency", "udp_latency",
        "passive_throughput", "passive_latency", "self_metric",
    }


def test_method_metric_consistency():
    with pytest.raises(ValidationError):
        descriptor("active", "passive_latency")
    with pytest.raises(ValidationError):
        descriptor("self", "tcp_bandwidth")


def test_num_clients_absent_for_active():
    with pytest.raises(ValidationError) as exc:
        descriptor("active", num_clients=3)
    assert exc.value.field == "num_clients"
    assert descriptor("passive", "passive_throughput", num_clients=3).num_clients == 3


def test_cross_traffic_non_negative():
    with pytest.raises(ValidationError):
        descriptor(cross=-1.0)
    assert descriptor(cross=120.0).cross_traffic_mbps == 120.0


@pytest.mark.parametrize(
    "metric,unit,value,expected",
    [
        ("tcp_bandwidth", "Kbps", 700.0, 0.7),
        ("tcp_bandwidth", "Gbps", 1.0, 1000.0),
        ("tcp_latency", "s", 0.0108, 10.8),
        ("tcp_latency", "us", 800.0, 0.8),
    ],
)
def test_units_converted_at_ingestion(metric, unit, value, expected):
    r = MeasurementRecord(descriptor(metric=metric), 0, value, "r", unit=unit)
    assert r.value == pytest.approx(expected)
    assert r.unit == r.descriptor.metric.canonical_unit


def test_value_constraints():
    with pytest.raises(ValidationError):
        MeasurementRecord(descriptor(), 0, -1.0, "r")
    with pytest.raises(ValidationError):
        MeasurementRecord(descriptor(metric="tcp_latency"), 0, math.inf, "r")
    with pytest.raises(ValidationError):
        MeasurementRecord(descriptor(), 0, 1.0, "r", unit="furlongs")


def test_self_metric_unit_kept_verbatim():
    d = TraceDescriptor(Method.SELF, "self_metric:frames", "access_mec", "downstream", "wifi")
    r = MeasurementRecord(d, 0, 24.0, "r", unit="frames/s")
    assert r.unit == "frames/s"


def test_record_from_dict_diagnostics():
    good = record_to_dict(MeasurementRecord(descriptor(), 0, 1.0, "r"))
    with pytest.raises(ValidationError) as exc:
        record_from_dict({**good, "descriptor": {**good["descriptor"], "segment": "moon"}})
    assert exc.value.field == "descriptor.segment"
    with pytest.raises(ValidationError) as exc:
        record_from_dict({k: v for k, v in good.items() if k != "value"})
    assert exc.value.field == "value"
    with pytest.raises(ValidationError):
        record_from_dict({**good, "extra": 1})
