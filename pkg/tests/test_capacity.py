import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgeperf.probes.capacity import dispersions_from_arrivals, estimate_capacity, pair_estimate_mbps
from edgeperf.probes.wire import MeasurementError


def brute_force_capacity(size, schedule):
    """Sort every usable per-pair estimate and take the middle (mean of two when even)."""
    est = sorted(size * 8 * 1000 / (b - a) for a, b in schedule if a is not None and b is not None and b - a > 1)
    n = len(est)
    return est[n // 2] if n % 2 else (est[n // 2 - 1] + est[n // 2]) / 2


@st.composite
def schedules(draw):
    """Arrival pairs (ns) for back-to-back sends through a bottleneck with jitter."""
    n = draw(st.integers(1, 40))
    out = []
    t = 0
    for _ in range(n):
        t += draw(st.integers(1_000_000, 20_000_000))
        gap = draw(st.integers(2, 5_000_000))
        out.append((t, t + gap))
    return out


def test_arithmetic_example():
    # 1420 bytes spaced 1 ms apart: 11.36 Mbps
    assert pair_estimate_mbps(1420, 1_000_000) == pytest.approx(11.36)


@given(st.sampled_from([64, 576, 1420, 1500]), schedules())
def test_median_matches_brute_force(size, sched):
    est = estimate_capacity(size, dispersions_from_arrivals(sched), resolution_ns=1)
    assert est.capacity_mbps == brute_force_capacity(size, sched)


@given(st.sampled_from([576, 1420]), schedules(), st.integers(0, 10**10))
def test_constant_delay_changes_nothing(size, sched, delay):
    base = estimate_capacity(size, dispersions_from_arrivals(sched), resolution_ns=1)
    shifted = [(a + delay, b + delay) for a, b in sched]
    moved = estimate_capacity(size, dispersions_from_arrivals(shifted), resolution_ns=1)
    assert moved.capacity_mbps == base.capacity_mbps
    assert moved.pairs == base.pairs


def test_outlier_does_not_move_median():
    gaps = [1_136_000] * 10 + [10]  # one compressed pair
    est = estimate_capacity(1420, gaps, resolution_ns=1)
    assert est.capacity_mbps == pytest.approx(10.0)


def test_lost_pairs_are_skipped():
    est = estimate_capacity(1250, [None, 1_000_000, None, 1_000_000, 1_000_000], resolution_ns=1)
    assert est.capacity_mbps == pytest.approx(10.0)
    assert est.lost == 2
    assert [p[0] for p in est.pairs] == [1, 3, 4]


def test_majority_lost_is_an_error():
    with pytest.raises(MeasurementError):
        estimate_capacity(1250, [None, None, 1_000_000], resolution_ns=1)
    with pytest.raises(MeasurementError):
        estimate_capacity(1250, [], resolution_ns=1)


def test_sub_resolution_gaps_discarded():
    est = estimate_capacity(1250, [500, 1000, 1_000_000], resolution_ns=1000)
    assert est.discarded == 2
    assert est.capacity_mbps == pytest.approx(10.0)
    with pytest.raises(MeasurementError):
        estimate_capacity(1250, [500, 700], resolution_ns=1000)


def test_missing_packet_makes_pair_lost():
    assert dispersions_from_arrivals([(1, 5), (None, 9), (3, None)]) == [4, None, None]
