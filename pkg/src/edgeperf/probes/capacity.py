"""Packet-pair arithmetic, independent of any socket code."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

from .wire import MeasurementError


def clock_resolution_ns() -> int:
    return max(1, round(time.get_clock_info("perf_counter").resolution * 1e9))


def pair_estimate_mbps(packet_size: int, dispersion_ns: int) -> float:
    """Capacity implied by one pair: packet bits over the inter-arrival gap.

    Bits per nanosecond times 1000 is Mbps; the integer numerator keeps this to
    a single rounding.
    """
    return packet_size * 8 * 1000 / dispersion_ns


def dispersions_from_arrivals(arrivals: Sequence[tuple[int | None, int | None]]) -> list[int | None]:
    """Per-pair gap (second minus first arrival); ``None`` when either packet is missing."""
    return [None if a is None or b is None else b - a for a, b in arrivals]


@dataclass
class CapacityEstimate:
    capacity_mbps: float
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (index, dispersion_ns, Mbps)
    lost: int = 0
    discarded: int = 0


def estimate_capacity(
    packet_size: int, dispersions_ns: Sequence[int | None], resolution_ns: int | None = None
) -> CapacityEstimate:
    """Median of per-pair estimates.

    Lost pairs (``None``) and pairs whose gap is at or below the clock resolution
    are dropped.  More than half the pairs lost, or no usable pair, is an error.
    """
    if resolution_ns is None:
        resolution_ns = clock_resolution_ns()
    n = len(dispersions_ns)
    lost = sum(d is None for d in dispersions_ns)
    if n == 0 or lost * 2 > n:
        raise MeasurementError(f"{lost} of {n} pairs lost")
    pairs, discarded = [], 0
    for i, d in enumerate(dispersions_ns):
        if d is None:
            continue
        if d <= resolution_ns:
            discarded += 1
            continue
        pairs.append((i, d, pair_estimate_mbps(packet_size, d)))
    if not pairs:
        raise MeasurementError("no pair with a measurable dispersion")
    median = statistics.median(p[2] for p in pairs)
    return CapacityEstimate(median, pairs, lost, discarded)
