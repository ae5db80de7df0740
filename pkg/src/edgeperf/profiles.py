"""Named experiment plans and their expansion into probe plan items.

A profile is a JSON object::

    {"name": "default",
     "items": [{"segment": "access_mec", "peer": "observer", "metric": "tcp_bandwidth",
                "direction": "upstream", "config": {"repetitions": 10}}, ...]}

``peer`` names an endpoint supplied at run time (``observer`` or ``remote``).
``config`` keys override the probe config defaults of the item's metric.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

from .core import AccessTechnology, Direction, MetricKind, SegmentId
from .probes.client import (
    BandwidthProbeConfig,
    CapacityProbeConfig,
    LatencyProbeConfig,
    PlanItem,
    ProbeSession,
)

PEERS = ("observer", "remote")
SEGMENT_PEER = {SegmentId.ACCESS_MEC: "observer", SegmentId.ACCESS_CLOUD: "remote"}

# metric -> (transport, config class)
PROBES = {
    MetricKind.TCP_BANDWIDTH: ("tcp", BandwidthProbeConfig),
    MetricKind.UDP_CAPACITY: ("udp", CapacityProbeConfig),
    MetricKind.TCP_LATENCY: ("tcp", LatencyProbeConfig),
    MetricKind.UDP_LATENCY: ("udp", LatencyProbeConfig),
}


class ProfileError(ValueError):
    pass


def _grid(metrics) -> list[dict[str, Any]]:
    return [
        {"segment": seg.value, "peer": peer, "metric": m.value, "direction": d.value}
        for seg, peer in SEGMENT_PEER.items()
        for d in (Direction.UPSTREAM, Direction.DOWNSTREAM)
        for m in metrics
    ]


BUNDLED: dict[str, dict[str, Any]] = {
    # 10 bandwidth runs, 25 packet pairs and 25 RTT probes per direction and segment
    "default": {
        "name": "default",
        "items": _grid((MetricKind.TCP_BANDWIDTH, MetricKind.UDP_CAPACITY, MetricKind.TCP_LATENCY)),
    },
    "full": {
        "name": "full",
        "items": _grid(
            (MetricKind.TCP_BANDWIDTH, MetricKind.UDP_CAPACITY, MetricKind.TCP_LATENCY, MetricKind.UDP_LATENCY)
        ),
    },
}


def load_profile(name_or_path: str) -> dict[str, Any]:
    if name_or_path in BUNDLED:
        return BUNDLED[name_or_path]
    path = Path(name_or_path)
    if not path.is_file():
        raise ProfileError(
            f"no bundled profile or file named {name_or_path!r} (bundled: {', '.join(sorted(BUNDLED))})"
        )
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("items"), list):
        raise ProfileError(f"{path}: expected an object with an 'items' list")
    return doc


def expand(
    profile: Mapping[str, Any],
    endpoints: Mapping[str, tuple[str, int]],
    access_technology: AccessTechnology | str = AccessTechnology.WIFI,
    cross_traffic_mbps: float = 0.0,
    local_role: str = "client",
) -> list[PlanItem]:
    plan = []
    for i, item in enumerate(profile["items"]):
        try:
            metric = MetricKind(item["metric"])
            transport, cfg_cls = PROBES[metric]
            peer = item.get("peer") or SEGMENT_PEER[SegmentId(item["segment"])]
            if peer not in endpoints:
                raise ProfileError(f"no address configured for peer {peer!r}")
            session = ProbeSession(
                local_role,
                endpoints[peer],
                transport,
                SegmentId(item["segment"]),
                AccessTechnology(access_technology),
                float(cross_traffic_mbps),
            )
            cfg = cfg_cls(**item.get("config", {}))
            plan.append(PlanItem(session, cfg, Direction(item["direction"])))
        except ProfileError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise ProfileError(f"item {i}: {exc}") from None
    return plan


def expected_records(plan: list[PlanItem]) -> int:
    """Record count a fully successful run of ``plan`` produces."""
    n = 0
    for item in plan:
        cfg = item.config
        if isinstance(cfg, BandwidthProbeConfig):
            n += cfg.repetitions
        elif isinstance(cfg, CapacityProbeConfig):
            n += cfg.num_pairs + 1  # per-pair estimates plus the median
        else:
            n += cfg.num_probes
    return n
