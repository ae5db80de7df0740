"""Probe accuracy on the in-process shaper: bandwidth vs a bulk transfer, RTT vs injected delay.

    python3 scripts/probe_validation.py [--rates 10,20,30,40,50] [--delays 10,50,100]
"""
import argparse
import statistics

from edgeperf.core import Direction
from edgeperf.probes.client import (
    BandwidthProbeConfig,
    LatencyProbeConfig,
    ProbeSession,
    measure_echo_latency,
    measure_stream_bandwidth,
)
from edgeperf.probes.responder import Responder
from edgeperf.probes.shaping import ShapedLink, reference_transfer

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--rates", default="10,20,30,40,50")
p.add_argument("--delays", default="10,50,100")
p.add_argument("--repetitions", type=int, default=10)
args = p.parse_args()


def session(addr, transport="tcp"):
    return ProbeSession("client", addr, transport, "access_mec")


with Responder() as responder:
    cfg = BandwidthProbeConfig(repetitions=args.repetitions)
    print("rate_mbps,direction,probe_median_mbps,reference_mbps,error_pct")
    for rate in (float(x) for x in args.rates.split(",")):
        for direction in (Direction.DOWNSTREAM, Direction.UPSTREAM):
            with ShapedLink(rate_mbps=rate) as link:
                relay = link.relay(*responder.address)
                got = statistics.median(r.value for r in measure_stream_bandwidth(session(relay.address), cfg, direction))
                ref = reference_transfer(link, cfg.num_packets * cfg.packet_size,
                                         "down" if direction is Direction.DOWNSTREAM else "up")
            print(f"{rate:g},{direction.value},{got:.3f},{ref:.3f},{100 * (got - ref) / ref:+.2f}")

    lat = LatencyProbeConfig(num_probes=25)
    print()
    print("transport,delay_ms,median_rtt_ms,baseline_ms,excess_ms")
    for transport in ("tcp", "udp"):
        with ShapedLink() as link:
            base = statistics.median(
                r.value for r in measure_echo_latency(session(link.relay(*responder.address).address, transport), lat)
            )
        for delay in (float(x) for x in args.delays.split(",")):
            with ShapedLink(delay_ms=delay) as link:
                res = measure_echo_latency(session(link.relay(*responder.address).address, transport), lat)
            med = statistics.median(r.value for r in res)
            print(f"{transport},{delay:g},{med:.3f},{base:.3f},{med - delay - base:+.3f}")
