"""Flow reconstruction and the host/port filter language used by ``analyze``."""
from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .pcap import TCP_ACK, TCP_SYN, PacketRecord

AB = "ab"
BA = "ba"


def _endpoint_key(addr: str, port: int):
    return (int(ipaddress.IPv4Address(addr)), port)


@dataclass(frozen=True, order=True)
class FlowKey:
    """Canonical 5-tuple: endpoint A sorts before endpoint B."""

    transport: str
    a_addr: str
    a_port: int
    b_addr: str
    b_port: int

    @classmethod
    def of(cls, pkt: PacketRecord) -> tuple[FlowKey, str]:
        """The flow key of ``pkt`` and its direction tag (``"ab"`` or ``"ba"``)."""
        s = _endpoint_key(pkt.src, pkt.sport)
        d = _endpoint_key(pkt.dst, pkt.dport)
        if s <= d:
            return cls(pkt.transport, pkt.src, pkt.sport, pkt.dst, pkt.dport), AB
        return cls(pkt.transport, pkt.dst, pkt.dport, pkt.src, pkt.sport), BA

    def __str__(self) -> str:
        return f"{self.transport}:{self.a_addr}:{self.a_port}-{self.b_addr}:{self.b_port}"


@dataclass
class Flow:
    key: FlowKey
    ab: list[PacketRecord] = field(default_factory=list)
    ba: list[PacketRecord] = field(default_factory=list)

    def half(self, tag: str) -> list[PacketRecord]:
        return self.ab if tag == AB else self.ba

    def __len__(self) -> int:
        return len(self.ab) + len(self.ba)

    def server_side(self, server_ports: Iterable[int] = ()) -> str:
        """Tag of the half sent *by the server*.

        The host answering a bare SYN is the server; failing that, an endpoint
        on one of ``server_ports``; failing that, the lower port number.
        """
        for tag in (AB, BA):
            for p in self.half(tag):
                if p.tcp_flags is not None and p.tcp_flags & TCP_SYN and not p.tcp_flags & TCP_ACK:
                    return BA if tag == AB else AB
        ports = set(server_ports)
        if self.key.a_port in ports and self.key.b_port not in ports:
            return AB
        if self.key.b_port in ports and self.key.a_port not in ports:
            return BA
        return AB if self.key.a_port < self.key.b_port else BA


Predicate = Callable[[PacketRecord], bool]


class FilterSyntaxError(ValueError):
    pass


def parse_filter(expr: str | None) -> Predicate | None:
    """Compile a conjunction such as ``"host 10.0.0.2 and dst port 8080 and tcp"``.

    Terms: ``[src|dst] host ADDR``, ``[src|dst] port N``, ``tcp``, ``udp``.
    An empty expression yields ``None`` (match everything).
    """
    if expr is None or not expr.strip():
        return None
    tokens = expr.split()
    terms: list[Predicate] = []
    i = 0
    while i < len(tokens):
        tok = tokens[i].lower()
        if tok == "and":
            i += 1
            continue
        qualifier = None
        if tok in ("src", "dst"):
            qualifier = tok
            i += 1
            if i >= len(tokens):
                raise FilterSyntaxError(f"dangling {qualifier!r}")
            tok = tokens[i].lower()
        if tok in ("tcp", "udp") and qualifier is None:
            terms.append(lambda p, t=tok: p.transport == t)
            i += 1
            continue
        if tok not in ("host", "port") or i + 1 >= len(tokens):
            raise FilterSyntaxError(f"unexpected token {tokens[i]!r}")
        arg = tokens[i + 1]
        if tok == "host":
            try:
                ipaddress.IPv4Address(arg)
            except ValueError:
                raise FilterSyntaxError(f"bad address {arg!r}") from None
            src_f = lambda p, a=arg: p.src == a  # noqa: E731
            dst_f = lambda p, a=arg: p.dst == a  # noqa: E731
        else:
            if not arg.isdigit() or not 0 <= int(arg) < 65536:
                raise FilterSyntaxError(f"bad port {arg!r}")
            n = int(arg)
            src_f = lambda p, n=n: p.sport == n  # noqa: E731
            dst_f = lambda p, n=n: p.dport == n  # noqa: E731
        if qualifier == "src":
            terms.append(src_f)
        elif qualifier == "dst":
            terms.append(dst_f)
        else:
            terms.append(lambda p, s=src_f, d=dst_f: s(p) or d(p))
        i += 2
    return lambda p: all(t(p) for t in terms)


def filter_ports(expr: str | None) -> set[int]:
    """Port numbers named in a filter expression (hints for server detection)."""
    if not expr:
        return set()
    toks = expr.split()
    return {int(toks[i + 1]) for i, t in enumerate(toks[:-1]) if t == "port" and toks[i + 1].isdigit()}


def extract_flows(
    records: Iterable[PacketRecord], predicate: Predicate | str | None = None
) -> dict[FlowKey, Flow]:
    """Group packets into bidirectional flows, preserving capture order.

    The predicate selects *flows*: a flow is kept, with both halves, if any of its
    packets satisfies it (ACK latency needs the reverse half).
    """
    if isinstance(predicate, str):
        predicate = parse_filter(predicate)
    flows: dict[FlowKey, Flow] = {}
    keep: set[FlowKey] = set()
    for pkt in sorted(records, key=lambda p: p.timestamp_ns):
        key, tag = FlowKey.of(pkt)
        flow = flows.get(key)
        if flow is None:
            flow = flows[key] = Flow(key)
        flow.half(tag).append(pkt)
        if predicate is None or predicate(pkt):
            keep.add(key)
    return {k: f for k, f in flows.items() if k in keep}
