"""Classic pcap reading and writing (Ethernet / IPv4 / TCP|UDP only).

Both byte orders and both the microsecond (0xA1B2C3D4) and nanosecond (0xA1B23C4D)
timestamp variants are read.  pcapng is rejected.  The writer produces
little-endian microsecond files and exists for synthetic fixtures.
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D
PCAPNG_MAGIC = 0x0A0D0D0A
LINKTYPE_ETHERNET = 1
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10


class PcapFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PacketRecord:
    timestamp_ns: int
    src: str
    dst: str
    sport: int
    dport: int
    transport: str  # "tcp" | "udp"
    payload_length: int
    tcp_seq: int | None = None
    tcp_ack: int | None = None
    tcp_flags: int | None = None

    @property
    def timestamp_us(self) -> int:
        return self.timestamp_ns // 1000

    @property
    def has_ack(self) -> bool:
        return self.tcp_flags is not None and bool(self.tcp_flags & TCP_ACK)


@dataclass
class CaptureResult:
    packets: list[PacketRecord]
    skipped: int = 0
    truncated: int = 0
    nanosecond: bool = False
    byte_order: str = "<"


def _decode_frame(frame: bytes) -> tuple | None:
    """Return the decoded header fields, or None if not Ethernet/IPv4/TCP|UDP."""
    if len(frame) < 14:
        return None
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    off = 14
    if ethertype == ETHERTYPE_VLAN:
        if len(frame) < 18:
            return None
        ethertype = struct.unpack_from("!H", frame, 16)[0]
        off = 18
    if ethertype != ETHERTYPE_IPV4 or len(frame) < off + 20:
        return None
    vihl, _tos, total_len = struct.unpack_from("!BBH", frame, off)
    if vihl >> 4 != 4:
        return None
    ihl = (vihl & 0x0F) * 4
    frag = struct.unpack_from("!H", frame, off + 6)[0]
    if frag & 0x1FFF:
        return None  # non-first fragments carry no transport header
    proto = frame[off + 9]
    src = socket.inet_ntoa(frame[off + 12 : off + 16])
    dst = socket.inet_ntoa(frame[off + 16 : off + 20])
    if ihl < 20 or total_len < ihl:
        return None
    l4 = off + ihl
    ip_end = off + total_len
    if ip_end > len(frame):
        raise _Truncated
    if proto == 6:
        if ip_end < l4 + 20:
            raise _Truncated
        sport, dport, seq, ack, offres, flags = struct.unpack_from("!HHIIBB", frame, l4)
        thl = (offres >> 4) * 4
        if thl < 20 or l4 + thl > ip_end:
            raise _Truncated
        return (src, dst, sport, dport, "tcp", ip_end - l4 - thl, seq, ack, flags)
    if proto == 17:
        if ip_end < l4 + 8:
            raise _Truncated
        sport, dport, ulen = struct.unpack_from("!HHH", frame, l4)
        if ulen < 8 or l4 + ulen > ip_end:
            raise _Truncated
        return (src, dst, sport, dport, "udp", ulen - 8, None, None, None)
    return None


class _Truncated(Exception):
    pass


def parse_capture(data: bytes) -> CaptureResult:
    """Decode a classic pcap byte string.

    Packets that are not Ethernet/IPv4/TCP|UDP are skipped; packets whose capture
    was cut short (snaplen) or whose record runs past the end of the file are
    counted as truncated.
    """
    if len(data) < 24:
        raise PcapFormatError("file shorter than the pcap global header")
    raw_magic = struct.unpack_from("<I", data, 0)[0]
    if raw_magic == PCAPNG_MAGIC:
        raise PcapFormatError("pcapng is not supported; convert with `editcap -F pcap`")
    for order in ("<", ">"):
        magic = struct.unpack_from(order + "I", data, 0)[0]
        if magic in (MAGIC_US, MAGIC_NS):
            break
    else:
        raise PcapFormatError(f"bad pcap magic 0x{raw_magic:08x}")
    nano = magic == MAGIC_NS
    linktype = struct.unpack_from(order + "I", data, 20)[0] & 0x0FFFFFFF
    if linktype != LINKTYPE_ETHERNET:
        raise PcapFormatError(f"unsupported link type {linktype}")
    result = CaptureResult([], nanosecond=nano, byte_order=order)
    rec_hdr = struct.Struct(order + "IIII")
    pos = 24
    while pos < len(data):
        if pos + 16 > len(data):
            result.truncated += 1
            break
        sec, frac, incl, orig = rec_hdr.unpack_from(data, pos)
        pos += 16
        if pos + incl > len(data):
            result.truncated += 1
            break
        frame = data[pos : pos + incl]
        pos += incl
        ts = sec * 1_000_000_000 + (frac if nano else frac * 1000)
        try:
            fields = _decode_frame(frame)
        except _Truncated:
            result.truncated += 1
            continue
        except struct.error:
            result.truncated += 1
            continue
        if fields is None:
            result.skipped += 1
            continue
        result.packets.append(PacketRecord(ts, *fields))
    return result


def read_capture(path) -> CaptureResult:
    with open(path, "rb") as fh:
        return parse_capture(fh.read())


# -- writing -----------------------------------------------------------------


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def build_frame(pkt: PacketRecord, payload: bytes | None = None) -> bytes:
    """Ethernet/IPv4/TCP|UDP frame for ``pkt`` (payload zero-filled unless given)."""
    if payload is None:
        payload = bytes(pkt.payload_length)
    if pkt.transport == "tcp":
        l4 = struct.pack(
            "!HHIIBBHHH",
            pkt.sport,
            pkt.dport,
            (pkt.tcp_seq or 0) & 0xFFFFFFFF,
            (pkt.tcp_ack or 0) & 0xFFFFFFFF,
            5 << 4,
            pkt.tcp_flags if pkt.tcp_flags is not None else TCP_ACK,
            65535,
            0,
            0,
        )
        proto = 6
    else:
        l4 = struct.pack("!HHHH", pkt.sport, pkt.dport, 8 + len(payload), 0)
        proto = 17
    total = 20 + len(l4) + len(payload)
    ip = struct.pack(
        "!BBHHHBBH4s4s",
        0x45,
        0,
        total,
        0,
        0x4000,
        64,
        proto,
        0,
        socket.inet_aton(pkt.src),
        socket.inet_aton(pkt.dst),
    )
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ETHERTYPE_IPV4)
    return eth + ip + l4 + payload


def global_header(byte_order: str = "<", nanosecond: bool = False, snaplen: int = 262144) -> bytes:
    magic = MAGIC_NS if nanosecond else MAGIC_US
    return struct.pack(byte_order + "IHHiIII", magic, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET)


def record_bytes(
    timestamp_ns: int, frame: bytes, byte_order: str = "<", nanosecond: bool = False, snaplen=None
) -> bytes:
    sec, rem = divmod(timestamp_ns, 1_000_000_000)
    frac = rem if nanosecond else rem // 1000
    incl = frame if snaplen is None else frame[:snaplen]
    return struct.pack(byte_order + "IIII", sec, frac, len(incl), len(frame)) + incl


def write_capture(
    packets: Iterable[PacketRecord],
    fh: BinaryIO | None = None,
    byte_order: str = "<",
    nanosecond: bool = False,
) -> bytes:
    """Serialize packets as a classic pcap; returns the bytes (and writes ``fh`` if given)."""
    parts = [global_header(byte_order, nanosecond)]
    for pkt in packets:
        parts.append(record_bytes(pkt.timestamp_ns, build_frame(pkt), byte_order, nanosecond))
    data = b"".join(parts)
    if fh is not None:
        fh.write(data)
    return data
