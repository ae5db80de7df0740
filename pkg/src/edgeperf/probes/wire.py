"""Probe wire protocol.

Every message starts with a 16-byte big-endian header::

    offset  size  field
    0       4     magic   0x45505246 ("EPRF")
    4       1     op      opcode (see ``Op``)
    5       1     flags   bit0 = downstream, bit1 = UDP data plane
    6       2     token   session token for UDP data-plane datagrams (0 if unused)
    8       4     seq     sequence number / probe index
    12      4     length  payload bytes following the header (TCP only; UDP
                          datagrams are padded to the configured packet size)

Control always runs over TCP.  Stream-bandwidth data after ``BW_START`` is a raw
byte stream of ``num_packets * packet_size`` bytes with no per-packet headers.
Payload layouts:

    BW_START        u32 num_packets, u32 packet_size
    BW_RESULT       u64 bytes, u64 elapsed_ns                (receiver timestamps)
    ECHO/ECHO_REPLY opaque payload, echoed verbatim
    LAT_START       u32 num_probes, u32 payload_size, u32 timeout_ms
    LAT_RESULT      u32 n, then n x i64 rtt_ns (-1 = timed out)
    CAP_START       u32 num_pairs, u32 packet_size, u32 pair_gap_us, u32 timeout_ms
    READY           (token carried in the header)
    CAP_RESULT      u32 n, then n x i64 dispersion_ns (-1 = pair lost)
    ERROR           UTF-8 message
"""
from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

MAGIC = 0x45505246
HEADER = struct.Struct("!IBBHII")
HEADER_SIZE = HEADER.size  # 16

FLAG_DOWN = 0x01
FLAG_UDP = 0x02


class Op(enum.IntEnum):
    BW_START = 1
    BW_RESULT = 2
    ECHO = 3
    ECHO_REPLY = 4
    LAT_START = 5
    LAT_RESULT = 6
    CAP_START = 7
    PAIR = 8
    CAP_END = 9
    CAP_RESULT = 10
    READY = 11
    REGISTER = 12
    ERROR = 15


class ProbeError(Exception):
    pass


class SessionError(ProbeError):
    """Connection-level failure (refused, reset, timed out)."""


class HandshakeError(ProbeError):
    """The peer does not speak this protocol or rejected the request."""


class MeasurementError(ProbeError):
    """The exchange completed but produced no valid measurement."""


@dataclass(frozen=True)
class Header:
    op: Op
    flags: int = 0
    token: int = 0
    seq: int = 0
    length: int = 0

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, int(self.op), self.flags, self.token, self.seq, self.length)

    @classmethod
    def unpack(cls, data: bytes) -> Header:
        if len(data) < HEADER_SIZE:
            raise HandshakeError("short header")
        magic, op, flags, token, seq, length = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise HandshakeError(f"bad magic 0x{magic:08x}")
        try:
            op = Op(op)
        except ValueError:
            raise HandshakeError(f"unknown opcode {op}") from None
        return cls(op, flags, token, seq, length)


def message(op: Op, payload: bytes = b"", flags: int = 0, token: int = 0, seq: int = 0) -> bytes:
    return Header(op, flags, token, seq, len(payload)).pack() + payload


def datagram(op: Op, size: int, flags: int = 0, token: int = 0, seq: int = 0, payload: bytes = b"") -> bytes:
    """A UDP datagram padded with zeros to ``size`` bytes (never below the header)."""
    body = Header(op, flags, token, seq, len(payload)).pack() + payload
    return body + bytes(max(0, size - len(body)))


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise SessionError("connection closed by peer")
        buf += chunk
    return bytes(buf)


def recv_message(sock: socket.socket) -> tuple[Header, bytes]:
    hdr = Header.unpack(recv_exact(sock, HEADER_SIZE))
    payload = recv_exact(sock, hdr.length) if hdr.length else b""
    if hdr.op is Op.ERROR:
        raise HandshakeError(f"peer error: {payload.decode(errors='replace')}")
    return hdr, payload


def expect(sock: socket.socket, op: Op) -> tuple[Header, bytes]:
    hdr, payload = recv_message(sock)
    if hdr.op is not op:
        raise HandshakeError(f"expected {op.name}, got {hdr.op.name}")
    return hdr, payload


def pack_i64_list(values) -> bytes:
    return struct.pack(f"!I{len(values)}q", len(values), *values)


def unpack_i64_list(payload: bytes) -> list[int]:
    (n,) = struct.unpack_from("!I", payload)
    return list(struct.unpack_from(f"!{n}q", payload, 4))
