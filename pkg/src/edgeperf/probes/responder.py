"""Responder endpoint (observer / remote server role).

Listens on one port for both TCP (control, streams, TCP echo) and UDP (echo,
packet pairs, downstream UDP probes).  Each TCP connection gets its own thread, so
independent initiators are served concurrently.
"""
from __future__ import annotations

import itertools
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from .wire import (
    FLAG_DOWN,
    FLAG_UDP,
    HEADER_SIZE,
    Header,
    HandshakeError,
    Op,
    ProbeError,
    datagram,
    expect,
    message,
    pack_i64_list,
    recv_message,
)

log = logging.getLogger(__name__)

STREAM_CHUNK = 65536


@dataclass
class _UdpSession:
    addr: tuple | None = None
    registered: threading.Event = field(default_factory=threading.Event)
    arrivals: dict[int, int] = field(default_factory=dict)
    replies: queue.Queue = field(default_factory=queue.Queue)
    expected: int = 0
    complete: threading.Event = field(default_factory=threading.Event)


class Responder:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, role: str = "observer"):
        self.role = role
        self._tcp, self._udp = _bind_pair(host, port)
        self.address = self._tcp.getsockname()[:2]
        self._sessions: dict[int, _UdpSession] = {}
        self._tokens = itertools.cycle(range(1, 65536))
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> Responder:
        for target in (self._accept_loop, self._udp_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def close(self) -> None:
        self._closed.set()
        for s in (self._tcp, self._udp):
            try:
                s.close()
            except OSError:
                pass

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._closed.wait(1.0):
                pass
        except KeyboardInterrupt:
            self.close()

    # -- UDP -------------------------------------------------------------

    def _new_session(self, expected: int = 0) -> tuple[int, _UdpSession]:
        with self._lock:
            for _ in range(65535):
                token = next(self._tokens)
                if token not in self._sessions:
                    break
            else:  # pragma: no cover
                raise ProbeError("no free session tokens")
            sess = self._sessions[token] = _UdpSession(expected=expected)
        return token, sess

    def _drop_session(self, token: int) -> None:
        with self._lock:
            self._sessions.pop(token, None)

    def _udp_loop(self) -> None:
        while not self._closed.is_set():
            try:
                data, addr = self._udp.recvfrom(65535)
            except OSError:
                return
            t = time.perf_counter_ns()
            try:
                hdr = Header.unpack(data)
            except HandshakeError:
                continue
            if hdr.op is Op.ECHO and hdr.token == 0:
                reply = Header(Op.ECHO_REPLY, hdr.flags, 0, hdr.seq, hdr.length).pack() + data[HEADER_SIZE:]
                self._sendto(reply, addr)
                continue
            sess = self._sessions.get(hdr.token)
            if sess is None:
                continue
            if hdr.op is Op.PAIR:
                sess.arrivals.setdefault(hdr.seq, t)
                if sess.expected and len(sess.arrivals) >= sess.expected:
                    sess.complete.set()
            elif hdr.op is Op.REGISTER:
                if sess.addr is None:
                    sess.addr = addr
                sess.registered.set()
            elif hdr.op is Op.ECHO_REPLY:
                sess.replies.put((hdr.seq, t))

    def _sendto(self, data: bytes, addr) -> None:
        try:
            self._udp.sendto(data, addr)
        except OSError as exc:
            log.debug("udp send failed: %s", exc)

    # -- TCP -------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, addr = self._tcp.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        with conn:
            try:
                while True:
                    try:
                        hdr, payload = recv_message(conn)
                    except HandshakeError as exc:
                        conn.sendall(message(Op.ERROR, str(exc).encode()))
                        return
                    handler = self._handlers.get(hdr.op)
                    if handler is None:
                        conn.sendall(message(Op.ERROR, f"unexpected {hdr.op.name}".encode()))
                        return
                    handler(self, conn, hdr, payload)
            except (ProbeError, OSError, struct.error) as exc:
                log.debug("connection ended: %s", exc)

    def _bw_start(self, conn, hdr, payload) -> None:
        num, size = struct.unpack("!II", payload)
        total = num * size
        if hdr.flags & FLAG_DOWN:
            block = bytes(size)
            for _ in range(num):
                conn.sendall(block)
            return
        received = 0
        first = last = None
        while received < total:
            chunk = conn.recv(min(STREAM_CHUNK, total - received))
            if not chunk:
                raise ProbeError("stream truncated")
            last = time.perf_counter_ns()
            if first is None:
                first = last
            received += len(chunk)
        conn.sendall(message(Op.BW_RESULT, struct.pack("!QQ", received, last - first)))

    def _echo(self, conn, hdr, payload) -> None:
        conn.sendall(message(Op.ECHO_REPLY, payload, hdr.flags, hdr.token, hdr.seq))

    def _lat_start(self, conn, hdr, payload) -> None:
        num, size, timeout_ms = struct.unpack("!III", payload)
        timeout = timeout_ms / 1000
        body = bytes(size)
        samples = []
        if not hdr.flags & FLAG_UDP:
            for i in range(num):
                t0 = time.perf_counter_ns()
                conn.sendall(message(Op.ECHO, body, seq=i))
                expect(conn, Op.ECHO_REPLY)
                samples.append(time.perf_counter_ns() - t0)
            conn.sendall(message(Op.LAT_RESULT, pack_i64_list(samples)))
            return
        token, sess = self._new_session()
        try:
            conn.sendall(message(Op.READY, token=token))
            if not sess.registered.wait(timeout * 4):
                raise ProbeError("initiator never registered its UDP address")
            for i in range(num):
                t0 = time.perf_counter_ns()
                self._sendto(datagram(Op.ECHO, HEADER_SIZE + size, FLAG_UDP, token, i, body), sess.addr)
                deadline = time.monotonic() + timeout
                rtt = -1
                while (left := deadline - time.monotonic()) > 0:
                    try:
                        seq, t = sess.replies.get(timeout=left)
                    except queue.Empty:
                        break
                    if seq == i:
                        rtt = t - t0
                        break
                samples.append(rtt)
            conn.sendall(message(Op.LAT_RESULT, pack_i64_list(samples)))
        finally:
            self._drop_session(token)

    def _cap_start(self, conn, hdr, payload) -> None:
        num, size, gap_us, timeout_ms = struct.unpack("!IIII", payload)
        timeout = timeout_ms / 1000
        token, sess = self._new_session(expected=2 * num)
        try:
            conn.sendall(message(Op.READY, token=token))
            if hdr.flags & FLAG_DOWN:
                if not sess.registered.wait(timeout * 4):
                    raise ProbeError("initiator never registered its UDP address")
                send_pairs(self._udp, sess.addr, token, num, size, gap_us / 1e6)
                return
            expect(conn, Op.CAP_END)
            sess.complete.wait(timeout)
            out = []
            for i in range(num):
                a, b = sess.arrivals.get(2 * i), sess.arrivals.get(2 * i + 1)
                out.append(-1 if a is None or b is None else b - a)
            conn.sendall(message(Op.CAP_RESULT, pack_i64_list(out)))
        finally:
            self._drop_session(token)

    _handlers = {
        Op.BW_START: _bw_start,
        Op.ECHO: _echo,
        Op.LAT_START: _lat_start,
        Op.CAP_START: _cap_start,
    }


def send_pairs(sock: socket.socket, addr, token: int, num_pairs: int, size: int, gap_s: float) -> None:
    """Emit ``num_pairs`` back-to-back pairs; pairs are spaced by ``gap_s``."""
    for i in range(num_pairs):
        first = datagram(Op.PAIR, size, FLAG_UDP, token, 2 * i)
        second = datagram(Op.PAIR, size, FLAG_UDP, token, 2 * i + 1)
        sock.sendto(first, addr)
        sock.sendto(second, addr)
        if gap_s > 0 and i + 1 < num_pairs:
            time.sleep(gap_s)


def _bind_pair(host: str, port: int) -> tuple[socket.socket, socket.socket]:
    """A listening TCP socket and a UDP socket sharing one port number."""
    for _ in range(50):
        tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        tcp.bind((host, port))
        chosen = tcp.getsockname()[1]
        udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            udp.bind((host, chosen))
        except OSError:
            tcp.close()
            udp.close()
            if port:
                raise
            continue
        tcp.listen(64)
        return tcp, udp
    raise OSError("could not bind TCP and UDP on a common port")
