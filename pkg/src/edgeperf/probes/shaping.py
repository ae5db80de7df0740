"""In-process link shaper for desk-scale probe validation.

``ShapedLink`` emulates a bottleneck of ``rate_mbps`` with ``delay_ms`` of added
round-trip delay (half in each direction).  ``link.relay(host, port)`` exposes a
TCP+UDP forwarding endpoint to a target; every byte crossing the relay is
paced by a per-direction virtual clock shared by all relays of the link, so
concurrent flows compete for the same capacity.  UDP is relayed NAT-style: each
client address gets its own upstream socket.

``reference_transfer`` times a plain bulk TCP transfer through the link and
serves as the comparison point for stream-bandwidth probes.
"""
from __future__ import annotations

import collections
import socket
import threading
import time
from typing import Callable

UP = "up"      # client -> target
DOWN = "down"  # target -> client
READ_SIZE = 4096
SPIN_S = 0.0004

DropRule = Callable[[bytes, str], bool]


class _Pacer:
    """Virtual serialization clock: when each piece finishes crossing the bottleneck."""

    def __init__(self, rate_mbps: float | None):
        self.rate_bps = None if rate_mbps is None else rate_mbps * 1e6
        self._free_at = 0.0
        self._lock = threading.Lock()

    def finish_time(self, nbytes: int) -> float:
        now = time.perf_counter()
        if self.rate_bps is None:
            return now
        with self._lock:
            start = max(now, self._free_at)
            self._free_at = start + nbytes * 8 / self.rate_bps
            return self._free_at


class _Pipe:
    """FIFO of deferred actions, each run no earlier than its due time."""

    def __init__(self):
        self._items: collections.deque = collections.deque()
        self._cv = threading.Condition()
        self._closed = False
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def put(self, due: float, action: Callable[[], None]) -> None:
        with self._cv:
            self._items.append((due, action))
            self._cv.notify()

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify()

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._items and not self._closed:
                    self._cv.wait()
                if not self._items:
                    return
                due, action = self._items.popleft()
            wait = due - time.perf_counter()
            if wait > SPIN_S:
                time.sleep(wait - SPIN_S)
            while time.perf_counter() < due:
                time.sleep(0)  # sleep() alone overshoots by a few hundred microseconds
            try:
                action()
            except OSError:
                pass


class ShapedLink:
    def __init__(self, rate_mbps: float | None = None, delay_ms: float = 0.0, drop: DropRule | None = None):
        if rate_mbps is not None and rate_mbps <= 0:
            raise ValueError("rate_mbps must be positive")
        if delay_ms < 0:
            raise ValueError("delay_ms must be non-negative")
        self.rate_mbps = rate_mbps
        self.delay_ms = delay_ms
        self.drop = drop
        self._pacers = {UP: _Pacer(rate_mbps), DOWN: _Pacer(rate_mbps)}
        self._relays: list[Relay] = []

    def due(self, nbytes: int, direction: str) -> float:
        return self._pacers[direction].finish_time(nbytes) + self.delay_ms / 2000

    def relay(self, host: str, port: int, bind: str = "127.0.0.1") -> Relay:
        r = Relay(self, (host, port), bind)
        self._relays.append(r)
        return r

    def close(self) -> None:
        for r in self._relays:
            r.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Relay:
    def __init__(self, link: ShapedLink, target: tuple[str, int], bind: str = "127.0.0.1"):
        from .responder import _bind_pair

        self.link = link
        self.target = target
        self._tcp, self._udp = _bind_pair(bind, 0)
        self.address = self._tcp.getsockname()[:2]
        self._closed = threading.Event()
        self._nat: dict[tuple, tuple[socket.socket, _Pipe]] = {}
        self._udp_down = _Pipe()
        self._sockets: list[socket.socket] = []
        self._lock = threading.Lock()
        for target_fn in (self._accept_loop, self._udp_loop):
            threading.Thread(target=target_fn, daemon=True).start()

    def close(self) -> None:
        self._closed.set()
        with self._lock:
            socks = [self._tcp, self._udp, *self._sockets, *(s for s, _ in self._nat.values())]
            pipes = [p for _, p in self._nat.values()] + [self._udp_down]
        for s in socks:
            try:
                s.close()
            except OSError:
                pass
        for p in pipes:
            p.close()

    # -- TCP -------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                client, _ = self._tcp.accept()
            except OSError:
                return
            try:
                server = socket.create_connection(self.target, timeout=5)
                server.settimeout(None)
            except OSError:
                client.close()
                continue
            for s in (client, server):
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._sockets += [client, server]
            threading.Thread(target=self._pump, args=(client, server, UP), daemon=True).start()
            threading.Thread(target=self._pump, args=(server, client, DOWN), daemon=True).start()

    def _pump(self, src: socket.socket, dst: socket.socket, direction: str) -> None:
        pipe = _Pipe()
        try:
            while True:
                try:
                    data = src.recv(READ_SIZE)
                except OSError:
                    data = b""
                if not data:
                    pipe.put(self.link.due(0, direction), lambda: _shut(dst))
                    return
                pipe.put(self.link.due(len(data), direction), lambda d=data: dst.sendall(d))
        finally:
            pipe.close()

    # -- UDP -------------------------------------------------------------

    def _udp_loop(self) -> None:
        while not self._closed.is_set():
            try:
                data, addr = self._udp.recvfrom(65535)
            except OSError:
                return
            entry = self._nat.get(addr)
            if entry is None:
                up = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                up.connect(self.target)
                entry = (up, _Pipe())
                with self._lock:
                    self._nat[addr] = entry
                threading.Thread(target=self._udp_back, args=(up, addr), daemon=True).start()
            up, pipe = entry
            if self.link.drop and self.link.drop(data, UP):
                continue
            pipe.put(self.link.due(len(data), UP), lambda d=data, s=up: s.send(d))

    def _udp_back(self, up: socket.socket, client: tuple) -> None:
        while not self._closed.is_set():
            try:
                data = up.recv(65535)
            except OSError:
                return
            if self.link.drop and self.link.drop(data, DOWN):
                continue
            self._udp_down.put(
                self.link.due(len(data), DOWN), lambda d=data: self._udp.sendto(d, client)
            )


def _shut(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_WR)
    except OSError:
        pass


def reference_transfer(link: ShapedLink, nbytes: int, direction: str = DOWN, timeout: float = 60.0) -> float:
    """Mbps of one bulk TCP transfer of ``nbytes`` through ``link``.

    Timed at the receiver from the first to the last byte, like an iperf run.
    """
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    result: dict[str, float] = {}

    def drain(sock: socket.socket) -> tuple[int, int]:
        got, first, last = 0, None, None
        while got < nbytes:
            chunk = sock.recv(65536)
            if not chunk:
                break
            last = time.perf_counter_ns()
            first = first or last
            got += len(chunk)
        return got, (last or 0) - (first or 0)

    def far_end():
        conn, _ = srv.accept()
        with conn:
            conn.settimeout(timeout)
            if direction == DOWN:
                conn.sendall(bytes(nbytes))
                conn.shutdown(socket.SHUT_WR)
                conn.recv(1)
            else:
                result["far"] = drain(conn)

    t = threading.Thread(target=far_end, daemon=True)
    t.start()
    relay = link.relay(*srv.getsockname()[:2])
    try:
        with socket.create_connection(relay.address, timeout=timeout) as sock:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            if direction == DOWN:
                got, elapsed = drain(sock)
            else:
                sock.sendall(bytes(nbytes))
                sock.shutdown(socket.SHUT_WR)
                t.join(timeout)
                got, elapsed = result["far"]
        t.join(timeout)
    finally:
        relay.close()
        srv.close()
    if got < nbytes or elapsed <= 0:
        raise RuntimeError(f"reference transfer incomplete ({got}/{nbytes} bytes)")
    return got * 8 * 1000 / elapsed
