"""Byte-counting TCP relays the harness interposes between processes.

:class:`TcpRelay` forwards raw bytes and can be blackholed (bytes are held,
not forwarded, until the hole closes). :class:`DataRelay` additionally
parses HTTP requests flowing to an agent so it can attribute PATCH body
bytes to transfers (via the ``X-MFT-Transfer`` header) and fire triggers at
an exact cumulative payload offset.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import defaultdict
from typing import Callable, Optional

log = logging.getLogger(__name__)

RECV = 64 * 1024
MAX_HEADER = 64 * 1024


class TcpRelay:
    def __init__(self, target: tuple[str, int], record: bool = False, host: str = "127.0.0.1", port: int = 0):
        self.target = target
        self.sock = socket.create_server((host, port), reuse_port=False)
        self.sock.settimeout(0.5)
        self.bytes_up = 0  # client -> target
        self.bytes_down = 0
        self.connections = 0
        self.record = record
        self.transcript = bytearray()
        self._open = threading.Event()
        self._open.set()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._conns: set = set()
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    @property
    def total(self) -> int:
        with self._lock:
            return self.bytes_up + self.bytes_down

    def start(self) -> "TcpRelay":
        self._thread = threading.Thread(target=self._accept_loop, name="relay-accept", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._open.set()
        self.sock.close()
        for pair in list(self._conns):
            self._close_pair(pair)

    # -- blackhole / pause ----------------------------------------------
    def hold(self) -> None:
        self._open.clear()

    def release(self) -> None:
        self._open.set()

    @property
    def held(self) -> bool:
        return not self._open.is_set()

    def blackhole(self, duration_s: float) -> threading.Timer:
        self.hold()
        timer = threading.Timer(duration_s, self.release)
        timer.daemon = True
        timer.start()
        return timer

    # -- plumbing -------------------------------------------------------
    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve, args=(client,), daemon=True).start()

    def _serve(self, client: socket.socket) -> None:
        try:
            upstream = socket.create_connection(self.target, timeout=5)
        except OSError:
            client.close()
            return
        for s in (client, upstream):
            s.settimeout(None)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        pair = (client, upstream)
        with self._lock:
            self.connections += 1
            self._conns.add(pair)
        down = threading.Thread(target=self._pump_down, args=(pair,), daemon=True)
        down.start()
        try:
            self._pump_up(pair)
        finally:
            down.join(timeout=1)

    def _close_pair(self, pair) -> None:
        for s in pair:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                s.close()
            except OSError:
                pass
        with self._lock:
            self._conns.discard(pair)

    def _forward(self, dst: socket.socket, data: bytes, up: bool) -> bool:
        self._open.wait()
        if self._stop.is_set():
            return False
        try:
            dst.sendall(data)
        except OSError:
            return False
        with self._lock:
            if up:
                self.bytes_up += len(data)
            else:
                self.bytes_down += len(data)
            if self.record:
                self.transcript += data
        return True

    def _pump_down(self, pair) -> None:
        client, upstream = pair
        while True:
            try:
                data = upstream.recv(RECV)
            except OSError:
                data = b""
            if not data or not self._forward(client, data, up=False):
                self._close_pair(pair)
                return

    def _pump_up(self, pair) -> None:
        client, upstream = pair
        while True:
            try:
                data = client.recv(RECV)
            except OSError:
                data = b""
            if not data or not self._forward(upstream, data, up=True):
                self._close_pair(pair)
                return


class Trigger:
    """Fires once when ``transfer_id``'s forwarded PATCH bytes reach
    ``at_bytes``. ``transfer_id=None`` matches any transfer."""

    def __init__(self, at_bytes: int, action: Callable[[], None], transfer_id: Optional[str] = None, sever: bool = True, name: str = ""):
        self.at_bytes = at_bytes
        self.action = action
        self.transfer_id = transfer_id
        self.sever = sever
        self.name = name
        self.fired = False
        self.fired_at: Optional[float] = None
        self.fired_offset: Optional[int] = None
        self.received_at_fire: Optional[int] = None


class DataRelay(TcpRelay):
    def __init__(self, target: tuple[str, int], **kw):
        super().__init__(target, **kw)
        self.payload_forwarded: dict[str, int] = defaultdict(int)
        self.payload_received: dict[str, int] = defaultdict(int)
        self.patches: dict[str, int] = defaultdict(int)
        self.triggers: list[Trigger] = []

    def arm(self, trigger: Trigger) -> Trigger:
        with self._lock:
            self.triggers.append(trigger)
        return trigger

    def _due(self, tid: str, piece_len: int) -> tuple[Optional[Trigger], int]:
        """Earliest unfired trigger that falls inside the next ``piece_len``
        bytes of ``tid``; returns it with the byte count to forward first."""
        with self._lock:
            done = self.payload_forwarded[tid]
            best, cut = None, piece_len
            for t in self.triggers:
                if t.fired or (t.transfer_id is not None and t.transfer_id != tid):
                    continue
                k = t.at_bytes - done
                if 0 <= k <= cut and (best is None or k < cut):
                    best, cut = t, k
            if best is not None:
                best.fired = True
            return best, cut

    def _pump_up(self, pair) -> None:
        client, upstream = pair
        buf = b""
        remaining = 0
        tid, is_patch = "", False
        passthrough = False
        while True:
            if not buf:
                try:
                    data = client.recv(RECV)
                except OSError:
                    data = b""
                if not data:
                    self._close_pair(pair)
                    return
                buf = data
            if passthrough:
                if not self._forward(upstream, buf, up=True):
                    self._close_pair(pair)
                    return
                buf = b""
                continue
            if remaining == 0:
                end = buf.find(b"\r\n\r\n")
                if end < 0:
                    if len(buf) > MAX_HEADER:
                        passthrough = True
                        continue
                    try:
                        more = client.recv(RECV)
                    except OSError:
                        more = b""
                    if not more:
                        self._close_pair(pair)
                        return
                    buf += more
                    continue
                head, buf = buf[: end + 4], buf[end + 4:]
                method, headers = _parse_head(head)
                remaining = int(headers.get("content-length", "0") or 0)
                tid = headers.get("x-mft-transfer", "")
                is_patch = method == "PATCH"
                if is_patch:
                    with self._lock:
                        self.patches[tid] += 1
                if not self._forward(upstream, head, up=True):
                    self._close_pair(pair)
                    return
                continue
            piece, buf = buf[:remaining], buf[remaining:]
            remaining -= len(piece)
            if is_patch:
                with self._lock:
                    self.payload_received[tid] += len(piece)
                trig, cut = self._due(tid, len(piece))
                if trig is not None:
                    if cut and not self._forward(upstream, piece[:cut], up=True):
                        self._close_pair(pair)
                        return
                    with self._lock:
                        self.payload_forwarded[tid] += cut
                    trig.fired_at = time.monotonic()
                    trig.fired_offset = self.payload_forwarded[tid]
                    trig.received_at_fire = self.payload_received[tid]
                    log.info("trigger %s fired at offset %d of %s", trig.name, trig.fired_offset, tid)
                    if trig.sever:
                        self._close_pair(pair)
                    try:
                        trig.action()
                    except Exception:
                        log.exception("trigger action failed")
                    if trig.sever:
                        return
                    piece = piece[cut:]
                with self._lock:
                    self.payload_forwarded[tid] += len(piece)
            if piece and not self._forward(upstream, piece, up=True):
                self._close_pair(pair)
                return


def _parse_head(head: bytes) -> tuple[str, dict]:
    lines = head.decode("latin-1").split("\r\n")
    method = lines[0].split(" ", 1)[0].upper()
    headers = {}
    for line in lines[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    return method, headers
