"""TCP stream transport for location-data frames.

One connection carries one tag's frames. The server decodes every
connection independently and republishes the ranges on ``ranging/tag<N>``;
connection events and idle heartbeats go to ``bus/status`` as plain text.
"""
from __future__ import annotations

import logging
import socket
import threading
from typing import Iterable

from ..twr import RangeMeasurement, TransportError
from .codec import StreamDecoder, WireFrame, encode, frame_to_measurements, measurements_to_frame
from .pubsub import STATUS_TOPIC, Bus

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL = 5.0


def ranging_topic(tag_id: int) -> str:
    return f"ranging/tag{tag_id}"


def parse_address(address: str | tuple) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {address!r}")
    return host, int(port)


class StreamServer:
    def __init__(self, bus: Bus, address="127.0.0.1:0", heartbeat_interval: float = HEARTBEAT_INTERVAL):
        self.bus = bus
        self.requested = parse_address(address)
        self.heartbeat_interval = heartbeat_interval
        self._sock: socket.socket | None = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self._active = 0
        self._sequence: dict[int, int] = {}
        self.decoders: list[StreamDecoder] = []
        self.measurements_published = 0

    # -- lifecycle

    def start(self) -> "StreamServer":
        try:
            sock = socket.create_server(self.requested)
        except OSError as exc:
            raise TransportError(f"cannot listen on {self.requested[0]}:{self.requested[1]}: {exc}") from exc
        sock.settimeout(0.1)
        self._sock = sock
        self._status(f"listening {self.address[0]}:{self.address[1]}")
        for target in (self._accept_loop, self._heartbeat_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    @property
    def address(self) -> tuple[str, int]:
        if self._sock is None:
            raise TransportError("server not started")
        return self._sock.getsockname()[:2]

    def close(self) -> None:
        self._stop.set()
        if self._sock is not None:
            self._sock.close()
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self):
        return self.start() if self._sock is None else self

    def __exit__(self, *exc):
        self.close()

    # -- stats

    @property
    def active_connections(self) -> int:
        with self._lock:
            return self._active

    @property
    def crc_errors(self) -> int:
        return sum(d.crc_errors for d in self.decoders)

    @property
    def resync_bytes(self) -> int:
        return sum(d.resync_bytes for d in self.decoders)

    # -- workers

    def _status(self, text: str) -> None:
        log.debug("status: %s", text)
        self.bus.publish(STATUS_TOPIC, text)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with self._lock:
                self._active += 1
            t = threading.Thread(target=self._serve_connection, args=(conn, peer), daemon=True)
            t.start()
            self._threads.append(t)

    def _heartbeat_loop(self):
        while not self._stop.wait(self.heartbeat_interval):
            if self.active_connections == 0:
                self._status("waiting")

    def _publish_frame(self, frame: WireFrame) -> None:
        with self._lock:
            first = self._sequence.get(frame.tag_id, 0)
            self._sequence[frame.tag_id] = first + frame.count
        topic = ranging_topic(frame.tag_id)
        for m in frame_to_measurements(frame, first):
            self.bus.publish(topic, m)
        with self._lock:
            self.measurements_published += frame.count

    def _serve_connection(self, conn: socket.socket, peer):
        name = f"{peer[0]}:{peer[1]}"
        decoder = StreamDecoder()
        self.decoders.append(decoder)
        self._status(f"connected {name}")
        conn.settimeout(0.2)
        outcome = "disconnected"
        try:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(65536)
                except socket.timeout:
                    continue
                if not chunk:
                    break
                for frame in decoder.feed(chunk):
                    self._publish_frame(frame)
        except OSError as exc:
            outcome = f"lost ({exc})"
        finally:
            conn.close()
            with self._lock:
                self._active -= 1
            self._status(f"{outcome} {name}")


def serve_stream(bus: Bus, address="127.0.0.1:0", heartbeat_interval: float = HEARTBEAT_INTERVAL) -> StreamServer:
    return StreamServer(bus, address, heartbeat_interval).start()


class StreamClient:
    def __init__(self, address, timeout: float = 5.0):
        host, port = parse_address(address)
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self.frames_sent = 0

    def send_frame(self, frame: WireFrame) -> None:
        self.send_bytes(encode(frame))
        self.frames_sent += 1

    def send_bytes(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect_stream(address, timeout: float = 5.0) -> StreamClient:
    return StreamClient(address, timeout)


class LoopbackSink:
    """Measurement sink that frames each tag's epoch bundle onto its own socket.

    A tag's bundle is flushed when a measurement with a later epoch time
    arrives for that tag, and on :meth:`close`.
    """

    def __init__(self, address, tags: Iterable[int]):
        self.clients = {tag: connect_stream(address) for tag in tags}
        self._pending: dict[int, tuple[float, list[RangeMeasurement]]] = {}
        self.measurements_sent = 0

    def __call__(self, m: RangeMeasurement) -> None:
        tag = m.pair.tag
        if tag not in self.clients:
            raise TransportError(f"no stream for tag {tag}")
        t, bundle = self._pending.get(tag, (m.timestamp, []))
        if m.timestamp != t:
            self._flush(tag)
            t, bundle = m.timestamp, []
        bundle.append(m)
        self._pending[tag] = (t, bundle)

    def _flush(self, tag):
        t, bundle = self._pending.pop(tag, (None, []))
        if bundle:
            self.clients[tag].send_frame(measurements_to_frame(tag, t, bundle))
            self.measurements_sent += len(bundle)

    def close(self) -> None:
        for tag in list(self._pending):
            self._flush(tag)
        for client in self.clients.values():
            client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
