"""Frame channels: in-process queues and TCP sockets.

Both carry serialized frames, so an in-process session exercises the same
encode/decode path as a networked one.
"""

from __future__ import annotations

import os
import queue
import socket

from ..errors import TransportError, ValidationError
from .messages import HEADER, RoundMessage, decode_body, frame_length, serialize

BIND_ENV = "FEDSPCA_BIND"
DEFAULT_BIND = "127.0.0.1:0"
_CLOSED = object()


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not port.isdigit():
        raise ValidationError(f"address must look like host:port, got {text!r}")
    port = int(port)
    if port > 65535:
        raise ValidationError(f"port out of range: {port}")
    return host or "127.0.0.1", port


def bind_address(configured: str | None = None) -> tuple[str, int]:
    """Listen address: FEDSPCA_BIND wins over the configured value."""
    return parse_address(os.environ.get(BIND_ENV) or configured or DEFAULT_BIND)


class Channel:
    """One end of a bidirectional frame pipe with byte and message counters."""

    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0
        self.sent = 0
        self.received = 0

    def send(self, msg: RoundMessage) -> int:
        frame = serialize(msg)
        self._send_frame(frame)
        self.bytes_sent += len(frame)
        self.sent += 1
        return len(frame)

    def recv(self) -> RoundMessage:
        body = self._recv_body()
        self.bytes_received += HEADER.size + len(body)
        self.received += 1
        return decode_body(body)

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_body(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class QueueChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None = None):
        super().__init__()
        self.inbox, self.outbox, self.timeout = inbox, outbox, timeout
        self._closed = False

    def _send_frame(self, frame):
        if self._closed:
            raise TransportError("channel is closed")
        self.outbox.put(frame)

    def _recv_body(self):
        try:
            frame = self.inbox.get(timeout=self.timeout)
        except queue.Empty as exc:
            raise TransportError(f"no message within {self.timeout} s") from exc
        if frame is _CLOSED:
            raise TransportError("peer closed the channel")
        n = frame_length(frame[:HEADER.size])
        body = frame[HEADER.size:]
        if len(body) != n:
            raise TransportError(f"frame length mismatch: header {n}, body {len(body)}")
        return body

    def close(self):
        if not self._closed:
            self._closed = True
            self.outbox.put(_CLOSED)


def queue_pair(timeout: float | None = None) -> tuple[QueueChannel, QueueChannel]:
    """(master end, worker end) of one in-process link."""
    a, b = queue.Queue(), queue.Queue()
    return QueueChannel(a, b, timeout), QueueChannel(b, a, timeout)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket, timeout: float | None = None):
        super().__init__()
        self.sock = sock
        sock.settimeout(timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_frame(self, frame):
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _recv_body(self):
        n = frame_length(self._read_exact(HEADER.size))
        return self._read_exact(n)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class TcpListener:
    """Master-side listening socket."""

    def __init__(self, address: str | None = None, timeout: float | None = None):
        host, port = bind_address(address)
        self.timeout = timeout
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self.sock.bind((host, port))
        except OSError as exc:
            self.sock.close()
            raise TransportError(f"cannot listen on {host}:{port}: {exc}") from exc
        self.sock.listen()
        self.sock.settimeout(timeout)

    @property
    def address(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def accept(self) -> SocketChannel:
        try:
            conn, _ = self.sock.accept()
        except OSError as exc:
            raise TransportError(f"no worker connected: {exc}") from exc
        return SocketChannel(conn, self.timeout)

    def close(self):
        self.sock.close()


def connect(address: str, timeout: float | None = None) -> SocketChannel:
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
    return SocketChannel(sock, timeout)
