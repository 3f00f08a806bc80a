"""Frame transports: an in-process queue pair and a TCP socket wrapper.

Both endpoints move complete frames (4-byte length header + body) so the
protocol codec is the single source of framing truth. ``recv`` returns None
when the peer has closed.
"""

from __future__ import annotations

import queue
import socket
import struct

from .errors import FrameTooLarge, ProtocolError
from .protocol import MAX_FRAME_BYTES

_HEADER = struct.Struct(">I")
_CLOSE = object()


class InMemoryEndpoint:
    """One side of a duplex in-process frame pipe."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @classmethod
    def pair(cls) -> tuple["InMemoryEndpoint", "InMemoryEndpoint"]:
        a: queue.Queue = queue.Queue()
        b: queue.Queue = queue.Queue()
        return cls(a, b), cls(b, a)

    def send(self, frame: bytes) -> None:
        if self._closed:
            raise ProtocolError("endpoint closed")
        self._outbox.put(bytes(frame))

    def recv(self, timeout: float | None = None) -> bytes | None:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame within timeout") from None
        if item is _CLOSE:
            # Reinsert so later recv() calls also observe the close.
            self._inbox.put(_CLOSE)
            return None
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSE)


class SocketEndpoint:
    """Blocking frame reader/writer over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, frame: bytes) -> None:
        self._sock.sendall(frame)

    def _read_exact(self, n: int) -> bytes | None:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except (ConnectionResetError, BrokenPipeError, OSError):
                return None if not chunks else self._truncated()
            if not chunk:
                return None if not chunks else self._truncated()
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    @staticmethod
    def _truncated() -> bytes:
        raise ProtocolError("connection closed mid-frame")

    def recv(self, timeout: float | None = None) -> bytes | None:
        self._sock.settimeout(timeout)
        try:
            header = self._read_exact(_HEADER.size)
            if header is None:
                return None
            (length,) = _HEADER.unpack(header)
            if length > MAX_FRAME_BYTES:
                raise FrameTooLarge(f"declared frame body of {length} bytes exceeds limit")
            body = self._read_exact(length)
            if body is None:
                raise ProtocolError("connection closed mid-frame")
            return header + body
        except socket.timeout:
            raise TimeoutError("no frame within timeout") from None

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class Listener:
    """TCP listener handing out SocketEndpoints."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> SocketEndpoint:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout:
            raise TimeoutError("no connection within timeout") from None
        return SocketEndpoint(conn)

    def close(self) -> None:
        self._sock.close()


def connect(host: str, port: int, timeout: float = 10.0) -> SocketEndpoint:
    return SocketEndpoint(socket.create_connection((host, port), timeout=timeout))
