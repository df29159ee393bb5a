"""Byte transports between agent and collector.

Both transports carry the same newline-delimited records; the collector
side always parses through :func:`iter_messages`, so swapping transports
cannot change what the collector sees.
"""

from __future__ import annotations

import logging
import socket
import threading
import time

from .collector import Collector
from .protocol import iter_messages

log = logging.getLogger(__name__)


class LoopbackTransport:
    """In-process channel; bytes are buffered and handed over on close."""

    def __init__(self, collector: Collector):
        self.collector = collector
        self.chunks: list[bytes] = []

    def send(self, data: bytes) -> None:
        self.chunks.append(data)

    def close(self) -> None:
        for msg in iter_messages(self.chunks):
            self.collector.feed(msg)
        self.chunks = []


class CollectorServer:
    """TCP listener feeding every received record into one collector.

    Connections are served one after another by a single thread, which is
    the collector's only consumer.
    """

    def __init__(self, collector: Collector, host: str = "127.0.0.1", port: int = 0, max_connections: int | None = None):
        self.collector = collector
        self.sock = socket.create_server((host, port))
        self.sock.settimeout(0.2)
        self.address = self.sock.getsockname()[:2]
        self.max_connections = max_connections
        self.error: Exception | None = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)

    def start(self) -> "CollectorServer":
        self._thread.start()
        return self

    def _serve(self) -> None:
        served = 0
        try:
            while not self._stop.is_set():
                if self.max_connections is not None and served >= self.max_connections:
                    break
                try:
                    conn, _ = self.sock.accept()
                except socket.timeout:
                    continue
                served += 1
                with conn:
                    conn.settimeout(None)
                    for msg in iter_messages(iter(lambda: conn.recv(65536), b"")):
                        self.collector.feed(msg)
        except Exception as e:  # surfaced to the caller by join()
            self.error = e
        finally:
            self.sock.close()

    def join(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)
        if self.error is not None:
            raise self.error

    def stop(self) -> None:
        self._stop.set()
        self.join()


class SocketTransport:
    """TCP client with reconnect and exponential backoff."""

    def __init__(self, host: str, port: int, max_retries: int = 5, backoff_s: float = 0.05):
        self.addr = (host, int(port))
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.sock: socket.socket | None = None
        self.retries = 0

    def _connect(self) -> None:
        delay = self.backoff_s
        for attempt in range(self.max_retries + 1):
            try:
                self.sock = socket.create_connection(self.addr, timeout=10)
                return
            except OSError as e:
                if attempt == self.max_retries:
                    raise ConnectionError(f"cannot reach collector at {self.addr[0]}:{self.addr[1]}: {e}") from e
                self.retries += 1
                log.warning("connect failed (%s); retrying in %.2fs", e, delay)
                time.sleep(delay)
                delay *= 2

    def send(self, data: bytes) -> None:
        for attempt in range(self.max_retries + 1):
            if self.sock is None:
                self._connect()
            try:
                self.sock.sendall(data)
                return
            except OSError as e:
                self.sock.close()
                self.sock = None
                if attempt == self.max_retries:
                    raise ConnectionError(f"send failed after {self.max_retries} retries: {e}") from e
                self.retries += 1
                log.warning("send failed (%s); reconnecting", e)
                time.sleep(self.backoff_s * 2**attempt)

    def close(self) -> None:
        if self.sock is not None:
            self.sock.close()
            self.sock = None
