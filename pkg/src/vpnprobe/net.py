"""Socket plumbing shared by the probe servers."""

from __future__ import annotations

import socket
import threading
from typing import Callable, Optional

from .core import ProbeError


def listen_tcp(host: str, port: int, backlog: int = 8) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise ProbeError(f"cannot bind TCP {host}:{port}: {exc}") from exc
    sock.listen(backlog)
    return sock


def bind_udp(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise ProbeError(f"cannot bind UDP {host}:{port}: {exc}") from exc
    return sock


def accept_with_timeout(sock: socket.socket, timeout: float):
    sock.settimeout(timeout)
    try:
        return sock.accept()
    except socket.timeout:
        return None


def recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def read_line(sock, limit: int = 8192) -> bytes:
    buf = bytearray()
    while not buf.endswith(b"\n"):
        ch = sock.recv(1)
        if not ch:
            raise ConnectionError("peer closed connection")
        buf += ch
        if len(buf) > limit:
            raise ValueError("line too long")
    return bytes(buf)


def ready_line(name: str, ports: dict[str, str]) -> str:
    """Machine-parsable line announcing bound ports before accepting."""
    return "READY probe=" + name + "".join(f" {k}={v}" for k, v in ports.items())


def parse_ready_line(line: str) -> dict[str, str]:
    if not line.startswith("READY "):
        raise ValueError("not a READY line")
    return dict(item.split("=", 1) for item in line.split()[1:])


def close_quietly(*socks) -> None:
    for s in socks:
        if s is None:
            continue
        try:
            s.close()
        except OSError:
            pass


class Background:
    """Runs ``fn`` on a daemon thread and hands back its return value."""

    def __init__(self, fn: Callable, *args, name: Optional[str] = None, **kwargs):
        self._result = None
        self._exc: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._run, args=(fn, args, kwargs), name=name, daemon=True)

    def _run(self, fn, args, kwargs):
        try:
            self._result = fn(*args, **kwargs)
        except BaseException as exc:  # re-raised in result()
            self._exc = exc

    def start(self) -> "Background":
        self._thread.start()
        return self

    def result(self, timeout: Optional[float] = None):
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TimeoutError("background task still running")
        if self._exc is not None:
            raise self._exc
        return self._result
