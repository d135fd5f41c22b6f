"""Management-interface stand-ins for locally running VPN client apps.

``OpenVpnMgmtFixture`` speaks the greeting/prompt/``state`` subset of the
OpenVPN management protocol.  ``SoftEtherMgmtFixture`` speaks a small line
protocol shaped like the real one (authentication challenge, then account
commands); on ``AccountConnect`` it actually connects to the configured
server with the SoftEther-like client.
"""

from __future__ import annotations

import logging
import socket
import threading
from typing import Optional

from ..net import close_quietly, listen_tcp
from .policy import CertCheck, ClientPolicy, Endpoint
from .softether_client import run_softether

log = logging.getLogger(__name__)


class _LineServer:
    """Serves connections one at a time on a background thread."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = listen_tcp(host, port)
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self.commands: list[str] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self):
        self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)  # wakes accept()
        except OSError:
            pass
        self._thread.join(2)
        close_quietly(self._sock)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(5)
            try:
                self.handle(conn.makefile("rwb", buffering=0))
            except (OSError, ValueError) as exc:
                log.debug("fixture connection ended: %s", exc)
            finally:
                close_quietly(conn)

    def handle(self, f) -> None:
        raise NotImplementedError


def _send(f, line: str, newline: bool = True) -> None:
    f.write(line.encode() + (b"\r\n" if newline else b""))


def _recv(f) -> Optional[str]:
    line = f.readline()
    if not line:
        return None
    return line.decode("utf-8", "replace").strip()


class OpenVpnMgmtFixture(_LineServer):
    def __init__(self, password: Optional[str] = None, **kw):
        super().__init__(**kw)
        self.password = password

    def handle(self, f) -> None:
        if self.password is not None:
            _send(f, "ENTER PASSWORD:", newline=False)
            if _recv(f) != self.password:
                _send(f, "ERROR: bad password")
                return
            _send(f, "SUCCESS: password is correct")
        _send(f, ">INFO:OpenVPN Management Interface Version 5 -- type 'help' for more info")
        while True:
            cmd = _recv(f)
            if cmd is None or cmd == "exit":
                return
            self.commands.append(cmd)
            if cmd == "state":
                _send(f, "1700000000,CONNECTED,SUCCESS,10.8.0.6,198.51.100.7,1194,,")
                _send(f, "END")
            else:
                _send(f, f"ERROR: unknown command [{cmd}]")


class SoftEtherMgmtFixture(_LineServer):
    def __init__(self, password: Optional[str] = None, reject: tuple[str, ...] = (),
                 check_server_cert: bool = False, **kw):
        super().__init__(**kw)
        self.password = password
        self.reject = set(reject)
        self.check_server_cert = check_server_cert
        self.accounts: dict[str, dict[str, str]] = {}
        self.connections: list = []

    def handle(self, f) -> None:
        _send(f, "SEVPN-MGMT 1.0")
        authed = self.password is None
        _send(f, "READY" if authed else "AUTH-REQUIRED")
        while True:
            line = _recv(f)
            if line is None:
                return
            self.commands.append(line)
            cmd, _, rest = line.partition(" ")
            if cmd == "Login":
                authed = authed or rest == self.password
                _send(f, "OK" if authed else "ERR bad password")
            elif not authed:
                _send(f, "ERR authentication required")
            elif cmd in self.reject:
                _send(f, f"ERR {cmd} not permitted")
            elif cmd == "AccountList":
                _send(f, "OK " + ",".join(sorted(self.accounts)))
            elif cmd == "AccountCreate":
                name, *opts = rest.split()
                self.accounts[name] = dict(o.split("=", 1) for o in opts if "=" in o)
                _send(f, "OK")
            elif cmd == "AccountConnect":
                acct = self.accounts.get(rest.strip())
                if acct is None:
                    _send(f, "ERR no such account")
                    continue
                _send(f, "OK")
                self._connect(acct)
            else:
                _send(f, f"ERR unknown command {cmd}")

    def _connect(self, acct: dict[str, str]) -> None:
        host, _, port = acct.get("server", "").rpartition(":")
        verify = acct.get("check_server_cert", "false").lower() == "true" or self.check_server_cert
        policy = ClientPolicy(verify_server_cert=CertCheck.Strict if verify else CertCheck.Ignore)
        try:
            out = run_softether(policy, Endpoint(host, int(port)), None, b"victim traffic", timeout=5)
        except OSError as exc:
            out = exc
        self.connections.append(out)
