"""TLS acceptance probe for SoftEther-style clients.

The proprietary session protocol is not spoken.  What matters is whether
the client, after a handshake with an unverifiable certificate, goes on to
send application data.  The probe never writes application data first.
"""

from __future__ import annotations

import socket
import ssl
from dataclasses import dataclass
from typing import Optional

from . import tlsutil
from .core import CertificateMaterial, Direction, Finding, Randomness, Transcript, Verdict, VerdictLevel, VulnClass
from .net import accept_with_timeout, close_quietly, listen_tcp, ready_line
from .sstp import accept_tls

SOFTETHER_PORT = 443
SAMPLE_LEN = 48


@dataclass(frozen=True)
class TlsAcceptOutcome:
    handshake_completed: bool
    alert: Optional[str] = None
    app_bytes: int = 0
    first_bytes: bytes = b""
    client_spoke: bool = True

    def __post_init__(self):
        if self.app_bytes and not self.handshake_completed:
            raise ValueError("application bytes without a completed handshake")


def tls_accept_level(outcome: TlsAcceptOutcome) -> VerdictLevel:
    """Verdict from the two observable facts only."""
    if outcome.handshake_completed and outcome.app_bytes > 0:
        return VerdictLevel.Vulnerable
    if not outcome.handshake_completed and outcome.client_spoke:
        return VerdictLevel.Secure
    return VerdictLevel.Inconclusive


class SoftEtherTlsProbe:
    name = "softether-tls"

    def __init__(self, material: Optional[CertificateMaterial] = None, host: str = "127.0.0.1",
                 port: int = SOFTETHER_PORT, connect_timeout: float = 30.0, phase_timeout: float = 10.0,
                 target: str = "softether-client", rng: Optional[Randomness] = None):
        self.material = material or tlsutil.self_signed()
        self.host, self.port = host, port
        self.connect_timeout, self.phase_timeout = connect_timeout, phase_timeout
        self.target = target
        self.rng = rng or Randomness()
        self._listener = None
        self.outcome: Optional[TlsAcceptOutcome] = None

    def bind(self) -> "SoftEtherTlsProbe":
        self._ctx = tlsutil.server_context(self.material)
        self._listener = listen_tcp(self.host, self.port)
        return self

    @property
    def ports(self) -> dict[str, str]:
        h, p = self._listener.getsockname()
        return {"tcp": f"{h}:{p}"}

    def ready_line(self) -> str:
        return ready_line(self.name, self.ports)

    def serve(self) -> tuple[Finding, Transcript]:
        if self._listener is None:
            self.bind()
        tr = Transcript(prefix="softether")
        conn = None
        try:
            accepted = accept_with_timeout(self._listener, self.connect_timeout)
            if accepted is None:
                return self._finding(Verdict.inconclusive(f"no client connected within {self.connect_timeout}s")), tr
            conn, addr = accepted
            tr.record(Direction.ClientToProbe, "tcp", f"connection from {addr[0]}:{addr[1]}")
            res = accept_tls(conn, self._ctx, self.phase_timeout)
            role = self.material.trust_role.value
            if not res.handshake_completed:
                ref = tr.record(Direction.ClientToProbe, "tls",
                                f"TLS handshake failed (presented {role} certificate): {res.alert or res.error}")
                self.outcome = TlsAcceptOutcome(False, res.alert, client_spoke=res.client_spoke)
                return self._finding(self._verdict(self.outcome, [ref], res.error)), tr
            conn = res.sock
            hs_ref = tr.record(Direction.LocalObservation, "tls",
                               f"TLS handshake completed; presented certificate CN={self.material.subject_name} "
                               f"trust_role={role} version={conn.version()}", plaintext=False)
            data = self._read_app_data(conn)
            refs = [hs_ref]
            if data:
                refs.append(tr.record(Direction.ClientToProbe, "tls",
                                      f"client sent {len(data)} application bytes; first: "
                                      f"{data[:SAMPLE_LEN]!r}", plaintext=False, raw=data[:SAMPLE_LEN]))
            else:
                tr.record(Direction.LocalObservation, "tls", "no application data before close/timeout",
                          plaintext=False)
            self.outcome = TlsAcceptOutcome(True, None, len(data), data[:SAMPLE_LEN])
            return self._finding(self._verdict(self.outcome, refs, "client completed TLS but sent nothing")), tr
        finally:
            close_quietly(conn, self._listener)

    def _read_app_data(self, conn) -> bytes:
        conn.settimeout(self.phase_timeout)
        buf = b""
        try:
            while len(buf) < 4096:
                chunk = conn.recv(4096)
                if not chunk:
                    break
                buf += chunk
                conn.settimeout(0.2)  # take what follows the greeting, then stop
        except (socket.timeout, ssl.SSLError, OSError):
            pass
        return buf

    def _verdict(self, outcome: TlsAcceptOutcome, refs: list, reason: Optional[str]) -> Verdict:
        level = tls_accept_level(outcome)
        if level is VerdictLevel.Vulnerable:
            return Verdict.vulnerable(refs, f"client sent {outcome.app_bytes} application bytes to a server "
                                            f"whose certificate it could not verify")
        if level is VerdictLevel.Secure:
            alert = f" ({outcome.alert})" if outcome.alert else ""
            return Verdict.secure(f"client aborted the TLS handshake{alert}", refs)
        return Verdict.inconclusive(reason or "no TLS handshake", refs)

    def _finding(self, verdict: Verdict) -> Finding:
        return Finding(VulnClass.SoftEtherNoServerVerification, verdict, self.target)


def serve_tls_accept(material: Optional[CertificateMaterial] = None, **kwargs) -> tuple[Finding, Transcript]:
    return SoftEtherTlsProbe(material, **kwargs).serve()
