"""SoftEther-like client: TLS with ``CheckServerCert`` semantics, then the
HTTP-wrapped connect signature and the marker payload."""

from __future__ import annotations

import socket
import ssl
from typing import Optional

from .. import tlsutil
from ..core import Credentials, ProtocolId, Randomness
from ..net import close_quietly
from .policy import AbortedAt, CertCheck, ClientPolicy, Endpoint, Established

CONNECT_SIGNATURE = (b"POST /vpnsvc/connect.cgi HTTP/1.1\r\nContent-Type: image/jpeg\r\n"
                     b"Connection: Keep-Alive\r\nContent-Length: 10\r\n\r\nVPNCONNECT")


def run_softether(policy: ClientPolicy, endpoint: Endpoint, credentials: Optional[Credentials], payload: bytes,
                  rng: Optional[Randomness] = None, timeout: float = 10.0, linger: float = 0.1):
    strict = policy.verify_server_cert is CertCheck.Strict
    raw = socket.create_connection(endpoint.address, timeout=timeout)
    ctx = tlsutil.client_context(verify=strict, ca_pem=endpoint.ca_pem)
    try:
        tls = ctx.wrap_socket(raw, server_hostname=endpoint.server_name)
    except (ssl.SSLError, OSError) as exc:
        close_quietly(raw)
        return AbortedAt("TlsVerify", str(exc))
    try:
        tls.sendall(CONNECT_SIGNATURE)
        tls.sendall(payload)
        tls.settimeout(linger)
        try:
            tls.recv(1)
        except (socket.timeout, ssl.SSLError, OSError):
            pass
        return Established(ProtocolId.SOFTETHER, True, {"tls": tls.version()})
    except OSError as exc:
        return AbortedAt("Session", str(exc))
    finally:
        close_quietly(tls)
