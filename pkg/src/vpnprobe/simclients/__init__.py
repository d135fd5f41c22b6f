"""Scripted VPN clients with configurable security policies.

They are the ground truth the probes are checked against, so they share
codecs and primitives with the probes but none of the negotiation logic.
"""

from __future__ import annotations

import logging
import socket
from typing import Mapping, Optional

from ..core import Credentials, ProtocolId, Randomness
from ..net import close_quietly
from .policy import (ANY_IDENTITY, AbortedAt, CertCheck, ClientOutcome, ClientPolicy, Endpoint,
                     Established, GaveUp, InnerAuth)

log = logging.getLogger(__name__)

OPENVPN_BANNER = b"OPENVPN-SIM"


def _run_openvpn_slot(policy, endpoint: Endpoint, credentials, payload, rng=None, timeout=10.0, linger=0.0):
    # no OpenVPN protocol here: a plain connect that must be answered by the banner
    sock = socket.create_connection(endpoint.address, timeout=timeout)
    try:
        first = sock.recv(len(OPENVPN_BANNER))
    except socket.timeout:
        return AbortedAt("Connect", "no answer from server")
    finally:
        close_quietly(sock)
    if first != OPENVPN_BANNER:
        return AbortedAt("Connect", "connection closed by server")
    return Established(ProtocolId.OPENVPN, True)


def _runner(protocol: ProtocolId):
    # imported lazily so that a single client can be used without loading the rest
    if protocol is ProtocolId.PPTP:
        from .pptp_client import run_pptp
        return run_pptp
    if protocol is ProtocolId.SSTP:
        from .sstp_client import run_sstp
        return run_sstp
    if protocol is ProtocolId.IKEV2:
        from .ikev2_client import run_ikev2
        return run_ikev2
    if protocol in (ProtocolId.L2TP_IPSEC, ProtocolId.CISCO_IPSEC):
        from .ikev1_client import run_ikev1
        cisco = protocol is ProtocolId.CISCO_IPSEC
        return lambda *a, **kw: run_ikev1(*a, cisco=cisco, **kw)
    if protocol is ProtocolId.SOFTETHER:
        from .softether_client import run_softether
        return run_softether
    return _run_openvpn_slot


def run_client(protocol, policy: ClientPolicy, endpoint: Endpoint, credentials: Optional[Credentials],
               payload: bytes, rng: Optional[Randomness] = None, timeout: float = 10.0,
               linger: float = 0.3) -> ClientOutcome:
    """One client run.  An unreachable server is retried ``policy.retry_budget``
    times before the client gives up; any other abort is returned as is."""
    protocol = ProtocolId(protocol)
    run = _runner(protocol)
    rng = rng or Randomness()
    attempts = []
    for _ in range(policy.retry_budget):
        try:
            out = run(policy, endpoint, credentials, payload, rng=rng, timeout=timeout, linger=linger)
        except OSError as exc:
            out = AbortedAt("Connect", f"{type(exc).__name__}: {exc}")
        if not (isinstance(out, AbortedAt) and out.stage == "Connect"):
            return out
        attempts.append(out)
    return GaveUp(tuple(attempts))


def run_auto_fallback(policy: ClientPolicy, endpoints: Mapping, credentials: Optional[Credentials] = None,
                      payload: bytes = b"", rng: Optional[Randomness] = None, timeout: float = 10.0,
                      linger: float = 0.1) -> ClientOutcome:
    """Tries ``policy.fallback_order`` one protocol after another; the first
    established connection wins."""
    if not policy.fallback_order:
        raise ValueError("fallback_order must not be empty")
    rng = rng or Randomness()
    attempts = []
    for proto in policy.fallback_order:
        endpoint = endpoints.get(proto)
        if endpoint is None:
            attempts.append((proto, AbortedAt("Connect", "no endpoint configured")))
            continue
        out = run_client(proto, policy, endpoint, credentials, payload, rng=rng, timeout=timeout, linger=linger)
        log.debug("fallback attempt %s -> %s", proto.value, out)
        if isinstance(out, Established):
            out.detail["attempted"] = [p.value for p, _ in attempts] + [proto.value]
            return out
        attempts.append((proto, out))
    return GaveUp(tuple(attempts))


__all__ = ["ANY_IDENTITY", "AbortedAt", "CertCheck", "ClientOutcome", "ClientPolicy", "Endpoint",
           "Established", "GaveUp", "InnerAuth", "OPENVPN_BANNER", "run_auto_fallback", "run_client"]
