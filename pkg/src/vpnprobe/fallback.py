"""Protocol-fallback downgrade scenarios.

Every protocol in a client's order gets a listener on loopback.  Blocked
protocols are refused or silently dropped by the harness's own listeners
(no host firewall involved); the rest are served by working servers whose
certificate, PSK and credentials the client accepts.  Whatever protocol the
client ends up on decides the verdict.
"""

from __future__ import annotations

import enum
import functools
import logging
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from . import tlsutil
from .core import (Credentials, Direction, Finding, ProtocolId, Randomness, Transcript, TrustRole, Verdict,
                   VulnClass)
from .net import Background, bind_udp, close_quietly, listen_tcp

log = logging.getLogger(__name__)

P = ProtocolId

# standard ports, for documentation and --standard-ports; IKE also floats to 4500
DEFAULT_PORTS = {P.PPTP: 1723, P.SSTP: 443, P.IKEV2: 500, P.L2TP_IPSEC: 500, P.CISCO_IPSEC: 500,
                 P.OPENVPN: 1194, P.SOFTETHER: 5555}
UDP_PROTOCOLS = frozenset({P.IKEV2, P.L2TP_IPSEC, P.CISCO_IPSEC})
DEFAULT_WEAK = frozenset({P.PPTP, P.L2TP_IPSEC})  # L2TP listeners always use a public PSK

ALIASES = {"ovpn": P.OPENVPN, "openvpn": P.OPENVPN, "sstp": P.SSTP, "l2tp": P.L2TP_IPSEC,
           "l2tp-ipsec": P.L2TP_IPSEC, "pptp": P.PPTP, "ikev2": P.IKEV2, "cisco": P.CISCO_IPSEC,
           "softether": P.SOFTETHER}

# VpnStrategy: Windows names 2/4/6/8 "PptpFirst", "L2tpFirst", "SstpFirst",
# "Ikev2First"; the named protocol goes first, the rest keep the default order.
_ALL_FOUR = (P.IKEV2, P.SSTP, P.PPTP, P.L2TP_IPSEC)
VPN_STRATEGY = {
    0: _ALL_FOUR,
    1: (P.PPTP,),
    2: (P.PPTP, P.IKEV2, P.SSTP, P.L2TP_IPSEC),
    3: (P.L2TP_IPSEC,),
    4: (P.L2TP_IPSEC, P.IKEV2, P.SSTP, P.PPTP),
    5: (P.IKEV2,),
    6: (P.SSTP, P.IKEV2, P.PPTP, P.L2TP_IPSEC),
    8: (P.IKEV2, P.SSTP, P.PPTP, P.L2TP_IPSEC),
}


def vpnstrategy_order(value: int) -> list[ProtocolId]:
    try:
        return list(VPN_STRATEGY[int(value)])
    except (KeyError, ValueError):
        known = ", ".join(str(k) for k in sorted(VPN_STRATEGY))
        raise ValueError(f"unknown VpnStrategy {value!r}; known values: {known}") from None


def parse_protocol(name) -> ProtocolId:
    if isinstance(name, ProtocolId):
        return name
    key = str(name).strip()
    if key.lower() in ALIASES:
        return ALIASES[key.lower()]
    return ProtocolId(key.upper())


class BlockMode(str, enum.Enum):
    Refuse = "Refuse"  # immediate reset (TCP) / closed port (UDP)
    Drop = "Drop"  # accept or receive, never answer


@dataclass(frozen=True)
class FallbackScenario:
    order: tuple
    blocked: frozenset = frozenset()
    mode: BlockMode = BlockMode.Refuse
    weak: frozenset = DEFAULT_WEAK
    timeout: float = 60.0

    def __post_init__(self):
        order = tuple(parse_protocol(p) for p in self.order)
        if not order:
            raise ValueError("protocol order must not be empty")
        if len(set(order)) != len(order):
            raise ValueError("protocol order lists a protocol twice")
        blocked = frozenset(parse_protocol(p) for p in self.blocked)
        if not blocked <= set(order):
            raise ValueError("can only block protocols that have a listener: "
                             + ", ".join(sorted(p.value for p in blocked - set(order))))
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "blocked", blocked)
        object.__setattr__(self, "mode", BlockMode(self.mode))
        object.__setattr__(self, "weak", frozenset(parse_protocol(p) for p in self.weak))

    def stronger_blocked_before(self, protocol: ProtocolId) -> list[ProtocolId]:
        idx = self.order.index(protocol)
        return [p for p in self.order[:idx] if p in self.blocked and p not in self.weak]


@dataclass
class ServiceMaterial:
    """What the working servers need; built once and reused across scenarios."""

    authority: tlsutil.Authority
    certificate: object
    credentials: Credentials = field(default_factory=lambda: Credentials("alice", "fallback-pass"))
    psk: bytes = b"12345678"
    server_name: str = "vpn.example.com"

    @property
    def ca_pem(self) -> bytes:
        return self.authority.cert_pem


@functools.lru_cache(maxsize=1)
def default_material() -> ServiceMaterial:
    ca = tlsutil.make_authority("vpnprobe fallback root")
    return ServiceMaterial(ca, tlsutil.issue(ca, "vpn.example.com", TrustRole.ValidCorrectIdentity))


# ---------------------------------------------------------------- listeners


class _Slot:
    protocol: ProtocolId
    ref: Optional[str] = None

    def endpoint(self, server_name: str, ca_pem: bytes):
        from .simclients import Endpoint
        h, p = self.address
        return Endpoint(h, p, server_name=server_name, ca_pem=ca_pem)

    def contacted(self) -> bool:
        return False

    def close(self) -> None:
        pass


def _wake(sock) -> None:
    # shutdown wakes a thread blocked in accept()/select() on Linux
    if sock is None:
        return
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass


class _BlockedTcp(_Slot):
    def __init__(self, protocol, host, port, mode: BlockMode, rec):
        self.protocol, self.mode, self.rec = protocol, mode, rec
        self.sock = listen_tcp(host, port)
        self.address = self.sock.getsockname()[:2]
        self.held: list = []
        self.hits = 0
        self._stop = threading.Event()
        self.ref = rec(Direction.LocalObservation, "probe",
                       f"{protocol.value} blocked ({mode.value}) on tcp {self.address[0]}:{self.address[1]}")
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        self.sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                conn, addr = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self.hits += 1
            if self.mode is BlockMode.Refuse:
                conn.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
                close_quietly(conn)
                self.rec(Direction.ProbeToClient, "tcp", f"{self.protocol.value}: connection from "
                                                         f"{addr[0]}:{addr[1]} reset")
            else:
                self.held.append(conn)
                self.rec(Direction.LocalObservation, "tcp", f"{self.protocol.value}: connection from "
                                                            f"{addr[0]}:{addr[1]} held silently")

    def contacted(self) -> bool:
        return self.hits > 0

    def close(self) -> None:
        self._stop.set()
        _wake(self.sock)
        self._thread.join(1)
        close_quietly(self.sock, *self.held)


class _BlockedUdp(_Slot):
    def __init__(self, protocol, host, port, mode: BlockMode, rec):
        self.protocol, self.mode, self.rec = protocol, mode, rec
        self.sock = bind_udp(host, port)
        self.address = self.sock.getsockname()[:2]
        self.hits = 0
        self._stop = threading.Event()
        self._thread = None
        if mode is BlockMode.Refuse:
            # a closed port: the kernel answers with ICMP port unreachable
            close_quietly(self.sock)
            self.sock = None
        else:
            self._thread = threading.Thread(target=self._loop, daemon=True)
            self._thread.start()
        self.ref = rec(Direction.LocalObservation, "probe",
                       f"{protocol.value} blocked ({mode.value}) on udp {self.address[0]}:{self.address[1]}")

    def _loop(self) -> None:
        self.sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            if not data and self._stop.is_set():
                return
            self.hits += 1
            if self.hits == 1:
                self.rec(Direction.LocalObservation, "udp", f"{self.protocol.value}: datagrams from "
                                                            f"{addr[0]}:{addr[1]} dropped")

    def contacted(self) -> bool:
        return self.hits > 0

    def close(self) -> None:
        self._stop.set()
        if self.sock is not None:
            _wake(self.sock)
            if self._thread:
                self._thread.join(1)
            close_quietly(self.sock)


class _OpenVpnService(_Slot):
    """Answers a plain connect with a banner; no OpenVPN protocol is spoken."""

    def __init__(self, host, port, rec):
        from .simclients import OPENVPN_BANNER
        self.protocol, self.rec = P.OPENVPN, rec
        self.banner = OPENVPN_BANNER
        self.sock = listen_tcp(host, port)
        self.address = self.sock.getsockname()[:2]
        self.hits = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        self.sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                conn, addr = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self.hits += 1
            try:
                conn.sendall(self.banner)
            except OSError:
                pass
            close_quietly(conn)
            self.rec(Direction.ClientToProbe, "tcp", f"OPENVPN: connection from {addr[0]}:{addr[1]} served")

    def contacted(self) -> bool:
        return self.hits > 0

    def close(self) -> None:
        self._stop.set()
        _wake(self.sock)
        self._thread.join(1)
        close_quietly(self.sock)


class _PptpService(_Slot):
    def __init__(self, host, port, material: ServiceMaterial, rng, phase_timeout):
        from .pptp import ReferencePptpServer
        self.protocol = P.PPTP
        self.server = ReferencePptpServer(material.credentials, host, port, rng=rng,
                                          phase_timeout=phase_timeout).start()
        self.address = self.server.address[:2]

    def endpoint(self, server_name, ca_pem):
        ep = super().endpoint(server_name, ca_pem)
        ep.gre = self.server.gre_address[:2]
        return ep

    def contacted(self) -> bool:
        return bool(self.server.transcripts)

    def close(self) -> None:
        self.server.close()


class _ProbeService(_Slot):
    """Runs one of the probe servers configured so that a careful client
    succeeds; only used as a working server here."""

    def __init__(self, protocol, probe, sock_attr: str):
        self.protocol, self.probe = protocol, probe
        probe.bind()
        self._sock = getattr(probe, sock_attr)
        self.address = self._sock.getsockname()[:2]
        self.job = Background(probe.serve, name=f"fallback-{protocol.value}").start()

    def contacted(self) -> bool:
        try:
            _, tr = self.job.result(0.05)
        except TimeoutError:
            return True  # still busy with a client
        except Exception:
            return False
        return len(tr) > 0

    def close(self) -> None:
        _wake(self._sock)


def _service(protocol, host, port, material: ServiceMaterial, rng: Randomness, rec, timeout, phase_timeout):
    from . import ipsec, ppp, softether, sstp
    creds = material.credentials
    kw = dict(host=host, port=port, connect_timeout=timeout, phase_timeout=phase_timeout, rng=rng.fork())
    if protocol is P.PPTP:
        return _PptpService(host, port, material, rng.fork(), phase_timeout)
    if protocol is P.OPENVPN:
        return _OpenVpnService(host, port, rec)
    if protocol is P.SSTP:
        return _ProbeService(protocol, sstp.SstpProbe(creds, material.certificate, capture_window=0.5, **kw),
                             "_listener")
    if protocol is P.SOFTETHER:
        return _ProbeService(protocol, softether.SoftEtherTlsProbe(material.certificate, **kw), "_listener")
    if protocol is P.IKEV2:
        offer = ipsec.ServerIdentityOffer(material.certificate)
        return _ProbeService(protocol, ipsec.Ikev2Probe(offer, creds, capture_window=0.5, **kw), "sock")
    mode = ipsec.Ikev1Mode.L2tp if protocol is P.L2TP_IPSEC else ipsec.Ikev1Mode.CiscoXauth
    cands = ipsec.PskCandidateList([material.psk])
    return _ProbeService(protocol, ipsec.Ikev1PskProbe(cands, mode, credentials=creds,
                                                       inner_auth=ppp.AuthMethod.MSCHAPv2,
                                                       capture_window=0.5, **kw), "sock")


# ---------------------------------------------------------------- scenario


def default_client_runner(material: ServiceMaterial, order, timeout: float = 2.0,
                          rng: Optional[Randomness] = None) -> Callable:
    """The auto-fallback simclient with careful per-protocol settings, so
    that only the protocol choice can make it weak."""
    from .simclients import ClientPolicy, run_auto_fallback
    policy = ClientPolicy(require_encryption=True, server_identity=material.server_name, psk=material.psk,
                          fallback_order=tuple(order))

    def run(endpoints):
        return run_auto_fallback(policy, endpoints, material.credentials, b"fallback marker",
                                 rng=rng, timeout=timeout, linger=0.05)
    return run


def run_scenario(scenario: FallbackScenario, client_runner: Optional[Callable] = None, *,
                 host: str = "127.0.0.1", ports: Optional[Mapping] = None,
                 material: Optional[ServiceMaterial] = None, rng: Optional[Randomness] = None,
                 phase_timeout: float = 2.0, target: str = "fallback-client") -> tuple[Finding, Transcript]:
    """``client_runner(endpoints)`` is called once with a protocol → Endpoint
    map and must return a ClientOutcome."""
    from .simclients import Established, GaveUp
    material = material or default_material()
    rng = rng or Randomness()
    ports = ports or {}
    client_runner = client_runner or default_client_runner(material, scenario.order, phase_timeout, rng.fork())
    tr = Transcript(prefix="fallback")
    rec = tr.record  # Transcript.record is thread-safe
    rec(Direction.LocalObservation, "probe",
        "order " + ",".join(p.value for p in scenario.order) + "; blocked "
        + (",".join(p.value for p in scenario.order if p in scenario.blocked) or "none")
        + f"; mode {scenario.mode.value}")
    slots: dict[ProtocolId, _Slot] = {}
    try:
        for proto in scenario.order:
            port = ports.get(proto, 0)
            if proto in scenario.blocked:
                cls = _BlockedUdp if proto in UDP_PROTOCOLS else _BlockedTcp
                slots[proto] = cls(proto, host, port, scenario.mode, rec)
            else:
                slots[proto] = _service(proto, host, port, material, rng, rec, scenario.timeout, phase_timeout)
        endpoints = {p: s.endpoint(material.server_name, material.ca_pem) for p, s in slots.items()}
        job = Background(client_runner, endpoints, name="fallback-client").start()
        try:
            outcome = job.result(scenario.timeout)
        except TimeoutError:
            return _finding(Verdict.inconclusive(
                f"client neither connected nor gave up within {scenario.timeout}s"), target), tr
        except Exception as exc:
            return _finding(Verdict.inconclusive(f"client failed: {type(exc).__name__}: {exc}"), target), tr
    finally:
        for slot in slots.values():
            slot.close()

    for proto, slot in slots.items():
        if proto not in scenario.blocked and slot.contacted():
            slot.ref = rec(Direction.ClientToProbe, "probe", f"{proto.value}: client reached the working server")

    if isinstance(outcome, Established):
        proto = outcome.protocol
        ref = rec(Direction.LocalObservation, "probe", f"client established {proto.value} "
                                                       f"(attempted {', '.join(outcome.detail.get('attempted', []))})")
        stronger = scenario.stronger_blocked_before(proto) if proto in scenario.order else []
        if proto in scenario.weak and stronger:
            ev = [slots[p].ref for p in stronger] + [ref]
            return _finding(Verdict.vulnerable(ev, f"blocking {', '.join(p.value for p in stronger)} pushed the "
                                                   f"client down to {proto.value}"), target), tr
        if proto in scenario.weak:
            note = f"client chose {proto.value} without any stronger option being blocked"
        else:
            note = f"client connected with {proto.value}"
        return _finding(Verdict.secure(note, [ref]), target), tr
    if isinstance(outcome, GaveUp):
        ref = rec(Direction.LocalObservation, "probe", f"client gave up after {len(outcome.attempts)} protocol(s)")
        return _finding(Verdict.secure("client gave up instead of falling through to a weak protocol", [ref]),
                        target), tr
    ref = rec(Direction.LocalObservation, "probe", f"client stopped: {outcome}")
    return _finding(Verdict.inconclusive(f"client ended without a result: {outcome}", [ref]), target), tr


def _finding(verdict: Verdict, target: str) -> Finding:
    return Finding(VulnClass.WeakFallback, verdict, target)
