"""PPTP fake server, honest reference server and MitM relay.

The control connection runs over TCP; PPP rides in PPTP's enhanced GRE.
With ``transport="udp-sim"`` each GRE packet (header included) is carried
as one UDP datagram so unprivileged loopback runs work; ``raw-gre`` uses
IP protocol 47 and needs CAP_NET_RAW.
"""

from __future__ import annotations

import enum
import logging
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from . import ppp
from .core import (Credentials, Direction, Finding, ProbeError, Randomness, Transcript, Verdict,
                   VulnClass)
from .net import accept_with_timeout, bind_udp, close_quietly, listen_tcp, ready_line

log = logging.getLogger(__name__)

PPTP_PORT = 1723
MAGIC_COOKIE = 0x1A2B3C4D
CONTROL_MESSAGE = 1

SCCRQ, SCCRP, STOP_CCRQ, STOP_CCRP = 1, 2, 3, 4
ECHO_REQUEST, ECHO_REPLY = 5, 6
OCRQ, OCRP, ICRQ, ICRP, ICCN = 7, 8, 9, 10, 11
CALL_CLEAR_REQUEST, CALL_DISCONNECT_NOTIFY = 12, 13
WAN_ERROR_NOTIFY, SET_LINK_INFO = 14, 15

MESSAGE_NAMES = {
    1: "Start-Control-Connection-Request", 2: "Start-Control-Connection-Reply",
    3: "Stop-Control-Connection-Request", 4: "Stop-Control-Connection-Reply",
    5: "Echo-Request", 6: "Echo-Reply", 7: "Outgoing-Call-Request", 8: "Outgoing-Call-Reply",
    9: "Incoming-Call-Request", 10: "Incoming-Call-Reply", 11: "Incoming-Call-Connected",
    12: "Call-Clear-Request", 13: "Call-Disconnect-Notify", 14: "WAN-Error-Notify",
    15: "Set-Link-Info",
}

RESULT_OK = 1
RESULT_GENERAL_ERROR = 2

GRE_PROTO_PPP = 0x880B
IPPROTO_GRE = 47


class PptpError(ValueError):
    pass


# ---------------------------------------------------------------- control codec


def _pad(text: bytes, n: int) -> bytes:
    return text[:n].ljust(n, b"\x00")


@dataclass
class ControlMessage:
    msg_type: int
    body: bytes = b""

    def encode(self) -> bytes:
        length = 12 + len(self.body)
        return struct.pack("!HHIHH", length, CONTROL_MESSAGE, MAGIC_COOKIE, self.msg_type, 0) + self.body

    @property
    def name(self) -> str:
        return MESSAGE_NAMES.get(self.msg_type, f"type-{self.msg_type}")

    def u16(self, offset: int) -> int:
        return struct.unpack("!H", self.body[offset:offset + 2])[0]


def decode_control(buf: bytes) -> tuple[Optional[ControlMessage], bytes]:
    """Pop one message from a TCP byte buffer; (None, buf) if incomplete."""
    if len(buf) < 2:
        return None, buf
    length = struct.unpack("!H", buf[:2])[0]
    if length < 12:
        raise PptpError(f"control length {length} too small")
    if len(buf) < length:
        return None, buf
    _, mtype, cookie, ctype, _ = struct.unpack("!HHIHH", buf[:12])
    if cookie != MAGIC_COOKIE:
        raise PptpError(f"bad magic cookie 0x{cookie:08x}")
    if mtype != CONTROL_MESSAGE:
        raise PptpError(f"unsupported PPTP message type {mtype}")
    return ControlMessage(ctype, buf[12:length]), buf[length:]


def sccrq(hostname: bytes = b"client", vendor: bytes = b"vpnprobe") -> ControlMessage:
    body = struct.pack("!HHIIHH", 0x0100, 0, 0x3, 0x3, 0, 1) + _pad(hostname, 64) + _pad(vendor, 64)
    return ControlMessage(SCCRQ, body)


def sccrp(result: int = RESULT_OK, hostname: bytes = b"vpnprobe") -> ControlMessage:
    body = struct.pack("!HBBIIHH", 0x0100, result, 0, 0x3, 0x3, 1, 1) + _pad(hostname, 64) + _pad(b"vpnprobe", 64)
    return ControlMessage(SCCRP, body)


def ocrq(call_id: int, serial: int = 1) -> ControlMessage:
    body = struct.pack("!HHIIIIHHHH", call_id, serial, 300, 100_000_000, 3, 3, 64, 0, 0, 0) + b"\x00" * 128
    return ControlMessage(OCRQ, body)


def ocrp(call_id: int, peer_call_id: int, result: int = RESULT_OK) -> ControlMessage:
    body = struct.pack("!HHBBHIHHI", call_id, peer_call_id, result, 0, 0, 100_000_000, 64, 0, 0)
    return ControlMessage(OCRP, body)


def echo_request(ident: int) -> ControlMessage:
    return ControlMessage(ECHO_REQUEST, struct.pack("!I", ident))


def echo_reply(ident: int) -> ControlMessage:
    return ControlMessage(ECHO_REPLY, struct.pack("!IBBH", ident, RESULT_OK, 0, 0))


def call_clear_request(call_id: int) -> ControlMessage:
    return ControlMessage(CALL_CLEAR_REQUEST, struct.pack("!HH", call_id, 0))


def call_disconnect_notify(call_id: int, result: int = 3) -> ControlMessage:
    return ControlMessage(CALL_DISCONNECT_NOTIFY, struct.pack("!HBBHH", call_id, result, 0, 0, 0) + b"\x00" * 128)


def stop_ccrq() -> ControlMessage:
    return ControlMessage(STOP_CCRQ, struct.pack("!BBH", 1, 0, 0))


def stop_ccrp() -> ControlMessage:
    return ControlMessage(STOP_CCRP, struct.pack("!BBH", RESULT_OK, 0, 0))


def icrp(peer_call_id: int, result: int = RESULT_GENERAL_ERROR) -> ControlMessage:
    return ControlMessage(ICRP, struct.pack("!HHBBHHH", 0, peer_call_id, result, 0, 64, 0, 0))


# ---------------------------------------------------------------- GRE


@dataclass
class GrePacket:
    call_id: int
    seq: Optional[int] = None
    ack: Optional[int] = None
    payload: bytes = b""

    def encode(self) -> bytes:
        flags = 0x2000 | 0x0001  # K bit, version 1
        if self.seq is not None:
            flags |= 0x1000
        if self.ack is not None:
            flags |= 0x0080
        out = struct.pack("!HHHH", flags, GRE_PROTO_PPP, len(self.payload), self.call_id)
        if self.seq is not None:
            out += struct.pack("!I", self.seq)
        if self.ack is not None:
            out += struct.pack("!I", self.ack)
        return out + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "GrePacket":
        if len(data) < 8:
            raise PptpError("GRE packet truncated")
        flags, proto, plen, call_id = struct.unpack("!HHHH", data[:8])
        if proto != GRE_PROTO_PPP or flags & 0x0007 != 1 or not flags & 0x2000:
            raise PptpError(f"not an enhanced GRE/PPP packet (flags 0x{flags:04x} proto 0x{proto:04x})")
        off = 8
        seq = ack = None
        if flags & 0x1000:
            seq = struct.unpack("!I", data[off:off + 4])[0]
            off += 4
        if flags & 0x0080:
            ack = struct.unpack("!I", data[off:off + 4])[0]
            off += 4
        payload = data[off:off + plen]
        if len(payload) != plen:
            raise PptpError("GRE payload shorter than its length field")
        return cls(call_id, seq, ack, payload)


class GreTunnelState:
    """Sequence/ack bookkeeping for one direction pair of a call."""

    def __init__(self, first_seq: int = 0):
        self.send_seq = first_seq
        self.peer_last_seq: Optional[int] = None
        self.ack_number: Optional[int] = None

    def next_seq(self) -> int:
        s = self.send_seq
        self.send_seq = (self.send_seq + 1) & 0xFFFFFFFF
        return s

    def observe(self, seq: Optional[int]) -> None:
        if seq is None:
            return
        if self.peer_last_seq is None or ((seq - self.peer_last_seq) & 0xFFFFFFFF) < 0x80000000:
            self.peer_last_seq = seq

    def take_ack(self) -> Optional[int]:
        """Ack to piggyback, or None when everything seen is already acked."""
        if self.peer_last_seq is None or self.peer_last_seq == self.ack_number:
            return None
        self.ack_number = self.peer_last_seq
        return self.ack_number


class UdpGreTransport:
    """GRE packets carried one-per-datagram over UDP."""

    kind = "udp-sim"

    def __init__(self, host: str = "127.0.0.1", port: int = 0, peer: Optional[tuple] = None):
        self.sock = bind_udp(host, port)
        self.peer = peer

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def fileno(self) -> int:
        return self.sock.fileno()

    def send(self, data: bytes) -> bool:
        if self.peer is None:
            return False
        self.sock.sendto(data, self.peer)
        return True

    def recv(self) -> Optional[bytes]:
        data, addr = self.sock.recvfrom(65535)
        if self.peer is None:
            self.peer = addr
        elif addr != self.peer:
            return None
        return data

    def close(self) -> None:
        close_quietly(self.sock)


class RawGreTransport:
    """GRE over IP protocol 47; packets are filtered by receiving call ID."""

    kind = "raw-gre"

    def __init__(self, host: str = "0.0.0.0", port: int = 0, peer: Optional[tuple] = None):
        try:
            self.sock = socket.socket(socket.AF_INET, socket.SOCK_RAW, IPPROTO_GRE)
        except PermissionError as exc:
            raise ProbeError("raw GRE needs CAP_NET_RAW; use --transport udp-sim") from exc
        self.sock.bind((host, 0))
        self.peer = (peer[0], 0) if peer else None
        self.local_call_id: Optional[int] = None

    @property
    def address(self) -> tuple[str, int]:
        return (self.sock.getsockname()[0], 0)

    def fileno(self) -> int:
        return self.sock.fileno()

    def send(self, data: bytes) -> bool:
        if self.peer is None:
            return False
        self.sock.sendto(data, self.peer)
        return True

    def recv(self) -> Optional[bytes]:
        data, addr = self.sock.recvfrom(65535)
        ihl = (data[0] & 0x0F) * 4
        gre = data[ihl:]
        if self.local_call_id is not None and len(gre) >= 8:
            if struct.unpack("!H", gre[6:8])[0] != self.local_call_id:
                return None
        if self.peer is not None and addr[0] != self.peer[0]:
            return None
        return gre

    def close(self) -> None:
        close_quietly(self.sock)


def make_gre_transport(kind: str, host: str, port: int = 0, peer: Optional[tuple] = None):
    if kind == "udp-sim":
        return UdpGreTransport(host, port, peer)
    if kind == "raw-gre":
        return RawGreTransport(host, port, peer)
    raise ValueError(f"unknown GRE transport {kind!r}; use raw-gre or udp-sim")


# ---------------------------------------------------------------- server session


class ControlState(enum.Enum):
    Idle = "Idle"
    ControlEstablished = "ControlEstablished"
    CallOpen = "CallOpen"


@dataclass
class PptpControlState:
    state: ControlState = ControlState.Idle
    local_call_id: int = 0
    peer_call_id: Optional[int] = None
    peer_hostname: str = ""
    peer_vendor: str = ""


@dataclass
class SessionResult:
    ppp: Optional[ppp.PppServerSession]
    transcript: Transcript
    control: PptpControlState
    ended_by: str
    switchover_ref: Optional[str] = None
    errors: list[str] = field(default_factory=list)


class _PptpEndpoint:
    """Terminates one PPTP call: control channel plus GRE-carried PPP."""

    def __init__(self, control: socket.socket, gre, ppp_config: ppp.PppServerConfig,
                 transcript: Transcript, rng: Randomness, capture_window: float,
                 session_timeout: float):
        self.control = control
        self.gre = gre
        self.transcript = transcript
        self.rng = rng
        self.cstate = PptpControlState(local_call_id=rng.randint(1, 0xFFFE))
        if isinstance(gre, RawGreTransport):
            gre.local_call_id = self.cstate.local_call_id
            gre.peer = (control.getpeername()[0], 0)
        self.tunnel = GreTunnelState()
        self.ppp = ppp.PppServerSession(ppp_config, transcript, rng)
        self.capture_window = capture_window
        self.session_deadline = time.monotonic() + session_timeout
        self._buf = b""
        self._pending: list[bytes] = []
        self._capture_until: Optional[float] = None
        self.ended_by = ""
        self.errors: list[str] = []

    # -- output

    def send_control(self, msg: ControlMessage) -> None:
        data = msg.encode()
        self.transcript.record(Direction.ProbeToClient, "pptp", msg.name, raw=data)
        self.control.sendall(data)

    def send_ppp(self, frames: list[bytes]) -> None:
        for f in frames:
            self._send_gre(f)

    def _send_gre(self, payload: Optional[bytes]) -> None:
        if self.cstate.peer_call_id is None:
            return
        pkt = GrePacket(self.cstate.peer_call_id,
                        seq=self.tunnel.next_seq() if payload is not None else None,
                        ack=self.tunnel.take_ack(), payload=payload or b"")
        if payload is None and pkt.ack is None:
            return
        data = pkt.encode()
        if not self.gre.send(data):
            self._pending.append(data)

    # -- input

    def on_control(self) -> bool:
        chunk = self.control.recv(65535)
        if not chunk:
            self.transcript.record(Direction.ClientToProbe, "tcp", "control connection closed by client")
            self.ended_by = "control-closed"
            return False
        self._buf += chunk
        while True:
            msg, self._buf = decode_control(self._buf)
            if msg is None:
                return True
            self.transcript.record(Direction.ClientToProbe, "pptp", msg.name, raw=msg.encode())
            if not self.handle_control(msg):
                return False

    def handle_control(self, msg: ControlMessage) -> bool:
        cs = self.cstate
        if msg.msg_type == SCCRQ:
            cs.peer_hostname = msg.body[16:80].rstrip(b"\x00").decode("latin-1")
            cs.peer_vendor = msg.body[80:144].rstrip(b"\x00").decode("latin-1")
            self.send_control(sccrp())
            cs.state = ControlState.ControlEstablished
        elif msg.msg_type == OCRQ:
            if cs.state is not ControlState.ControlEstablished:
                self.send_control(ocrp(cs.local_call_id, msg.u16(0), RESULT_GENERAL_ERROR))
                return True
            cs.peer_call_id = msg.u16(0)
            self.send_control(ocrp(cs.local_call_id, cs.peer_call_id))
            cs.state = ControlState.CallOpen
            self.send_ppp(self.ppp.start())
        elif msg.msg_type == ECHO_REQUEST:
            self.send_control(echo_reply(struct.unpack("!I", msg.body[:4])[0]))
        elif msg.msg_type == CALL_CLEAR_REQUEST:
            self.send_control(call_disconnect_notify(cs.local_call_id))
            self.ended_by = "call-cleared"
            return False
        elif msg.msg_type == STOP_CCRQ:
            self.send_control(stop_ccrp())
            self.ended_by = "control-stopped"
            return False
        elif msg.msg_type == ICRQ:
            self.send_control(icrp(msg.u16(0)))
        elif msg.msg_type in (SET_LINK_INFO, WAN_ERROR_NOTIFY, ECHO_REPLY, CALL_DISCONNECT_NOTIFY):
            pass
        else:
            self.transcript.record(Direction.LocalObservation, "pptp", f"unsupported control message {msg.name}")
        return True

    def on_gre(self) -> bool:
        data = self.gre.recv()
        if data is None:
            return True
        if self._pending:
            for p in self._pending:
                self.gre.send(p)
            self._pending.clear()
        try:
            pkt = GrePacket.decode(data)
        except PptpError as exc:
            self.transcript.record(Direction.ClientToProbe, "gre", f"malformed GRE: {exc}", raw=data)
            self.errors.append(str(exc))
            return True
        self.tunnel.observe(pkt.seq)
        if pkt.payload:
            self.send_ppp(self.ppp.receive(pkt.payload))
            self._send_gre(None)  # immediate ack when nothing was piggybacked
        if self.ppp.plaintext_data_seen and self._capture_until is None:
            self._capture_until = time.monotonic() + self.capture_window
        return True

    def run(self) -> None:
        sel = selectors.DefaultSelector()
        sel.register(self.control, selectors.EVENT_READ, self.on_control)
        sel.register(self.gre, selectors.EVENT_READ, self.on_gre)
        try:
            while True:
                for key, _ in sel.select(0.05):
                    try:
                        alive = key.data()
                    except (ConnectionError, OSError) as exc:
                        self.ended_by = f"connection error: {exc}"
                        alive = False
                    except PptpError as exc:
                        self.transcript.record(Direction.LocalObservation, "pptp", f"protocol error: {exc}")
                        self.errors.append(str(exc))
                        self.ended_by = "protocol-error"
                        alive = False
                    if not alive:
                        return
                now = time.monotonic()
                self.ppp.check_timeout(now)
                if self.ppp.done and self.ppp.outcome is ppp.PppOutcome.Timeout:
                    self.ended_by = "ppp-timeout"
                    return
                if self._capture_until is not None and now >= self._capture_until:
                    self.ended_by = "capture-window-elapsed"
                    return
                if now >= self.session_deadline:
                    self.ended_by = "session-timeout"
                    return
        finally:
            sel.close()


def pptp_verdict(session: ppp.PppServerSession, ended_by: str) -> Verdict:
    ev = session.evidence
    if session.plaintext_data_seen:
        data_ref = next(f.ref for f in session.data_frames if not f.encrypted)
        refs = [r for r in (ev.get("ccp_reject"), ev.get("ipcp_open"), data_ref) if r]
        return Verdict.vulnerable(refs, "client accepted an unencrypted PPP link and sent IP data in plaintext")
    if session.outcome is ppp.PppOutcome.ClientRefusedPlaintext or (
            session.ccp_rejected and session.phase is ppp.PppPhase.Negotiation and ended_by in (
                "control-closed", "call-cleared", "control-stopped")):
        refs = [r for r in (ev.get("ccp_reject"), ev.get("end")) if r]
        return Verdict.secure("client dropped the link when MPPE was refused", refs)
    if session.negotiated_mppe is not None:
        return Verdict.secure(f"link negotiated MPPE-{session.negotiated_mppe}", [ev["mppe"]])
    reason = session.outcome.value if session.done else ended_by or "no verdict-bearing behavior"
    return Verdict.inconclusive(f"{reason} in phase {session.phase.name}",
                                [r for r in (ev.get("end"),) if r])


class PptpProbe:
    """Fake PPTP server running the encryption-downgrade test.

    ``bind()`` first, so the bound ports can be announced, then ``serve()``.
    """

    name = "pptp"

    def __init__(self, credentials: Credentials, host: str = "127.0.0.1", port: int = PPTP_PORT,
                 transport: str = "udp-sim", gre_port: int = PPTP_PORT,
                 ccp_offer: ppp.CcpOffer = ppp.CcpOffer.NoEncryption,
                 connect_timeout: float = 30.0, phase_timeout: float = 10.0,
                 capture_window: float = 30.0, target: str = "pptp-client",
                 rng: Optional[Randomness] = None, require_mppe: bool = False):
        self.credentials = credentials.require()
        self.host, self.port = host, port
        self.transport, self.gre_port = transport, gre_port
        self.ppp_config = ppp.PppServerConfig(ppp.AuthMethod.MSCHAPv2, credentials, ccp_offer,
                                              phase_timeout=phase_timeout, require_mppe=require_mppe)
        self.connect_timeout = connect_timeout
        self.capture_window = capture_window
        self.target = target
        self.rng = rng or Randomness()
        self._listener = None
        self._gre = None

    def bind(self) -> "PptpProbe":
        self._listener = listen_tcp(self.host, self.port)
        try:
            self._gre = make_gre_transport(self.transport, self.host, self.gre_port)
        except Exception:
            close_quietly(self._listener)
            raise
        return self

    @property
    def ports(self) -> dict[str, str]:
        h, p = self._listener.getsockname()
        out = {"tcp": f"{h}:{p}", "transport": self.transport}
        if self.transport == "udp-sim":
            gh, gp = self._gre.address
            out["gre"] = f"{gh}:{gp}"
        return out

    def ready_line(self) -> str:
        return ready_line(self.name, self.ports)

    def serve(self) -> tuple[Finding, Transcript]:
        if self._listener is None:
            self.bind()
        transcript = Transcript(prefix="pptp")
        try:
            transcript.record(Direction.LocalObservation, "probe", "listening: " + self.ready_line())
            accepted = accept_with_timeout(self._listener, self.connect_timeout)
            if accepted is None:
                v = Verdict.inconclusive(f"no client connected within {self.connect_timeout}s")
                return Finding(VulnClass.PptpOptionalEncryption, v, self.target), transcript
            conn, addr = accepted
            transcript.record(Direction.ClientToProbe, "tcp", f"control connection from {addr[0]}:{addr[1]}")
            ep = _PptpEndpoint(conn, self._gre, self.ppp_config, transcript, self.rng,
                               self.capture_window, self.connect_timeout + 6 * self.ppp_config.phase_timeout)
            try:
                ep.run()
            finally:
                close_quietly(conn)
            transcript.record(Direction.LocalObservation, "probe", f"session ended: {ep.ended_by}")
            verdict = pptp_verdict(ep.ppp, ep.ended_by)
            self.last_session = ep.ppp
            return Finding(VulnClass.PptpOptionalEncryption, verdict, self.target), transcript
        finally:
            self.close()

    def close(self) -> None:
        close_quietly(self._listener)
        if self._gre is not None:
            self._gre.close()


def serve_pptp(credentials: Credentials, **kwargs) -> tuple[Finding, Transcript]:
    return PptpProbe(credentials, **kwargs).serve()


class ReferencePptpServer:
    """Honest PPTP server: MS-CHAPv2 and mandatory MPPE-128.

    Serves calls on background threads until ``close()``; one GRE transport
    per call, announced through ``gre_port_for_next_call``.
    """

    def __init__(self, credentials: Credentials, host: str = "127.0.0.1", port: int = 0,
                 transport: str = "udp-sim", gre_port: int = 0, rng: Optional[Randomness] = None,
                 phase_timeout: float = 10.0):
        self.credentials = credentials.require()
        self.config = ppp.PppServerConfig(ppp.AuthMethod.MSCHAPv2, credentials, ppp.CcpOffer.Mppe128,
                                          require_mppe=True, phase_timeout=phase_timeout)
        self.rng = rng or Randomness()
        self.listener = listen_tcp(host, port)
        self.gre = make_gre_transport(transport, host, gre_port)
        self.transcripts: list[Transcript] = []
        self.sessions: list[ppp.PppServerSession] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True, name="reference-pptp")

    @property
    def address(self) -> tuple[str, int]:
        return self.listener.getsockname()

    @property
    def gre_address(self) -> tuple[str, int]:
        return self.gre.address

    def start(self) -> "ReferencePptpServer":
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                accepted = accept_with_timeout(self.listener, 0.1)
            except OSError:
                return
            if accepted is None:
                continue
            conn, _ = accepted
            tr = Transcript(prefix="ref-pptp")
            self.gre.peer = None
            ep = _PptpEndpoint(conn, self.gre, self.config, tr, self.rng, capture_window=3600,
                               session_timeout=120)
            self.transcripts.append(tr)
            self.sessions.append(ep.ppp)
            try:
                ep.run()
            except Exception as exc:  # keep serving after a broken session
                log.warning("reference PPTP session failed: %s", exc)
            finally:
                close_quietly(conn)

    def close(self) -> None:
        self._stop.set()
        close_quietly(self.listener)
        self._thread.join(1)
        self.gre.close()


# ---------------------------------------------------------------- MitM relay


class PptpRelay:
    """Relays a client to an honest server until MS-CHAPv2 succeeds, then
    impersonates the server for CCP/IPCP with encryption refused."""

    name = "pptp-relay"

    def __init__(self, upstream: tuple[str, int], upstream_gre: tuple[str, int],
                 host: str = "127.0.0.1", port: int = PPTP_PORT, transport: str = "udp-sim",
                 gre_port: int = PPTP_PORT, connect_timeout: float = 30.0, phase_timeout: float = 10.0,
                 capture_window: float = 30.0, target: str = "pptp-client",
                 rng: Optional[Randomness] = None):
        self.upstream, self.upstream_gre = upstream, upstream_gre
        self.host, self.port, self.transport, self.gre_port = host, port, transport, gre_port
        self.connect_timeout, self.phase_timeout = connect_timeout, phase_timeout
        self.capture_window = capture_window
        self.target = target
        self.rng = rng or Randomness()
        self._listener = None
        self._gre_client = None
        self.forwarded: list[tuple[str, str]] = []  # (received ref, sent ref) before switchover

    def bind(self) -> "PptpRelay":
        self._listener = listen_tcp(self.host, self.port)
        self._gre_client = make_gre_transport(self.transport, self.host, self.gre_port)
        return self

    @property
    def ports(self) -> dict[str, str]:
        h, p = self._listener.getsockname()
        out = {"tcp": f"{h}:{p}", "transport": self.transport}
        if self.transport == "udp-sim":
            out["gre"] = "%s:%d" % self._gre_client.address
        return out

    def ready_line(self) -> str:
        return ready_line(self.name, self.ports)

    def close(self) -> None:
        close_quietly(self._listener)
        if self._gre_client is not None:
            self._gre_client.close()

    def serve(self) -> tuple[Finding, Transcript]:
        if self._listener is None:
            self.bind()
        transcript = Transcript(prefix="pptp-relay")
        upstream_sock = gre_up = client = None
        try:
            try:
                upstream_sock = socket.create_connection(self.upstream, timeout=self.connect_timeout)
            except OSError as exc:
                raise ProbeError(f"upstream PPTP server {self.upstream[0]}:{self.upstream[1]} unreachable: {exc}") from exc
            gre_up = make_gre_transport(self.transport, self.host, 0, peer=self.upstream_gre)
            transcript.record(Direction.ProbeToUpstream, "tcp", "connected to upstream %s:%d" % self.upstream)
            accepted = accept_with_timeout(self._listener, self.connect_timeout)
            if accepted is None:
                v = Verdict.inconclusive(f"no client connected within {self.connect_timeout}s")
                return Finding(VulnClass.PptpOptionalEncryption, v, self.target), transcript
            client, addr = accepted
            transcript.record(Direction.ClientToProbe, "tcp", f"client connected from {addr[0]}:{addr[1]}")
            session, ended_by = self._relay(client, upstream_sock, gre_up, transcript)
            verdict = pptp_verdict(session, ended_by) if session else Verdict.inconclusive(
                f"authentication never completed through the relay ({ended_by})")
            if session is not None and verdict.is_finding and self.switchover_ref:
                verdict = Verdict.vulnerable((self.switchover_ref,) + verdict.evidence, verdict.note)
            self.last_session = session
            return Finding(VulnClass.PptpOptionalEncryption, verdict, self.target), transcript
        finally:
            close_quietly(client, upstream_sock)
            if gre_up is not None:
                gre_up.close()
            self.close()

    def _relay(self, client, upstream, gre_up, tr: Transcript):
        gre_cl = self._gre_client
        if isinstance(gre_cl, RawGreTransport):
            gre_cl.peer = (client.getpeername()[0], 0)
        bufs = {"client": b"", "upstream": b""}
        client_call_id = upstream_call_id = None
        to_client = GreTunnelState()
        session: Optional[ppp.PppServerSession] = None
        self.switchover_ref = None
        pending_client: list[bytes] = []
        capture_until = None
        deadline = time.monotonic() + self.connect_timeout + 6 * self.phase_timeout
        ended_by = ""
        config = ppp.PppServerConfig(ppp.AuthMethod.MSCHAPv2, Credentials("relay", "relay"),
                                     ppp.CcpOffer.NoEncryption, phase_timeout=self.phase_timeout)

        def forward(data: bytes, src_dir: Direction, layer: str, summary: str, dst, dst_dir: Direction):
            rref = tr.record(src_dir, layer, summary, raw=data)
            if hasattr(dst, "sendall"):
                dst.sendall(data)
            elif not dst.send(data):
                pending_client.append(data)
            sref = tr.record(dst_dir, layer, "forwarded " + summary, raw=data)
            self.forwarded.append((rref, sref))

        def send_client_gre(frames: list[bytes], ack_only: bool = False) -> None:
            for f in frames:
                pkt = GrePacket(client_call_id, seq=to_client.next_seq(), ack=to_client.take_ack(), payload=f)
                gre_cl.send(pkt.encode())
            if ack_only:
                ack = to_client.take_ack()
                if ack is not None:
                    gre_cl.send(GrePacket(client_call_id, ack=ack).encode())

        sel = selectors.DefaultSelector()
        sel.register(client, selectors.EVENT_READ, "client")
        sel.register(upstream, selectors.EVENT_READ, "upstream")
        sel.register(gre_cl, selectors.EVENT_READ, "gre-client")
        sel.register(gre_up, selectors.EVENT_READ, "gre-upstream")
        try:
            while True:
                for key, _ in sel.select(0.05):
                    src = key.data
                    if src in ("client", "upstream"):
                        sock = client if src == "client" else upstream
                        chunk = sock.recv(65535)
                        if not chunk:
                            tr.record(Direction.ClientToProbe if src == "client" else Direction.UpstreamToProbe,
                                      "tcp", f"{src} closed control connection")
                            if src == "client":
                                return session, "control-closed"
                            sel.unregister(upstream)
                            continue
                        bufs[src] += chunk
                        while True:
                            msg, bufs[src] = decode_control(bufs[src])
                            if msg is None:
                                break
                            data = msg.encode()
                            if src == "client":
                                if msg.msg_type == OCRQ:
                                    client_call_id = msg.u16(0)
                                    if isinstance(gre_up, RawGreTransport):
                                        gre_up.local_call_id = client_call_id
                                if session is None:
                                    forward(data, Direction.ClientToProbe, "pptp", msg.name, upstream,
                                            Direction.ProbeToUpstream)
                                else:
                                    tr.record(Direction.ClientToProbe, "pptp", msg.name, raw=data)
                                    reply = None
                                    if msg.msg_type == ECHO_REQUEST:
                                        reply = echo_reply(struct.unpack("!I", msg.body[:4])[0])
                                    elif msg.msg_type == CALL_CLEAR_REQUEST:
                                        reply = call_disconnect_notify(upstream_call_id or 0)
                                    elif msg.msg_type == STOP_CCRQ:
                                        reply = stop_ccrp()
                                    if reply is not None:
                                        tr.record(Direction.ProbeToClient, "pptp", reply.name, raw=reply.encode())
                                        client.sendall(reply.encode())
                                    if msg.msg_type in (CALL_CLEAR_REQUEST, STOP_CCRQ):
                                        return session, "call-cleared"
                            else:
                                if msg.msg_type == OCRP:
                                    upstream_call_id = msg.u16(0)
                                    if isinstance(gre_cl, RawGreTransport):
                                        gre_cl.local_call_id = upstream_call_id
                                if session is None:
                                    forward(data, Direction.UpstreamToProbe, "pptp", msg.name, client,
                                            Direction.ProbeToClient)
                                else:
                                    tr.record(Direction.UpstreamToProbe, "pptp", f"dropped after switchover: {msg.name}",
                                              raw=data)
                    elif src == "gre-client":
                        data = gre_cl.recv()
                        if data is None:
                            continue
                        try:
                            pkt = GrePacket.decode(data)
                        except PptpError as exc:
                            tr.record(Direction.ClientToProbe, "gre", f"malformed GRE: {exc}", raw=data)
                            continue
                        to_client.observe(pkt.seq)
                        if session is None:
                            forward(data, Direction.ClientToProbe, "gre", _gre_summary(pkt), gre_up,
                                    Direction.ProbeToUpstream)
                        elif pkt.payload:
                            send_client_gre(session.receive(pkt.payload), ack_only=True)
                            if session.plaintext_data_seen and capture_until is None:
                                capture_until = time.monotonic() + self.capture_window
                    else:
                        data = gre_up.recv()
                        if data is None:
                            continue
                        if session is not None:
                            tr.record(Direction.UpstreamToProbe, "gre", "dropped after switchover", raw=data)
                            continue
                        try:
                            pkt = GrePacket.decode(data)
                        except PptpError as exc:
                            tr.record(Direction.UpstreamToProbe, "gre", f"malformed GRE: {exc}", raw=data)
                            continue
                        if pkt.seq is not None:
                            to_client.send_seq = (pkt.seq + 1) & 0xFFFFFFFF
                        if pkt.ack is not None:
                            to_client.ack_number = pkt.ack
                        forward(data, Direction.UpstreamToProbe, "gre", _gre_summary(pkt), gre_cl,
                                Direction.ProbeToClient)
                        if _is_chap_success(pkt.payload):
                            self.switchover_ref = tr.record(
                                Direction.LocalObservation, "probe",
                                "switchover: authentication finished, impersonating server from here on")
                            session = ppp.PppServerSession(config, tr, self.rng)
                            send_client_gre(session.takeover())
                if pending_client and gre_cl.peer is not None:
                    for d in pending_client:
                        gre_cl.send(d)
                    pending_client.clear()
                now = time.monotonic()
                if session is not None:
                    session.check_timeout(now)
                    if session.done and session.outcome is ppp.PppOutcome.Timeout:
                        return session, "ppp-timeout"
                if capture_until is not None and now >= capture_until:
                    return session, "capture-window-elapsed"
                if now >= deadline:
                    return session, "session-timeout"
        except (ConnectionError, OSError) as exc:
            ended_by = f"connection error: {exc}"
            return session, ended_by
        finally:
            sel.close()


def _gre_summary(pkt: GrePacket) -> str:
    if not pkt.payload:
        return f"GRE ack {pkt.ack}"
    try:
        proto, body = ppp.decode_frame(pkt.payload)
        return f"GRE seq {pkt.seq}: {ppp.describe(proto, body)}"
    except ppp.PppError:
        return f"GRE seq {pkt.seq}: {len(pkt.payload)} bytes"


def _is_chap_success(frame: bytes) -> bool:
    if not frame:
        return False
    try:
        proto, body = ppp.decode_frame(frame)
    except ppp.PppError:
        return False
    return proto == ppp.PROTO_CHAP and len(body) >= 1 and body[0] == ppp.CHAP_SUCCESS


def mitm_relay_pptp(upstream: tuple[str, int], upstream_gre: tuple[str, int], **kwargs) -> tuple[Finding, Transcript]:
    return PptpRelay(upstream, upstream_gre, **kwargs).serve()
