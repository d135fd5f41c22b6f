"""PPP framing and the server-side PPP state machine.

The engine is transport agnostic: feed it PPP frames with
:meth:`PppServerSession.receive` and send whatever frames it returns.  PPTP,
SSTP and L2TP probes own the I/O.
"""

from __future__ import annotations

import dataclasses
import enum
import ipaddress
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

from . import auth
from .core import Credentials, Direction, Randomness, Transcript

log = logging.getLogger(__name__)

PROTO_IP = 0x0021
PROTO_COMP = 0x00FD  # MPPE-encrypted datagram
PROTO_LCP = 0xC021
PROTO_PAP = 0xC023
PROTO_CHAP = 0xC223
PROTO_CCP = 0x80FD
PROTO_IPCP = 0x8021
PROTO_IPV6CP = 0x8057

PROTO_NAMES = {PROTO_IP: "IP", PROTO_COMP: "COMP", PROTO_LCP: "LCP", PROTO_PAP: "PAP",
               PROTO_CHAP: "CHAP", PROTO_CCP: "CCP", PROTO_IPCP: "IPCP", PROTO_IPV6CP: "IPV6CP"}

CONF_REQ, CONF_ACK, CONF_NAK, CONF_REJ = 1, 2, 3, 4
TERM_REQ, TERM_ACK, CODE_REJ, PROTO_REJ = 5, 6, 7, 8
ECHO_REQ, ECHO_REP, DISCARD_REQ = 9, 10, 11

CODE_NAMES = {1: "Configure-Request", 2: "Configure-Ack", 3: "Configure-Nak", 4: "Configure-Reject",
              5: "Terminate-Request", 6: "Terminate-Ack", 7: "Code-Reject", 8: "Protocol-Reject",
              9: "Echo-Request", 10: "Echo-Reply", 11: "Discard-Request"}

LCP_MRU, LCP_AUTH, LCP_MAGIC, LCP_PFC, LCP_ACFC = 1, 3, 5, 7, 8
IPCP_ADDR, IPCP_DNS1, IPCP_DNS2 = 3, 129, 131
CCP_MPPE = 18

MPPE_BIT_STATELESS = 0x01000000
MPPE_BIT_128 = 0x40
MPPE_BIT_56 = 0x80
MPPE_BIT_40 = 0x20
MPPE_STRENGTH_BITS = {128: MPPE_BIT_128, 56: MPPE_BIT_56, 40: MPPE_BIT_40}

CHAP_CHALLENGE, CHAP_RESPONSE, CHAP_SUCCESS, CHAP_FAILURE = 1, 2, 3, 4
CHAP_ALG_MD5 = 0x05
CHAP_ALG_MSCHAPV2 = 0x81


class PppError(ValueError):
    pass


# ---------------------------------------------------------------- codec


def encode_frame(protocol: int, payload: bytes) -> bytes:
    return b"\xff\x03" + struct.pack("!H", protocol) + payload


def decode_frame(frame: bytes) -> tuple[int, bytes]:
    if frame[:2] == b"\xff\x03":
        frame = frame[2:]
    if len(frame) < 2:
        raise PppError("PPP frame too short")
    if frame[0] & 1:  # protocol field compressed to one byte
        return frame[0], frame[1:]
    return struct.unpack("!H", frame[:2])[0], frame[2:]


@dataclass
class ControlPacket:
    code: int
    ident: int
    data: bytes = b""

    def encode(self) -> bytes:
        return struct.pack("!BBH", self.code, self.ident, 4 + len(self.data)) + self.data

    @classmethod
    def decode(cls, payload: bytes) -> "ControlPacket":
        if len(payload) < 4:
            raise PppError("control packet truncated")
        code, ident, length = struct.unpack("!BBH", payload[:4])
        if length < 4 or length > len(payload):
            raise PppError(f"control packet length {length} invalid for {len(payload)} bytes")
        return cls(code, ident, payload[4:length])

    @property
    def name(self) -> str:
        return CODE_NAMES.get(self.code, f"code-{self.code}")


def encode_options(options: list[tuple[int, bytes]]) -> bytes:
    return b"".join(struct.pack("!BB", t, 2 + len(v)) + v for t, v in options)


def decode_options(data: bytes) -> list[tuple[int, bytes]]:
    out = []
    i = 0
    while i < len(data):
        if i + 2 > len(data):
            raise PppError("option header truncated")
        t, ln = data[i], data[i + 1]
        if ln < 2 or i + ln > len(data):
            raise PppError(f"option {t} length {ln} invalid")
        out.append((t, data[i + 2:i + ln]))
        i += ln
    return out


def auth_option(method: "AuthMethod") -> bytes:
    if method is AuthMethod.PAP:
        return struct.pack("!H", PROTO_PAP)
    alg = CHAP_ALG_MSCHAPV2 if method is AuthMethod.MSCHAPv2 else CHAP_ALG_MD5
    return struct.pack("!HB", PROTO_CHAP, alg)


def auth_method_from_option(value: bytes) -> Optional["AuthMethod"]:
    if len(value) >= 2 and struct.unpack("!H", value[:2])[0] == PROTO_PAP:
        return AuthMethod.PAP
    if len(value) == 3 and struct.unpack("!H", value[:2])[0] == PROTO_CHAP:
        return {CHAP_ALG_MD5: AuthMethod.CHAP, CHAP_ALG_MSCHAPV2: AuthMethod.MSCHAPv2}.get(value[2])
    return None


def mppe_option(bits: int) -> bytes:
    return struct.pack("!I", bits)


def ip_option(addr) -> bytes:
    return ipaddress.IPv4Address(addr).packed


def chap_packet(code: int, ident: int, data: bytes) -> bytes:
    return ControlPacket(code, ident, data).encode()


def mschapv2_challenge(ident: int, challenge: bytes, name: bytes) -> bytes:
    return chap_packet(CHAP_CHALLENGE, ident, bytes([16]) + challenge + name)


def mschapv2_response(ident: int, peer_challenge: bytes, nt_resp: bytes, name: bytes) -> bytes:
    value = peer_challenge + b"\x00" * 8 + nt_resp + b"\x00"
    return chap_packet(CHAP_RESPONSE, ident, bytes([49]) + value + name)


def parse_mschapv2_response(data: bytes) -> tuple[bytes, bytes, bytes]:
    """(peer_challenge, nt_response, name) from a CHAP Response body."""
    if len(data) < 50 or data[0] != 49:
        raise PppError("malformed MS-CHAPv2 response")
    value = data[1:50]
    return value[:16], value[24:48], data[50:]


def describe(protocol: int, payload: bytes) -> str:
    name = PROTO_NAMES.get(protocol, f"0x{protocol:04x}")
    if protocol in (PROTO_LCP, PROTO_CCP, PROTO_IPCP, PROTO_IPV6CP, PROTO_PAP, PROTO_CHAP):
        try:
            pkt = ControlPacket.decode(payload)
        except PppError:
            return f"{name} malformed"
        if protocol == PROTO_CHAP:
            return f"CHAP {['?', 'Challenge', 'Response', 'Success', 'Failure'][min(pkt.code, 4)]} id={pkt.ident}"
        if protocol == PROTO_PAP:
            return f"PAP {['?', 'Authenticate-Request', 'Authenticate-Ack', 'Authenticate-Nak'][min(pkt.code, 3)]}"
        return f"{name} {pkt.name} id={pkt.ident}"
    return f"{name} {len(payload)} bytes"


# ---------------------------------------------------------------- engine


class PppPhase(enum.IntEnum):
    LinkEstablish = 0
    Authentication = 1
    Negotiation = 2
    DataExchange = 3


class AuthMethod(str, enum.Enum):
    PAP = "PAP"
    CHAP = "CHAP"
    MSCHAPv2 = "MSCHAPv2"


class CcpOffer(str, enum.Enum):
    NoEncryption = "NoEncryption"
    Mppe40 = "Mppe40"
    Mppe56 = "Mppe56"
    Mppe128 = "Mppe128"

    @property
    def strength(self) -> Optional[int]:
        return {"Mppe40": 40, "Mppe56": 56, "Mppe128": 128}.get(self.value)


class PppOutcome(str, enum.Enum):
    Running = "Running"
    AuthProtocolRefused = "AuthProtocolRefused"
    AuthFailed = "AuthFailed"
    ClientRefusedPlaintext = "ClientRefusedPlaintext"
    ClientRefusedEncryption = "ClientRefusedEncryption"
    ClientTerminated = "ClientTerminated"
    ProtocolError = "ProtocolError"
    Timeout = "Timeout"


@dataclass
class PppServerConfig:
    auth_method: AuthMethod = AuthMethod.MSCHAPv2
    credentials: Optional[Credentials] = None
    ccp_offer: CcpOffer = CcpOffer.NoEncryption
    server_ip: str = "10.9.0.1"
    inner_ip: str = "10.9.0.2"
    dns: str = "10.9.0.1"
    require_mppe: bool = False
    phase_timeout: float = 10.0
    name: bytes = b"vpnprobe"
    adaptive_auth: bool = False  # follow the client's Nak to another method we can verify

    def __post_init__(self):
        self.auth_method = AuthMethod(self.auth_method)
        self.ccp_offer = CcpOffer(self.ccp_offer)
        if self.auth_method is AuthMethod.MSCHAPv2 and self.credentials is None:
            raise ValueError("MS-CHAPv2 needs operator-supplied test credentials")
        if self.require_mppe and self.ccp_offer is CcpOffer.NoEncryption:
            raise ValueError("require_mppe contradicts a NoEncryption offer")


class _Cp:
    """Configure-Request/Ack bookkeeping for one control protocol."""

    def __init__(self):
        self.our_req_id: Optional[int] = None
        self.our_acked = False
        self.their_acked = False
        self.naks_received = 0

    @property
    def opened(self) -> bool:
        return self.our_acked and self.their_acked


@dataclass
class DataFrame:
    protocol: int
    payload: bytes
    encrypted: bool
    ref: str


class PppServerSession:
    """Server half of one PPP link."""

    def __init__(self, config: PppServerConfig, transcript: Optional[Transcript] = None,
                 rng: Optional[Randomness] = None, outer_encrypted: bool = False,
                 clock=time.monotonic):
        self.config = config
        self.transcript = transcript if transcript is not None else Transcript(prefix="ppp")
        self.rng = rng or Randomness()
        self.outer_encrypted = outer_encrypted
        self.clock = clock
        self.phase = PppPhase.LinkEstablish
        self.outcome = PppOutcome.Running
        self.negotiated_mppe: Optional[int] = None
        self.mppe_keys: Optional[auth.MppeKeySet] = None
        self.exchange: Optional[auth.MsChapV2Exchange] = None
        self.captured_credentials: Optional[Credentials] = None
        self.lcp_options: dict[int, bytes] = {}
        self.client_ip: Optional[str] = None
        self.data_frames: list[DataFrame] = []
        self.evidence: dict[str, str] = {}
        self.ccp_rejected = False
        self.ccp_requested = False
        self._lcp, self._ccp, self._ipcp = _Cp(), _Cp(), _Cp()
        self._ident = self.rng.randint(0, 255)
        self._magic = self.rng.bytes(4)
        self._chap_challenge = b""
        self._chap_ident = 0
        self._nt_response: Optional[bytes] = None
        self._cipher_tx = self._cipher_rx = None
        self._deadline = self.clock() + config.phase_timeout
        self.terminated = False

    # -- helpers

    @property
    def done(self) -> bool:
        return self.outcome is not PppOutcome.Running

    def _next_ident(self) -> int:
        self._ident = (self._ident + 1) & 0xFF
        return self._ident

    def _advance(self, phase: PppPhase) -> None:
        if phase < self.phase:
            raise PppError(f"refusing to move from {self.phase.name} back to {phase.name}")
        if phase != self.phase:
            self.transcript.record(Direction.LocalObservation, "ppp",
                                   f"phase {self.phase.name} -> {phase.name}", plaintext=self._plain())
            self.phase = phase
            self._deadline = self.clock() + self.config.phase_timeout
            self.evidence[f"phase:{phase.name}"] = self.transcript.last_ref()

    def _plain(self) -> bool:
        return not self.outer_encrypted

    def _end(self, outcome: PppOutcome, note: str) -> None:
        if self.outcome is PppOutcome.Running:
            self.outcome = outcome
            self.transcript.record(Direction.LocalObservation, "ppp", f"session ended: {outcome.value} ({note})",
                                   plaintext=self._plain())
            self.evidence["end"] = self.transcript.last_ref()

    def _out(self, protocol: int, payload: bytes) -> bytes:
        frame = encode_frame(protocol, payload)
        self.transcript.record(Direction.ProbeToClient, "ppp", describe(protocol, payload),
                               plaintext=self._plain(), raw=frame)
        return frame

    def _terminate(self, reason: bytes) -> bytes:
        self.terminated = True
        return self._out(PROTO_LCP, ControlPacket(TERM_REQ, self._next_ident(), reason).encode())

    def check_timeout(self, now: Optional[float] = None) -> bool:
        """Ends the session with Timeout if the current phase overran."""
        now = self.clock() if now is None else now
        if not self.done and self.phase is not PppPhase.DataExchange and now > self._deadline:
            self._end(PppOutcome.Timeout, f"no progress in {self.phase.name} within {self.config.phase_timeout}s")
            return True
        return False

    # -- driving

    def start(self) -> list[bytes]:
        """Frames the server sends unprompted when the link comes up."""
        return [self._send_lcp_request()]

    def _send_lcp_request(self) -> bytes:
        opts = [(LCP_AUTH, auth_option(self.config.auth_method)), (LCP_MAGIC, self._magic)]
        self._lcp.our_req_id = self._next_ident()
        return self._out(PROTO_LCP, ControlPacket(CONF_REQ, self._lcp.our_req_id, encode_options(opts)).encode())

    def receive(self, frame: bytes) -> list[bytes]:
        if self.done:
            return []
        try:
            protocol, payload = decode_frame(frame)
        except PppError as exc:
            self.transcript.record(Direction.ClientToProbe, "ppp", f"undecodable frame: {exc}", raw=frame)
            self._end(PppOutcome.ProtocolError, str(exc))
            return []
        data_phase = self.phase is PppPhase.DataExchange and protocol in (PROTO_IP, PROTO_COMP)
        if not data_phase:
            self.transcript.record(Direction.ClientToProbe, "ppp", describe(protocol, payload),
                                   plaintext=self._plain(), raw=frame)
        try:
            if protocol == PROTO_LCP:
                return self.lcp_establish(ControlPacket.decode(payload))
            if protocol in (PROTO_PAP, PROTO_CHAP):
                return self.authenticate(protocol, ControlPacket.decode(payload))
            if protocol == PROTO_CCP:
                return self.ccp_negotiate(ControlPacket.decode(payload))
            if protocol == PROTO_IPCP:
                return self.ipcp_open(ControlPacket.decode(payload))
            if protocol in (PROTO_IP, PROTO_COMP):
                return self._data(protocol, payload, frame)
        except PppError as exc:
            self._end(PppOutcome.ProtocolError, str(exc))
            return []
        # unsupported NCPs (IPv6CP, ...) get a Protocol-Reject
        return [self._out(PROTO_LCP, ControlPacket(PROTO_REJ, self._next_ident(),
                                                   struct.pack("!H", protocol) + payload).encode())]

    # -- LCP

    def lcp_establish(self, pkt: ControlPacket) -> list[bytes]:
        out: list[bytes] = []
        if pkt.code == ECHO_REQ:
            return [self._out(PROTO_LCP, ControlPacket(ECHO_REP, pkt.ident, self._magic + pkt.data[4:]).encode())]
        if pkt.code in (ECHO_REP, DISCARD_REQ):
            return []
        if pkt.code == TERM_REQ:
            out.append(self._out(PROTO_LCP, ControlPacket(TERM_ACK, pkt.ident).encode()))
            if self.phase is PppPhase.Negotiation and self.ccp_rejected:
                self._end(PppOutcome.ClientRefusedPlaintext, "client terminated after MPPE was refused")
            elif self.phase is PppPhase.LinkEstablish and self._lcp.naks_received:
                self._end(PppOutcome.AuthProtocolRefused, "client terminated during auth-protocol negotiation")
            else:
                self._end(PppOutcome.ClientTerminated, f"Terminate-Request in {self.phase.name}")
            return out
        if pkt.code == TERM_ACK:
            if self.terminated and self.outcome is PppOutcome.Running:
                self._end(PppOutcome.ClientTerminated, "terminate acknowledged")
            return []
        if pkt.code == PROTO_REJ:
            rejected = struct.unpack("!H", pkt.data[:2])[0] if len(pkt.data) >= 2 else 0
            if rejected == PROTO_CCP:
                return self._ccp_refused("client rejected CCP")
            return []
        if self.phase is not PppPhase.LinkEstablish:
            if pkt.code == CONF_REQ:
                # renegotiation restarts the link; not supported by the probe
                raise PppError("LCP renegotiation after link establishment")
            return []
        if pkt.code == CONF_REQ:
            opts = decode_options(pkt.data)
            rejected = [(t, v) for t, v in opts if t == LCP_AUTH]
            if rejected:
                out.append(self._out(PROTO_LCP, ControlPacket(CONF_REJ, pkt.ident, encode_options(rejected)).encode()))
            else:
                for t, v in opts:
                    self.lcp_options[t] = v
                out.append(self._out(PROTO_LCP, ControlPacket(CONF_ACK, pkt.ident, pkt.data).encode()))
                self._lcp.their_acked = True
        elif pkt.code == CONF_ACK and pkt.ident == self._lcp.our_req_id:
            self._lcp.our_acked = True
        elif pkt.code == CONF_NAK and pkt.ident == self._lcp.our_req_id:
            wanted = [auth_method_from_option(v) for t, v in decode_options(pkt.data) if t == LCP_AUTH]
            self._lcp.naks_received += 1
            if (self.config.adaptive_auth and wanted and wanted[0] is not None
                    and wanted[0] is not self.config.auth_method
                    and (wanted[0] is not AuthMethod.MSCHAPv2 or self.config.credentials is not None)):
                self.transcript.record(Direction.LocalObservation, "ppp",
                                       f"client asked for {wanted[0].value}; switching authentication method",
                                       plaintext=self._plain())
                self.config = dataclasses.replace(self.config, auth_method=wanted[0])
                self._lcp.naks_received = 0
                return [self._send_lcp_request()]
            if wanted and self._lcp.naks_received >= 2:
                self._end(PppOutcome.AuthProtocolRefused,
                          f"client insists on {wanted[0].value if wanted[0] else 'unknown'} authentication")
                return [self._terminate(b"auth protocol refused")]
            # insist on the configured method once
            out.append(self._send_lcp_request())
        elif pkt.code == CONF_REJ and pkt.ident == self._lcp.our_req_id:
            if any(t == LCP_AUTH for t, _ in decode_options(pkt.data)):
                self._end(PppOutcome.AuthProtocolRefused, "client rejected authentication option")
                return [self._terminate(b"auth protocol refused")]
            out.append(self._send_lcp_request())
        if self._lcp.opened:
            self._advance(PppPhase.Authentication)
            out.extend(self._begin_auth())
        return out

    # -- authentication

    def _begin_auth(self) -> list[bytes]:
        if self.config.auth_method is AuthMethod.PAP:
            return []
        self._chap_challenge = self.rng.bytes(16)
        self._chap_ident = self._next_ident()
        if self.config.auth_method is AuthMethod.MSCHAPv2:
            pkt = mschapv2_challenge(self._chap_ident, self._chap_challenge, self.config.name)
        else:
            pkt = chap_packet(CHAP_CHALLENGE, self._chap_ident,
                              bytes([16]) + self._chap_challenge + self.config.name)
        return [self._out(PROTO_CHAP, pkt)]

    def authenticate(self, protocol: int, pkt: ControlPacket) -> list[bytes]:
        if self.phase is not PppPhase.Authentication:
            return []
        creds = self.config.credentials
        if protocol == PROTO_PAP:
            if self.config.auth_method is not AuthMethod.PAP or pkt.code != auth.PAP_AUTH_REQUEST:
                raise PppError("unexpected PAP packet")
            try:
                got = auth.pap_extract(pkt.encode())
            except auth.FrameError as exc:
                raise PppError(str(exc)) from exc
            self.captured_credentials = got
            self.evidence["credentials"] = self.transcript.record(
                Direction.LocalObservation, "ppp",
                f"PAP credentials captured: user={got.username!r} password={got.password!r}",
                plaintext=self._plain())
            ok = creds is None or (creds.username == got.username and creds.password == got.password)
            return self._auth_result(ok, chap=False, ident=pkt.ident)

        if pkt.code != CHAP_RESPONSE or pkt.ident != self._chap_ident:
            return []
        if self.config.auth_method is AuthMethod.MSCHAPv2:
            peer_challenge, nt_resp, name = parse_mschapv2_response(pkt.data)
            username = name.decode("utf-8", "replace")
            self.exchange = auth.MsChapV2Exchange(self._chap_challenge, peer_challenge, username, nt_resp)
            self.evidence["mschapv2"] = self.transcript.record(
                Direction.LocalObservation, "ppp", "MS-CHAPv2 exchange captured: " + self.exchange.evidence(),
                plaintext=self._plain())
            ok = (creds is not None and creds.username == username and
                  auth.check_nt_response(nt_resp, self._chap_challenge, peer_challenge, username, creds.password))
            if ok:
                self._nt_response = nt_resp
                s = auth.authenticator_response(creds.password, nt_resp, peer_challenge,
                                                self._chap_challenge, username)
                self.exchange = auth.MsChapV2Exchange(self._chap_challenge, peer_challenge, username, nt_resp, s)
                msg = f"{s} M=Access granted".encode()
                return self._auth_result(True, chap=True, ident=pkt.ident, message=msg)
            msg = f"E=691 R=0 C={self._chap_challenge.hex().upper()} V=3 M=Access denied".encode()
            return self._auth_result(False, chap=True, ident=pkt.ident, message=msg)

        # CHAP-MD5
        if len(pkt.data) < 17 or pkt.data[0] != 16:
            raise PppError("malformed CHAP response")
        value, name = pkt.data[1:17], pkt.data[17:].decode("utf-8", "replace")
        self.evidence["chap"] = self.transcript.record(
            Direction.LocalObservation, "ppp", f"CHAP-MD5 response from {name!r}: {value.hex()}",
            plaintext=self._plain())
        # without test credentials, accept like PAP does: the response is already captured
        ok = creds is None or (creds.username == name and value == auth.chap_md5_response(
            pkt.ident, creds.password, self._chap_challenge))
        return self._auth_result(ok, chap=True, ident=pkt.ident)

    def _auth_result(self, ok: bool, *, chap: bool, ident: int, message: bytes = b"") -> list[bytes]:
        if chap:
            frame = self._out(PROTO_CHAP, chap_packet(CHAP_SUCCESS if ok else CHAP_FAILURE, ident, message))
        else:
            msg = b"welcome" if ok else b"denied"
            frame = self._out(PROTO_PAP, chap_packet(auth.PAP_AUTH_ACK if ok else auth.PAP_AUTH_NAK, ident,
                                                     bytes([len(msg)]) + msg))
        if not ok:
            self._end(PppOutcome.AuthFailed, "authentication response did not verify")
            return [frame]
        self.evidence["auth_success"] = self.transcript.last_ref()
        self._advance(PppPhase.Negotiation)
        return [frame] + self._begin_negotiation()

    def takeover(self, exchange: Optional[auth.MsChapV2Exchange] = None,
                 lcp_options: Optional[dict] = None) -> list[bytes]:
        """Assume an already-authenticated link (MitM switchover) and start NCPs."""
        self._lcp.our_acked = self._lcp.their_acked = True
        self.lcp_options.update(lcp_options or {})
        self.exchange = exchange
        self.transcript.record(Direction.LocalObservation, "ppp", "probe takes over an authenticated link",
                               plaintext=self._plain())
        self._advance(PppPhase.Authentication)
        self._advance(PppPhase.Negotiation)
        return self._begin_negotiation()

    # -- CCP / IPCP

    def _begin_negotiation(self) -> list[bytes]:
        out = []
        strength = self.config.ccp_offer.strength
        if strength is not None:
            if self._nt_response is None:
                if self.config.require_mppe:
                    self._end(PppOutcome.ProtocolError, "MPPE requires MS-CHAPv2 key material")
                    return [self._terminate(b"no key material for MPPE")]
            else:
                self._ccp.our_req_id = self._next_ident()
                bits = MPPE_BIT_STATELESS | MPPE_STRENGTH_BITS[strength]
                out.append(self._out(PROTO_CCP, ControlPacket(CONF_REQ, self._ccp.our_req_id,
                                                              encode_options([(CCP_MPPE, mppe_option(bits))])).encode()))
        self._ipcp.our_req_id = self._next_ident()
        out.append(self._out(PROTO_IPCP, ControlPacket(CONF_REQ, self._ipcp.our_req_id, encode_options(
            [(IPCP_ADDR, ip_option(self.config.server_ip))])).encode()))
        return out

    def _mppe_possible(self) -> bool:
        return self.config.ccp_offer.strength is not None and self._nt_response is not None

    def ccp_resolved(self) -> bool:
        if self.config.require_mppe:
            return self._ccp.opened
        if self.ccp_rejected or self._ccp.opened:
            return True
        # nothing offered and nothing asked
        return not self._mppe_possible() and not self.ccp_requested

    def _ccp_refused(self, note: str) -> list[bytes]:
        if self.config.require_mppe:
            self._end(PppOutcome.ClientRefusedEncryption, note)
            return [self._terminate(b"encryption required")]
        self.ccp_rejected = True
        return self._maybe_open()

    def ccp_negotiate(self, pkt: ControlPacket) -> list[bytes]:
        if self.phase is PppPhase.LinkEstablish or self.phase is PppPhase.Authentication:
            return []
        out: list[bytes] = []
        if pkt.code == CONF_REQ:
            self.ccp_requested = True
            opts = decode_options(pkt.data)
            if not self._mppe_possible():
                # the downgrade lever: refuse every compression/encryption option
                self.ccp_rejected = True
                self.evidence["ccp_reject"] = self.transcript.last_ref()
                if opts:
                    out.append(self._out(PROTO_CCP, ControlPacket(CONF_REJ, pkt.ident, pkt.data).encode()))
                else:
                    out.append(self._out(PROTO_CCP, ControlPacket(CONF_ACK, pkt.ident).encode()))
                return out + self._maybe_open()
            want = MPPE_BIT_STATELESS | MPPE_STRENGTH_BITS[self.config.ccp_offer.strength]
            mppe = [v for t, v in opts if t == CCP_MPPE]
            others = [(t, v) for t, v in opts if t != CCP_MPPE]
            if others:
                out.append(self._out(PROTO_CCP, ControlPacket(CONF_REJ, pkt.ident, encode_options(others)).encode()))
            elif not mppe or struct.unpack("!I", mppe[0])[0] != want:
                out.append(self._out(PROTO_CCP, ControlPacket(CONF_NAK, pkt.ident, encode_options(
                    [(CCP_MPPE, mppe_option(want))])).encode()))
            else:
                out.append(self._out(PROTO_CCP, ControlPacket(CONF_ACK, pkt.ident, pkt.data).encode()))
                self._ccp.their_acked = True
        elif pkt.code == CONF_ACK and pkt.ident == self._ccp.our_req_id:
            self._ccp.our_acked = True
        elif pkt.code in (CONF_NAK, CONF_REJ) and pkt.ident == self._ccp.our_req_id:
            return self._ccp_refused(f"client answered our MPPE request with {pkt.name}")
        elif pkt.code == TERM_REQ:
            out.append(self._out(PROTO_CCP, ControlPacket(TERM_ACK, pkt.ident).encode()))
        if self._ccp.opened and self.negotiated_mppe is None:
            self._enable_mppe()
        return out + self._maybe_open()

    def _enable_mppe(self) -> None:
        strength = self.config.ccp_offer.strength
        self.mppe_keys = auth.derive_mppe_keys(self.config.credentials.password, self._nt_response,
                                               strength, is_server=True)
        self._cipher_tx, self._cipher_rx = auth.mppe_ciphers(self.mppe_keys)
        self.negotiated_mppe = strength
        self.evidence["mppe"] = self.transcript.record(
            Direction.LocalObservation, "ppp", f"MPPE-{strength} stateless negotiated", plaintext=self._plain())

    def ipcp_open(self, pkt: ControlPacket) -> list[bytes]:
        if self.phase is PppPhase.LinkEstablish or self.phase is PppPhase.Authentication:
            return []
        out: list[bytes] = []
        if pkt.code == CONF_REQ:
            opts = decode_options(pkt.data)
            assign = {IPCP_ADDR: ip_option(self.config.inner_ip), IPCP_DNS1: ip_option(self.config.dns),
                      IPCP_DNS2: ip_option(self.config.dns)}
            unknown = [(t, v) for t, v in opts if t not in assign]
            nak = [(t, assign[t]) for t, v in opts if t in assign and v != assign[t]]
            if unknown:
                out.append(self._out(PROTO_IPCP, ControlPacket(CONF_REJ, pkt.ident, encode_options(unknown)).encode()))
            elif nak:
                out.append(self._out(PROTO_IPCP, ControlPacket(CONF_NAK, pkt.ident, encode_options(nak)).encode()))
            else:
                out.append(self._out(PROTO_IPCP, ControlPacket(CONF_ACK, pkt.ident, pkt.data).encode()))
                self._ipcp.their_acked = True
                self.client_ip = self.config.inner_ip
        elif pkt.code == CONF_ACK and pkt.ident == self._ipcp.our_req_id:
            self._ipcp.our_acked = True
        elif pkt.code == CONF_NAK and pkt.ident == self._ipcp.our_req_id:
            self._ipcp.our_req_id = self._next_ident()
            out.append(self._out(PROTO_IPCP, ControlPacket(CONF_REQ, self._ipcp.our_req_id, encode_options(
                [(IPCP_ADDR, ip_option(self.config.server_ip))])).encode()))
        elif pkt.code == TERM_REQ:
            out.append(self._out(PROTO_IPCP, ControlPacket(TERM_ACK, pkt.ident).encode()))
        return out + self._maybe_open()

    def _maybe_open(self) -> list[bytes]:
        if self.phase is PppPhase.Negotiation and self._ipcp.opened and self.ccp_resolved() and not self.done:
            self._advance(PppPhase.DataExchange)
            self.evidence["ipcp_open"] = self.transcript.last_ref()
        return []

    # -- data

    def _data(self, protocol: int, payload: bytes, frame: bytes) -> list[bytes]:
        if self.phase is not PppPhase.DataExchange:
            self.transcript.record(Direction.ClientToProbe, "ppp", f"{PROTO_NAMES[protocol]} before data phase, dropped",
                                   plaintext=self._plain(), raw=frame)
            return []
        if protocol == PROTO_COMP:
            if self._cipher_rx is None:
                self.transcript.record(Direction.ClientToProbe, "ppp", "COMP frame without MPPE, dropped",
                                       plaintext=False, raw=frame)
                return []
            inner_proto, inner = self._cipher_rx.decrypt(payload)
            ref = self.transcript.record(Direction.ClientToProbe, "ppp",
                                         f"data: MPPE-{self.negotiated_mppe} frame, inner {PROTO_NAMES.get(inner_proto, inner_proto)} "
                                         f"{len(inner)} bytes", plaintext=False, raw=frame)
            self.data_frames.append(DataFrame(inner_proto, inner, True, ref))
            return []
        if self.negotiated_mppe is not None:
            # RFC 3078: unencrypted datagrams on an MPPE link are discarded
            self.transcript.record(Direction.LocalObservation, "probe",
                                   "unencrypted IP frame on MPPE link discarded", plaintext=True)
            return []
        ref = self.transcript.record(Direction.ClientToProbe, "ppp", f"data: plaintext IP frame {len(payload)} bytes",
                                     plaintext=True, raw=frame)
        self.data_frames.append(DataFrame(protocol, payload, False, ref))
        return []

    def send_data(self, payload: bytes) -> bytes:
        if self.phase is not PppPhase.DataExchange:
            raise PppError("link not in data phase")
        if self._cipher_tx is not None:
            body = self._cipher_tx.encrypt(PROTO_IP, payload)
            frame = encode_frame(PROTO_COMP, body)
            self.transcript.record(Direction.ProbeToClient, "ppp", f"data: MPPE frame {len(payload)} bytes",
                                   plaintext=False, raw=frame)
            return frame
        frame = encode_frame(PROTO_IP, payload)
        self.transcript.record(Direction.ProbeToClient, "ppp", f"data: plaintext IP frame {len(payload)} bytes",
                               plaintext=True, raw=frame)
        return frame

    @property
    def plaintext_data_seen(self) -> bool:
        """IPCP open and at least one IP frame carried without MPPE."""
        return (self.phase is PppPhase.DataExchange and self.negotiated_mppe is None
                and any(not f.encrypted and f.protocol == PROTO_IP for f in self.data_frames))


def lcp_establish(session: PppServerSession, frames) -> tuple[PppServerSession, list[bytes]]:
    """Feed frames until the link leaves LinkEstablish; returns replies."""
    if session.phase is not PppPhase.LinkEstablish:
        raise PppError("lcp_establish requires phase LinkEstablish")
    return session, _feed(session, frames)


def authenticate(session: PppServerSession, frames) -> tuple[PppServerSession, list[bytes]]:
    if session.phase is not PppPhase.Authentication:
        raise PppError("authenticate requires phase Authentication")
    return session, _feed(session, frames)


def ccp_negotiate(session: PppServerSession, frames) -> tuple[PppServerSession, list[bytes]]:
    if session.phase is not PppPhase.Negotiation:
        raise PppError("ccp_negotiate requires phase Negotiation")
    return session, _feed(session, frames)


def ipcp_open(session: PppServerSession, frames) -> tuple[PppServerSession, list[bytes]]:
    if session.phase is not PppPhase.Negotiation:
        raise PppError("ipcp_open requires phase Negotiation")
    return session, _feed(session, frames)


def _feed(session: PppServerSession, frames) -> list[bytes]:
    out: list[bytes] = []
    for f in frames:
        out.extend(session.receive(f))
    return out
