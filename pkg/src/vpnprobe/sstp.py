"""SSTP fake server, honest reference server and MitM relay.

SSTP runs PPP inside an HTTPS connection opened with ``SSTP_DUPLEX_POST``.
After PPP authentication the client proves, in Call-Connected, which TLS
certificate it saw (the crypto binding).  The probe's trigger is simpler:
a client that sends Connect-Request at all has accepted an untrusted
certificate.
"""

from __future__ import annotations

import enum
import logging
import socket
import ssl
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional

from . import auth, crypto, ppp, tlsutil
from .core import (CertificateMaterial, Credentials, Direction, Finding, ProbeError, Randomness,
                   Transcript, TrustRole, Verdict, VulnClass)
from .net import accept_with_timeout, close_quietly, listen_tcp, ready_line

log = logging.getLogger(__name__)

SSTP_PORT = 443
SSTP_URI = "/sra_{BA195980-CD49-458b-9E23-C84EE0ADCD75}/"
SSTP_METHOD = "SSTP_DUPLEX_POST"
VERSION = 0x10

MSG_CALL_CONNECT_REQUEST = 0x0001
MSG_CALL_CONNECT_ACK = 0x0002
MSG_CALL_CONNECT_NAK = 0x0003
MSG_CALL_CONNECTED = 0x0004
MSG_CALL_ABORT = 0x0005
MSG_CALL_DISCONNECT = 0x0006
MSG_CALL_DISCONNECT_ACK = 0x0007
MSG_ECHO_REQUEST = 0x0008
MSG_ECHO_RESPONSE = 0x0009

MESSAGE_NAMES = {1: "Call-Connect-Request", 2: "Call-Connect-Ack", 3: "Call-Connect-Nak",
                 4: "Call-Connected", 5: "Call-Abort", 6: "Call-Disconnect", 7: "Call-Disconnect-Ack",
                 8: "Echo-Request", 9: "Echo-Response"}

ATTR_ENCAPSULATED_PROTOCOL = 1
ATTR_STATUS_INFO = 2
ATTR_CRYPTO_BINDING = 3
ATTR_CRYPTO_BINDING_REQ = 4

HASH_SHA1 = 0x01
HASH_SHA256 = 0x02
HASH_NAMES = {HASH_SHA1: "SHA1", HASH_SHA256: "SHA256"}
HASH_LEN = {"SHA1": 20, "SHA256": 32}

CMK_SEED = b"SSTP inner method derived CMK"


class SstpError(ValueError):
    pass


# ---------------------------------------------------------------- codec


def encode_packet(control: bool, body: bytes) -> bytes:
    length = 4 + len(body)
    if length > 0x0FFF:
        raise SstpError("SSTP packet too long")
    return struct.pack("!BBH", VERSION, 1 if control else 0, length) + body


class PacketReader:
    """Reassembles SSTP packets from a byte stream."""

    def __init__(self, initial: bytes = b""):
        self.buf = initial

    def feed(self, data: bytes) -> None:
        self.buf += data

    def pop(self) -> Optional[tuple[bool, bytes, bytes]]:
        """(control, body, raw) of the next complete packet, if any."""
        if len(self.buf) < 4:
            return None
        version, flags, length = struct.unpack("!BBH", self.buf[:4])
        if version != VERSION:
            raise SstpError(f"unsupported SSTP version 0x{version:02x}")
        length &= 0x0FFF
        if length < 4:
            raise SstpError("SSTP length field below header size")
        if len(self.buf) < length:
            return None
        raw, self.buf = self.buf[:length], self.buf[length:]
        return bool(flags & 1), raw[4:], raw


@dataclass
class ControlMessage:
    msg_type: int
    attributes: list

    def encode(self) -> bytes:
        body = struct.pack("!HH", self.msg_type, len(self.attributes))
        for attr_id, value in self.attributes:
            body += struct.pack("!BBH", 0, attr_id, 4 + len(value)) + value
        return encode_packet(True, body)

    @classmethod
    def decode(cls, body: bytes) -> "ControlMessage":
        if len(body) < 4:
            raise SstpError("control message truncated")
        msg_type, count = struct.unpack("!HH", body[:4])
        attrs, off = [], 4
        for _ in range(count):
            if off + 4 > len(body):
                raise SstpError("attribute header truncated")
            _, attr_id, alen = struct.unpack("!BBH", body[off:off + 4])
            alen &= 0x0FFF
            if alen < 4 or off + alen > len(body):
                raise SstpError(f"attribute {attr_id} length {alen} invalid")
            attrs.append((attr_id, body[off + 4:off + alen]))
            off += alen
        return cls(msg_type, attrs)

    @property
    def name(self) -> str:
        return MESSAGE_NAMES.get(self.msg_type, f"type-0x{self.msg_type:04x}")

    def attr(self, attr_id: int) -> Optional[bytes]:
        return next((v for a, v in self.attributes if a == attr_id), None)


def connect_request() -> ControlMessage:
    return ControlMessage(MSG_CALL_CONNECT_REQUEST, [(ATTR_ENCAPSULATED_PROTOCOL, struct.pack("!H", 1))])


def connect_ack(nonce: bytes, hash_bitmask: int = HASH_SHA1 | HASH_SHA256) -> ControlMessage:
    if len(nonce) != 32:
        raise SstpError("binding nonce must be 32 bytes")
    return ControlMessage(MSG_CALL_CONNECT_ACK, [(ATTR_CRYPTO_BINDING_REQ, b"\x00\x00\x00" + bytes([hash_bitmask]) + nonce)])


def parse_binding_request(msg: ControlMessage) -> tuple[int, bytes]:
    value = msg.attr(ATTR_CRYPTO_BINDING_REQ)
    if value is None or len(value) != 36:
        raise SstpError("Connect-Ack without a crypto binding request")
    return value[3], value[4:]


# ---------------------------------------------------------------- crypto binding


@dataclass(frozen=True)
class CryptoBinding:
    nonce: bytes
    cert_hash: bytes
    cmac: bytes
    hash_algorithm: str = "SHA256"

    def __post_init__(self):
        if self.hash_algorithm not in HASH_LEN:
            raise SstpError(f"unsupported binding hash {self.hash_algorithm}")
        if len(self.nonce) != 32:
            raise SstpError("binding nonce must be 32 bytes")
        if len(self.cert_hash) != HASH_LEN[self.hash_algorithm]:
            raise SstpError("certificate hash length does not match the hash algorithm")
        if len(self.cmac) != HASH_LEN[self.hash_algorithm]:
            raise SstpError("compound MAC length does not match the hash algorithm")

    @property
    def hash_id(self) -> int:
        return HASH_SHA256 if self.hash_algorithm == "SHA256" else HASH_SHA1

    def attribute_value(self, zero_mac: bool = False) -> bytes:
        mac = b"\x00" * 32 if zero_mac else self.cmac.ljust(32, b"\x00")
        return b"\x00\x00\x00" + bytes([self.hash_id]) + self.nonce + self.cert_hash.ljust(32, b"\x00") + mac

    def message(self, zero_mac: bool = False) -> bytes:
        return ControlMessage(MSG_CALL_CONNECTED, [(ATTR_CRYPTO_BINDING, self.attribute_value(zero_mac))]).encode()

    @classmethod
    def from_message(cls, msg: ControlMessage) -> "CryptoBinding":
        value = msg.attr(ATTR_CRYPTO_BINDING)
        if value is None or len(value) != 100:
            raise SstpError("Call-Connected without a well-formed crypto binding")
        alg = HASH_NAMES.get(value[3])
        if alg is None:
            raise SstpError(f"unknown binding hash protocol {value[3]}")
        n = HASH_LEN[alg]
        return cls(value[4:36], value[36:36 + n], value[68:68 + n], alg)


def _hash_name(alg: str) -> str:
    return alg.lower()


def hlak(keys: auth.MppeKeySet, server_side: bool) -> bytes:
    """Higher-layer authentication key: the client's MasterSendKey followed
    by its MasterReceiveKey."""
    if server_side:
        return keys.recv_start + keys.send_start
    return keys.send_start + keys.recv_start


def compound_mac_key(hlak_bytes: bytes, alg: str) -> bytes:
    n = HASH_LEN[alg]
    seed = CMK_SEED + struct.pack("<H", n) + b"\x01"
    return crypto.hmac_digest(_hash_name(alg), hlak_bytes, seed)[:n]


def cert_hash(cert_der: bytes, alg: str) -> bytes:
    return crypto.digest(_hash_name(alg), cert_der)


def compute_binding(nonce: bytes, cert_der: bytes, hlak_bytes: bytes, alg: str = "SHA256") -> CryptoBinding:
    n = HASH_LEN[alg]
    unsigned = CryptoBinding(nonce, cert_hash(cert_der, alg), b"\x00" * n, alg)
    cmac = crypto.hmac_digest(_hash_name(alg), compound_mac_key(hlak_bytes, alg), unsigned.message(zero_mac=True))
    return CryptoBinding(nonce, unsigned.cert_hash, cmac[:n], alg)


def validate_crypto_binding(binding: CryptoBinding, server_cert_der: bytes, mppe_keys: auth.MppeKeySet,
                            expected_nonce: bytes, server_side: bool = True) -> bool:
    """True iff the nonce echoes ours, the certificate hash names our
    certificate and the compound MAC verifies under the MPPE-derived key."""
    try:
        expected = compute_binding(expected_nonce, server_cert_der, hlak(mppe_keys, server_side),
                                   binding.hash_algorithm)
    except SstpError:
        return False
    return (crypto.constant_time_equal(binding.nonce, expected_nonce)
            & crypto.constant_time_equal(binding.cert_hash, expected.cert_hash)
            & crypto.constant_time_equal(binding.cmac, expected.cmac))


# ---------------------------------------------------------------- TLS + HTTP helpers


@dataclass
class TlsResult:
    sock: Optional[ssl.SSLSocket]
    handshake_completed: bool
    alert: Optional[str] = None
    error: Optional[str] = None
    client_spoke: bool = False


def accept_tls(conn: socket.socket, ctx: ssl.SSLContext, timeout: float) -> TlsResult:
    conn.settimeout(timeout)
    try:
        first = conn.recv(1, socket.MSG_PEEK)
    except (socket.timeout, OSError) as exc:
        return TlsResult(None, False, error=f"no ClientHello: {exc}")
    if not first:
        return TlsResult(None, False, error="connection closed before TLS")
    try:
        tls = ctx.wrap_socket(conn, server_side=True, do_handshake_on_connect=False)
        tls.do_handshake()
    except ssl.SSLError as exc:
        reason = getattr(exc, "reason", None) or str(exc)
        alert = reason if "ALERT" in reason.upper() else None
        return TlsResult(None, False, alert=alert, error=str(exc), client_spoke=True)
    except (OSError, socket.timeout) as exc:
        return TlsResult(None, False, error=f"handshake aborted: {exc}", client_spoke=True)
    return TlsResult(tls, True, client_spoke=True)


def read_http_head(sock, limit: int = 16384) -> tuple[bytes, bytes]:
    """(head, leftover) up to the blank line that ends the headers."""
    buf = b""
    while b"\r\n\r\n" not in buf:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionError("connection closed inside HTTP headers")
        buf += chunk
        if len(buf) > limit:
            raise SstpError("HTTP header block too large")
    head, _, rest = buf.partition(b"\r\n\r\n")
    return head + b"\r\n\r\n", rest


HTTP_OK = (b"HTTP/1.1 200 OK\r\nContent-Length: 18446744073709551615\r\n"
           b"Server: Microsoft-HTTPAPI/2.0\r\n\r\n")


def http_request(host: str, correlation_id: str) -> bytes:
    return (f"{SSTP_METHOD} {SSTP_URI} HTTP/1.1\r\nHost: {host}\r\nSSTPCORRELATIONID: {{{correlation_id}}}\r\n"
            f"Content-Length: 18446744073709551615\r\n\r\n").encode()


# ---------------------------------------------------------------- server side


class SstpNegotiationState(enum.IntEnum):
    TlsEstablished = 0
    ConnectAckSent = 1
    PppDone = 2
    CallConnectedSeen = 3
    Established = 4


class _SstpServerSession:
    """One SSTP connection after TLS: HTTP exchange, SSTP control, PPP."""

    def __init__(self, tls, material: CertificateMaterial, ppp_config: ppp.PppServerConfig,
                 transcript: Transcript, rng: Randomness, capture_window: float, session_timeout: float):
        self.tls = tls
        self.cert_der = tlsutil.cert_der(material)
        self.tr = transcript
        self.rng = rng
        self.ppp = ppp.PppServerSession(ppp_config, transcript, rng, outer_encrypted=True)
        self.state = SstpNegotiationState.TlsEstablished
        self.nonce = rng.bytes(32)
        self.binding: Optional[CryptoBinding] = None
        self.binding_valid: Optional[bool] = None
        self.refs: dict[str, str] = {}
        self.capture_window = capture_window
        self.deadline = time.monotonic() + session_timeout
        self.ended_by = ""
        self._capture_until = None

    def send(self, data: bytes, summary: str, plaintext: bool = False) -> None:
        self.tr.record(Direction.ProbeToClient, "sstp", summary, plaintext=plaintext, raw=data)
        self.tls.sendall(data)

    def send_ppp(self, frames: list[bytes]) -> None:
        for f in frames:
            self.tls.sendall(encode_packet(False, f))

    def run(self) -> None:
        head, rest = read_http_head(self.tls)
        line = head.split(b"\r\n", 1)[0].decode("latin-1")
        self.refs["http"] = self.tr.record(Direction.ClientToProbe, "http", line, plaintext=False, raw=head)
        parts = line.split()
        if len(parts) < 2 or parts[0] != SSTP_METHOD or parts[1].lower() != SSTP_URI.lower():
            self.tls.sendall(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n")
            self.ended_by = "not an SSTP request"
            return
        self.tr.record(Direction.ProbeToClient, "http", "HTTP/1.1 200 OK", plaintext=False, raw=HTTP_OK)
        self.tls.sendall(HTTP_OK)
        reader = PacketReader(rest)
        self.tls.settimeout(0.05)
        while True:
            try:
                while True:
                    pkt = reader.pop()
                    if pkt is None:
                        break
                    if not self.on_packet(*pkt):
                        return
                try:
                    chunk = self.tls.recv(65535)
                except (socket.timeout, ssl.SSLWantReadError):
                    chunk = None
                if chunk == b"":
                    self.tr.record(Direction.ClientToProbe, "tls", "client closed the connection", plaintext=False)
                    self.ended_by = "client-closed"
                    return
                if chunk:
                    reader.feed(chunk)
            except SstpError as exc:
                self.tr.record(Direction.LocalObservation, "sstp", f"protocol error: {exc}", plaintext=False)
                self.ended_by = "protocol-error"
                return
            except (ssl.SSLError, OSError) as exc:
                self.ended_by = f"connection error: {exc}"
                return
            now = time.monotonic()
            self.ppp.check_timeout(now)
            if self.ppp.done and self.ppp.outcome is ppp.PppOutcome.Timeout:
                self.ended_by = "ppp-timeout"
                return
            if self._capture_until is not None and now >= self._capture_until:
                self.ended_by = "capture-window-elapsed"
                return
            if now >= self.deadline:
                self.ended_by = "session-timeout"
                return

    def on_packet(self, control: bool, body: bytes, raw: bytes) -> bool:
        if not control:
            if self.state < SstpNegotiationState.ConnectAckSent:
                self.tr.record(Direction.ClientToProbe, "sstp", "data before Connect-Ack dropped",
                               plaintext=False, raw=raw)
                return True
            self.send_ppp(self.ppp.receive(body))
            if self.ppp.phase >= ppp.PppPhase.Negotiation and self.state is SstpNegotiationState.ConnectAckSent:
                self.state = SstpNegotiationState.PppDone
            if self.ppp.phase is ppp.PppPhase.DataExchange and self.state is SstpNegotiationState.CallConnectedSeen:
                self.state = SstpNegotiationState.Established
                self.refs["established"] = self.tr.last_ref()
            if self.ppp.data_frames and self._capture_until is None:
                self._capture_until = time.monotonic() + self.capture_window
            return True
        msg = ControlMessage.decode(body)
        ref = self.tr.record(Direction.ClientToProbe, "sstp", msg.name, plaintext=False, raw=raw)
        if msg.msg_type == MSG_CALL_CONNECT_REQUEST:
            self.refs["connect_request"] = ref
            ack = connect_ack(self.nonce)
            self.send(ack.encode(), f"Call-Connect-Ack nonce={self.nonce.hex()}")
            self.state = SstpNegotiationState.ConnectAckSent
            self.send_ppp(self.ppp.start())
        elif msg.msg_type == MSG_CALL_CONNECTED:
            self.refs["call_connected"] = ref
            self.on_call_connected(msg)
            self.state = max(self.state, SstpNegotiationState.CallConnectedSeen)
            if self.ppp.phase is ppp.PppPhase.DataExchange:
                self.state = SstpNegotiationState.Established
        elif msg.msg_type == MSG_ECHO_REQUEST:
            self.send(ControlMessage(MSG_ECHO_RESPONSE, []).encode(), "Echo-Response")
        elif msg.msg_type in (MSG_CALL_DISCONNECT, MSG_CALL_ABORT):
            if msg.msg_type == MSG_CALL_DISCONNECT:
                self.send(ControlMessage(MSG_CALL_DISCONNECT_ACK, []).encode(), "Call-Disconnect-Ack")
            self.ended_by = "client-disconnect" if msg.msg_type == MSG_CALL_DISCONNECT else "client-abort"
            return False
        return True

    def on_call_connected(self, msg: ControlMessage) -> None:
        try:
            self.binding = CryptoBinding.from_message(msg)
        except SstpError as exc:
            self.binding_valid = False
            self.refs["binding"] = self.tr.record(Direction.LocalObservation, "sstp",
                                                  f"crypto binding unparsable: {exc}", plaintext=False)
            return
        ex = self.ppp.exchange
        creds = self.ppp.config.credentials
        if ex is None or self.ppp._nt_response is None or creds is None:
            self.binding_valid = False
            note = "no MS-CHAPv2 key material to check the binding"
        else:
            keys = auth.derive_mppe_keys(creds.password, ex.nt_response, 128, is_server=True)
            self.binding_valid = validate_crypto_binding(self.binding, self.cert_der, keys, self.nonce)
            note = "valid" if self.binding_valid else "INVALID"
        self.refs["binding"] = self.tr.record(
            Direction.LocalObservation, "sstp",
            f"crypto binding {self.binding.hash_algorithm} nonce={self.binding.nonce.hex()} "
            f"cert_hash={self.binding.cert_hash.hex()} cmac={self.binding.cmac.hex()}: {note}",
            plaintext=False)


def _sstp_ppp_config(credentials: Credentials, phase_timeout: float) -> ppp.PppServerConfig:
    # SSTP relies on TLS for confidentiality; no MPPE is negotiated inside
    return ppp.PppServerConfig(ppp.AuthMethod.MSCHAPv2, credentials, ppp.CcpOffer.NoEncryption,
                               phase_timeout=phase_timeout)


class SstpProbe:
    """Fake SSTP server presenting an untrusted (self-signed) certificate."""

    name = "sstp"

    def __init__(self, credentials: Credentials, material: Optional[CertificateMaterial] = None,
                 host: str = "127.0.0.1", port: int = SSTP_PORT, connect_timeout: float = 30.0,
                 phase_timeout: float = 10.0, capture_window: float = 30.0, target: str = "sstp-client",
                 rng: Optional[Randomness] = None):
        self.credentials = credentials.require()
        self.material = material or tlsutil.self_signed()
        self.host, self.port = host, port
        self.connect_timeout, self.phase_timeout = connect_timeout, phase_timeout
        self.capture_window = capture_window
        self.target = target
        self.rng = rng or Randomness()
        self._listener = None
        self.session: Optional[_SstpServerSession] = None

    def bind(self) -> "SstpProbe":
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
        tr = Transcript(prefix="sstp")
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
                                f"TLS handshake failed (presented {role} certificate): "
                                f"{res.alert or res.error}")
                if res.client_spoke:
                    return self._finding(Verdict.secure("client aborted TLS on the untrusted certificate", [ref])), tr
                return self._finding(Verdict.inconclusive(res.error or "no TLS handshake", [ref])), tr
            conn = res.sock
            tls_ref = tr.record(Direction.LocalObservation, "tls",
                                f"TLS handshake completed; presented certificate CN={self.material.subject_name} "
                                f"trust_role={role} version={conn.version()}", plaintext=False)
            sess = _SstpServerSession(conn, self.material, _sstp_ppp_config(self.credentials, self.phase_timeout),
                                      tr, self.rng, self.capture_window,
                                      self.connect_timeout + 6 * self.phase_timeout)
            sess.refs["tls"] = tls_ref
            self.session = sess
            try:
                sess.run()
            except (ConnectionError, OSError, SstpError) as exc:
                sess.ended_by = str(exc)
            tr.record(Direction.LocalObservation, "probe", f"session ended: {sess.ended_by}")
            return self._finding(sstp_verdict(sess, self.material)), tr
        finally:
            close_quietly(conn, self._listener)

    def _finding(self, verdict: Verdict) -> Finding:
        return Finding(VulnClass.SstpIgnoredCertFailure, verdict, self.target)


def sstp_verdict(sess: _SstpServerSession, material: CertificateMaterial) -> Verdict:
    if "connect_request" in sess.refs and material.trust_role is TrustRole.UntrustedSelfSigned:
        ev = [sess.refs["tls"], sess.refs["connect_request"]]
        ev += [sess.refs[k] for k in ("binding", "established") if k in sess.refs]
        parts = ["client accepted a self-signed certificate and sent Connect-Request"]
        if sess.binding_valid is not None:
            parts.append("crypto binding " + ("validated against the probe certificate" if sess.binding_valid
                                              else "did not validate"))
        if sess.state is SstpNegotiationState.Established:
            parts.append("tunnel fully established")
        return Verdict.vulnerable(ev, "; ".join(parts))
    return Verdict.inconclusive(f"TLS completed but no Connect-Request ({sess.ended_by})", [sess.refs["tls"]])


def serve_sstp(credentials: Credentials, material: Optional[CertificateMaterial] = None,
               **kwargs) -> tuple[Finding, Transcript]:
    return SstpProbe(credentials, material, **kwargs).serve()


class ReferenceSstpServer:
    """Honest SSTP server with a properly issued certificate; validates the
    client's crypto binding.  Serves sessions on a background thread."""

    def __init__(self, credentials: Credentials, material: CertificateMaterial, host: str = "127.0.0.1",
                 port: int = 0, rng: Optional[Randomness] = None, phase_timeout: float = 10.0):
        self.credentials = credentials.require()
        self.material = material
        self.ctx = tlsutil.server_context(material)
        self.rng = rng or Randomness()
        self.phase_timeout = phase_timeout
        self.listener = listen_tcp(host, port)
        self.transcripts: list[Transcript] = []
        self.sessions: list[_SstpServerSession] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True, name="reference-sstp")

    @property
    def address(self) -> tuple[str, int]:
        return self.listener.getsockname()

    def start(self) -> "ReferenceSstpServer":
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
            threading.Thread(target=self._session, args=(conn,), daemon=True).start()

    def _session(self, conn) -> None:
        tr = Transcript(prefix="ref-sstp")
        self.transcripts.append(tr)
        res = accept_tls(conn, self.ctx, self.phase_timeout)
        if not res.handshake_completed:
            tr.record(Direction.ClientToProbe, "tls", f"TLS failed: {res.alert or res.error}")
            close_quietly(conn)
            return
        tr.record(Direction.LocalObservation, "tls", "TLS handshake completed", plaintext=False)
        sess = _SstpServerSession(res.sock, self.material, _sstp_ppp_config(self.credentials, self.phase_timeout),
                                  tr, self.rng, capture_window=3600, session_timeout=120)
        self.sessions.append(sess)
        try:
            sess.run()
        except (ConnectionError, OSError, SstpError) as exc:
            log.debug("reference SSTP session ended: %s", exc)
        finally:
            close_quietly(res.sock)

    def close(self) -> None:
        self._stop.set()
        close_quietly(self.listener)
        self._thread.join(1)


# ---------------------------------------------------------------- MitM relay


class SstpRelay:
    """Terminates the client's TLS with its own certificate, relays SSTP to an
    honest server, and takes over the PPP link once Call-Connected arrives."""

    name = "sstp-relay"

    def __init__(self, upstream: tuple[str, int], material: Optional[CertificateMaterial] = None,
                 host: str = "127.0.0.1", port: int = SSTP_PORT, connect_timeout: float = 30.0,
                 phase_timeout: float = 10.0, capture_window: float = 30.0, target: str = "sstp-client",
                 rng: Optional[Randomness] = None, upstream_name: str = "vpn.example.com"):
        self.upstream = upstream
        self.upstream_name = upstream_name
        self.material = material or tlsutil.self_signed()
        self.host, self.port = host, port
        self.connect_timeout, self.phase_timeout = connect_timeout, phase_timeout
        self.capture_window = capture_window
        self.target = target
        self.rng = rng or Randomness()
        self._listener = None
        self.forwarded: list[tuple[str, str]] = []
        self.session: Optional[ppp.PppServerSession] = None
        self.switchover_ref: Optional[str] = None
        self.upstream_after_switch = 0

    def bind(self) -> "SstpRelay":
        self._ctx = tlsutil.server_context(self.material)
        self._listener = listen_tcp(self.host, self.port)
        return self

    @property
    def ports(self) -> dict[str, str]:
        h, p = self._listener.getsockname()
        return {"tcp": f"{h}:{p}"}

    def ready_line(self) -> str:
        return ready_line(self.name, self.ports)

    def _connect_upstream(self, tr: Transcript):
        try:
            raw = socket.create_connection(self.upstream, timeout=self.connect_timeout)
        except OSError as exc:
            raise ProbeError(f"upstream SSTP server {self.upstream[0]}:{self.upstream[1]} unreachable: {exc}") from exc
        try:
            up = tlsutil.client_context(verify=False).wrap_socket(raw, server_hostname=self.upstream_name)
        except (ssl.SSLError, OSError) as exc:
            close_quietly(raw)
            raise ProbeError(f"TLS to upstream SSTP server failed: {exc}") from exc
        tr.record(Direction.ProbeToUpstream, "tls", f"TLS to upstream established ({up.version()})", plaintext=False)
        return up

    def serve(self) -> tuple[Finding, Transcript]:
        if self._listener is None:
            self.bind()
        tr = Transcript(prefix="sstp-relay")
        client = up = None
        try:
            up = self._connect_upstream(tr)
            accepted = accept_with_timeout(self._listener, self.connect_timeout)
            if accepted is None:
                return self._finding(Verdict.inconclusive(f"no client connected within {self.connect_timeout}s")), tr
            conn, addr = accepted
            tr.record(Direction.ClientToProbe, "tcp", f"connection from {addr[0]}:{addr[1]}")
            res = accept_tls(conn, self._ctx, self.phase_timeout)
            if not res.handshake_completed:
                close_quietly(conn)
                ref = tr.record(Direction.ClientToProbe, "tls", f"TLS handshake failed: {res.alert or res.error}")
                if res.client_spoke:
                    return self._finding(Verdict.secure("client aborted TLS on the relay's certificate", [ref])), tr
                return self._finding(Verdict.inconclusive(res.error or "no TLS handshake", [ref])), tr
            client = res.sock
            refs = {"tls": tr.record(Direction.LocalObservation, "tls",
                                     f"TLS handshake completed; presented certificate CN={self.material.subject_name} "
                                     f"trust_role={self.material.trust_role.value}", plaintext=False)}
            ended = self._pump(client, up, tr, refs)
            tr.record(Direction.LocalObservation, "probe", f"relay ended: {ended}")
            if "connect_request" not in refs:
                return self._finding(Verdict.inconclusive(f"TLS completed but no Connect-Request ({ended})",
                                                          [refs["tls"]])), tr
            ev = [refs["tls"], refs["connect_request"]] + [refs[k] for k in ("switchover", "established") if k in refs]
            note = "client accepted the relay's self-signed certificate"
            if "established" in refs:
                note += "; PPP finished by the relay after Call-Connected, tunnel established"
            return self._finding(Verdict.vulnerable(ev, note)), tr
        finally:
            close_quietly(client, up, self._listener)

    def _finding(self, verdict: Verdict) -> Finding:
        return Finding(VulnClass.SstpIgnoredCertFailure, verdict, self.target)

    def _pump(self, client, up, tr: Transcript, refs: dict) -> str:
        head, rest = read_http_head(client)
        r1 = tr.record(Direction.ClientToProbe, "http", head.split(b"\r\n")[0].decode("latin-1"),
                       plaintext=False, raw=head)
        up.sendall(head)
        self.forwarded.append((r1, tr.record(Direction.ProbeToUpstream, "http", "forwarded request",
                                             plaintext=False, raw=head)))
        uhead, urest = read_http_head(up)
        r2 = tr.record(Direction.UpstreamToProbe, "http", uhead.split(b"\r\n")[0].decode("latin-1"),
                       plaintext=False, raw=uhead)
        client.sendall(uhead)
        self.forwarded.append((r2, tr.record(Direction.ProbeToClient, "http", "forwarded response",
                                             plaintext=False, raw=uhead)))
        from_client, from_up = PacketReader(rest), PacketReader(urest)
        client.settimeout(0.02)
        up.settimeout(0.02)
        config = _sstp_ppp_config(Credentials("relay", "relay"), self.phase_timeout)
        deadline = time.monotonic() + self.connect_timeout + 6 * self.phase_timeout
        capture_until = None
        while time.monotonic() < deadline:
            for sock, reader, side in ((client, from_client, "client"), (up, from_up, "upstream")):
                if side == "upstream" and self.session is not None:
                    # after the switchover the upstream session is abandoned
                    try:
                        if sock.recv(65535):
                            self.upstream_after_switch += 1
                    except (socket.timeout, ssl.SSLWantReadError, OSError):
                        pass
                    continue
                try:
                    chunk = sock.recv(65535)
                except (socket.timeout, ssl.SSLWantReadError):
                    chunk = None
                except (ssl.SSLError, OSError) as exc:
                    return f"{side} connection error: {exc}"
                if chunk == b"":
                    if side == "client":
                        return "client closed"
                    continue
                if chunk:
                    reader.feed(chunk)
                while True:
                    pkt = reader.pop()
                    if pkt is None:
                        break
                    result = self._on_packet(side, *pkt, client=client, up=up, tr=tr, refs=refs, config=config)
                    if result:
                        return result
            if self.session is not None:
                self.session.check_timeout()
                if self.session.done and self.session.outcome is ppp.PppOutcome.Timeout:
                    return "ppp-timeout"
                if self.session.data_frames and capture_until is None:
                    capture_until = time.monotonic() + self.capture_window
            if capture_until is not None and time.monotonic() >= capture_until:
                return "capture-window-elapsed"
        return "session-timeout"

    def _on_packet(self, side, control, body, raw, *, client, up, tr, refs, config) -> Optional[str]:
        src = Direction.ClientToProbe if side == "client" else Direction.UpstreamToProbe
        summary = ControlMessage.decode(body).name if control else _describe_data(body)
        if self.session is None:
            if side == "client" and control and ControlMessage.decode(body).msg_type == MSG_CALL_CONNECTED:
                refs["call_connected"] = tr.record(src, "sstp", summary, plaintext=False, raw=raw)
                refs["switchover"] = self.switchover_ref = tr.record(
                    Direction.LocalObservation, "probe",
                    "switchover: Call-Connected withheld from upstream; relay finishes PPP itself", plaintext=False)
                self.session = ppp.PppServerSession(config, tr, self.rng, outer_encrypted=True)
                for f in self.session.takeover():
                    client.sendall(encode_packet(False, f))
                return None
            rref = tr.record(src, "sstp", summary, plaintext=False, raw=raw)
            if side == "client" and control and ControlMessage.decode(body).msg_type == MSG_CALL_CONNECT_REQUEST:
                refs["connect_request"] = rref
            dst = up if side == "client" else client
            dst.sendall(raw)
            sref = tr.record(Direction.ProbeToUpstream if side == "client" else Direction.ProbeToClient,
                             "sstp", "forwarded " + summary, plaintext=False, raw=raw)
            self.forwarded.append((rref, sref))
            return None
        # after switchover only client traffic reaches here
        if not control:
            for f in self.session.receive(body):
                client.sendall(encode_packet(False, f))
            if self.session.phase is ppp.PppPhase.DataExchange and "established" not in refs:
                refs["established"] = self.session.evidence.get("ipcp_open") or tr.last_ref()
            return None
        msg = ControlMessage.decode(body)
        tr.record(src, "sstp", msg.name, plaintext=False, raw=raw)
        if msg.msg_type == MSG_ECHO_REQUEST:
            client.sendall(ControlMessage(MSG_ECHO_RESPONSE, []).encode())
        elif msg.msg_type == MSG_CALL_DISCONNECT:
            client.sendall(ControlMessage(MSG_CALL_DISCONNECT_ACK, []).encode())
            return "client-disconnect"
        elif msg.msg_type == MSG_CALL_ABORT:
            return "client-abort"
        return None


def _describe_data(body: bytes) -> str:
    try:
        proto, payload = ppp.decode_frame(body)
    except ppp.PppError:
        return f"data {len(body)} bytes"
    return "data: " + ppp.describe(proto, payload)


def relay_sstp(upstream: tuple[str, int], material: Optional[CertificateMaterial] = None,
               **kwargs) -> tuple[Finding, Transcript]:
    return SstpRelay(upstream, material, **kwargs).serve()
