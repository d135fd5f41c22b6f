"""Scripted IKEv1 initiator: Main Mode with a pre-shared key (or an
RSA-signature-only offer), then either XAUTH (Cisco style) or Quick Mode
with L2TP and PPP inside transport-mode ESP."""

from __future__ import annotations

import hashlib
import socket
import struct
import time
from typing import Optional

from .. import crypto, ike, l2tp
from ..core import Credentials, ProtocolId, Randomness
from ..ike import IkeChannel, IkeError, Payload
from ..net import close_quietly
from .policy import AbortedAt, ClientPolicy, Endpoint, Established
from .ppp_client import PppClient

L2TP_LOCAL_PORT = 1701


def xauth_passcode(challenge: bytes, password: str) -> str:
    """Stand-in one-time passcode: deterministic so tests can predict it."""
    return hashlib.md5(challenge + password.encode()).hexdigest()


class _Aborted(Exception):
    def __init__(self, stage: str, reason: str):
        super().__init__(reason)
        self.stage = stage


class _V1Initiator:
    def __init__(self, chan: IkeChannel, rng: Randomness, psk: Optional[bytes], cisco: bool, timeout: float):
        self.chan, self.rng = chan, rng
        self.psk = psk
        self.cisco = cisco
        self.timeout = timeout
        self.cky_i, self.cky_r = rng.bytes(8), b"\x00" * 8
        self.t = None
        self.keys = None
        self.ivs: dict[int, bytes] = {}
        self.p1_last = b""
        self.esp_queue: list[bytes] = []

    def header(self, exchange: int, msg_id: int = 0) -> ike.Header:
        return ike.Header(self.cky_i, self.cky_r, 0, ike.VERSION_1, exchange, 0, msg_id)

    def iv(self, msg_id: int) -> bytes:
        if msg_id not in self.ivs:
            self.ivs[msg_id] = ike.v1_exchange_iv(self.t, self.p1_last, msg_id)
        return self.ivs[msg_id]

    def send_encrypted(self, exchange: int, msg_id: int, payloads: list[Payload]) -> None:
        msg, nxt = ike.v1_encrypted_message(self.header(exchange, msg_id), payloads, self.t, self.keys.enc_key,
                                            self.iv(msg_id))
        self.ivs[msg_id] = nxt
        self.chan.send_ike(msg)

    def hash1(self, msg_id: int, rest: list[Payload]) -> bytes:
        return ike.prf(self.keys.hash, self.keys.a, struct.pack("!I", msg_id) + ike.v1_hash_payload_data(rest))

    def send_protected(self, exchange: int, msg_id: int, rest: list[Payload]) -> None:
        self.send_encrypted(exchange, msg_id, [Payload(ike.P1_HASH, self.hash1(msg_id, rest))] + rest)

    def recv(self, stage: str, timeout: Optional[float] = None) -> tuple[ike.Header, list[Payload], bytes]:
        """Next IKE message; a notify-only reply or Delete aborts at ``stage``."""
        deadline = time.monotonic() + (timeout or self.timeout)
        while True:
            got = self.chan.recv(max(deadline - time.monotonic(), 0))
            if got is None:
                raise _Aborted(stage, "no response from server")
            kind, data = got
            if kind == "esp":
                self.esp_queue.append(data)
                continue
            hdr = ike.Header.decode(data)
            if hdr.spi_i != self.cky_i:
                continue
            body = data[ike.HEADER_LEN:hdr.length]
            if hdr.flags & ike.FLAG_V1_ENCRYPTED:
                if self.keys is None:
                    raise _Aborted(stage, "encrypted message before keys exist")
                if hdr.exchange == ike.EX_MAIN:
                    iv = self.ivs[0]
                else:
                    iv = self.iv(hdr.msg_id)
                try:
                    plain, nxt = ike.v1_decrypt(self.t, self.keys.enc_key, iv, body)
                    payloads = ike.unchain(hdr.next_payload, plain)
                except (IkeError, ValueError) as exc:
                    raise _Aborted(stage, f"cannot decrypt server message: {exc}")
                if hdr.exchange == ike.EX_MAIN:
                    self.ivs[0] = nxt
                else:
                    self.ivs[hdr.msg_id] = nxt
            else:
                payloads = ike.unchain(hdr.next_payload, body)
            if hdr.exchange == ike.EX_INFO_V1:
                for p in payloads:
                    if p.ptype == ike.P1_N:
                        mtype, _ = ike.v1_parse_notify(p.body)
                        if mtype < 16384:
                            raise _Aborted(stage, f"server notify {mtype}")
                    if p.ptype == ike.P1_D:
                        raise _Aborted(stage, "server deleted the SA")
                continue
            return hdr, payloads, data

    # -- Main Mode

    def main_mode(self, local_id: bytes) -> None:
        if self.psk is None:
            offers = [ike.V1Transform("aes", 16, "sha256", ike.AUTH_RSA_SIG, 14)]
        else:
            auth = ike.AUTH_XAUTH_INIT_PSK if self.cisco else ike.AUTH_PSK
            offers = [ike.V1Transform("aes", 16, "sha1", auth, 14), ike.V1Transform("3des", 24, "sha1", auth, 2)]
        sai_b = ike.v1_sa_body(offers)
        out = [Payload(ike.P1_SA, sai_b), Payload(ike.P1_VID, bytes.fromhex("4a131c81070358455c5728f20e95452f"))]
        if self.cisco:
            out.append(Payload(ike.P1_VID, bytes.fromhex("09002689dfd6b712")))
        self.chan.send_ike(ike.v1_message(self.header(ike.EX_MAIN), out))
        hdr, payloads, _ = self.recv("IkeProposal")
        self.cky_r = hdr.spi_r
        sa = ike.find(payloads, ike.P1_SA)
        if sa is None:
            raise _Aborted("IkeProposal", "server reply has no SA")
        props = ike.v1_parse_sa(sa.body)
        if not props or not props[0].transforms:
            raise _Aborted("IkeProposal", "empty SA in reply")
        self.t = ike.V1Transform.from_attrs(props[0].transforms[0][2])
        if self.t not in offers:
            raise _Aborted("IkeProposal", "server chose a transform that was not offered")
        if self.psk is None:
            raise _Aborted("IkeAuth", "certificate authentication is not implemented by this client")

        dh = crypto.DhKeyPair(self.t.group, self.rng)
        ni = self.rng.bytes(24)
        self.chan.send_ike(ike.v1_message(self.header(ike.EX_MAIN), [Payload(ike.P1_KE, dh.public),
                                                                     Payload(ike.P1_NONCE, ni)]))
        hdr, payloads, _ = self.recv("IkeKeyExchange")
        ke, nonce = ike.find(payloads, ike.P1_KE), ike.find(payloads, ike.P1_NONCE)
        if ke is None or nonce is None:
            raise _Aborted("IkeKeyExchange", "server reply lacks KE or nonce")
        nr = nonce.body
        gxy = dh.shared(ke.body)
        skeyid = ike.v1_skeyid_psk(self.t.hash, self.psk, ni, nr)
        self.keys = ike.v1_derive(self.t, skeyid, gxy, self.cky_i, self.cky_r)

        idii = ike.id_body(ike.ID_IPV4_ADDR if local_id.count(b".") == 3 else ike.ID_FQDN, local_id)
        if idii[0] == ike.ID_IPV4_ADDR:
            idii = ike.id_body(ike.ID_IPV4_ADDR, socket.inet_aton(local_id.decode()))
        hash_i = ike.v1_hash_i(self.keys, dh.public, ke.body, self.cky_i, self.cky_r, sai_b, idii)
        iv0 = ike.v1_phase1_iv(self.t, dh.public, ke.body)
        msg, nxt = ike.v1_encrypted_message(self.header(ike.EX_MAIN), [Payload(ike.P1_ID, idii),
                                                                       Payload(ike.P1_HASH, hash_i)],
                                            self.t, self.keys.enc_key, iv0)
        self.ivs[0] = nxt
        self.chan.send_ike(msg)
        hdr, payloads, raw = self.recv("IkeAuth")
        if not hdr.flags & ike.FLAG_V1_ENCRYPTED:
            raise _Aborted("IkeAuth", "server answered Main Mode 5 in the clear")
        idr, hr = ike.find(payloads, ike.P1_ID), ike.find(payloads, ike.P1_HASH)
        if idr is None or hr is None:
            raise _Aborted("IkeAuth", "server reply lacks ID or HASH")
        expect = ike.v1_hash_r(self.keys, dh.public, ke.body, self.cky_i, self.cky_r, sai_b, idr.body)
        if not crypto.constant_time_equal(hr.body, expect):
            raise _Aborted("IkeAuth", "HASH_R does not verify")
        self.p1_last = raw[hdr.length - self.t.block:hdr.length]

    # -- XAUTH

    def xauth(self, credentials: Optional[Credentials]) -> None:
        hdr, payloads, _ = self.recv("Xauth")
        if hdr.exchange != ike.EX_TRANSACTION or not payloads or payloads[0].ptype != ike.P1_HASH:
            raise _Aborted("Xauth", "expected an XAUTH request")
        if not crypto.constant_time_equal(payloads[0].body, self.hash1(hdr.msg_id, payloads[1:])):
            raise _Aborted("Xauth", "XAUTH request HASH does not verify")
        attr = ike.find(payloads, ike.P1_ATTR)
        cfg_type, ident, attrs = ike.parse_cfg_attr(attr.body)
        if credentials is None:
            self.delete()
            raise _Aborted("Xauth", "no credentials configured; declined XAUTH")
        reply = [(ike.XAUTH_USER_NAME, credentials.username.encode())]
        challenge = attrs.get(ike.XAUTH_CHALLENGE)
        if isinstance(challenge, bytes) and challenge:
            reply.append((ike.XAUTH_PASSCODE, xauth_passcode(challenge, credentials.password).encode()))
        else:
            reply.append((ike.XAUTH_USER_PASSWORD, credentials.password.encode()))
        self.send_protected(ike.EX_TRANSACTION, hdr.msg_id,
                            [Payload(ike.P1_ATTR, ike.cfg_attr_body(ike.CFG_REPLY, ident, reply))])
        hdr, payloads, _ = self.recv("Xauth")
        attr = ike.find(payloads, ike.P1_ATTR)
        cfg_type, ident, attrs = ike.parse_cfg_attr(attr.body) if attr else (0, 0, {})
        if cfg_type != ike.CFG_SET or attrs.get(ike.XAUTH_STATUS) != 1:
            raise _Aborted("Xauth", "XAUTH status is not OK")
        self.send_protected(ike.EX_TRANSACTION, hdr.msg_id,
                            [Payload(ike.P1_ATTR, ike.cfg_attr_body(ike.CFG_ACK, ident, [(ike.XAUTH_STATUS, 1)]))])

    # -- Quick Mode

    def quick_mode(self) -> tuple[ike.EspSa, ike.EspSa]:
        msg_id = self.rng.randint(1, 0x7FFFFFFF)
        suite = ike.EspSuite("aes", 16, "sha1", ike.ENCAP_UDP_TRANSPORT)
        spi_i = self.rng.bytes(4)
        ni_b = self.rng.bytes(24)
        sa = ike.v1_sa_body([], spi=spi_i, protocol=ike.PROTO_ESP, transform_ids=[suite.v1_transform_id],
                            attr_lists=[suite.v1_attrs()])
        rest = [Payload(ike.P1_SA, sa), Payload(ike.P1_NONCE, ni_b)]
        self.send_protected(ike.EX_QUICK, msg_id, rest)
        while True:
            hdr, payloads, _ = self.recv("IpsecSa")
            if hdr.exchange == ike.EX_QUICK and hdr.msg_id == msg_id:
                break
        body = payloads[1:]
        h2 = ike.prf(self.keys.hash, self.keys.a,
                     struct.pack("!I", msg_id) + ni_b + ike.v1_hash_payload_data(body))
        if payloads[0].ptype != ike.P1_HASH or not crypto.constant_time_equal(payloads[0].body, h2):
            raise _Aborted("IpsecSa", "Quick Mode HASH(2) does not verify")
        sa_r, nonce = ike.find(body, ike.P1_SA), ike.find(body, ike.P1_NONCE)
        prop = ike.v1_parse_sa(sa_r.body)[0]
        spi_r, nr_b = prop.spi, nonce.body
        h3 = ike.prf(self.keys.hash, self.keys.a, b"\x00" + struct.pack("!I", msg_id) + ni_b + nr_b)
        self.send_encrypted(ike.EX_QUICK, msg_id, [Payload(ike.P1_HASH, h3)])
        n = ike.EspSa.keymat_len(suite)
        inbound = ike.EspSa.from_keymat(spi_i, suite, ike.v1_keymat(self.keys, ike.PROTO_ESP, spi_i, ni_b, nr_b, n))
        outbound = ike.EspSa.from_keymat(spi_r, suite, ike.v1_keymat(self.keys, ike.PROTO_ESP, spi_r, ni_b, nr_b, n))
        return inbound, outbound

    def delete(self) -> None:
        if self.keys is None or not self.p1_last:
            return
        d = struct.pack("!IBBH", 1, ike.PROTO_ISAKMP, 16, 1) + self.cky_i + self.cky_r
        try:
            self.send_protected(ike.EX_INFO_V1, self.rng.randint(1, 0x7FFFFFFF), [Payload(ike.P1_D, d)])
        except OSError:
            pass


def run_ikev1(policy: ClientPolicy, endpoint: Endpoint, credentials: Optional[Credentials], payload: bytes,
              cisco: bool = False, rng: Optional[Randomness] = None, timeout: float = 10.0, linger: float = 0.3):
    """L2TP/IPsec (``cisco=False``) or Cisco IPsec with XAUTH (``cisco=True``)."""
    rng = rng or Randomness()
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1" if endpoint.host.startswith("127.") else "0.0.0.0", 0))
    sock.connect(endpoint.address)  # so a closed port surfaces as ECONNREFUSED
    chan = IkeChannel(sock, peer=endpoint.address)
    v1 = _V1Initiator(chan, rng, policy.psk, cisco, timeout)
    proto = ProtocolId.CISCO_IPSEC if cisco else ProtocolId.L2TP_IPSEC
    try:
        v1.main_mode(b"127.0.0.1")
        if cisco:
            v1.xauth(credentials)
            v1.delete()
            return Established(proto, True, {"transform": v1.t.describe()})
        inbound, outbound = v1.quick_mode()
        return _l2tp_session(v1, inbound, outbound, policy, credentials, payload, rng, timeout, linger)
    except _Aborted as exc:
        return AbortedAt(exc.stage, str(exc))
    except (IkeError, l2tp.L2tpError) as exc:
        v1.delete()
        return AbortedAt("Ike", f"protocol error: {exc}")
    finally:
        close_quietly(sock)


def _udp(sport: int, dport: int, data: bytes) -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(data), 0) + data


def _l2tp_session(v1: _V1Initiator, inbound: ike.EspSa, outbound: ike.EspSa, policy: ClientPolicy,
                  credentials: Credentials, payload: bytes, rng: Randomness, timeout: float, linger: float):
    client = PppClient(credentials, policy.inner_auth, require_encryption=False, rng=rng, want_mppe=False)
    lac = l2tp.L2tpLac(rng, on_session=client.start, on_ppp=client.receive)

    def send(messages):
        for m in messages:
            iv = rng.bytes(crypto.block_size(outbound.suite.encr))
            v1.chan.send_esp(outbound.encrypt(17, _udp(L2TP_LOCAL_PORT, l2tp.L2TP_PORT, m), iv))

    send(lac.start())
    deadline = time.monotonic() + timeout
    sent_marker_at = None
    while time.monotonic() < deadline:
        while not v1.esp_queue:
            try:
                v1.recv("L2tp", timeout=0.05)
            except _Aborted as exc:
                if "no response" not in str(exc):
                    raise
                break
        while v1.esp_queue:
            try:
                nh, inner = inbound.decrypt(v1.esp_queue.pop(0))
            except IkeError:
                continue
            if nh != 17 or len(inner) < 8:
                continue
            send(lac.receive(inner[8:]))
        if client.aborted:
            send(lac.hang_up())
            v1.delete()
            return AbortedAt(*client.aborted)
        if lac.closed:
            return _outcome(client, sent_marker_at, "server closed the tunnel")
        if client.established and sent_marker_at is None:
            send([lac.data(client.marker_frame(payload))])
            sent_marker_at = time.monotonic()
        if sent_marker_at is not None and time.monotonic() - sent_marker_at >= linger:
            send(lac.hang_up())
            v1.delete()
            return Established(ProtocolId.L2TP_IPSEC, True, {"local_ip": client.local_ip,
                                                             "transform": v1.t.describe()})
    return _outcome(client, sent_marker_at, "timed out")


def _outcome(client: PppClient, sent_marker_at, reason: str):
    if sent_marker_at is not None:
        return Established(ProtocolId.L2TP_IPSEC, True, {})
    if client.aborted:
        return AbortedAt(*client.aborted)
    return AbortedAt(client.stage, reason)
