"""Scripted IKEv2 initiator with EAP-MSCHAPv2, in the style of a
strongSwan road-warrior profile.  ``policy.server_identity`` plays the role
of ``rightid``: a pinned name must match both IDr and the certificate."""

from __future__ import annotations

import ipaddress
import socket
import struct
import time
from typing import Optional

from .. import auth, crypto, ike, packets, tlsutil
from ..core import Credentials, ProtocolId, Randomness
from ..ike import IkeChannel, IkeError, Payload
from ..net import close_quietly
from .policy import AbortedAt, ClientPolicy, Endpoint, Established


class _Aborted(Exception):
    def __init__(self, stage: str, reason: str):
        super().__init__(reason)
        self.stage = stage


def _msk(keys: auth.MppeKeySet) -> bytes:
    # client perspective: MasterSendKey | MasterReceiveKey, padded to 64
    return keys.send_start + keys.recv_start + b"\x00" * 32


class _V2Initiator:
    def __init__(self, chan: IkeChannel, rng: Randomness, timeout: float):
        self.chan, self.rng, self.timeout = chan, rng, timeout
        self.spi_i, self.spi_r = rng.bytes(8), b"\x00" * 8
        self.msg_id = 0
        self.suite = self.keys = None
        self.esp_queue: list[bytes] = []

    def header(self, exchange: int) -> ike.Header:
        return ike.Header(self.spi_i, self.spi_r, 0, ike.VERSION_2, exchange, ike.FLAG_V2_INITIATOR, self.msg_id)

    def request(self, exchange: int, payloads: list[Payload], stage: str) -> tuple[list[Payload], bytes]:
        """Sends one request and waits for its response (retransmitting once)."""
        if self.keys is None:
            msg = ike.v2_plain_message(self.header(exchange), payloads)
        else:
            msg = ike.v2_sk_message(self.header(exchange), payloads, self.suite, self.keys.sk_ei, self.keys.sk_ai,
                                    self.rng.bytes(self.suite.block))
        expect = self.msg_id
        self.msg_id += 1
        for attempt in range(2):
            self.chan.send_ike(msg)
            deadline = time.monotonic() + self.timeout / 2
            while True:
                got = self.chan.recv(max(deadline - time.monotonic(), 0))
                if got is None:
                    break
                kind, data = got
                if kind == "esp":
                    self.esp_queue.append(data)
                    continue
                try:
                    hdr = ike.Header.decode(data)
                except IkeError:
                    continue
                if hdr.spi_i != self.spi_i or not hdr.flags & ike.FLAG_V2_RESPONSE or hdr.msg_id != expect:
                    continue
                if self.keys is None:
                    self.spi_r = hdr.spi_r
                    return ike.unchain(hdr.next_payload, data[ike.HEADER_LEN:hdr.length]), data[:hdr.length]
                try:
                    return ike.v2_open_sk(data, self.suite, self.keys.sk_er, self.keys.sk_ar), data
                except IkeError as exc:
                    raise _Aborted(stage, f"cannot open server message: {exc}")
        raise _Aborted(stage, "no response from server")

    def notify_failure(self) -> None:
        try:
            msg = ike.v2_sk_message(self.header(ike.EX_INFORMATIONAL),
                                    [Payload(ike.N2, ike.v2_notify_body(ike.N2_AUTHENTICATION_FAILED))],
                                    self.suite, self.keys.sk_ei, self.keys.sk_ai, self.rng.bytes(self.suite.block))
            self.msg_id += 1
            self.chan.send_ike(msg)
        except OSError:
            pass

    def delete(self) -> None:
        try:
            msg = ike.v2_sk_message(self.header(ike.EX_INFORMATIONAL),
                                    [Payload(ike.D2, struct.pack("!BBH", ike.PROTO_ISAKMP, 0, 0))],
                                    self.suite, self.keys.sk_ei, self.keys.sk_ai, self.rng.bytes(self.suite.block))
            self.msg_id += 1
            self.chan.send_ike(msg)
        except OSError:
            pass


def _notifies(payloads: list[Payload]) -> list[int]:
    return [ike.v2_parse_notify(p.body)[0] for p in payloads if p.ptype == ike.N2]


def _check_server(policy: ClientPolicy, endpoint: Endpoint, payloads: list[Payload], v2: _V2Initiator,
                  msg2: bytes, ni: bytes) -> None:
    idr = ike.find(payloads, ike.IDR2)
    cert = ike.find(payloads, ike.CERT2)
    auth_p = ike.find(payloads, ike.AUTH2)
    if idr is None or cert is None or auth_p is None:
        raise _Aborted("IkeAuth", "server did not authenticate with a certificate")
    der = cert.body[1:]
    if endpoint.ca_pem is not None and not tlsutil.verify_issued_by(der, endpoint.ca_pem):
        raise _Aborted("IkeAuth", "server certificate is not issued by a trusted authority")
    octets = ike.v2_signed_octets(msg2, ni, v2.suite.prf, v2.keys.sk_pr, idr.body)
    if auth_p.body[0] != ike.AUTH_RSA or not tlsutil.rsa_verify(der, auth_p.body[4:], octets):
        raise _Aborted("IkeAuth", "server AUTH signature does not verify")
    pinned = policy.pinned_identity
    if pinned is not None:
        presented = idr.body[4:].decode("latin-1")
        if presented != pinned or pinned not in tlsutil.subject_names(der):
            raise _Aborted("IkeAuth", f"server identity {presented!r} does not match pinned {pinned!r}")


def run_ikev2(policy: ClientPolicy, endpoint: Endpoint, credentials: Credentials, payload: bytes,
              rng: Optional[Randomness] = None, timeout: float = 10.0, linger: float = 0.3):
    rng = rng or Randomness()
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1" if endpoint.host.startswith("127.") else "0.0.0.0", 0))
    sock.connect(endpoint.address)  # so a closed port surfaces as ECONNREFUSED
    chan = IkeChannel(sock, peer=endpoint.address)
    v2 = _V2Initiator(chan, rng, timeout)
    try:
        return _run(v2, policy, endpoint, credentials, payload, rng, timeout)
    except _Aborted as exc:
        return AbortedAt(exc.stage, str(exc))
    except (IkeError, ValueError) as exc:
        return AbortedAt("Ike", f"protocol error: {exc}")
    finally:
        close_quietly(sock)


def _run(v2: _V2Initiator, policy, endpoint, credentials, payload, rng, timeout):
    group = 14
    for _ in range(2):
        dh = crypto.DhKeyPair(group, rng)
        ni = rng.bytes(32)
        init = [Payload(ike.SA2, ike.v2_sa_body([ike.v2_ike_proposal(group=group)])),
                Payload(ike.KE2, struct.pack("!HH", group, 0) + dh.public), Payload(ike.NONCE2, ni)]
        v2.msg_id = 0
        v2.spi_r = b"\x00" * 8
        msg1 = ike.v2_plain_message(v2.header(ike.EX_SA_INIT), init)
        payloads, msg2 = v2.request(ike.EX_SA_INIT, init, "IkeProposal")
        notes = _notifies(payloads)
        if ike.N2_INVALID_KE in notes:
            data = next(ike.v2_parse_notify(p.body)[1] for p in payloads if p.ptype == ike.N2)
            group = struct.unpack("!H", data[:2])[0]
            continue
        break
    if ike.N2_NO_PROPOSAL_CHOSEN in notes:
        raise _Aborted("IkeProposal", "server chose no proposal")
    sa, ke, nonce = (ike.find(payloads, t) for t in (ike.SA2, ike.KE2, ike.NONCE2))
    if sa is None or ke is None or nonce is None:
        raise _Aborted("IkeProposal", "IKE_SA_INIT response incomplete")
    choice = ike.v2_choose(ike.v2_parse_sa(sa.body)[0])
    if choice is None:
        raise _Aborted("IkeProposal", "server chose an unsupported suite")
    v2.suite = choice[0]
    nr = nonce.body
    v2.keys = ike.v2_derive(v2.suite, ni, nr, dh.shared(ke.body[4:]), v2.spi_i, v2.spi_r)

    # IKE_AUTH without AUTH: ask for EAP
    idi = ike.v2_id_body(ike.ID2_RFC822, credentials.username.encode())
    spi_child = rng.bytes(4)
    req = [Payload(ike.IDI2, idi)]
    if policy.pinned_identity:
        req.append(Payload(ike.IDR2, ike.v2_id_body(ike.ID2_FQDN, policy.pinned_identity.encode())))
    cp = struct.pack("!BBH", ike.CFG2_REQUEST, 0, 0) + struct.pack("!HH", ike.CFG2_INTERNAL_IP4_ADDRESS, 0)
    req += [Payload(ike.CP2, cp), Payload(ike.SA2, ike.v2_sa_body([ike.v2_esp_proposal(spi_child)])),
            Payload(ike.TSI2, ike.v2_ts_body()), Payload(ike.TSR2, ike.v2_ts_body())]
    payloads, _ = v2.request(ike.EX_AUTH, req, "IkeAuth")
    if ike.N2_AUTHENTICATION_FAILED in _notifies(payloads):
        raise _Aborted("IkeAuth", "server refused authentication")
    try:
        _check_server(policy, endpoint, payloads, v2, msg2, ni)
    except _Aborted:
        v2.notify_failure()
        raise
    idr_body = ike.find(payloads, ike.IDR2).body

    # EAP-MSCHAPv2
    eap = _eap(payloads)
    if eap[0] != ike.EAP_REQUEST or eap[2] != ike.EAP_IDENTITY:
        raise _Aborted("Eap", "expected an EAP Identity request")
    payloads, _ = v2.request(ike.EX_AUTH, [Payload(ike.EAP2, ike.eap_packet(
        ike.EAP_RESPONSE, eap[1], ike.EAP_IDENTITY, credentials.username.encode()))], "Eap")
    code, ident, etype, data = _eap(payloads)
    if etype != ike.EAP_MSCHAPV2 or len(data) < 21 or data[0] != ike.MSCHAPV2_CHALLENGE:
        raise _Aborted("Eap", "expected an EAP-MSCHAPv2 challenge")
    ms_id, auth_challenge = data[1], data[5:21]
    peer_challenge = rng.bytes(16)
    nt = auth.nt_response(auth_challenge, peer_challenge, credentials.username, credentials.password)
    value = peer_challenge + b"\x00" * 8 + nt + b"\x00"
    body = bytes([49]) + value + credentials.username.encode()
    resp = struct.pack("!BBH", ike.MSCHAPV2_RESPONSE, ms_id, 4 + len(body)) + body
    payloads, _ = v2.request(ike.EX_AUTH, [Payload(ike.EAP2, ike.eap_packet(
        ike.EAP_RESPONSE, ident, ike.EAP_MSCHAPV2, resp))], "Eap")
    code, ident, etype, data = _eap(payloads)
    if code == ike.EAP_FAILURE:
        raise _Aborted("EapAuth", "EAP authentication failed")
    if etype != ike.EAP_MSCHAPV2 or not data or data[0] != ike.MSCHAPV2_SUCCESS:
        raise _Aborted("EapAuth", "unexpected EAP-MSCHAPv2 message")
    s_value = data[4:].decode("latin-1").split(" ", 1)[0]
    if not auth.verify_authenticator_response(s_value, credentials.password, nt, peer_challenge, auth_challenge,
                                              credentials.username):
        v2.notify_failure()
        raise _Aborted("EapAuth", "server authenticator response does not verify")
    payloads, _ = v2.request(ike.EX_AUTH, [Payload(ike.EAP2, ike.eap_packet(
        ike.EAP_RESPONSE, ident, ike.EAP_MSCHAPV2, bytes([ike.MSCHAPV2_SUCCESS])))], "EapAuth")
    if _eap(payloads)[0] != ike.EAP_SUCCESS:
        raise _Aborted("EapAuth", "no EAP Success")
    msk = _msk(auth.derive_mppe_keys(credentials.password, nt, 128, is_server=False))

    # final AUTH exchange with the MSK
    prf = v2.suite.prf
    ours = ike.v2_psk_auth(prf, msk, ike.v2_signed_octets(msg1, nr, prf, v2.keys.sk_pi, idi))
    payloads, _ = v2.request(ike.EX_AUTH, [Payload(ike.AUTH2, ike.v2_auth_body(ike.AUTH_SHARED_KEY, ours))],
                             "IkeAuth")
    auth_p = ike.find(payloads, ike.AUTH2)
    theirs = ike.v2_psk_auth(prf, msk, ike.v2_signed_octets(msg2, ni, prf, v2.keys.sk_pr, idr_body))
    if auth_p is None or not crypto.constant_time_equal(auth_p.body[4:], theirs):
        v2.notify_failure()
        raise _Aborted("IkeAuth", "server MSK AUTH does not verify")
    sa = ike.find(payloads, ike.SA2)
    if sa is None:
        raise _Aborted("ChildSa", "no child SA in the final response")
    prop = ike.v2_parse_sa(sa.body)[0]
    child = ike.v2_choose(prop, need_dh=False, need_prf=False)
    if child is None:
        raise _Aborted("ChildSa", "server chose an unsupported ESP suite")
    esp = ike.esp_suite_from_v2(child[0])
    i2r, r2i = ike.v2_child_keymat(child[0], prf, v2.keys.sk_d, ni, nr)
    outbound = ike.EspSa.from_keymat(prop.spi, esp, i2r)
    inbound = ike.EspSa.from_keymat(spi_child, esp, r2i)
    local_ip = "10.9.1.2"
    cpp = ike.find(payloads, ike.CP2)
    if cpp is not None and len(cpp.body) >= 12:
        local_ip = str(ipaddress.IPv4Address(cpp.body[8:12]))

    # one echo through the tunnel, carrying the marker
    ping = packets.icmp_echo(local_ip, "10.9.1.1", 0x4242, 1, payload)
    v2.chan.send_esp(outbound.encrypt(4, ping, rng.bytes(crypto.block_size(esp.encr))))
    deadline = time.monotonic() + timeout
    answered = False
    while time.monotonic() < deadline and not answered:
        while v2.esp_queue and not answered:
            try:
                nh, inner = inbound.decrypt(v2.esp_queue.pop(0))
                answered = nh == 4 and packets.parse_icmp_echo(inner)[2] == 0
            except (IkeError, ValueError):
                continue
        if answered:
            break
        got = v2.chan.recv(min(0.1, max(deadline - time.monotonic(), 0)))
        if got and got[0] == "esp":
            v2.esp_queue.append(got[1])
    v2.delete()
    return Established(ProtocolId.IKEV2, True, {"local_ip": local_ip, "echo_reply": answered})


def _eap(payloads: list[Payload]) -> tuple:
    p = ike.find(payloads, ike.EAP2)
    if p is None:
        raise _Aborted("Eap", "server message carries no EAP payload")
    return ike.parse_eap(p.body)
