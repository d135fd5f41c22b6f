"""Client half of a PPP link, written separately from the probe's engine.

Only the framing codec and the MS-CHAPv2/MPPE primitives are shared; every
negotiation decision here is made independently so that probe/client
agreement tests are not the engine talking to itself.
"""

from __future__ import annotations

import ipaddress
import struct
from typing import Optional

from .. import auth, packets
from ..core import Credentials, Randomness
from ..ppp import (CCP_MPPE, CHAP_ALG_MD5, CHAP_ALG_MSCHAPV2, CHAP_CHALLENGE, CHAP_FAILURE,
                   CHAP_SUCCESS, CONF_ACK, CONF_NAK, CONF_REJ, CONF_REQ, ECHO_REP, ECHO_REQ,
                   IPCP_ADDR, IPCP_DNS1, LCP_AUTH, LCP_MAGIC, LCP_MRU, MPPE_BIT_40, MPPE_BIT_56,
                   MPPE_BIT_128, MPPE_BIT_STATELESS, PROTO_CCP, PROTO_CHAP, PROTO_COMP, PROTO_IP,
                   PROTO_IPCP, PROTO_LCP, PROTO_PAP, PROTO_REJ, TERM_ACK, TERM_REQ, ControlPacket,
                   PppError, decode_frame, decode_options, encode_frame, encode_options)
from .policy import InnerAuth

_STRENGTH_OF_BIT = {MPPE_BIT_128: 128, MPPE_BIT_56: 56, MPPE_BIT_40: 40}
MARKER_PORT = 9  # discard


def marker_packet(src: str, dst: str, payload: bytes) -> bytes:
    return packets.udp_datagram(src, dst, 40000, MARKER_PORT, payload)


class PppClient:
    """Drives the client side of LCP, authentication, CCP and IPCP.

    ``stage`` names where the link currently is; ``aborted`` carries
    (stage, reason) once the client gives up on the link.
    """

    def __init__(self, credentials: Credentials, inner_auth: InnerAuth = InnerAuth.MSCHAPv2,
                 require_encryption: bool = True, rng: Optional[Randomness] = None,
                 want_mppe: bool = True):
        self.creds = credentials
        self.inner_auth = InnerAuth(inner_auth)
        self.require_encryption = require_encryption
        self.want_mppe = want_mppe or require_encryption
        self.rng = rng or Randomness()
        self.stage = "Lcp"
        self.aborted: Optional[tuple[str, str]] = None
        self.magic = self.rng.bytes(4)
        self.ident = self.rng.randint(0, 255)
        self.lcp_sent_id = None
        self.lcp_ours_ok = self.lcp_theirs_ok = False
        self.authenticated = False
        self.ccp_sent_id = None
        self.ccp_ours_ok = self.ccp_theirs_ok = False
        self.ccp_refused = False
        self.ccp_bits: Optional[int] = None
        self.ipcp_sent_id = None
        self.ipcp_ours_ok = self.ipcp_theirs_ok = False
        self.local_ip = "0.0.0.0"
        self.peer_ip: Optional[str] = None
        self.strength: Optional[int] = None
        self._nt: Optional[bytes] = None
        self._tx = self._rx = None
        self.received_ip: list[bytes] = []
        self.server_authenticated: Optional[bool] = None

    def _id(self) -> int:
        self.ident = (self.ident + 1) & 0xFF
        return self.ident

    @property
    def established(self) -> bool:
        return self.stage == "Established"

    @property
    def nt_response(self) -> Optional[bytes]:
        return self._nt

    @property
    def encrypted(self) -> bool:
        return self._tx is not None

    def start(self) -> list[bytes]:
        self.lcp_sent_id = self._id()
        opts = encode_options([(LCP_MRU, struct.pack("!H", 1400)), (LCP_MAGIC, self.magic)])
        return [encode_frame(PROTO_LCP, ControlPacket(CONF_REQ, self.lcp_sent_id, opts).encode())]

    def _abort(self, reason: str) -> list[bytes]:
        if self.aborted is None:
            self.aborted = (self.stage, reason)
        return [encode_frame(PROTO_LCP, ControlPacket(TERM_REQ, self._id(), reason.encode()[:40]).encode())]

    def receive(self, frame: bytes) -> list[bytes]:
        if self.aborted:
            return []
        proto, body = decode_frame(frame)
        if proto in (PROTO_IP, PROTO_COMP):
            self._data(proto, body)
            return []
        try:
            pkt = ControlPacket.decode(body)
        except PppError:
            return []
        if proto == PROTO_LCP:
            return self._lcp(pkt)
        if proto in (PROTO_CHAP, PROTO_PAP):
            return self._auth(proto, pkt)
        if proto == PROTO_CCP:
            return self._ccp(pkt)
        if proto == PROTO_IPCP:
            return self._ipcp(pkt)
        # anything else: reject the protocol
        return [encode_frame(PROTO_LCP, ControlPacket(PROTO_REJ, self._id(), struct.pack("!H", proto) + body).encode())]

    # -- LCP

    def _wanted_auth_option(self) -> bytes:
        if self.inner_auth is InnerAuth.PAP:
            return struct.pack("!H", PROTO_PAP)
        alg = CHAP_ALG_MSCHAPV2 if self.inner_auth is InnerAuth.MSCHAPv2 else CHAP_ALG_MD5
        return struct.pack("!HB", PROTO_CHAP, alg)

    def _lcp(self, pkt: ControlPacket) -> list[bytes]:
        out = []
        if pkt.code == TERM_REQ:
            out.append(encode_frame(PROTO_LCP, ControlPacket(TERM_ACK, pkt.ident).encode()))
            if self.aborted is None:
                self.aborted = (self.stage, "server terminated the link: " + pkt.data.decode("latin-1", "replace"))
            return out
        if pkt.code == ECHO_REQ:
            return [encode_frame(PROTO_LCP, ControlPacket(ECHO_REP, pkt.ident, self.magic + pkt.data[4:]).encode())]
        if pkt.code == CONF_REQ:
            opts = decode_options(pkt.data)
            auth_opts = [v for t, v in opts if t == LCP_AUTH]
            if auth_opts and auth_opts[0] != self._wanted_auth_option():
                out.append(encode_frame(PROTO_LCP, ControlPacket(CONF_NAK, pkt.ident, encode_options(
                    [(LCP_AUTH, self._wanted_auth_option())])).encode()))
            else:
                out.append(encode_frame(PROTO_LCP, ControlPacket(CONF_ACK, pkt.ident, pkt.data).encode()))
                self.lcp_theirs_ok = True
        elif pkt.code == CONF_ACK and pkt.ident == self.lcp_sent_id:
            self.lcp_ours_ok = True
        elif pkt.code in (CONF_NAK, CONF_REJ) and pkt.ident == self.lcp_sent_id:
            self.lcp_sent_id = self._id()
            out.append(encode_frame(PROTO_LCP, ControlPacket(CONF_REQ, self.lcp_sent_id,
                                                             encode_options([(LCP_MAGIC, self.magic)])).encode()))
        if self.stage == "Lcp" and self.lcp_ours_ok and self.lcp_theirs_ok:
            self.stage = "Auth"
            if self.inner_auth is InnerAuth.PAP:
                out.append(encode_frame(PROTO_PAP, auth.pap_request(self._id(), self.creds.username,
                                                                    self.creds.password)))
        return out

    # -- authentication

    def _auth(self, proto: int, pkt: ControlPacket) -> list[bytes]:
        if self.stage != "Auth":
            return []
        if proto == PROTO_PAP:
            if pkt.code == auth.PAP_AUTH_ACK:
                return self._authenticated()
            if pkt.code == auth.PAP_AUTH_NAK:
                self.aborted = ("Auth", "PAP authentication rejected")
            return []
        if pkt.code == CHAP_CHALLENGE:
            size = pkt.data[0]
            challenge = pkt.data[1:1 + size]
            name = self.creds.username.encode()
            if self.inner_auth is InnerAuth.MSCHAPv2:
                if size != 16:
                    return self._abort("malformed MS-CHAPv2 challenge")
                self._auth_challenge = challenge
                self._peer_challenge = self.rng.bytes(16)
                self._nt = auth.nt_response(challenge, self._peer_challenge, self.creds.username, self.creds.password)
                value = self._peer_challenge + b"\x00" * 8 + self._nt + b"\x00"
                data = bytes([49]) + value + name
            else:
                data = bytes([16]) + auth.chap_md5_response(pkt.ident, self.creds.password, challenge) + name
            return [encode_frame(PROTO_CHAP, struct.pack("!BBH", 2, pkt.ident, 4 + len(data)) + data)]
        if pkt.code == CHAP_SUCCESS:
            if self.inner_auth is InnerAuth.MSCHAPv2:
                message = pkt.data.decode("latin-1")
                s = message.split(" ")[0]
                ok = auth.verify_authenticator_response(s, self.creds.password, self._nt, self._peer_challenge,
                                                        self._auth_challenge, self.creds.username)
                self.server_authenticated = ok
                if not ok:
                    return self._abort("server authenticator response did not verify")
            return self._authenticated()
        if pkt.code == CHAP_FAILURE:
            self.aborted = ("Auth", "authentication failed: " + pkt.data.decode("latin-1", "replace"))
        return []

    def _authenticated(self) -> list[bytes]:
        self.authenticated = True
        self.stage = "Ncp"
        out = []
        if self.want_mppe and self._nt is not None:
            self.ccp_sent_id = self._id()
            bits = MPPE_BIT_STATELESS | MPPE_BIT_128 | MPPE_BIT_56 | MPPE_BIT_40
            out.append(encode_frame(PROTO_CCP, ControlPacket(CONF_REQ, self.ccp_sent_id, encode_options(
                [(CCP_MPPE, struct.pack("!I", bits))])).encode()))
        elif self.require_encryption:
            return self._abort("no MPPE key material for the required encryption")
        else:
            self.ccp_refused = True
        out.append(self._ipcp_request())
        return out

    # -- CCP

    def _ccp(self, pkt: ControlPacket) -> list[bytes]:
        if self.stage not in ("Ncp", "Established"):
            return []
        out = []
        if pkt.code == CONF_REQ:
            opts = decode_options(pkt.data)
            mppe = [struct.unpack("!I", v)[0] for t, v in opts if t == CCP_MPPE and len(v) == 4]
            if len(opts) == 1 and mppe and mppe[0] & MPPE_BIT_STATELESS and self._single_strength(mppe[0]):
                self.ccp_bits = mppe[0]
                self.ccp_theirs_ok = True
                out.append(encode_frame(PROTO_CCP, ControlPacket(CONF_ACK, pkt.ident, pkt.data).encode()))
            else:
                out.append(encode_frame(PROTO_CCP, ControlPacket(CONF_REJ, pkt.ident, pkt.data).encode()))
        elif pkt.code == CONF_ACK and pkt.ident == self.ccp_sent_id:
            self.ccp_ours_ok = True
        elif pkt.code == CONF_NAK and pkt.ident == self.ccp_sent_id:
            mppe = [struct.unpack("!I", v)[0] for t, v in decode_options(pkt.data) if t == CCP_MPPE]
            if mppe and self._single_strength(mppe[0]):
                self.ccp_sent_id = self._id()
                out.append(encode_frame(PROTO_CCP, ControlPacket(CONF_REQ, self.ccp_sent_id, encode_options(
                    [(CCP_MPPE, struct.pack("!I", mppe[0]))])).encode()))
            else:
                return self._ccp_lost("server offered no usable MPPE setting")
        elif pkt.code == CONF_REJ and pkt.ident == self.ccp_sent_id:
            return self._ccp_lost("server rejected MPPE")
        elif pkt.code == TERM_REQ:
            out.append(encode_frame(PROTO_CCP, ControlPacket(TERM_ACK, pkt.ident).encode()))
        if self.ccp_ours_ok and self.ccp_theirs_ok and self._tx is None:
            self._enable_mppe()
        return out + self._check_open()

    @staticmethod
    def _single_strength(bits: int) -> Optional[int]:
        found = [s for b, s in _STRENGTH_OF_BIT.items() if bits & b]
        return found[0] if len(found) == 1 else None

    def _ccp_lost(self, reason: str) -> list[bytes]:
        if self.require_encryption:
            return self._abort(reason)
        self.ccp_refused = True
        return self._check_open()

    def _enable_mppe(self) -> None:
        self.strength = self._single_strength(self.ccp_bits)
        keys = auth.derive_mppe_keys(self.creds.password, self._nt, self.strength, is_server=False)
        self._tx, self._rx = auth.mppe_ciphers(keys)

    # -- IPCP

    def _ipcp_request(self) -> bytes:
        self.ipcp_sent_id = self._id()
        opts = encode_options([(IPCP_ADDR, ipaddress.IPv4Address(self.local_ip).packed),
                               (IPCP_DNS1, b"\x00" * 4)])
        return encode_frame(PROTO_IPCP, ControlPacket(CONF_REQ, self.ipcp_sent_id, opts).encode())

    def _ipcp(self, pkt: ControlPacket) -> list[bytes]:
        if self.stage not in ("Ncp", "Established"):
            return []
        out = []
        if pkt.code == CONF_REQ:
            for t, v in decode_options(pkt.data):
                if t == IPCP_ADDR:
                    self.peer_ip = str(ipaddress.IPv4Address(v))
            out.append(encode_frame(PROTO_IPCP, ControlPacket(CONF_ACK, pkt.ident, pkt.data).encode()))
            self.ipcp_theirs_ok = True
        elif pkt.code == CONF_NAK and pkt.ident == self.ipcp_sent_id:
            for t, v in decode_options(pkt.data):
                if t == IPCP_ADDR:
                    self.local_ip = str(ipaddress.IPv4Address(v))
            self.ipcp_sent_id = self._id()
            opts = [(t, v) for t, v in decode_options(pkt.data)]
            out.append(encode_frame(PROTO_IPCP, ControlPacket(CONF_REQ, self.ipcp_sent_id,
                                                              encode_options(opts)).encode()))
        elif pkt.code == CONF_ACK and pkt.ident == self.ipcp_sent_id:
            self.ipcp_ours_ok = True
        return out + self._check_open()

    def _check_open(self) -> list[bytes]:
        if self.stage != "Ncp" or self.aborted:
            return []
        ccp_done = self.encrypted or self.ccp_refused
        if ccp_done and self.ipcp_ours_ok and self.ipcp_theirs_ok:
            if self.require_encryption and not self.encrypted:
                return self._abort("encryption required but not negotiated")
            self.stage = "Established"
        return []

    # -- data

    def data_frame(self, ip_packet: bytes) -> bytes:
        if not self.established:
            raise PppError("link not established")
        if self._tx is not None:
            return encode_frame(PROTO_COMP, self._tx.encrypt(PROTO_IP, ip_packet))
        return encode_frame(PROTO_IP, ip_packet)

    def marker_frame(self, payload: bytes) -> bytes:
        return self.data_frame(marker_packet(self.local_ip, self.peer_ip or "10.9.0.1", payload))

    def _data(self, proto: int, body: bytes) -> None:
        if not self.established:
            return
        if proto == PROTO_COMP:
            if self._rx is None:
                return
            proto, body = self._rx.decrypt(body)
        elif self._rx is not None:
            return  # plaintext on an encrypted link is discarded
        if proto == PROTO_IP:
            self.received_ip.append(body)
