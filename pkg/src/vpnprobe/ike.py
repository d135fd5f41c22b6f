"""ISAKMP/IKE wire format, key schedules and ESP shared by probes and clients.

Covers IKEv1 Main Mode, Quick Mode and Transaction exchanges, the parts of
IKEv2 needed for IKE_SA_INIT/IKE_AUTH with EAP, and ESP over UDP.  All IKE
traffic uses one UDP port with the non-ESP marker, as after NAT traversal.
"""

from __future__ import annotations

import ipaddress
import select
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

from . import crypto


class IkeError(ValueError):
    pass


# ---------------------------------------------------------------- UDP framing

NON_ESP_MARKER = b"\x00\x00\x00\x00"
KEEPALIVE = b"\xff"


def frame_ike(message: bytes) -> bytes:
    return NON_ESP_MARKER + message


def classify_datagram(data: bytes) -> tuple[str, bytes]:
    """('ike', msg) | ('esp', packet) | ('keepalive', b'')"""
    if data == KEEPALIVE:
        return "keepalive", b""
    if len(data) < 8:
        raise IkeError("datagram too short")
    if data[:4] == NON_ESP_MARKER:
        return "ike", data[4:]
    return "esp", data


# ---------------------------------------------------------------- header & payload chain

HEADER_LEN = 28
VERSION_1 = 0x10
VERSION_2 = 0x20

# IKEv1 exchange types
EX_MAIN = 2
EX_INFO_V1 = 5
EX_TRANSACTION = 6
EX_QUICK = 32
# IKEv2 exchange types
EX_SA_INIT = 34
EX_AUTH = 35
EX_CREATE_CHILD = 36
EX_INFORMATIONAL = 37

FLAG_V1_ENCRYPTED = 0x01
FLAG_V2_INITIATOR = 0x08
FLAG_V2_RESPONSE = 0x20


@dataclass
class Header:
    spi_i: bytes
    spi_r: bytes
    next_payload: int
    version: int
    exchange: int
    flags: int
    msg_id: int
    length: int = 0

    def encode(self, length: Optional[int] = None) -> bytes:
        return struct.pack("!8s8sBBBBII", self.spi_i, self.spi_r, self.next_payload, self.version,
                           self.exchange, self.flags, self.msg_id, self.length if length is None else length)

    @classmethod
    def decode(cls, data: bytes) -> "Header":
        if len(data) < HEADER_LEN:
            raise IkeError("ISAKMP header truncated")
        h = cls(*struct.unpack("!8s8sBBBBII", data[:HEADER_LEN]))
        if h.length < HEADER_LEN or h.length > len(data):
            raise IkeError(f"ISAKMP length {h.length} does not match datagram of {len(data)} bytes")
        return h


@dataclass
class Payload:
    ptype: int
    body: bytes
    critical: bool = False

    def raw(self, next_payload: int) -> bytes:
        """Payload with its generic header."""
        return struct.pack("!BBH", next_payload, 0x80 if self.critical else 0, 4 + len(self.body)) + self.body


def chain(payloads: list[Payload]) -> tuple[int, bytes]:
    """(first payload type, concatenated payloads)."""
    out = b""
    for i, p in enumerate(payloads):
        nxt = payloads[i + 1].ptype if i + 1 < len(payloads) else 0
        out += p.raw(nxt)
    return (payloads[0].ptype if payloads else 0), out


def unchain(first: int, data: bytes) -> list[Payload]:
    out, off, ptype = [], 0, first
    while ptype:
        if off + 4 > len(data):
            raise IkeError(f"payload {ptype} header truncated")
        nxt, flags, plen = struct.unpack("!BBH", data[off:off + 4])
        if plen < 4 or off + plen > len(data):
            raise IkeError(f"payload {ptype} length {plen} invalid")
        out.append(Payload(ptype, data[off + 4:off + plen], bool(flags & 0x80)))
        off += plen
        ptype = nxt
    return out


def find(payloads: list[Payload], ptype: int) -> Optional[Payload]:
    return next((p for p in payloads if p.ptype == ptype), None)


def find_all(payloads: list[Payload], ptype: int) -> list[Payload]:
    return [p for p in payloads if p.ptype == ptype]


# ---------------------------------------------------------------- data attributes (v1 SA, mode config)


def encode_attrs(attrs: list[tuple[int, object]]) -> bytes:
    out = b""
    for atype, value in attrs:
        if isinstance(value, int):
            out += struct.pack("!HH", atype | 0x8000, value)
        else:
            out += struct.pack("!HH", atype, len(value)) + value
    return out


def decode_attrs(data: bytes) -> list[tuple[int, object]]:
    out, off = [], 0
    while off < len(data):
        if off + 4 > len(data):
            raise IkeError("attribute truncated")
        atype, val = struct.unpack("!HH", data[off:off + 4])
        off += 4
        if atype & 0x8000:
            out.append((atype & 0x7FFF, val))
        else:
            if off + val > len(data):
                raise IkeError("variable attribute truncated")
            out.append((atype, data[off:off + val]))
            off += val
    return out


# ================================================================ IKEv1

P1_SA, P1_PROPOSAL, P1_TRANSFORM, P1_KE, P1_ID, P1_CERT, P1_CR, P1_HASH, P1_SIG, P1_NONCE, P1_N, P1_D, P1_VID = \
    1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13
P1_ATTR = 14
P1_NAT_D = 20

PROTO_ISAKMP = 1
PROTO_ESP = 3
KEY_IKE = 1

# phase-1 attribute types
A_ENCR, A_HASH, A_AUTH, A_GROUP, A_LIFE_TYPE, A_LIFE_DUR, A_KEY_LEN = 1, 2, 3, 4, 11, 12, 14
ENCR_3DES_V1, ENCR_AES_V1 = 5, 7
HASH_IDS_V1 = {1: "md5", 2: "sha1", 4: "sha256"}
AUTH_PSK = 1
AUTH_RSA_SIG = 3
AUTH_XAUTH_INIT_PSK = 65001
AUTH_NAMES_V1 = {AUTH_PSK: "pre-shared", AUTH_RSA_SIG: "rsa-sig", AUTH_XAUTH_INIT_PSK: "xauth-psk"}
SUPPORTED_GROUPS = (2, 14)

ID_IPV4_ADDR, ID_FQDN, ID_USER_FQDN, ID_KEY_ID = 1, 2, 3, 11

N_INVALID_PAYLOAD_TYPE = 1
N_NO_PROPOSAL_CHOSEN_V1 = 14
N_AUTHENTICATION_FAILED_V1 = 24
N_INVALID_HASH_INFO = 23


@dataclass(frozen=True)
class V1Transform:
    encr: str  # "aes" | "3des"
    key_len: int  # bytes
    hash: str
    auth: int
    group: int
    life: int = 28800

    @property
    def block(self) -> int:
        return crypto.block_size(self.encr)

    def attrs(self) -> list[tuple[int, object]]:
        attrs = [(A_ENCR, ENCR_AES_V1 if self.encr == "aes" else ENCR_3DES_V1)]
        if self.encr == "aes":
            attrs.append((A_KEY_LEN, self.key_len * 8))
        hash_id = {v: k for k, v in HASH_IDS_V1.items()}[self.hash]
        attrs += [(A_HASH, hash_id), (A_AUTH, self.auth), (A_GROUP, self.group), (A_LIFE_TYPE, 1),
                  (A_LIFE_DUR, self.life)]
        return attrs

    @classmethod
    def from_attrs(cls, attrs) -> "V1Transform":
        d = dict(attrs)
        encr = {ENCR_AES_V1: "aes", ENCR_3DES_V1: "3des"}.get(d.get(A_ENCR))
        if encr is None:
            raise IkeError(f"unsupported phase-1 cipher {d.get(A_ENCR)}")
        key_len = d.get(A_KEY_LEN, 128) // 8 if encr == "aes" else 24
        if encr == "aes" and key_len not in (16, 24, 32):
            raise IkeError(f"unsupported AES key length {key_len * 8}")
        hash_name = HASH_IDS_V1.get(d.get(A_HASH))
        if hash_name is None or hash_name == "md5":
            raise IkeError(f"unsupported phase-1 hash {d.get(A_HASH)}")
        if d.get(A_GROUP) not in SUPPORTED_GROUPS:
            raise IkeError(f"unsupported DH group {d.get(A_GROUP)}")
        if d.get(A_AUTH) not in AUTH_NAMES_V1:
            raise IkeError(f"unsupported authentication method {d.get(A_AUTH)}")
        life = d.get(A_LIFE_DUR, 28800)
        if isinstance(life, bytes):
            life = int.from_bytes(life, "big")
        return cls(encr, key_len, hash_name, d[A_AUTH], d[A_GROUP], life)

    def describe(self) -> str:
        return (f"{self.encr}-{self.key_len * 8}/{self.hash}/group{self.group}/"
                f"{AUTH_NAMES_V1.get(self.auth, self.auth)}")


def v1_sa_body(transforms: list[V1Transform], spi: bytes = b"", protocol: int = PROTO_ISAKMP,
               transform_ids: Optional[list[int]] = None, attr_lists=None) -> bytes:
    """SA payload body (DOI IPsec, situation identity-only) with one proposal."""
    tpay = []
    items = attr_lists if attr_lists is not None else [t.attrs() for t in transforms]
    for i, attrs in enumerate(items):
        tid = transform_ids[i] if transform_ids else KEY_IKE
        tpay.append(Payload(P1_TRANSFORM, struct.pack("!BBH", i + 1, tid, 0) + encode_attrs(attrs)))
    _, tbytes = chain(tpay)
    prop = Payload(P1_PROPOSAL, struct.pack("!BBBB", 1, protocol, len(spi), len(tpay)) + spi + tbytes)
    return struct.pack("!II", 1, 1) + prop.raw(0)


@dataclass
class V1Proposal:
    number: int
    protocol: int
    spi: bytes
    transforms: list  # (transform number, transform id, attrs)


def v1_parse_sa(body: bytes) -> list[V1Proposal]:
    if len(body) < 8:
        raise IkeError("SA payload truncated")
    doi, _sit = struct.unpack("!II", body[:8])
    if doi != 1:
        raise IkeError(f"unsupported DOI {doi}")
    out = []
    for prop in unchain(P1_PROPOSAL, body[8:]):
        if len(prop.body) < 4:
            raise IkeError("proposal truncated")
        num, proto, spi_len, ntrans = struct.unpack("!BBBB", prop.body[:4])
        spi = prop.body[4:4 + spi_len]
        trans = []
        if ntrans:
            for t in unchain(P1_TRANSFORM, prop.body[4 + spi_len:]):
                tnum, tid = t.body[0], t.body[1]
                trans.append((tnum, tid, decode_attrs(t.body[4:])))
        out.append(V1Proposal(num, proto, spi, trans))
    return out


def v1_select_transform(proposals: list[V1Proposal], allowed_auth: tuple = (AUTH_PSK, AUTH_XAUTH_INIT_PSK)
                        ) -> tuple[Optional[V1Transform], Optional[tuple], list[str]]:
    """(transform, (tnum, tid, attrs) as offered, dump of everything offered)."""
    dump = []
    for prop in proposals:
        for tnum, tid, attrs in prop.transforms:
            try:
                t = V1Transform.from_attrs(attrs)
            except IkeError as exc:
                dump.append(f"#{tnum}: {dict(attrs)} ({exc})")
                continue
            dump.append(f"#{tnum}: {t.describe()}")
            if t.auth in allowed_auth:
                return t, (tnum, tid, attrs), dump
    return None, None, dump


def id_body(id_type: int, data: bytes, protocol: int = 17, port: int = 500) -> bytes:
    return struct.pack("!BBH", id_type, protocol, port) + data


def id_value(body: bytes) -> str:
    id_type, data = body[0], body[4:]
    if id_type == ID_IPV4_ADDR and len(data) == 4:
        return ".".join(str(b) for b in data)
    return data.decode("latin-1")


def v1_notify_body(msg_type: int, spi: bytes = b"", protocol: int = PROTO_ISAKMP, data: bytes = b"") -> bytes:
    return struct.pack("!IBBH", 1, protocol, len(spi), msg_type) + spi + data


def v1_parse_notify(body: bytes) -> tuple[int, bytes]:
    if len(body) < 8:
        raise IkeError("notify truncated")
    _doi, _proto, spi_len, mtype = struct.unpack("!IBBH", body[:8])
    return mtype, body[8 + spi_len:]


def prf(hash_name: str, key: bytes, data: bytes) -> bytes:
    return crypto.hmac_digest(hash_name, key, data)


@dataclass
class V1Keys:
    hash: str
    skeyid: bytes
    d: bytes
    a: bytes
    e: bytes
    enc_key: bytes


def v1_skeyid_psk(hash_name: str, psk: bytes, ni: bytes, nr: bytes) -> bytes:
    return prf(hash_name, psk, ni + nr)


def v1_skeyid_sig(hash_name: str, ni: bytes, nr: bytes, gxy: bytes) -> bytes:
    return prf(hash_name, ni + nr, gxy)


def v1_derive(t: V1Transform, skeyid: bytes, gxy: bytes, cky_i: bytes, cky_r: bytes) -> V1Keys:
    h = t.hash
    d = prf(h, skeyid, gxy + cky_i + cky_r + b"\x00")
    a = prf(h, skeyid, d + gxy + cky_i + cky_r + b"\x01")
    e = prf(h, skeyid, a + gxy + cky_i + cky_r + b"\x02")
    key = e
    if len(key) < t.key_len:
        k, key = prf(h, e, b"\x00"), b""
        while len(key) < t.key_len:
            key += k
            k = prf(h, e, k)
    return V1Keys(h, skeyid, d, a, e, key[:t.key_len])


def v1_phase1_iv(t: V1Transform, gxi: bytes, gxr: bytes) -> bytes:
    return crypto.digest(t.hash, gxi + gxr)[:t.block]


def v1_exchange_iv(t: V1Transform, last_phase1_block: bytes, msg_id: int) -> bytes:
    return crypto.digest(t.hash, last_phase1_block + struct.pack("!I", msg_id))[:t.block]


def v1_hash_i(keys: V1Keys, gxi, gxr, cky_i, cky_r, sai_b, idii_b) -> bytes:
    return prf(keys.hash, keys.skeyid, gxi + gxr + cky_i + cky_r + sai_b + idii_b)


def v1_hash_r(keys: V1Keys, gxi, gxr, cky_i, cky_r, sai_b, idir_b) -> bytes:
    return prf(keys.hash, keys.skeyid, gxr + gxi + cky_r + cky_i + sai_b + idir_b)


def v1_encrypt(t: V1Transform, key: bytes, iv: bytes, plaintext: bytes) -> tuple[bytes, bytes]:
    """(ciphertext, next IV).  Padding is zeros up to the block size."""
    bs = t.block
    padded = plaintext + b"\x00" * (-len(plaintext) % bs)
    ct = crypto.cbc_encrypt(t.encr, key, iv, padded)
    return ct, ct[-bs:]


def v1_decrypt(t: V1Transform, key: bytes, iv: bytes, ciphertext: bytes) -> tuple[bytes, bytes]:
    bs = t.block
    if not ciphertext or len(ciphertext) % bs:
        raise IkeError("encrypted ISAKMP body is not a whole number of blocks")
    return crypto.cbc_decrypt(t.encr, key, iv, ciphertext), ciphertext[-bs:]


def v1_message(header: Header, payloads: list[Payload]) -> bytes:
    first, body = chain(payloads)
    header.next_payload = first
    return header.encode(HEADER_LEN + len(body)) + body


def v1_encrypted_message(header: Header, payloads: list[Payload], t: V1Transform, key: bytes,
                         iv: bytes) -> tuple[bytes, bytes]:
    first, body = chain(payloads)
    header.next_payload = first
    header.flags |= FLAG_V1_ENCRYPTED
    ct, next_iv = v1_encrypt(t, key, iv, body)
    return header.encode(HEADER_LEN + len(ct)) + ct, next_iv


def v1_hash_payload_data(payloads: list[Payload]) -> bytes:
    """Payloads after HASH, with generic headers, as covered by HASH(1)/(2)."""
    return chain(payloads)[1]


def v1_keymat(keys: V1Keys, protocol: int, spi: bytes, ni_b: bytes, nr_b: bytes, n: int) -> bytes:
    seed = bytes([protocol]) + spi + ni_b + nr_b
    out, k = b"", b""
    while len(out) < n:
        k = prf(keys.hash, keys.d, k + seed)
        out += k
    return out[:n]


# IPsec DOI (phase 2) attributes
A2_LIFE_TYPE, A2_LIFE_DUR, A2_ENCAP, A2_AUTH, A2_KEY_LEN = 1, 2, 4, 5, 6
ESP_3DES_ID, ESP_AES_ID = 3, 12
ENCAP_TUNNEL, ENCAP_TRANSPORT, ENCAP_UDP_TUNNEL, ENCAP_UDP_TRANSPORT = 1, 2, 3, 4
ESP_AUTH_IDS = {2: "sha1", 5: "sha256"}


@dataclass(frozen=True)
class EspSuite:
    encr: str
    key_len: int
    integ: str
    encap: int = ENCAP_UDP_TRANSPORT

    @property
    def icv_len(self) -> int:
        return 12 if self.integ == "sha1" else 16

    @property
    def integ_key_len(self) -> int:
        return 20 if self.integ == "sha1" else 32

    def v1_attrs(self) -> list[tuple[int, object]]:
        attrs = [(A2_LIFE_TYPE, 1), (A2_LIFE_DUR, 3600), (A2_ENCAP, self.encap),
                 (A2_AUTH, {v: k for k, v in ESP_AUTH_IDS.items()}[self.integ])]
        if self.encr == "aes":
            attrs.append((A2_KEY_LEN, self.key_len * 8))
        return attrs

    @property
    def v1_transform_id(self) -> int:
        return ESP_AES_ID if self.encr == "aes" else ESP_3DES_ID

    @classmethod
    def from_v1(cls, tid: int, attrs) -> "EspSuite":
        d = dict(attrs)
        encr = {ESP_AES_ID: "aes", ESP_3DES_ID: "3des"}.get(tid)
        integ = ESP_AUTH_IDS.get(d.get(A2_AUTH))
        if encr is None or integ is None:
            raise IkeError(f"unsupported ESP transform id={tid} auth={d.get(A2_AUTH)}")
        key_len = d.get(A2_KEY_LEN, 128) // 8 if encr == "aes" else 24
        return cls(encr, key_len, integ, d.get(A2_ENCAP, ENCAP_UDP_TRANSPORT))

    def describe(self) -> str:
        return f"esp-{self.encr}{self.key_len * 8}-{self.integ}"


class EspSa:
    """One direction of an ESP security association."""

    def __init__(self, spi: bytes, suite: EspSuite, enc_key: bytes, auth_key: bytes):
        if len(spi) != 4:
            raise IkeError("ESP SPI must be 4 bytes")
        self.spi, self.suite = spi, suite
        self.enc_key, self.auth_key = enc_key, auth_key
        self.seq = 0

    @classmethod
    def from_keymat(cls, spi: bytes, suite: EspSuite, keymat: bytes) -> "EspSa":
        return cls(spi, suite, keymat[:suite.key_len], keymat[suite.key_len:suite.key_len + suite.integ_key_len])

    @staticmethod
    def keymat_len(suite: EspSuite) -> int:
        return suite.key_len + suite.integ_key_len

    def _icv(self, data: bytes) -> bytes:
        return crypto.hmac_digest(self.suite.integ, self.auth_key, data)[:self.suite.icv_len]

    def encrypt(self, next_header: int, payload: bytes, iv: bytes) -> bytes:
        bs = crypto.block_size(self.suite.encr)
        pad_len = -(len(payload) + 2) % bs
        plain = payload + bytes(range(1, pad_len + 1)) + bytes([pad_len, next_header])
        self.seq += 1
        head = self.spi + struct.pack("!I", self.seq) + iv
        body = head + crypto.cbc_encrypt(self.suite.encr, self.enc_key, iv, plain)
        return body + self._icv(body)

    def decrypt(self, packet: bytes) -> tuple[int, bytes]:
        bs = crypto.block_size(self.suite.encr)
        n = self.suite.icv_len
        if len(packet) < 8 + bs + bs + n or packet[:4] != self.spi:
            raise IkeError("ESP packet not for this SA")
        body, icv = packet[:-n], packet[-n:]
        if not crypto.constant_time_equal(icv, self._icv(body)):
            raise IkeError("ESP integrity check failed")
        iv, ct = body[8:8 + bs], body[8 + bs:]
        if len(ct) % bs:
            raise IkeError("ESP ciphertext not block aligned")
        plain = crypto.cbc_decrypt(self.suite.encr, self.enc_key, iv, ct)
        pad_len, nh = plain[-2], plain[-1]
        if pad_len + 2 > len(plain):
            raise IkeError("ESP padding length invalid")
        return nh, plain[:-(pad_len + 2)]


# mode config / XAUTH (Transaction exchange)
CFG_REQUEST, CFG_REPLY, CFG_SET, CFG_ACK = 1, 2, 3, 4
XAUTH_TYPE, XAUTH_USER_NAME, XAUTH_USER_PASSWORD, XAUTH_PASSCODE = 16520, 16521, 16522, 16523
XAUTH_MESSAGE, XAUTH_CHALLENGE, XAUTH_DOMAIN, XAUTH_STATUS = 16524, 16525, 16526, 16527
XAUTH_TYPE_GENERIC, XAUTH_TYPE_OTP = 0, 3


def cfg_attr_body(cfg_type: int, ident: int, attrs: list[tuple[int, object]]) -> bytes:
    return struct.pack("!BBH", cfg_type, 0, ident) + encode_attrs(attrs)


def parse_cfg_attr(body: bytes) -> tuple[int, int, dict]:
    if len(body) < 4:
        raise IkeError("attribute payload truncated")
    cfg_type, _, ident = struct.unpack("!BBH", body[:4])
    return cfg_type, ident, dict(decode_attrs(body[4:]))


# ================================================================ IKEv2

SA2, KE2, IDI2, IDR2, CERT2, CERTREQ2, AUTH2, NONCE2, N2, D2, V2, TSI2, TSR2, SK2, CP2, EAP2 = \
    33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47, 48

T_ENCR, T_PRF, T_INTEG, T_DH, T_ESN = 1, 2, 3, 4, 5
ENCR_3DES, ENCR_AES_CBC = 3, 12
PRF_IDS = {2: "sha1", 5: "sha256"}
INTEG_IDS = {2: ("sha1", 20, 12), 12: ("sha256", 32, 16)}
ATTR_KEY_LENGTH = 14

AUTH_RSA = 1
AUTH_SHARED_KEY = 2
ID2_FQDN = 2
ID2_RFC822 = 3
CERT_X509_SIG = 4

N2_UNSUPPORTED_CRITICAL = 1
N2_INVALID_SYNTAX = 7
N2_NO_PROPOSAL_CHOSEN = 14
N2_INVALID_KE = 17
N2_AUTHENTICATION_FAILED = 24
N2_TS_UNACCEPTABLE = 38
N2_NAT_DETECTION_SOURCE = 16388
N2_NAT_DETECTION_DEST = 16389

CFG2_REQUEST, CFG2_REPLY = 1, 2
CFG2_INTERNAL_IP4_ADDRESS = 1
CFG2_INTERNAL_IP4_DNS = 3

NOTIFY_NAMES = {1: "UNSUPPORTED_CRITICAL_PAYLOAD", 7: "INVALID_SYNTAX", 14: "NO_PROPOSAL_CHOSEN",
                17: "INVALID_KE_PAYLOAD", 24: "AUTHENTICATION_FAILED", 38: "TS_UNACCEPTABLE"}


@dataclass
class V2Proposal:
    number: int
    protocol: int
    spi: bytes
    transforms: list = field(default_factory=list)  # (type, id, key_len_bits | None)

    def encode(self, last: bool) -> bytes:
        tbytes = b""
        for i, (ttype, tid, klen) in enumerate(self.transforms):
            attrs = struct.pack("!HH", ATTR_KEY_LENGTH | 0x8000, klen) if klen else b""
            more = 0 if i == len(self.transforms) - 1 else 3
            tbytes += struct.pack("!BBHBBH", more, 0, 8 + len(attrs), ttype, 0, tid) + attrs
        body = struct.pack("!BBBB", self.number, self.protocol, len(self.spi), len(self.transforms)) + self.spi + tbytes
        return struct.pack("!BBH", 0 if last else 2, 0, 4 + len(body)) + body

    def describe(self) -> str:
        names = {T_ENCR: "encr", T_PRF: "prf", T_INTEG: "integ", T_DH: "dh", T_ESN: "esn"}
        parts = [f"{names.get(t, t)}={i}" + (f"/{k}" if k else "") for t, i, k in self.transforms]
        return f"proposal {self.number} proto {self.protocol}: " + ",".join(parts)


def v2_sa_body(proposals: list[V2Proposal]) -> bytes:
    return b"".join(p.encode(i == len(proposals) - 1) for i, p in enumerate(proposals))


def v2_parse_sa(body: bytes) -> list[V2Proposal]:
    out, off = [], 0
    while off < len(body):
        if off + 8 > len(body):
            raise IkeError("proposal truncated")
        more, _, plen = struct.unpack("!BBH", body[off:off + 4])
        if plen < 8 or off + plen > len(body):
            raise IkeError("proposal length invalid")
        p = body[off + 4:off + plen]
        num, proto, spi_len, ntrans = struct.unpack("!BBBB", p[:4])
        prop = V2Proposal(num, proto, p[4:4 + spi_len])
        toff = 4 + spi_len
        for _ in range(ntrans):
            if toff + 8 > len(p):
                raise IkeError("transform truncated")
            _m, _r, tlen, ttype, _r2, tid = struct.unpack("!BBHBBH", p[toff:toff + 8])
            klen = None
            for atype, val in decode_attrs(p[toff + 8:toff + tlen]):
                if atype == ATTR_KEY_LENGTH and isinstance(val, int):
                    klen = val
            prop.transforms.append((ttype, tid, klen))
            toff += tlen
        out.append(prop)
        off += plen
        if more == 0:
            break
    return out


@dataclass(frozen=True)
class V2Suite:
    encr: str
    key_len: int
    prf: str
    integ: str
    integ_key_len: int
    icv_len: int
    group: Optional[int]

    @property
    def block(self) -> int:
        return crypto.block_size(self.encr)

    @property
    def prf_len(self) -> int:
        return 20 if self.prf == "sha1" else 32


def v2_choose(prop: V2Proposal, need_dh: bool = True, need_prf: bool = True) -> Optional[tuple[V2Suite, V2Proposal]]:
    """First supported transform of each type; None when a type has none."""
    pick: dict[int, tuple] = {}
    for ttype, tid, klen in prop.transforms:
        if ttype in pick:
            continue
        if ttype == T_ENCR and tid == ENCR_AES_CBC and (klen or 128) in (128, 256):
            pick[ttype] = (ttype, tid, klen or 128)
        elif ttype == T_ENCR and tid == ENCR_3DES:
            pick[ttype] = (ttype, tid, None)
        elif ttype == T_PRF and tid in PRF_IDS:
            pick[ttype] = (ttype, tid, None)
        elif ttype == T_INTEG and tid in INTEG_IDS:
            pick[ttype] = (ttype, tid, None)
        elif ttype == T_DH and tid in SUPPORTED_GROUPS:
            pick[ttype] = (ttype, tid, None)
        elif ttype == T_ESN and tid == 0:
            pick[ttype] = (ttype, tid, None)
    needed = [T_ENCR, T_INTEG] + ([T_PRF] if need_prf else []) + ([T_DH] if need_dh else [])
    if any(t not in pick for t in needed):
        return None
    e = pick[T_ENCR]
    encr, key_len = ("aes", e[2] // 8) if e[1] == ENCR_AES_CBC else ("3des", 24)
    integ, ikl, icv = INTEG_IDS[pick[T_INTEG][1]]
    suite = V2Suite(encr, key_len, PRF_IDS[pick[T_PRF][1]] if need_prf else "sha1", integ, ikl, icv,
                    pick[T_DH][1] if need_dh else None)
    chosen = V2Proposal(prop.number, prop.protocol, prop.spi,
                        [pick[t] for t in (T_ENCR, T_PRF, T_INTEG, T_DH, T_ESN) if t in pick])
    return suite, chosen


def v2_ike_proposal(spi: bytes = b"", group: int = 14, aes_bits: int = 128, prf_id: int = 2,
                    integ_id: int = 2) -> V2Proposal:
    return V2Proposal(1, PROTO_ISAKMP, spi, [(T_ENCR, ENCR_AES_CBC, aes_bits), (T_PRF, prf_id, None),
                                             (T_INTEG, integ_id, None), (T_DH, group, None)])


def v2_esp_proposal(spi: bytes, aes_bits: int = 128, integ_id: int = 2) -> V2Proposal:
    return V2Proposal(1, PROTO_ESP, spi, [(T_ENCR, ENCR_AES_CBC, aes_bits), (T_INTEG, integ_id, None),
                                          (T_ESN, 0, None)])


def prf_plus(hash_name: str, key: bytes, seed: bytes, n: int) -> bytes:
    out, t, i = b"", b"", 1
    while len(out) < n:
        t = prf(hash_name, key, t + seed + bytes([i]))
        out += t
        i += 1
    return out[:n]


@dataclass
class V2Keys:
    sk_d: bytes
    sk_ai: bytes
    sk_ar: bytes
    sk_ei: bytes
    sk_er: bytes
    sk_pi: bytes
    sk_pr: bytes


def v2_derive(suite: V2Suite, ni: bytes, nr: bytes, gir: bytes, spi_i: bytes, spi_r: bytes) -> V2Keys:
    skeyseed = prf(suite.prf, ni + nr, gir)
    p, a, e = suite.prf_len, suite.integ_key_len, suite.key_len
    km = prf_plus(suite.prf, skeyseed, ni + nr + spi_i + spi_r, p + 2 * a + 2 * e + 2 * p)
    parts, off = [], 0
    for n in (p, a, a, e, e, p, p):
        parts.append(km[off:off + n])
        off += n
    return V2Keys(*parts)


def v2_sk_message(header: Header, inner: list[Payload], suite: V2Suite, ek: bytes, ak: bytes, iv: bytes) -> bytes:
    first, plain = chain(inner)
    bs = suite.block
    pad = -(len(plain) + 1) % bs
    ct = crypto.cbc_encrypt(suite.encr, ek, iv, plain + b"\x00" * pad + bytes([pad]))
    sk_len = 4 + len(iv) + len(ct) + suite.icv_len
    header.next_payload = SK2
    total = HEADER_LEN + sk_len
    data = header.encode(total) + struct.pack("!BBH", first, 0, sk_len) + iv + ct
    return data + prf(suite.integ, ak, data)[:suite.icv_len]


def v2_open_sk(message: bytes, suite: V2Suite, ek: bytes, ak: bytes) -> list[Payload]:
    h = Header.decode(message)
    if h.next_payload != SK2:
        return unchain(h.next_payload, message[HEADER_LEN:h.length])
    data = message[:h.length]
    body, icv = data[:-suite.icv_len], data[-suite.icv_len:]
    if not crypto.constant_time_equal(icv, prf(suite.integ, ak, body)[:suite.icv_len]):
        raise IkeError("IKEv2 integrity check failed")
    first = data[HEADER_LEN]
    bs = suite.block
    iv = body[HEADER_LEN + 4:HEADER_LEN + 4 + bs]
    ct = body[HEADER_LEN + 4 + bs:]
    if not ct or len(ct) % bs:
        raise IkeError("SK payload not block aligned")
    plain = crypto.cbc_decrypt(suite.encr, ek, iv, ct)
    pad = plain[-1]
    if pad + 1 > len(plain):
        raise IkeError("SK padding invalid")
    return unchain(first, plain[:-(pad + 1)])


def v2_plain_message(header: Header, payloads: list[Payload]) -> bytes:
    first, body = chain(payloads)
    header.next_payload = first
    return header.encode(HEADER_LEN + len(body)) + body


def v2_notify_body(mtype: int, protocol: int = 0, spi: bytes = b"", data: bytes = b"") -> bytes:
    return struct.pack("!BBH", protocol, len(spi), mtype) + spi + data


def v2_parse_notify(body: bytes) -> tuple[int, bytes]:
    if len(body) < 4:
        raise IkeError("notify truncated")
    _proto, spi_len, mtype = struct.unpack("!BBH", body[:4])
    return mtype, body[4 + spi_len:]


def v2_id_body(id_type: int, value: bytes) -> bytes:
    return struct.pack("!BBH", id_type, 0, 0) + value


def v2_signed_octets(real_message: bytes, peer_nonce: bytes, prf_name: str, sk_p: bytes, id_body_: bytes) -> bytes:
    return real_message + peer_nonce + prf(prf_name, sk_p, id_body_)


def v2_auth_body(method: int, data: bytes) -> bytes:
    return struct.pack("!BBH", method, 0, 0) + data


def v2_psk_auth(prf_name: str, secret: bytes, signed_octets: bytes) -> bytes:
    return prf(prf_name, prf(prf_name, secret, b"Key Pad for IKEv2"), signed_octets)


def v2_ts_body(start: str = "0.0.0.0", end: str = "255.255.255.255") -> bytes:
    sel = struct.pack("!BBHHH", 7, 0, 16, 0, 65535) + ipaddress.IPv4Address(start).packed + \
        ipaddress.IPv4Address(end).packed
    return struct.pack("!BBH", 1, 0, 0) + sel


def v2_child_keymat(suite: V2Suite, prf_name: str, sk_d: bytes, ni: bytes, nr: bytes) -> tuple[bytes, bytes]:
    """(initiator-to-responder, responder-to-initiator) ESP key material."""
    n = suite.key_len + suite.integ_key_len
    km = prf_plus(prf_name, sk_d, ni + nr, 2 * n)
    return km[:n], km[n:]


def esp_suite_from_v2(suite: V2Suite, encap: int = ENCAP_UDP_TUNNEL) -> EspSuite:
    return EspSuite(suite.encr, suite.key_len, suite.integ, encap)


# EAP
EAP_REQUEST, EAP_RESPONSE, EAP_SUCCESS, EAP_FAILURE = 1, 2, 3, 4
EAP_IDENTITY = 1
EAP_NAK = 3
EAP_MSCHAPV2 = 26
MSCHAPV2_CHALLENGE, MSCHAPV2_RESPONSE, MSCHAPV2_SUCCESS, MSCHAPV2_FAILURE = 1, 2, 3, 4


def eap_packet(code: int, ident: int, eap_type: Optional[int] = None, data: bytes = b"") -> bytes:
    body = (bytes([eap_type]) if eap_type is not None else b"") + data
    return struct.pack("!BBH", code, ident, 4 + len(body)) + body


def parse_eap(body: bytes) -> tuple[int, int, Optional[int], bytes]:
    if len(body) < 4:
        raise IkeError("EAP packet truncated")
    code, ident, length = struct.unpack("!BBH", body[:4])
    if length > len(body) or length < 4:
        raise IkeError("EAP length invalid")
    if code in (EAP_REQUEST, EAP_RESPONSE) and length > 4:
        return code, ident, body[4], body[5:length]
    return code, ident, None, b""


# ---------------------------------------------------------------- UDP channel


class IkeChannel:
    """One UDP socket carrying IKE (marker-prefixed) and ESP to one peer.

    With ``peer=None`` the first sender becomes the peer; datagrams from
    anyone else are dropped afterwards.
    """

    def __init__(self, sock, peer: Optional[tuple] = None):
        self.sock = sock
        self.peer = peer
        self.dropped = 0

    def send_ike(self, message: bytes) -> None:
        self.sock.sendto(frame_ike(message), self.peer)

    def send_esp(self, packet: bytes) -> None:
        self.sock.sendto(packet, self.peer)

    def recv(self, timeout: float) -> Optional[tuple[str, bytes]]:
        deadline = time.monotonic() + timeout
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                return None
            r, _, _ = select.select([self.sock], [], [], left)
            if not r:
                return None
            data, addr = self.sock.recvfrom(65535)
            if self.peer is None:
                self.peer = addr
            elif addr != self.peer:
                self.dropped += 1
                continue
            try:
                kind, body = classify_datagram(data)
            except IkeError:
                self.dropped += 1
                continue
            if kind == "keepalive":
                continue
            return kind, body
