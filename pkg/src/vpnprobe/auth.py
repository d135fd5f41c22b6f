"""PPP authentication primitives (PAP, CHAP-MD5, MS-CHAPv2) and MPPE keying.

MS-CHAPv2 follows RFC 2759, MPPE key derivation RFC 3079.  All functions
are pure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from . import crypto
from .core import Credentials

SHS_PAD1 = b"\x00" * 40
SHS_PAD2 = b"\xf2" * 40

_AUTH_MAGIC1 = b"Magic server to client signing constant"
_AUTH_MAGIC2 = b"Pad to make it do more than one iteration"
_MASTER_MAGIC = b"This is the MPPE Master Key"
_CLIENT_SEND_MAGIC = (b"On the client side, this is the send key; "
                      b"on the server side, it is the receive key.")
_CLIENT_RECV_MAGIC = (b"On the client side, this is the receive key; "
                      b"on the server side, it is the send key.")

MPPE_SALT = {40: b"\xd1\x26\x9e", 56: b"\xd1", 128: b""}
MPPE_KEY_LEN = {40: 8, 56: 8, 128: 16}


class AuthError(ValueError):
    pass


class FrameError(ValueError):
    """Malformed authentication packet."""


def _check_len(name: str, value: bytes, n: int) -> None:
    if len(value) != n:
        raise AuthError(f"{name} must be {n} bytes, got {len(value)}")


def _username_bytes(username) -> bytes:
    # RFC 2759: the user name is used without any domain prefix handling here
    return username.encode("utf-8") if isinstance(username, str) else bytes(username)


def nt_password_hash(password: str) -> bytes:
    return crypto.md4(password.encode("utf-16-le"))


def challenge_hash(peer_challenge: bytes, auth_challenge: bytes, username) -> bytes:
    return crypto.sha1(peer_challenge, auth_challenge, _username_bytes(username))[:8]


def challenge_response(challenge: bytes, password_hash: bytes) -> bytes:
    z = password_hash + b"\x00" * (21 - len(password_hash))
    return b"".join(crypto.des_encrypt_block(z[i:i + 7], challenge) for i in (0, 7, 14))


def nt_response(auth_challenge: bytes, peer_challenge: bytes, username, password: str) -> bytes:
    _check_len("authenticator challenge", auth_challenge, 16)
    _check_len("peer challenge", peer_challenge, 16)
    challenge = challenge_hash(peer_challenge, auth_challenge, username)
    return challenge_response(challenge, nt_password_hash(password))


def authenticator_response(password: str, nt_resp: bytes, peer_challenge: bytes,
                           auth_challenge: bytes, username) -> str:
    _check_len("NT-Response", nt_resp, 24)
    _check_len("peer challenge", peer_challenge, 16)
    _check_len("authenticator challenge", auth_challenge, 16)
    hash_hash = crypto.md4(nt_password_hash(password))
    digest = crypto.sha1(hash_hash, nt_resp, _AUTH_MAGIC1)
    challenge = challenge_hash(peer_challenge, auth_challenge, username)
    digest = crypto.sha1(digest, challenge, _AUTH_MAGIC2)
    return "S=" + digest.hex().upper()


def verify_authenticator_response(expected: str, password: str, nt_resp: bytes,
                                  peer_challenge: bytes, auth_challenge: bytes, username) -> bool:
    """Client-side check of the server's "S=" string."""
    if len(expected) != 42 or not expected.startswith("S="):
        return False
    ours = authenticator_response(password, nt_resp, peer_challenge, auth_challenge, username)
    return crypto.constant_time_equal(ours.encode(), expected.upper().encode())


def check_nt_response(nt_resp: bytes, auth_challenge: bytes, peer_challenge: bytes,
                      username, password: str) -> bool:
    expected = nt_response(auth_challenge, peer_challenge, username, password)
    return crypto.constant_time_equal(expected, nt_resp)


@dataclass(frozen=True)
class MsChapV2Exchange:
    authenticator_challenge: bytes
    peer_challenge: bytes
    username: str
    nt_response: bytes
    authenticator_response: str = ""

    def __post_init__(self):
        _check_len("authenticator challenge", self.authenticator_challenge, 16)
        _check_len("peer challenge", self.peer_challenge, 16)
        _check_len("NT-Response", self.nt_response, 24)
        ar = self.authenticator_response
        if ar and (len(ar) != 42 or not ar.startswith("S=") or ar[2:] != ar[2:].upper()):
            raise AuthError("authenticator response must be 'S=' followed by 40 uppercase hex digits")

    def evidence(self) -> str:
        return (f"user={self.username!r} auth_challenge={self.authenticator_challenge.hex()} "
                f"peer_challenge={self.peer_challenge.hex()} nt_response={self.nt_response.hex()}")


# ---------------------------------------------------------------- MPPE keys


def master_key(password: str, nt_resp: bytes) -> bytes:
    hash_hash = crypto.md4(nt_password_hash(password))
    return crypto.sha1(hash_hash, nt_resp, _MASTER_MAGIC)[:16]


def asymmetric_start_key(master: bytes, length: int, is_send: bool, is_server: bool) -> bytes:
    magic = _CLIENT_RECV_MAGIC if is_send == is_server else _CLIENT_SEND_MAGIC
    return crypto.sha1(master, SHS_PAD1, magic, SHS_PAD2)[:length]


def new_key_from_sha(start_key: bytes, session_key: bytes, length: int) -> bytes:
    return crypto.sha1(start_key[:length], SHS_PAD1, session_key[:length], SHS_PAD2)[:length]


def reduce_key(key: bytes, strength: int) -> bytes:
    salt = MPPE_SALT[strength]
    return salt + key[len(salt):]


@dataclass(frozen=True)
class MppeKeySet:
    """Keys for one endpoint.  ``send_start``/``recv_start`` are the 16-byte
    asymmetric start keys (also the SSTP higher-layer key material)."""

    send_key: bytes
    recv_key: bytes
    strength: int
    send_start: bytes
    recv_start: bytes

    def __post_init__(self):
        if self.strength not in MPPE_KEY_LEN:
            raise AuthError(f"unsupported MPPE strength {self.strength}")
        n = MPPE_KEY_LEN[self.strength]
        if len(self.send_key) != n or len(self.recv_key) != n:
            raise AuthError("session key length does not match strength")
        if self.strength == 128 and self.send_key == self.recv_key:
            raise AuthError("128-bit send and receive keys must differ")


def derive_mppe_keys(password: str, nt_resp: bytes, strength: int = 128,
                     is_server: bool = True) -> MppeKeySet:
    if strength not in MPPE_KEY_LEN:
        raise AuthError(f"unsupported MPPE strength {strength}; use 40, 56 or 128")
    _check_len("NT-Response", nt_resp, 24)
    n = MPPE_KEY_LEN[strength]
    mk = master_key(password, nt_resp)
    keys = {}
    for direction, is_send in (("send", True), ("recv", False)):
        start = asymmetric_start_key(mk, 16, is_send, is_server)
        session = reduce_key(new_key_from_sha(start, start, n), strength)
        keys[direction] = (start, session)
    return MppeKeySet(send_key=keys["send"][1], recv_key=keys["recv"][1], strength=strength,
                      send_start=keys["send"][0], recv_start=keys["recv"][0])


MPPE_FLAG_FLUSHED = 0x8000  # A bit
MPPE_FLAG_ENCRYPTED = 0x1000  # D bit
MPPE_COUNT_MASK = 0x0FFF


class MppeStatelessCipher:
    """One direction of a stateless-mode MPPE stream.

    The key for coherency count ``n`` is the initial session key rekeyed ``n``
    times, so either end can process any packet independently.
    """

    def __init__(self, start_key: bytes, session_key: bytes, strength: int):
        self.strength = strength
        self.length = MPPE_KEY_LEN[strength]
        self.start_key = start_key[:self.length]
        self._keys = [session_key]
        self.count = 0

    def _rekey(self, key: bytes) -> bytes:
        interim = new_key_from_sha(self.start_key, key, self.length)
        return reduce_key(crypto.rc4(interim, interim), self.strength)

    def key_for(self, count: int) -> bytes:
        # counts wrap at 4096; packets are processed near-in-order
        while len(self._keys) <= count:
            self._keys.append(self._rekey(self._keys[-1]))
        return self._keys[count]

    def encrypt(self, protocol: int, payload: bytes) -> bytes:
        count = self.count
        self.count = (self.count + 1) & MPPE_COUNT_MASK
        body = crypto.rc4(self.key_for(count), struct.pack("!H", protocol) + payload)
        return struct.pack("!H", MPPE_FLAG_FLUSHED | MPPE_FLAG_ENCRYPTED | count) + body

    def decrypt(self, packet: bytes) -> tuple[int, bytes]:
        if len(packet) < 4:
            raise FrameError("MPPE packet too short")
        (hdr,) = struct.unpack("!H", packet[:2])
        if not hdr & MPPE_FLAG_ENCRYPTED:
            raise FrameError("MPPE packet not marked encrypted")
        plain = crypto.rc4(self.key_for(hdr & MPPE_COUNT_MASK), packet[2:])
        (protocol,) = struct.unpack("!H", plain[:2])
        return protocol, plain[2:]


def mppe_ciphers(keys: MppeKeySet) -> tuple[MppeStatelessCipher, MppeStatelessCipher]:
    """(sender, receiver) for the endpoint that owns ``keys``."""
    return (MppeStatelessCipher(keys.send_start, keys.send_key, keys.strength),
            MppeStatelessCipher(keys.recv_start, keys.recv_key, keys.strength))


# ---------------------------------------------------------------- PAP / CHAP

PAP_AUTH_REQUEST = 1
PAP_AUTH_ACK = 2
PAP_AUTH_NAK = 3


def pap_request(ident: int, username: str, password: str) -> bytes:
    u, p = username.encode(), password.encode()
    body = bytes([len(u)]) + u + bytes([len(p)]) + p
    return struct.pack("!BBH", PAP_AUTH_REQUEST, ident, 4 + len(body)) + body


def pap_extract(frame: bytes) -> Credentials:
    """Plaintext credentials from a PAP Authenticate-Request packet."""
    if len(frame) < 6:
        raise FrameError("PAP frame truncated")
    code, _ident, length = struct.unpack("!BBH", frame[:4])
    if code != PAP_AUTH_REQUEST:
        raise FrameError(f"not a PAP Authenticate-Request (code {code})")
    if length > len(frame) or length < 6:
        raise FrameError("PAP length field exceeds frame")
    body = frame[4:length]
    ulen = body[0]
    if 1 + ulen >= len(body):
        raise FrameError("PAP peer-id truncated")
    user = body[1:1 + ulen]
    plen = body[1 + ulen]
    if 2 + ulen + plen > len(body):
        raise FrameError("PAP password truncated")
    pw = body[2 + ulen:2 + ulen + plen]
    return Credentials(user.decode("utf-8", "replace"), pw.decode("utf-8", "replace"))


def chap_md5_response(ident: int, secret: str, challenge: bytes) -> bytes:
    return crypto.md5(bytes([ident]), secret.encode("utf-8"), challenge)
