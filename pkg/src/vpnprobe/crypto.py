"""Cryptographic primitives used by the protocol code.

Everything that touches raw ciphers, digests or group arithmetic goes through
this module so protocol logic can be tested against published vectors.
"""

from __future__ import annotations

import hashlib
import hmac
import struct

from cryptography.hazmat.decrepit.ciphers.algorithms import ARC4, TripleDES
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

# ---------------------------------------------------------------- digests


def _rol(x: int, n: int) -> int:
    x &= 0xFFFFFFFF
    return ((x << n) | (x >> (32 - n))) & 0xFFFFFFFF


def _md4_f(x, y, z):
    return (x & y) | (~x & z)


def _md4_g(x, y, z):
    return (x & y) | (x & z) | (y & z)


def _md4_h(x, y, z):
    return x ^ y ^ z


_MD4_ROUNDS = (
    (_md4_f, 0, tuple(range(16)), (3, 7, 11, 19)),
    (_md4_g, 0x5A827999, tuple((i % 4) * 4 + i // 4 for i in range(16)), (3, 5, 9, 13)),
    (_md4_h, 0x6ED9EBA1, (0, 8, 4, 12, 2, 10, 6, 14, 1, 9, 5, 13, 3, 11, 7, 15), (3, 9, 11, 15)),
)


def md4(data: bytes) -> bytes:
    """MD4 digest (RFC 1320); OpenSSL 3 no longer ships it by default."""
    msg = bytearray(data)
    bit_len = (8 * len(data)) & 0xFFFFFFFFFFFFFFFF
    msg.append(0x80)
    while len(msg) % 64 != 56:
        msg.append(0)
    msg += struct.pack("<Q", bit_len)

    state = [0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476]
    for off in range(0, len(msg), 64):
        x = struct.unpack("<16I", msg[off:off + 64])
        a, b, c, d = state
        for fn, const, order, shifts in _MD4_ROUNDS:
            for i in range(16):
                s = shifts[i % 4]
                k = x[order[i]]
                # registers rotate a,d,c,b through the 4-step cycle
                if i % 4 == 0:
                    a = _rol(a + fn(b, c, d) + k + const, s)
                elif i % 4 == 1:
                    d = _rol(d + fn(a, b, c) + k + const, s)
                elif i % 4 == 2:
                    c = _rol(c + fn(d, a, b) + k + const, s)
                else:
                    b = _rol(b + fn(c, d, a) + k + const, s)
        state = [(v + w) & 0xFFFFFFFF for v, w in zip(state, (a, b, c, d))]
    return struct.pack("<4I", *state)


def sha1(*parts: bytes) -> bytes:
    h = hashlib.sha1()
    for p in parts:
        h.update(p)
    return h.digest()


def md5(*parts: bytes) -> bytes:
    h = hashlib.md5()
    for p in parts:
        h.update(p)
    return h.digest()


def digest(name: str, data: bytes) -> bytes:
    return hashlib.new(name, data).digest()


def hmac_digest(name: str, key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, name).digest()


def constant_time_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


# ---------------------------------------------------------------- ciphers


def expand_des_key(key7: bytes) -> bytes:
    """Spread 56 key bits over 8 bytes; the low bit of each byte is odd parity."""
    if len(key7) != 7:
        raise ValueError("DES key material must be 7 bytes")
    bits = int.from_bytes(key7, "big")
    out = bytearray()
    for i in range(8):
        b = ((bits >> (49 - 7 * i)) & 0x7F) << 1
        out.append(b | (bin(b).count("1") + 1) % 2)
    return bytes(out)


def des_encrypt_block(key7: bytes, block: bytes) -> bytes:
    # 3DES with K1=K2=K3 is single DES
    enc = Cipher(TripleDES(expand_des_key(key7) * 3), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


class Rc4:
    """Keyed RC4 keystream; successive calls continue the stream."""

    def __init__(self, key: bytes):
        self._ctx = Cipher(ARC4(key), mode=None).encryptor()

    def process(self, data: bytes) -> bytes:
        return self._ctx.update(data)


def rc4(key: bytes, data: bytes) -> bytes:
    return Rc4(key).process(data)


def _block_cipher(name: str, key: bytes):
    if name == "aes":
        return algorithms.AES(key)
    if name == "3des":
        return TripleDES(key)
    raise ValueError(f"unsupported cipher {name!r}")


def cbc_encrypt(name: str, key: bytes, iv: bytes, data: bytes) -> bytes:
    enc = Cipher(_block_cipher(name, key), modes.CBC(iv)).encryptor()
    return enc.update(data) + enc.finalize()


def cbc_decrypt(name: str, key: bytes, iv: bytes, data: bytes) -> bytes:
    dec = Cipher(_block_cipher(name, key), modes.CBC(iv)).decryptor()
    return dec.update(data) + dec.finalize()


def block_size(name: str) -> int:
    return 16 if name == "aes" else 8


# ---------------------------------------------------------------- Diffie-Hellman

MODP_PRIMES = {
    2: int((
        "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
        "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
        "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
        "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE65381FFFFFFFFFFFFFFFF"
    ), 16),
    14: int((
        "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
        "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
        "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
        "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
        "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
        "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
        "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
        "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF"
    ), 16),
}
MODP_GENERATOR = 2
# short private exponents: twice the groups' security strength
DH_EXPONENT_BITS = 256


def dh_group_bytes(group: int) -> int:
    return (MODP_PRIMES[group].bit_length() + 7) // 8


def dh_public(group: int, private: int) -> bytes:
    return pow(MODP_GENERATOR, private, MODP_PRIMES[group]).to_bytes(dh_group_bytes(group), "big")


def dh_shared(group: int, private: int, peer_public: bytes) -> bytes:
    p = MODP_PRIMES[group]
    y = int.from_bytes(peer_public, "big")
    if not 1 < y < p - 1:
        raise ValueError("peer DH value out of range")
    return pow(y, private, p).to_bytes(dh_group_bytes(group), "big")


class DhKeyPair:
    def __init__(self, group: int, rng):
        if group not in MODP_PRIMES:
            raise ValueError(f"unsupported DH group {group}")
        self.group = group
        self.private = int.from_bytes(rng.bytes(DH_EXPONENT_BITS // 8), "big") | (1 << (DH_EXPONENT_BITS - 1))
        self.public = dh_public(group, self.private)

    def shared(self, peer_public: bytes) -> bytes:
        return dh_shared(self.group, self.private, peer_public)
