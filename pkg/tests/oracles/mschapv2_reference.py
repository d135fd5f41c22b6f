"""Independent MS-CHAPv2 / MPPE reference computation.

Uses pycryptodome's MD4 and DES (not the package's own primitives) so the
frozen vectors in the test suite are checked by a separate code path.
Run directly to print the vectors.
"""

import hashlib

from Crypto.Cipher import DES
from Crypto.Hash import MD4

USER = b"User"
PASSWORD = "clientPass"
AUTH_CHALLENGE = bytes.fromhex("5B5D7C7D7B3F2F3E3C2C602132262628")
PEER_CHALLENGE = bytes.fromhex("21402324255E262A28295F2B3A337C7E")

SHS_PAD1 = b"\x00" * 40
SHS_PAD2 = b"\xf2" * 40
MAGIC1 = b"This is the MPPE Master Key"
MAGIC2 = (b"On the client side, this is the send key; "
          b"on the server side, it is the receive key.")
MAGIC3 = (b"On the client side, this is the receive key; "
          b"on the server side, it is the send key.")


def md4(data):
    return MD4.new(data).digest()


def des_key(seven):
    bits = int.from_bytes(seven, "big")
    out = bytearray()
    for i in range(8):
        b = ((bits >> (49 - 7 * i)) & 0x7F) << 1
        out.append(b | (bin(b).count("1") % 2 == 0))
    return bytes(out)


def nt_response(auth_c, peer_c, user, password):
    challenge = hashlib.sha1(peer_c + auth_c + user).digest()[:8]
    ph = md4(password.encode("utf-16-le")) + b"\x00" * 5
    return b"".join(DES.new(des_key(ph[i:i + 7]), DES.MODE_ECB).encrypt(challenge)
                    for i in (0, 7, 14))


def authenticator_response(password, nt_resp, peer_c, auth_c, user):
    m1 = bytes.fromhex("4D616769632073657276657220746F20636C69656E74207369676E696E6720636F6E7374616E74")
    m2 = bytes.fromhex("50616420746F206D616B6520697420646F206D6F7265207468616E206F6E6520697465726174696F6E")
    hh = md4(md4(password.encode("utf-16-le")))
    d = hashlib.sha1(hh + nt_resp + m1).digest()
    challenge = hashlib.sha1(peer_c + auth_c + user).digest()[:8]
    d = hashlib.sha1(d + challenge + m2).digest()
    return "S=" + d.hex().upper()


def master_key(password, nt_resp):
    hh = md4(md4(password.encode("utf-16-le")))
    return hashlib.sha1(hh + nt_resp + MAGIC1).digest()[:16]


def start_key(mk, length, is_send, is_server):
    s = MAGIC3 if is_send == is_server else MAGIC2
    return hashlib.sha1(mk + SHS_PAD1 + s + SHS_PAD2).digest()[:length]


def new_key(start, session, length):
    return hashlib.sha1(start[:length] + SHS_PAD1 + session[:length] + SHS_PAD2).digest()[:length]


def main():
    nt = nt_response(AUTH_CHALLENGE, PEER_CHALLENGE, USER, PASSWORD)
    print("password_hash", md4(PASSWORD.encode("utf-16-le")).hex().upper())
    print("password_hash_hash", md4(md4(PASSWORD.encode("utf-16-le"))).hex().upper())
    print("nt_response", nt.hex().upper())
    print("auth_response", authenticator_response(PASSWORD, nt, PEER_CHALLENGE, AUTH_CHALLENGE, USER))
    mk = master_key(PASSWORD, nt)
    print("master_key", mk.hex().upper())
    # published sample keys are the server-side send keys
    for bits, length in ((128, 16), (56, 8), (40, 8)):
        sk = start_key(mk, length, is_send=True, is_server=True)
        sess = bytearray(new_key(sk, sk, length))
        if bits == 40:
            sess[:3] = b"\xd1\x26\x9e"
        elif bits == 56:
            sess[:1] = b"\xd1"
        print(f"send_start_key{bits}", sk.hex().upper(), f"send_session_key{bits}", bytes(sess).hex().upper())


if __name__ == "__main__":
    main()
