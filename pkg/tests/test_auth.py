import pytest
from hypothesis import given, settings, strategies as st

from vpnprobe import auth
from vpnprobe.core import Credentials

# RFC 2759 section 9.2 / RFC 3079 section 3.5.1 sample values, re-derived by
# tests/oracles/mschapv2_reference.py (pycryptodome MD4/DES path).
USER = "User"
PASSWORD = "clientPass"
AUTH_CHALLENGE = bytes.fromhex("5B5D7C7D7B3F2F3E3C2C602132262628")
PEER_CHALLENGE = bytes.fromhex("21402324255E262A28295F2B3A337C7E")
PASSWORD_HASH = bytes.fromhex("44EBBA8D5312B8D611474411F56989AE")
NT_RESPONSE = bytes.fromhex("82309ECD8D708B5EA08FAA3981CD83544233114A3D85D6DF")
AUTH_RESPONSE = "S=407A5589115FD0D6209F510FE9C04566932CDA56"
MASTER_KEY = bytes.fromhex("FDECE3717A8C838CB388E527AE3CDD31")
SEND_START_128 = bytes.fromhex("8B7CDC149B993A1BA118CB153F56DCCB")
SEND_SESSION_128 = bytes.fromhex("405CB2247A7956E6E211007AE27B22D4")
SEND_SESSION_56 = bytes.fromhex("D15C00C49FA62E3E")
SEND_SESSION_40 = bytes.fromhex("D1269EC49FA62E3E")


def test_password_hash():
    assert auth.nt_password_hash(PASSWORD) == PASSWORD_HASH


def test_nt_response_reference_vector():
    assert auth.nt_response(AUTH_CHALLENGE, PEER_CHALLENGE, USER, PASSWORD) == NT_RESPONSE


def test_nt_response_deterministic():
    a = auth.nt_response(AUTH_CHALLENGE, PEER_CHALLENGE, USER, PASSWORD)
    assert a == auth.nt_response(AUTH_CHALLENGE, PEER_CHALLENGE, USER, PASSWORD)


@pytest.mark.parametrize("which", ["auth", "peer"])
@pytest.mark.parametrize("bit", [0, 7, 64, 127])
def test_nt_response_bit_flip_changes_output(which, bit):
    flipped = bytearray(AUTH_CHALLENGE if which == "auth" else PEER_CHALLENGE)
    flipped[bit // 8] ^= 1 << (bit % 8)
    if which == "auth":
        out = auth.nt_response(bytes(flipped), PEER_CHALLENGE, USER, PASSWORD)
    else:
        out = auth.nt_response(AUTH_CHALLENGE, bytes(flipped), USER, PASSWORD)
    assert out != NT_RESPONSE


@pytest.mark.parametrize("n", [0, 15, 17])
def test_nt_response_rejects_bad_challenge_length(n):
    with pytest.raises(auth.AuthError):
        auth.nt_response(b"\x00" * n, PEER_CHALLENGE, USER, PASSWORD)


def test_authenticator_response_reference_vector():
    got = auth.authenticator_response(PASSWORD, NT_RESPONSE, PEER_CHALLENGE, AUTH_CHALLENGE, USER)
    assert got == AUTH_RESPONSE
    assert len(got) == 42


def test_authenticator_response_rejects_malformed():
    with pytest.raises(auth.AuthError):
        auth.authenticator_response(PASSWORD, NT_RESPONSE[:20], PEER_CHALLENGE, AUTH_CHALLENGE, USER)


def test_verify_authenticator_round_trip():
    assert auth.verify_authenticator_response(AUTH_RESPONSE, PASSWORD, NT_RESPONSE,
                                              PEER_CHALLENGE, AUTH_CHALLENGE, USER)
    assert not auth.verify_authenticator_response(AUTH_RESPONSE, "clientPasz", NT_RESPONSE,
                                                  PEER_CHALLENGE, AUTH_CHALLENGE, USER)


@settings(max_examples=40, deadline=None)
@given(st.text(min_size=1, max_size=20), st.text(min_size=1, max_size=20),
       st.binary(min_size=16, max_size=16), st.binary(min_size=16, max_size=16))
def test_authenticator_verification_accepts_iff_passwords_match(pw, other, ac, pc):
    nt = auth.nt_response(ac, pc, "u", pw)
    s = auth.authenticator_response(pw, nt, pc, ac, "u")
    assert auth.verify_authenticator_response(s, other, nt, pc, ac, "u") == (
        auth.nt_password_hash(pw) == auth.nt_password_hash(other))


def test_master_and_128_bit_keys_reference_vector():
    assert auth.master_key(PASSWORD, NT_RESPONSE) == MASTER_KEY
    keys = auth.derive_mppe_keys(PASSWORD, NT_RESPONSE, 128, is_server=True)
    assert keys.send_start == SEND_START_128
    assert keys.send_key == SEND_SESSION_128
    assert keys.send_key != keys.recv_key


def test_client_and_server_keys_mirror():
    srv = auth.derive_mppe_keys(PASSWORD, NT_RESPONSE, 128, is_server=True)
    cli = auth.derive_mppe_keys(PASSWORD, NT_RESPONSE, 128, is_server=False)
    assert srv.send_key == cli.recv_key and srv.recv_key == cli.send_key


@pytest.mark.parametrize("strength,expected", [(40, SEND_SESSION_40), (56, SEND_SESSION_56)])
def test_reduced_strength_keys(strength, expected):
    keys = auth.derive_mppe_keys(PASSWORD, NT_RESPONSE, strength, is_server=True)
    assert keys.send_key == expected
    assert len(keys.send_key) == 8
    assert keys.send_key.startswith(auth.MPPE_SALT[strength])


def test_unsupported_strength():
    with pytest.raises(auth.AuthError):
        auth.derive_mppe_keys(PASSWORD, NT_RESPONSE, 64)


def test_mppe_stateless_round_trip():
    srv = auth.derive_mppe_keys(PASSWORD, NT_RESPONSE, 128, is_server=True)
    cli = auth.derive_mppe_keys(PASSWORD, NT_RESPONSE, 128, is_server=False)
    c_send, _ = auth.mppe_ciphers(cli)
    _, s_recv = auth.mppe_ciphers(srv)
    packets = [c_send.encrypt(0x0021, bytes([i]) * 30) for i in range(5)]
    # stateless: any order decrypts
    for i in (3, 0, 4, 1, 2):
        assert s_recv.decrypt(packets[i]) == (0x0021, bytes([i]) * 30)
    assert packets[0][2:] != packets[1][2:]


def test_pap_extract():
    assert auth.pap_extract(auth.pap_request(1, "alice", "s3cret")) == Credentials("alice", "s3cret")


def test_pap_extract_empty_password():
    assert auth.pap_extract(auth.pap_request(7, "alice", "")) == Credentials("alice", "")


@pytest.mark.parametrize("cut", [3, 6, 9])
def test_pap_extract_truncated(cut):
    frame = auth.pap_request(1, "alice", "s3cret")
    with pytest.raises(auth.FrameError):
        auth.pap_extract(frame[:cut])


def test_exchange_type_validates_lengths():
    ex = auth.MsChapV2Exchange(AUTH_CHALLENGE, PEER_CHALLENGE, USER, NT_RESPONSE, AUTH_RESPONSE)
    assert "nt_response" in ex.evidence()
    with pytest.raises(auth.AuthError):
        auth.MsChapV2Exchange(AUTH_CHALLENGE, PEER_CHALLENGE, USER, NT_RESPONSE, AUTH_RESPONSE.lower())
