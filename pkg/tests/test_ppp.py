"""PPP engine against the independent client state machine, in memory."""

import pytest

from vpnprobe import auth, packets, ppp
from vpnprobe.core import Credentials, Randomness, Transcript
from vpnprobe.ppp import AuthMethod, CcpOffer, PppOutcome, PppPhase, PppServerConfig, PppServerSession
from vpnprobe.simclients.policy import InnerAuth
from vpnprobe.simclients.ppp_client import PppClient

CREDS = Credentials("alice", "correct horse")
MARKER = b"known marker payload " * 3


def pump(server: PppServerSession, client: PppClient, rounds: int = 40):
    """Shuttle frames until both sides go quiet; returns every phase the server passed."""
    phases = [server.phase]
    to_server = client.start()
    to_client = server.start()
    for _ in range(rounds):
        if not to_server and not to_client:
            break
        nxt_c, nxt_s = [], []
        for f in to_client:
            nxt_s.extend(client.receive(f))
        for f in to_server:
            nxt_c.extend(server.receive(f))
            phases.append(server.phase)
        to_server, to_client = nxt_s, nxt_c
    return phases


def session(offer=CcpOffer.NoEncryption, method=AuthMethod.MSCHAPv2, creds=CREDS, **kw):
    return PppServerSession(PppServerConfig(method, creds, offer, **kw), Transcript(), rng=Randomness(1))


def client(require=True, inner=InnerAuth.MSCHAPv2, creds=CREDS):
    return PppClient(creds, inner, require_encryption=require, rng=Randomness(2))


def test_optional_encryption_client_accepts_plaintext():
    s, c = session(), client(require=False)
    phases = pump(s, c)
    assert phases == sorted(phases)  # never goes backwards
    assert s.phase is PppPhase.DataExchange and s.negotiated_mppe is None and s.mppe_keys is None
    assert c.established and not c.encrypted
    s.receive(c.marker_frame(MARKER))
    assert s.plaintext_data_seen
    frame = s.data_frames[-1]
    assert not frame.encrypted and frame.payload.endswith(MARKER)
    assert s.transcript.resolve(frame.ref).plaintext


def test_require_encryption_client_refuses_plaintext():
    s, c = session(), client(require=True)
    pump(s, c)
    assert s.outcome is PppOutcome.ClientRefusedPlaintext
    assert s.phase < PppPhase.DataExchange
    assert not s.plaintext_data_seen
    assert c.aborted is not None


def test_mppe128_round_trip_decrypts_to_known_payload():
    s, c = session(CcpOffer.Mppe128, require_mppe=True), client(require=True)
    pump(s, c)
    assert s.negotiated_mppe == 128 and c.encrypted
    s.receive(c.marker_frame(MARKER))
    frame = s.data_frames[-1]
    assert frame.encrypted and frame.payload.endswith(MARKER)
    # the probe-side keys are the ones derive_mppe_keys gives for this exchange
    keys = auth.derive_mppe_keys(CREDS.password, c.nt_response, 128, is_server=True)
    assert keys.send_key == s.mppe_keys.send_key
    # every data-phase event on an MPPE link is marked encrypted
    data = [e for e in s.transcript if e.summary.startswith("data:")]
    assert data and not any(e.plaintext for e in data)


def test_wrong_password_fails_authentication():
    s = session()
    c = client(require=False, creds=Credentials("alice", "wrong"))
    pump(s, c)
    assert s.outcome is PppOutcome.AuthFailed
    assert s.phase is PppPhase.Authentication


def test_pap_client_credentials_captured():
    s = session(method=AuthMethod.PAP, creds=None)
    c = client(require=False, inner=InnerAuth.PAP, creds=Credentials("bob", "s3cret"))
    pump(s, c)
    assert s.captured_credentials == Credentials("bob", "s3cret")
    assert any("bob" in e.summary for e in s.transcript)


def test_client_insisting_on_pap_terminates_mschap_server():
    s = session()
    c = client(require=False, inner=InnerAuth.PAP)
    pump(s, c)
    assert s.outcome is PppOutcome.AuthProtocolRefused


def test_ipcp_assigns_configured_address():
    s, c = session(inner_ip="10.9.0.7", server_ip="10.9.0.1"), client(require=False)
    pump(s, c)
    assert c.local_ip == "10.9.0.7"
    assert s.client_ip == "10.9.0.7"
    proto, ip = ppp.decode_frame(c.marker_frame(MARKER))
    assert proto == ppp.PROTO_IP
    assert packets.parse_ipv4(ip)[:2] == ("10.9.0.7", "10.9.0.1")


def test_pre_data_frames_recorded_plaintext():
    s, c = session(), client(require=False)
    pump(s, c)
    for e in s.transcript:
        assert e.plaintext


def test_outer_encryption_flag_marks_events():
    s = PppServerSession(PppServerConfig(AuthMethod.MSCHAPv2, CREDS), Transcript(), rng=Randomness(1),
                         outer_encrypted=True)
    pump(s, client(require=False))
    assert s.transcript.events and not any(e.plaintext for e in s.transcript if e.layer == "ppp")


def test_timeout_before_any_frame():
    s = session(phase_timeout=0.5)
    s.start()
    assert not s.check_timeout(now=s.clock() + 0.1)
    assert s.check_timeout(now=s.clock() + 5)
    assert s.outcome is PppOutcome.Timeout


def test_config_validation():
    with pytest.raises(ValueError):
        PppServerConfig(AuthMethod.MSCHAPv2, None)
    with pytest.raises(ValueError):
        PppServerConfig(AuthMethod.MSCHAPv2, CREDS, CcpOffer.NoEncryption, require_mppe=True)


def test_frame_codec_round_trip():
    data = ppp.encode_frame(ppp.PROTO_LCP, b"\x01\x02\x00\x04")
    assert ppp.decode_frame(data) == (ppp.PROTO_LCP, b"\x01\x02\x00\x04")
    with pytest.raises(ppp.PppError):
        ppp.decode_frame(b"\xff")
