import socket
import time

import pytest
from hypothesis import given, settings, strategies as st

import matrix_harness as mh
from vpnprobe import auth, sstp, tlsutil
from vpnprobe.core import ProbeError, ProtocolId, Randomness, TrustRole, VerdictLevel
from vpnprobe.net import Background
from vpnprobe.simclients import CertCheck, ClientPolicy, run_client

NONCE = bytes(range(32))


def _keys():
    nt = auth.nt_response(b"\x01" * 16, b"\x02" * 16, "alice", "pw")
    return (auth.derive_mppe_keys("pw", nt, 128, is_server=False),
            auth.derive_mppe_keys("pw", nt, 128, is_server=True))


def test_binding_round_trip_and_wire_format():
    der = tlsutil.cert_der(mh.material().self_signed)
    client, server = _keys()
    b = sstp.compute_binding(NONCE, der, sstp.hlak(client, server_side=False))
    assert sstp.validate_crypto_binding(b, der, server, NONCE)
    msg = sstp.ControlMessage.decode(b.message()[4:])
    assert sstp.CryptoBinding.from_message(msg) == b


def test_binding_flipped_cmac_rejected():
    der = tlsutil.cert_der(mh.material().self_signed)
    client, server = _keys()
    b = sstp.compute_binding(NONCE, der, sstp.hlak(client, server_side=False))
    bad = sstp.CryptoBinding(b.nonce, b.cert_hash, bytes([b.cmac[0] ^ 1]) + b.cmac[1:])
    assert not sstp.validate_crypto_binding(bad, der, server, NONCE)


def test_binding_for_other_certificate_rejected():
    mine = tlsutil.cert_der(mh.material().self_signed)
    other = tlsutil.cert_der(mh.material().wrong_identity)
    assert sstp.cert_hash(mine, "SHA256") != sstp.cert_hash(other, "SHA256")
    client, server = _keys()
    b = sstp.compute_binding(NONCE, other, sstp.hlak(client, server_side=False))
    assert not sstp.validate_crypto_binding(b, mine, server, NONCE)


def test_binding_wrong_direction_keys_rejected():
    der = tlsutil.cert_der(mh.material().self_signed)
    client, server = _keys()
    # built with the server's view of HLAK instead of the client's
    b = sstp.compute_binding(NONCE, der, sstp.hlak(client, server_side=True))
    assert not sstp.validate_crypto_binding(b, der, server, NONCE)


def test_binding_field_lengths_enforced():
    with pytest.raises(sstp.SstpError):
        sstp.CryptoBinding(b"\x00" * 31, b"\x00" * 32, b"\x00" * 32)
    with pytest.raises(sstp.SstpError):
        sstp.CryptoBinding(NONCE, b"\x00" * 20, b"\x00" * 32, "SHA256")
    with pytest.raises(sstp.SstpError):
        sstp.CryptoBinding(NONCE, b"\x00" * 32, b"\x00" * 32, "MD5")


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=300), st.booleans())
def test_packet_reader_reassembles_split_stream(body, control):
    data = sstp.encode_packet(control, body) * 2
    r = sstp.PacketReader()
    out = []
    for i in range(0, len(data), 7):
        r.feed(data[i:i + 7])
        while (pkt := r.pop()) is not None:
            out.append(pkt)
    assert [(c, b) for c, b, _ in out] == [(control, body)] * 2


def test_nonces_are_fresh():
    material = mh.material().self_signed
    config = sstp._sstp_ppp_config(mh.CREDS, 1.0)
    nonces = {sstp._SstpServerSession(None, material, config, sstp.Transcript(), Randomness(), 0, 1).nonce
              for _ in range(1000)}
    assert len(nonces) == 1000


def _probe(seed):
    return sstp.SstpProbe(mh.CREDS, mh.material().self_signed, port=0, connect_timeout=5, phase_timeout=2,
                          capture_window=0.5, rng=Randomness(seed))


def test_ignoring_client_vulnerable_and_binding_validates():
    probe = _probe(1)
    finding, tr, outcome = mh._serve_and_connect(probe, ProtocolId.SSTP,
                                                 ClientPolicy(verify_server_cert=CertCheck.Ignore), mh._tcp_ep, 1)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    assert probe.session.binding_valid is True
    assert probe.session.state is sstp.SstpNegotiationState.Established
    # a completed TLS event with the untrusted certificate, then a Connect-Request
    tls_i = next(i for i, e in enumerate(tr) if "TLS handshake completed" in e.summary)
    assert "trust_role=UntrustedSelfSigned" in tr.events[tls_i].summary
    assert any("Connect-Request" in e.summary for e in tr.events[tls_i:])


def test_strict_client_secure():
    finding, tr, outcome = mh.case_sstp(False, 2)
    assert finding.verdict.level is VerdictLevel.Secure
    assert not any("Connect-Request" in e.summary for e in tr)


def test_bare_tcp_connect_is_inconclusive():
    probe = _probe(3).bind()
    job = Background(probe.serve).start()
    h, p = probe.ports["tcp"].rsplit(":", 1)
    socket.create_connection((h, int(p))).close()
    finding, _ = job.result(10)
    assert finding.verdict.level is VerdictLevel.Inconclusive


class _Upstream:
    def __init__(self, seed):
        m = mh.material()
        good = tlsutil.issue(m.authority, mh.SERVER_NAME, TrustRole.ValidCorrectIdentity)
        self.server = sstp.ReferenceSstpServer(mh.CREDS, good, rng=Randomness(seed)).start()

    def __enter__(self):
        return self.server

    def __exit__(self, *exc):
        time.sleep(0.1)
        self.server.close()


def _relay_run(check, seed):
    with _Upstream(seed) as server:
        relay = sstp.SstpRelay(server.address, port=0, connect_timeout=5, phase_timeout=2,
                               capture_window=0.5, rng=Randomness(seed + 1)).bind()
        job = Background(relay.serve).start()
        outcome = run_client(ProtocolId.SSTP, ClientPolicy(verify_server_cert=check), mh._tcp_ep(relay), mh.CREDS,
                             mh.MARKER, rng=Randomness(seed + 2), timeout=5, linger=0.05)
        finding, tr = job.result(20)
    return relay, server, finding, tr, outcome


def test_relay_vulnerable_and_upstream_abandoned():
    relay, server, finding, tr, outcome = _relay_run(CertCheck.Ignore, 40)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    assert relay.switchover_ref in finding.verdict.evidence
    for received, sent in relay.forwarded:
        assert tr.resolve(received).raw == tr.resolve(sent).raw
    # the honest server never saw the Call-Connected or anything after it
    upstream = server.transcripts[0]
    assert not any("Call-Connected" in e.summary for e in upstream)
    assert not any(e.layer == "ppp" and e.summary.startswith("IPCP Configure-Ack") and
                   e.direction.value == "ClientToProbe" for e in upstream)


def test_relay_strict_client_secure():
    _, _, finding, _, _ = _relay_run(CertCheck.Strict, 50)
    assert finding.verdict.level is VerdictLevel.Secure


def test_relay_upstream_down_raises():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    dead = s.getsockname()
    s.close()
    with pytest.raises(ProbeError):
        sstp.relay_sstp(dead, port=0, connect_timeout=1)
