import pytest

import matrix_harness as mh
from vpnprobe import pptp
from vpnprobe.core import ProbeError, ProtocolId, Randomness, VerdictLevel
from vpnprobe.net import Background
from vpnprobe.simclients import ClientPolicy, Endpoint, run_client


def test_control_message_round_trip():
    for msg in (pptp.sccrq(), pptp.sccrp(), pptp.ocrq(7), pptp.ocrp(8, 7), pptp.echo_request(3),
                pptp.call_clear_request(8), pptp.stop_ccrq()):
        decoded, rest = pptp.decode_control(msg.encode())
        assert rest == b""
        assert decoded.msg_type == msg.msg_type
        assert decoded.encode() == msg.encode()


def test_control_decode_waits_for_full_message():
    data = pptp.sccrq().encode()
    assert pptp.decode_control(data[:10]) == (None, data[:10])


def test_control_decode_bad_magic():
    data = bytearray(pptp.sccrq().encode())
    data[4] ^= 0xFF
    with pytest.raises(pptp.PptpError):
        pptp.decode_control(bytes(data))


@pytest.mark.parametrize("seq,ack", [(None, None), (5, None), (None, 9), (1, 2)])
def test_gre_round_trip(seq, ack):
    pkt = pptp.GrePacket(0x1234, seq, ack, b"\xff\x03\xc0\x21abc")
    assert pptp.GrePacket.decode(pkt.encode()) == pkt


def test_gre_rejects_short_and_foreign():
    with pytest.raises(pptp.PptpError):
        pptp.GrePacket.decode(b"\x00" * 4)
    with pytest.raises(pptp.PptpError):
        pptp.GrePacket.decode(b"\x00\x00\x08\x00" + b"\x00" * 8)  # plain GRE carrying IPv4


def test_gre_ack_monotone_with_wraparound():
    st = pptp.GreTunnelState()
    acks = []
    for seq in (0xFFFFFFFE, 0xFFFFFFFF, 0xFFFFFFFD, 0, 1):
        st.observe(seq)
        a = st.take_ack()
        if a is not None:
            acks.append(a)
    assert acks == [0xFFFFFFFE, 0xFFFFFFFF, 0, 1]
    assert st.take_ack() is None


def test_probe_optional_encryption_vulnerable():
    finding, tr, outcome = mh.case_pptp(True, 11)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    # every evidence link resolves, and a plaintext data event is among them
    events = [tr.resolve(r) for r in finding.verdict.evidence]
    assert all(events)
    assert any(e.layer == "ppp" and e.plaintext and e.summary.startswith("data:") for e in events)


def test_probe_required_encryption_secure():
    finding, tr, outcome = mh.case_pptp(False, 12)
    assert finding.verdict.level is VerdictLevel.Secure
    assert not any(e.summary.startswith("data: plaintext") for e in tr)


def test_probe_without_client_is_inconclusive():
    finding, _ = pptp.serve_pptp(mh.CREDS, port=0, gre_port=0, connect_timeout=0.2)
    assert finding.verdict.level is VerdictLevel.Inconclusive


def _relay_run(require_encryption: bool, seed: int):
    server = pptp.ReferencePptpServer(mh.CREDS, rng=Randomness(seed)).start()
    try:
        relay = pptp.PptpRelay(server.address, server.gre_address, port=0, gre_port=0, connect_timeout=5,
                               phase_timeout=2, capture_window=0.5, rng=Randomness(seed + 1)).bind()
        job = Background(relay.serve).start()
        h, p = relay.ports["tcp"].rsplit(":", 1)
        gh, gp = relay.ports["gre"].rsplit(":", 1)
        ep = Endpoint(h, int(p))
        ep.gre = (gh, int(gp))
        outcome = run_client(ProtocolId.PPTP, ClientPolicy(require_encryption=require_encryption), ep,
                             mh.CREDS, mh.MARKER, rng=Randomness(seed + 2), timeout=5, linger=0.05)
        finding, tr = job.result(15)
    finally:
        server.close()
    return relay, finding, tr, outcome


def test_relay_is_transparent_until_switchover():
    relay, finding, tr, _ = _relay_run(False, 20)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    assert relay.forwarded
    for received, sent in relay.forwarded:
        assert tr.resolve(received).raw == tr.resolve(sent).raw
    switch = [i for i, e in enumerate(tr) if e.summary.startswith("switchover")]
    assert len(switch) == 1
    assert relay.switchover_ref in finding.verdict.evidence
    # nothing goes upstream after the relay took over
    assert not any(e.direction.value == "ProbeToUpstream" for e in list(tr)[switch[0]:])


def test_relay_with_strict_client_is_secure():
    _, finding, _, _ = _relay_run(True, 30)
    assert finding.verdict.level is VerdictLevel.Secure


def test_relay_upstream_down_raises():
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    dead = s.getsockname()
    s.close()
    with pytest.raises(ProbeError):
        pptp.mitm_relay_pptp(dead, ("127.0.0.1", 9), port=0, gre_port=0, connect_timeout=1)


def _raw_gre_available():
    import socket
    try:
        socket.socket(socket.AF_INET, socket.SOCK_RAW, pptp.IPPROTO_GRE).close()
        return True
    except OSError:
        return False


@pytest.mark.rawsock
@pytest.mark.skipif(not _raw_gre_available(), reason="raw IP sockets need CAP_NET_RAW")
def test_probe_over_raw_gre():
    probe = pptp.PptpProbe(mh.CREDS, "127.0.0.1", 0, "raw-gre", 0, connect_timeout=5, phase_timeout=2,
                           capture_window=0.5, rng=Randomness(13)).bind()
    job = Background(probe.serve).start()
    h, p = probe.ports["tcp"].rsplit(":", 1)
    outcome = run_client(ProtocolId.PPTP, ClientPolicy(require_encryption=False), Endpoint(h, int(p), "raw-gre"),
                         mh.CREDS, mh.MARKER, rng=Randomness(14), timeout=5, linger=0.05)
    finding, _ = job.result(15)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    assert not outcome.encrypted
