import socket
import threading

import pytest

import matrix_harness as mh
from vpnprobe.core import ProtocolId, Randomness
from vpnprobe.simclients import (OPENVPN_BANNER, AbortedAt, ClientPolicy, Endpoint, Established, GaveUp,
                                 run_auto_fallback, run_client)

P = ProtocolId


def _closed_endpoint():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return Endpoint("127.0.0.1", port)


def test_policy_validation():
    with pytest.raises(ValueError):
        ClientPolicy(server_identity="")
    with pytest.raises(ValueError):
        ClientPolicy(retry_budget=0)
    p = ClientPolicy(psk="abc", fallback_order=("SSTP",))
    assert p.psk == b"abc" and p.fallback_order == (P.SSTP,)
    assert ClientPolicy().pinned_identity is None
    assert ClientPolicy(server_identity="vpn.example.com").pinned_identity == "vpn.example.com"


def test_unreachable_server_retried_then_gives_up():
    out = run_client(P.SSTP, ClientPolicy(retry_budget=3), _closed_endpoint(), mh.CREDS, b"", timeout=1)
    assert isinstance(out, GaveUp)
    assert len(out.attempts) == 3
    assert all(isinstance(a, AbortedAt) and a.stage == "Connect" for a in out.attempts)


def test_auto_fallback_needs_an_order():
    with pytest.raises(ValueError):
        run_auto_fallback(ClientPolicy(), {})


def test_auto_fallback_missing_endpoints_gives_up():
    out = run_auto_fallback(ClientPolicy(fallback_order=(P.SSTP, P.PPTP)), {})
    assert isinstance(out, GaveUp)
    assert [p for p, _ in out.attempts] == [P.SSTP, P.PPTP]


def test_auto_fallback_first_success_wins():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(4)

    def serve():
        conn, _ = srv.accept()
        conn.sendall(OPENVPN_BANNER)
        conn.close()

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    eps = {P.SSTP: _closed_endpoint(), P.OPENVPN: Endpoint(*srv.getsockname()), P.PPTP: _closed_endpoint()}
    out = run_auto_fallback(ClientPolicy(fallback_order=(P.SSTP, P.OPENVPN, P.PPTP)), eps, timeout=2)
    t.join(2)
    srv.close()
    assert isinstance(out, Established) and out.protocol is P.OPENVPN
    assert out.detail["attempted"] == ["SSTP", "OPENVPN"]


# strict policies must never reach Established against the attacking probes
@pytest.mark.parametrize("case", [mh.case_pptp, mh.case_sstp, mh.case_ikev2, mh.case_softether_tls])
def test_strict_policy_never_established_against_probe(case):
    _, _, outcome = case(False, 31)
    assert not isinstance(outcome, Established)


def test_cert_auth_l2tp_client_never_established_against_psk_probe():
    _, _, outcome = mh.case_l2tp(False, 33)
    assert not isinstance(outcome, Established)


@pytest.mark.parametrize("case", [mh.case_pptp, mh.case_sstp])
def test_lax_policy_established(case):
    _, _, outcome = case(True, 35)
    assert isinstance(outcome, Established)


def test_any_identity_ikev2_needs_probe_credentials_to_establish():
    # without the user's password the probe can only capture the EAP challenge
    _, _, outcome = mh.case_ikev2(True, 37)
    assert isinstance(outcome, AbortedAt) and outcome.stage == "EapAuth"
    _, _, outcome = mh.case_ikev2(True, 39, credentials=mh.CREDS)
    assert isinstance(outcome, Established) and outcome.encrypted


def test_seeded_client_runs_reproducible_verdicts():
    a = mh.case_pptp(True, 41)[0]
    b = mh.case_pptp(True, 41)[0]
    assert a.verdict.level is b.verdict.level
