import socket
import ssl

import pytest
from hypothesis import given, strategies as st

import matrix_harness as mh
from vpnprobe import softether
from vpnprobe.core import Direction, Randomness, VerdictLevel
from vpnprobe.net import Background
from vpnprobe.softether import TlsAcceptOutcome, tls_accept_level


@given(st.booleans(), st.integers(0, 5000), st.booleans(), st.sampled_from([None, "certificate unknown"]))
def test_level_depends_only_on_handshake_and_app_bytes(done, n, spoke, alert):
    if n and not done:
        with pytest.raises(ValueError):
            TlsAcceptOutcome(done, alert, n)
        return
    level = tls_accept_level(TlsAcceptOutcome(done, alert, n, b"x" * min(n, 4), spoke))
    if done and n > 0:
        assert level is VerdictLevel.Vulnerable
    elif not done and spoke:
        assert level is VerdictLevel.Secure
    else:
        assert level is VerdictLevel.Inconclusive


def test_unverifying_client_vulnerable_with_greeting_evidence():
    finding, tr, _ = mh.case_softether_tls(True, 1)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    app = [e for e in tr if e.layer == "tls" and "application bytes" in e.summary]
    assert app and app[0].raw
    # the probe is passive: the first application-layer event comes from the client
    first = next(e for e in tr if e.raw is not None)
    assert first.direction is Direction.ClientToProbe


def test_verifying_client_secure_with_alert():
    finding, tr, _ = mh.case_softether_tls(False, 2)
    assert finding.verdict.level is VerdictLevel.Secure
    assert "aborted" in finding.verdict.note


def _probe():
    return softether.SoftEtherTlsProbe(mh.material().self_signed, port=0, connect_timeout=5, phase_timeout=1,
                                       rng=Randomness(3)).bind()


def test_immediate_close_inconclusive():
    probe = _probe()
    job = Background(probe.serve).start()
    h, p = probe.ports["tcp"].rsplit(":", 1)
    socket.create_connection((h, int(p))).close()
    finding, _ = job.result(10)
    assert finding.verdict.level is VerdictLevel.Inconclusive


def test_silent_tls_client_inconclusive():
    probe = _probe()
    job = Background(probe.serve).start()
    h, p = probe.ports["tcp"].rsplit(":", 1)
    ctx = ssl.create_default_context()
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    with ctx.wrap_socket(socket.create_connection((h, int(p))), server_hostname="x") as s:
        finding, _ = job.result(10)
        s.close()
    assert finding.verdict.level is VerdictLevel.Inconclusive


def test_no_client_inconclusive():
    finding, _ = softether.serve_tls_accept(mh.material().self_signed, port=0, connect_timeout=0.2)
    assert finding.verdict.level is VerdictLevel.Inconclusive
