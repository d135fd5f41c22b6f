import pytest

import matrix_harness as mh
from vpnprobe import ppp
from vpnprobe.core import ProtocolId, Randomness, VerdictLevel
from vpnprobe.ipsec import MAX_CANDIDATES, Ikev1Mode, Ikev1PskProbe, PskCandidate, PskCandidateList
from vpnprobe.net import Background
from vpnprobe.simclients import ClientPolicy, InnerAuth, run_client
from vpnprobe.simclients.ikev1_client import xauth_passcode


def test_parse_lines_comments_labels_and_blanks():
    lines = ["# header", "", "  ", "plain", "vendor:abc", ":has:colon", "  # indented comment", "x:  "]
    got = PskCandidateList.parse_lines(lines)
    assert got == [PskCandidate(b"plain", "operator"), PskCandidate(b"abc", "vendor"),
                   PskCandidate(b"has:colon", "operator")]


def test_candidate_list_dedupes_keeping_first():
    lst = PskCandidateList([PskCandidate(b"k", "a"), "k", b"j"])
    assert [(c.key, c.label) for c in lst] == [(b"k", "a"), (b"j", "operator")]


def test_candidate_list_empty_rejected():
    with pytest.raises(ValueError):
        PskCandidateList([])


def test_candidate_cap_and_override():
    keys = [str(i) for i in range(MAX_CANDIDATES + 1)]
    with pytest.raises(ValueError):
        PskCandidateList(keys)
    assert len(PskCandidateList(keys, allow_large=True)) == MAX_CANDIDATES + 1
    assert len(PskCandidateList(keys[:MAX_CANDIDATES])) == MAX_CANDIDATES


def test_public_defaults_and_file(tmp_path):
    defaults = PskCandidateList.public_defaults()
    assert b"12345678" in {c.key for c in defaults}
    p = tmp_path / "keys.txt"
    p.write_text("# mine\nsite:hunter2\n")
    combined = defaults.plus(PskCandidateList.from_file(str(p)))
    assert [c.key for c in combined][-1] == b"hunter2"


def _run(psk, mode=Ikev1Mode.L2tp, seed=1, candidates=None, credentials=mh.CREDS, client_creds=mh.CREDS,
         inner=InnerAuth.PAP, probe_inner=ppp.AuthMethod.PAP, **kw):
    probe = Ikev1PskProbe(candidates or PskCandidateList.public_defaults(), mode, port=0, credentials=credentials,
                          inner_auth=probe_inner, connect_timeout=5, phase_timeout=2, capture_window=1,
                          rng=Randomness(seed), **kw)
    proto = ProtocolId.CISCO_IPSEC if mode is Ikev1Mode.CiscoXauth else ProtocolId.L2TP_IPSEC
    probe.bind()
    job = Background(probe.serve).start()
    outcome = run_client(proto, ClientPolicy(psk=psk, inner_auth=inner), mh._udp_ep(probe), client_creds,
                         mh.MARKER, rng=Randomness(seed + 1), timeout=5, linger=0.05)
    finding, tr = job.result(15)
    return probe, finding, tr, outcome


def test_l2tp_known_psk_captures_inner_pap_and_payload():
    probe, finding, tr, _ = _run(b"12345678", credentials=None)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    assert [c.key for c in probe.session.matched] == [b"12345678"]
    assert "correct horse" in finding.verdict.note
    assert probe.session.inner_ppp.captured_credentials == mh.CREDS
    assert any(e.raw and mh.MARKER in e.raw for e in tr)
    # the evidence chain leads with the matched key
    assert finding.verdict.evidence[0] == probe.session.refs["psk"]


def test_l2tp_inner_mschapv2_exchange():
    _, finding, tr, _ = _run(b"12345678", inner=InnerAuth.MSCHAPv2, probe_inner=ppp.AuthMethod.MSCHAPv2, seed=3)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    assert "MS-CHAPv2" in finding.verdict.note


def test_l2tp_private_psk_no_match():
    probe, finding, _, _ = _run(b"a private key nobody lists", seed=5)
    assert finding.verdict.level is VerdictLevel.Inconclusive
    assert finding.verdict.note.startswith("NoPskMatch")
    assert probe.session.matched == []


def test_operator_supplied_key_matches():
    cands = PskCandidateList.public_defaults().plus([PskCandidate(b"site-secret", "operator")])
    probe, finding, _, _ = _run(b"site-secret", candidates=cands, seed=7)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    assert probe.session.matched[0].label == "operator"


def test_cert_auth_client_secure():
    _, finding, _, _ = _run(None, seed=9)
    assert finding.verdict.level is VerdictLevel.Secure


def test_cisco_xauth_credentials_captured():
    probe, finding, _, outcome = _run(b"12345678", Ikev1Mode.CiscoXauth, seed=11)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    assert probe.session.xauth_credentials == mh.CREDS
    assert probe.session.refs["xauth"] in finding.verdict.evidence


def test_cisco_xauth_challenge_response_captured():
    probe, finding, tr, _ = _run(b"12345678", Ikev1Mode.CiscoXauth, seed=13, xauth_challenge=True)
    assert finding.verdict.level is VerdictLevel.Vulnerable
    req = next(e for e in tr if "XAUTH challenge request" in e.summary)
    chal = req.summary.rsplit("(", 1)[1].rstrip(")").encode()
    assert probe.session.xauth_credentials.password == xauth_passcode(chal, mh.CREDS.password)


def test_cisco_declined_xauth_is_weak():
    probe, finding, _, _ = _run(b"12345678", Ikev1Mode.CiscoXauth, seed=15, client_creds=None)
    assert finding.verdict.level is VerdictLevel.Weak
    assert probe.session.xauth_credentials is None


def test_no_client_inconclusive():
    probe = Ikev1PskProbe(PskCandidateList.public_defaults(), port=0, connect_timeout=0.2)
    finding, _ = probe.serve()
    assert finding.verdict.level is VerdictLevel.Inconclusive


@pytest.mark.parametrize("vulnerable,level", [(True, VerdictLevel.Vulnerable), (False, VerdictLevel.Secure)])
def test_ikev2_identity_check(vulnerable, level):
    finding, tr, _ = mh.case_ikev2(vulnerable, 21)
    assert finding.verdict.level is level
    if not vulnerable:
        assert not any(e.layer == "esp" for e in tr)
