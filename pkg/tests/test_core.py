import threading

import pytest
from hypothesis import given, settings, strategies as st

from vpnprobe.core import (AttackerType, CertificateMaterial, Credentials, Direction, Finding,
                           FindingsCollector, OrderingError, Randomness, ReportError, Transcript,
                           TranscriptCollector, TranscriptEvent, TrustRole, Verdict, VerdictLevel,
                           VulnClass, attacker_of, exit_code, parse_report, record_event, render_report)

V = VulnClass
L = VerdictLevel

# the attacker column of the vulnerability table
ATTACKERS = {
    V.PptpOptionalEncryption: "Network", V.SstpIgnoredCertFailure: "Network",
    V.Ikev2ImproperServerVerification: "Network", V.OpenVpnCredentialLeakage: "Local",
    V.SoftEtherNoServerVerification: "Network", V.SoftEtherWrongVpnServer: "Local",
    V.L2tpKnownPsk: "Network", V.CiscoKnownPsk: "Network", V.WeakFallback: "Network",
}


def _event(ts, layer="tcp"):
    return TranscriptEvent(ts, Direction.ClientToProbe, layer, True, "x")


@pytest.mark.parametrize("vc", list(VulnClass))
def test_attacker_of_matches_table(vc):
    assert attacker_of(vc) is AttackerType(ATTACKERS[vc])


def test_record_event_base_case():
    tr = record_event(Transcript(), _event(5))
    assert len(tr) == 1


def test_record_event_rejects_out_of_order():
    tr = record_event(Transcript(), _event(10))
    with pytest.raises(OrderingError):
        record_event(tr, _event(9))
    assert len(tr) == 1


def test_record_event_equal_timestamps_allowed():
    tr = Transcript()
    record_event(tr, _event(3))
    record_event(tr, _event(3))
    assert len(tr) == 2


def test_record_event_unknown_layer():
    with pytest.raises(ValueError):
        record_event(Transcript(), _event(1, layer="carrier-pigeon"))


def test_collector_concurrent_sessions_keep_order():
    col = TranscriptCollector()

    def worker(name):
        for i in range(250):
            col.submit(name, Direction.ClientToProbe, "udp", str(i))

    threads = [threading.Thread(target=worker, args=(f"s{n}",)) for n in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert col.sessions() == ["s0", "s1", "s2", "s3"]
    for name in col.sessions():
        tr = col.transcript(name)
        # same result as a single-threaded replay of that session
        assert [e.summary for e in tr] == [str(i) for i in range(250)]
        ts = [e.timestamp for e in tr]
        assert ts == sorted(ts)


def test_transcript_refs_resolve():
    tr = Transcript(session="abc")
    ref = tr.record(Direction.LocalObservation, "probe", "hello")
    assert ref == "abc#0"
    assert tr.resolve(ref).summary == "hello"
    assert tr.resolve("other#0") is None
    assert tr.resolve("abc#7") is None


def test_verdict_invariants():
    with pytest.raises(ValueError):
        Verdict(L.Vulnerable)
    with pytest.raises(ValueError):
        Verdict(L.Inconclusive)
    assert Verdict.secure().is_finding is False
    assert Verdict.weak(["x#0"]).is_finding


def test_finding_rejects_wrong_attacker():
    with pytest.raises(ValueError):
        Finding(V.OpenVpnCredentialLeakage, Verdict.secure(), "t", attacker=AttackerType.Network)


def test_empty_matrix_is_header_only():
    out = render_report([], "matrix").decode()
    assert out.splitlines() == ["target\t" + " ".join(vc.value for vc in VulnClass)]


def test_matrix_single_vulnerable_cell():
    f = Finding(V.PptpOptionalEncryption, Verdict.vulnerable(["s#1"]), "vpn-a")
    rows = render_report([f], "matrix").decode().splitlines()
    assert rows[1] == "vpn-a\t✗ – – – – – – – –"


def test_matrix_golden():
    fs = [
        Finding(V.PptpOptionalEncryption, Verdict.vulnerable(["a#1"]), "alpha"),
        Finding(V.SstpIgnoredCertFailure, Verdict.secure(), "alpha"),
        Finding(V.L2tpKnownPsk, Verdict.weak(["a#2"]), "alpha"),
        Finding(V.WeakFallback, Verdict.inconclusive("timeout"), "alpha"),
        Finding(V.OpenVpnCredentialLeakage, Verdict.secure(), "beta"),
    ]
    expected = ("target\tPptpOptionalEncryption SstpIgnoredCertFailure Ikev2ImproperServerVerification "
                "OpenVpnCredentialLeakage SoftEtherNoServerVerification SoftEtherWrongVpnServer "
                "L2tpKnownPsk CiscoKnownPsk WeakFallback\n"
                "alpha\t✗ ✓ – – – – ✗ – –\n"
                "beta\t– – – ✓ – – – – –\n")
    assert render_report(fs, "matrix").decode() == expected


def test_duplicate_finding_rejected():
    f = Finding(V.CiscoKnownPsk, Verdict.secure(), "x")
    with pytest.raises(ReportError):
        render_report([f, f], "json")
    col = FindingsCollector()
    col.submit(f)
    with pytest.raises(ReportError):
        col.submit(f)


def test_unknown_format():
    with pytest.raises(ReportError):
        render_report([], "xml")


def test_parse_rejects_other_versions():
    with pytest.raises(ReportError):
        parse_report(b'{"version": 99, "targets": [], "generated_at": "x"}')


_verdicts = st.one_of(
    st.builds(Verdict.vulnerable, st.lists(st.text(min_size=1, max_size=8), min_size=1, max_size=3), st.text()),
    st.builds(Verdict.weak, st.lists(st.text(min_size=1, max_size=8), min_size=1, max_size=3), st.text()),
    st.builds(Verdict.secure, st.text()),
    st.builds(Verdict.inconclusive, st.text(min_size=1)),
)
_findings = st.lists(st.tuples(st.text(min_size=1, max_size=10), st.sampled_from(list(VulnClass)), _verdicts),
                     max_size=12, unique_by=lambda t: (t[0], t[1]))


@settings(max_examples=150, deadline=None)
@given(_findings)
def test_json_round_trip(items):
    fs = [Finding(vc, v, target) for target, vc, v in items]
    data = render_report(fs, "json", generated_at="2024-01-01T00:00:00+00:00")
    report = parse_report(data)
    assert sorted(report.findings, key=repr) == sorted(fs, key=repr)
    assert report.render("json") == data


@settings(max_examples=100, deadline=None)
@given(_findings)
def test_exit_code_depends_only_on_levels(items):
    fs = [Finding(vc, v, target) for target, vc, v in items]
    assert exit_code(fs) == int(any(v.level in (L.Vulnerable, L.Weak) for _, _, v in items))
    assert exit_code(reversed(fs)) == exit_code(fs)


def test_randomness_seeded_is_reproducible():
    a, b = Randomness(7), Randomness(7)
    assert a.bytes(16) == b.bytes(16)
    assert a.fork().bytes(8) == b.fork().bytes(8)
    assert Randomness().bytes(16) != Randomness().bytes(16)


def test_credentials_parse():
    assert Credentials.parse("alice:pa:ss") == Credentials("alice", "pa:ss")
    with pytest.raises(ValueError):
        Credentials.parse("alice")
    with pytest.raises(ValueError):
        Credentials("", "x").require()


def test_wrong_identity_certificate_must_differ():
    cert = CertificateMaterial("attacker.example.net", False, TrustRole.ValidWrongIdentity)
    assert cert.check_against("vpn.example.com") is cert
    with pytest.raises(ValueError):
        cert.check_against("attacker.example.net")
