"""End-to-end runs of the command line, in a subprocess where a server is involved."""

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from vpnprobe import cli
from vpnprobe.core import Finding, Verdict, VulnClass, parse_report, render_report
from vpnprobe.net import parse_ready_line

FIXTURES = Path(__file__).parent / "fixtures" / "config"
FINDING_KEYS = {"vuln_class", "attacker", "verdict", "evidence", "note", "remediation"}


def _spawn(*argv):
    return subprocess.Popen([sys.executable, "-m", "vpnprobe.cli", *argv], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True)


def _wait_ready(proc):
    for line in proc.stderr:
        if line.startswith("READY "):
            return parse_ready_line(line.strip())
    raise AssertionError("server exited before announcing its ports")


def _run(*argv, timeout=60):
    return subprocess.run([sys.executable, "-m", "vpnprobe.cli", *argv], capture_output=True, text=True,
                          timeout=timeout)


def _schema_ok(doc):
    assert doc["version"] == 1 and "generated_at" in doc
    for t in doc["targets"]:
        assert set(t) == {"label", "findings"}
        for f in t["findings"]:
            assert set(f) == FINDING_KEYS


def test_probe_pptp_against_vulnerable_simclient_exits_1():
    proc = _spawn("--seed", "1", "probe", "pptp", "--creds", "alice:pw", "--downgrade", "no-mppe",
                  "--port", "0", "--gre-port", "0", "--connect-timeout", "10", "--phase-timeout", "3",
                  "--capture-window", "0.5")
    try:
        ports = _wait_ready(proc)
        assert ports["probe"] == "pptp"
        client = _run("simclient", "run", "--protocol", "pptp", "--endpoint", ports["tcp"], "--gre", ports["gre"],
                      "--policy", "vulnerable", "--creds", "alice:pw", "--timeout", "5")
        out, _ = proc.communicate(timeout=30)
    finally:
        proc.kill()
    assert json.loads(client.stdout)["outcome"] == "Established"
    assert proc.returncode == 1
    doc = json.loads(out)
    _schema_ok(doc)
    findings = [f for t in doc["targets"] for f in t["findings"]]
    assert len(findings) == 1
    assert findings[0]["vuln_class"] == "PptpOptionalEncryption" and findings[0]["verdict"] == "Vulnerable"


def test_probe_pptp_hardened_client_exits_0(tmp_path):
    proc = _spawn("probe", "pptp", "--creds", "alice:pw", "--port", "0", "--gre-port", "0",
                  "--connect-timeout", "10", "--phase-timeout", "2", "--capture-window", "0.5",
                  "--format", "matrix", "--transcript-out", str(tmp_path / "tr.json"))
    try:
        ports = _wait_ready(proc)
        _run("simclient", "run", "--protocol", "pptp", "--endpoint", ports["tcp"], "--gre", ports["gre"],
             "--policy", "hardened", "--creds", "alice:pw", "--timeout", "5")
        out, _ = proc.communicate(timeout=30)
    finally:
        proc.kill()
    assert proc.returncode == 0
    assert out.splitlines()[1].split("\t")[1].split()[0] == "✓"
    streams = json.loads((tmp_path / "tr.json").read_text())
    assert streams and streams[0]["events"]


def test_audit_config_clean_fixture_exits_0(capsys):
    assert cli.main(["audit", "config", str(FIXTURES / "secure.conf"), "--dialect", "ipsec-conf"]) == 0
    doc = json.loads(capsys.readouterr().out)
    _schema_ok(doc)
    assert doc["targets"] == []


def test_audit_config_findings_exit_1(capsys):
    assert cli.main(["audit", "config", str(FIXTURES / "r1_any_identity.conf"), str(FIXTURES / "r6_public.secrets")]) == 1
    doc = json.loads(capsys.readouterr().out)
    _schema_ok(doc)
    classes = {f["vuln_class"] for t in doc["targets"] for f in t["findings"]}
    assert classes == {"Ikev2ImproperServerVerification", "L2tpKnownPsk"}


def test_report_render_matrix_golden(tmp_path, capsys):
    fs = [Finding(VulnClass.PptpOptionalEncryption, Verdict.vulnerable(["a#1"]), "alpha"),
          Finding(VulnClass.CiscoKnownPsk, Verdict.secure(), "alpha"),
          Finding(VulnClass.WeakFallback, Verdict.weak(["b#2"]), "beta")]
    path = tmp_path / "findings.json"
    path.write_bytes(render_report(fs, "json"))
    assert cli.main(["report", "render", "--format", "matrix", str(path)]) == 1
    assert capsys.readouterr().out == (
        "target\tPptpOptionalEncryption SstpIgnoredCertFailure Ikev2ImproperServerVerification "
        "OpenVpnCredentialLeakage SoftEtherNoServerVerification SoftEtherWrongVpnServer "
        "L2tpKnownPsk CiscoKnownPsk WeakFallback\n"
        "alpha\t✗ – – – – – – ✓ –\n"
        "beta\t– – – – – – – – ✗\n")


def test_report_render_merges_and_rejects_duplicates(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_bytes(render_report([Finding(VulnClass.L2tpKnownPsk, Verdict.secure(), "x")], "json"))
    b.write_bytes(render_report([Finding(VulnClass.CiscoKnownPsk, Verdict.secure(), "x")], "json"))
    assert cli.main(["report", "render", "--format", "json", str(a), str(b)]) == 0
    assert len(parse_report(capsys.readouterr().out.encode()).findings) == 2
    assert cli.main(["report", "render", str(a), str(a)]) == 2


def test_report_render_figure(tmp_path):
    path = tmp_path / "f.json"
    path.write_bytes(render_report([Finding(VulnClass.SstpIgnoredCertFailure, Verdict.vulnerable(["s#0"]), "c")],
                                   "json"))
    tr = tmp_path / "tr.json"
    tr.write_text(json.dumps([{"session": "s", "events": [
        {"timestamp": 0.0, "direction": "ClientToProbe", "layer": "tcp", "plaintext": True, "summary": "SYN"},
        {"timestamp": 0.2, "direction": "ProbeToClient", "layer": "tls", "plaintext": False, "summary": "hello"}]}]))
    png = tmp_path / "out.png"
    rc = cli.main(["report", "render", str(path), "-o", str(tmp_path / "m.txt"), "--figure", str(png),
                   "--transcript", str(tr)])
    assert rc == 1
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_scenario_fallback_json_schema(capsys):
    rc = cli.main(["--seed", "3", "scenario", "fallback", "--order", "ovpn,sstp,l2tp", "--block", "ovpn,sstp",
                   "--timeout", "20", "--client-timeout", "1"])
    assert rc == 1
    doc = json.loads(capsys.readouterr().out)
    _schema_ok(doc)
    assert doc["targets"][0]["findings"][0]["vuln_class"] == "WeakFallback"


def test_audit_local_json_schema(tmp_path, capsys):
    prof = tmp_path / "c.ovpn"
    prof.write_text("client\n<auth-user-pass>\nalice\npw\n</auth-user-pass>\n")
    os.chmod(prof, 0o644)
    assert cli.main(["audit", "local", "--root", str(tmp_path)]) == 1
    _schema_ok(json.loads(capsys.readouterr().out))


@pytest.mark.parametrize("argv", [
    [],
    ["probe"],
    ["probe", "pptp"],  # --creds is required
    ["probe", "pptp", "--creds", "a:b", "--downgrade", "mppe-128"],
    ["audit", "config", "x", "--dialect", "yaml"],
    ["bogus"],
    ["scenario", "fallback", "--order", "ovpn", "--vpn-strategy", "7"],
    ["scenario", "fallback"],
    ["audit", "local"],
    ["simclient", "run", "--protocol", "sstp", "--endpoint", "127.0.0.1:1", "--policy", "nonsense"],
])
def test_bad_invocations_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert capsys.readouterr().err


def test_environment_defaults(monkeypatch):
    monkeypatch.setenv("VPNPROBE_PHASE_TIMEOUT", "4.5")
    args = cli.build_parser().parse_args(["probe", "sstp", "--creds", "a:b"])
    assert args.phase_timeout == 4.5


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert cli.main(["audit", "config", str(tmp_path / "nope.conf"), "--dialect", "ipsec-conf"]) == 2
