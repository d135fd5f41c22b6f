import json
import os
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from vpnprobe import config_audit as ca
from vpnprobe.config_audit import ConfigDialect, ConfigParseError, audit_file, evaluate_rules, parse_config
from vpnprobe.core import VerdictLevel, VulnClass

FIXTURES = Path(__file__).parent / "fixtures" / "config"


def _classes(findings):
    return {f.vuln_class.value: f.verdict.level.value for f in findings}


def _audit(dialect, text, **kw):
    return evaluate_rules(parse_config(dialect, text, source="t.conf"), **kw)


@pytest.mark.parametrize("name", sorted(json.loads((FIXTURES / "expected.json").read_text())))
def test_fixture_corpus(name):
    expected = json.loads((FIXTURES / "expected.json").read_text())[name]
    assert _classes(audit_file(str(FIXTURES / name))) == expected


def test_detect_dialect():
    d = ca.detect_dialect
    assert d("x.ovpn", b"") is ConfigDialect.OpenVpnProfile
    assert d("a.pbk", b"") is ConfigDialect.WindowsPhonebook
    assert d("ipsec.secrets", b"") is ConfigDialect.IpsecSecrets
    assert d("vpn_client.config", b"") is ConfigDialect.SoftEtherClientConfig
    assert d("ipsec.conf", b"conn a\n  right=x\n") is ConfigDialect.IpsecConf
    assert d("client.conf", b"client\nremote h 1194\n") is ConfigDialect.OpenVpnProfile
    with pytest.raises(ValueError):
        d("nginx.conf", b"server {}\n")


def test_dialect_aliases():
    assert parse_config("ipsec-conf", "").dialect is ConfigDialect.IpsecConf
    assert parse_config("phonebook", "").dialect is ConfigDialect.WindowsPhonebook


@pytest.mark.parametrize("dialect", list(ConfigDialect))
def test_empty_file_no_findings(dialect):
    tree = parse_config(dialect, b"")
    assert len(tree) == 0
    assert evaluate_rules(tree) == []


@pytest.mark.parametrize("dialect,text,line", [
    (ConfigDialect.IpsecConf, "conn a\n  right=x\n  garbage here\n", 3),
    (ConfigDialect.IpsecConf, "conn a b\n", 1),
    (ConfigDialect.IpsecSecrets, "%any %any PSK x\n", 1),
    (ConfigDialect.OpenVpnProfile, "client\n<auth-user-pass>\nalice\n", 2),
    (ConfigDialect.OpenVpnProfile, "client\n</ca>\n", 2),
    (ConfigDialect.SoftEtherClientConfig, "declare root\n{\n  bool X true\n", 3),
    (ConfigDialect.SoftEtherClientConfig, "}\n", 1),
    (ConfigDialect.WindowsPhonebook, "VpnStrategy=1\n", 1),
    (ConfigDialect.WindowsPhonebook, "[a]\nno equals sign\n", 2),
])
def test_parse_errors_carry_line(dialect, text, line):
    with pytest.raises(ConfigParseError) as err:
        parse_config(dialect, text)
    assert err.value.line == line


def test_invalid_utf8_replaced_with_warning():
    tree = parse_config(ConfigDialect.WindowsPhonebook, b"[a\xff]\nType=2\n")
    assert tree.warnings


def test_phonebook_keys_case_insensitive():
    out = _audit(ConfigDialect.WindowsPhonebook, "[Work]\nvpnSTRATEGY=1\ndataencryption=256\n")
    assert _classes(out) == {"PptpOptionalEncryption": "Vulnerable"}


def test_last_assignment_wins():
    out = _audit(ConfigDialect.WindowsPhonebook, "[w]\nVpnStrategy=1\nDataEncryption=8\nDataEncryption=512\n")
    assert out == []


# ---------------------------------------------------------------- R1

R1_TEMPLATE = "conn home\n  left=%defaultroute\n  leftauth=eap-mschapv2\n  right={right}\n  rightauth=pubkey\n{rid}"


@pytest.mark.parametrize("rid", ["  rightid=%any\n", "  rightid=\n"])
def test_r1_any_or_empty_identity(rid):
    out = _audit(ConfigDialect.IpsecConf, R1_TEMPLATE.format(right="vpn.example.com", rid=rid))
    assert _classes(out) == {"Ikev2ImproperServerVerification": "Vulnerable"}
    assert out[0].verdict.evidence == ("t.conf:6",)


def test_r1_ip_right_without_id():
    out = _audit(ConfigDialect.IpsecConf, R1_TEMPLATE.format(right="203.0.113.5", rid=""))
    assert out and out[0].verdict.evidence == ("t.conf:4",)


def test_r1_not_pubkey_ignored():
    text = R1_TEMPLATE.format(right="1.2.3.4", rid="  rightid=%any\n").replace("rightauth=pubkey", "rightauth=psk")
    assert _audit(ConfigDialect.IpsecConf, text) == []


def test_r1_default_section_folded():
    text = "conn %default\n  rightauth=pubkey\n  rightid=%any\n\nconn a\n  right=vpn.example.com\n"
    out = _audit(ConfigDialect.IpsecConf, text)
    assert out and "conn a" in out[0].verdict.note


_labels = st.from_regex(r"[a-z][a-z0-9]{0,10}", fullmatch=True)
_domains = st.builds(lambda ls, tld: ".".join(ls + [tld]), st.lists(_labels, min_size=1, max_size=3),
                     st.sampled_from(["com", "net", "org", "example"]))


@settings(max_examples=200, deadline=None)
@given(_domains, st.booleans())
def test_r1_precision_for_pinned_names(name, as_id):
    rid = f"  rightid=@{name}\n" if as_id else ""
    text = R1_TEMPLATE.format(right=name, rid=rid)
    assert _audit(ConfigDialect.IpsecConf, text) == []


# ---------------------------------------------------------------- R2

def _se(body):
    return "declare root\n{\n  declare AccountDatabase\n  {\n    declare Account0\n    {\n" + body + \
        "      declare ClientOption\n      {\n        string Hostname vpn.example.com\n      }\n    }\n  }\n}\n"


@pytest.mark.parametrize("body,level", [
    ("      bool CheckServerCert false\n", "Vulnerable"),
    ("", "Vulnerable"),
    ("      bool CheckServerCert true\n", None),
])
def test_r2(body, level):
    out = _classes(_audit(ConfigDialect.SoftEtherClientConfig, _se(body)))
    assert out.get("SoftEtherNoServerVerification") == level


# ---------------------------------------------------------------- R3

def test_r3_inline_block():
    out = _audit(ConfigDialect.OpenVpnProfile, "client\n<auth-user-pass>\nalice\npw\n</auth-user-pass>\n")
    assert _classes(out) == {"OpenVpnCredentialLeakage": "Vulnerable"}
    assert out[0].verdict.evidence == ("t.conf:2",)


def test_r3_empty_block_and_bare_prompt_clean():
    assert _audit(ConfigDialect.OpenVpnProfile, "client\n<auth-user-pass>\n</auth-user-pass>\n") == []
    assert _audit(ConfigDialect.OpenVpnProfile, "client\nauth-user-pass\n") == []


def test_r3_file_reference_static_weak():
    out = _audit(ConfigDialect.OpenVpnProfile, "client\nauth-user-pass creds.txt\n")
    assert _classes(out) == {"OpenVpnCredentialLeakage": "Weak"}


@pytest.mark.parametrize("mode,level", [(0o644, "Vulnerable"), (0o600, None)])
def test_r3_file_reference_permissions(tmp_path, mode, level):
    creds = tmp_path / "creds.txt"
    creds.write_text("alice\npw\n")
    os.chmod(creds, mode)
    prof = tmp_path / "c.ovpn"
    prof.write_text("client\nauth-user-pass creds.txt\n")
    assert _classes(audit_file(str(prof))).get("OpenVpnCredentialLeakage") == level


def test_r3_missing_file_weak(tmp_path):
    prof = tmp_path / "c.ovpn"
    prof.write_text("client\nauth-user-pass nowhere.txt\n")
    assert _classes(audit_file(str(prof))) == {"OpenVpnCredentialLeakage": "Weak"}


# ---------------------------------------------------------------- R4 / R5

@pytest.mark.parametrize("entry,expected", [
    ("VpnStrategy=1\nDataEncryption=8\n", {"PptpOptionalEncryption": "Vulnerable"}),
    ("VpnStrategy=1\n", {"PptpOptionalEncryption": "Vulnerable"}),
    ("VpnStrategy=1\nDataEncryption=256\n", {"PptpOptionalEncryption": "Vulnerable"}),
    ("VpnStrategy=1\nDataEncryption=512\n", {}),
    ("VpnStrategy=3\nDataEncryption=0\n", {}),
    ("VpnStrategy=5\n", {}),
    ("VpnStrategy=2\nDataEncryption=512\n", {"WeakFallback": "Vulnerable"}),
    ("VpnStrategy=8\nDataEncryption=8\n", {"PptpOptionalEncryption": "Vulnerable", "WeakFallback": "Vulnerable"}),
    # absent strategy is the automatic default for R4, but R5 needs an explicit value
    ("DataEncryption=8\n", {"PptpOptionalEncryption": "Vulnerable"}),
    ("Type=1\nVpnStrategy=1\n", {}),
])
def test_phonebook_rules(entry, expected):
    assert _classes(_audit(ConfigDialect.WindowsPhonebook, "[Work VPN]\n" + entry)) == expected


def test_r5_every_weak_strategy():
    for v in sorted(ca.WEAK_STRATEGIES):
        out = _audit(ConfigDialect.WindowsPhonebook, f"[a]\nVpnStrategy={v}\nDataEncryption=512\n")
        assert _classes(out) == {"WeakFallback": "Vulnerable"}, v


# ---------------------------------------------------------------- R6

def test_r6_public_and_private_keys():
    text = '%any %any : PSK "12345678"\n10.0.0.1 : PSK "a long private secret"\n'
    out = _audit(ConfigDialect.IpsecSecrets, text)
    assert _classes(out) == {"L2tpKnownPsk": "Vulnerable"}
    assert out[0].verdict.evidence == ("t.conf:1",)


def test_r6_custom_list():
    from vpnprobe.ipsec import PskCandidateList
    extra = PskCandidateList(["site-key"])
    out = _audit(ConfigDialect.IpsecSecrets, ": PSK site-key\n", public_psks=extra)
    assert _classes(out) == {"L2tpKnownPsk": "Vulnerable"}


def test_rsa_entries_ignored():
    assert _audit(ConfigDialect.IpsecSecrets, ": RSA server.key\n") == []


# ---------------------------------------------------------------- purity

_conns = [
    "conn a\n  right=1.2.3.4\n  rightauth=pubkey\n",
    "conn b\n  right=vpn.example.com\n  rightauth=pubkey\n  rightid=%any\n",
    "conn c\n  right=vpn.example.com\n  rightauth=pubkey\n",
    "conn d\n  right=10.0.0.1\n  rightauth=psk\n",
]


@settings(max_examples=50, deadline=None)
@given(st.permutations(_conns))
def test_findings_independent_of_section_order(perm):
    base = _audit(ConfigDialect.IpsecConf, "".join(_conns))
    got = _audit(ConfigDialect.IpsecConf, "".join(perm))
    assert _classes(got) == _classes(base)
    details = lambda fs: set(fs[0].verdict.note.split(": ", 1)[1].split("; "))
    assert details(got) == details(base)


def test_evaluation_is_pure():
    tree = parse_config(ConfigDialect.WindowsPhonebook, "[a]\nVpnStrategy=8\n", source="x.pbk")
    first = evaluate_rules(tree)
    assert evaluate_rules(tree) == first
    assert len(tree) == 1


def test_rule_table_covers_one_class_each():
    assert [r.id for r in ca.RULES] == ["R1", "R2", "R3", "R4", "R5", "R6"]
    assert len({r.vuln_class for r in ca.RULES}) == 6
    assert all(isinstance(r.vuln_class, VulnClass) for r in ca.RULES)


def test_levels_are_findings_or_nothing():
    for name in os.listdir(FIXTURES):
        if name.endswith(".json"):
            continue
        for f in audit_file(str(FIXTURES / name)):
            assert f.verdict.level in (VerdictLevel.Vulnerable, VerdictLevel.Weak)
