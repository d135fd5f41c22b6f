"""Static checks over VPN client configuration files.

Five dialects are parsed into a :class:`ConfigTree` whose entries remember
their source lines, then a fixed rule set (R1-R6) runs over the tree.  Rules
are pure functions of the tree, except R3 which may look at the file an
``auth-user-pass`` directive points to when ``filesystem=True``.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import os
import re
import shlex
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .core import Finding, Verdict, VerdictLevel, VulnClass
from .fallback import VPN_STRATEGY
from .ipsec import PskCandidateList
from .local_audit import readable_by_others

log = logging.getLogger(__name__)


class ConfigDialect(str, enum.Enum):
    IpsecConf = "IpsecConf"
    IpsecSecrets = "IpsecSecrets"
    OpenVpnProfile = "OpenVpnProfile"
    SoftEtherClientConfig = "SoftEtherClientConfig"
    WindowsPhonebook = "WindowsPhonebook"


DIALECT_NAMES = {
    "ipsec-conf": ConfigDialect.IpsecConf,
    "ipsec-secrets": ConfigDialect.IpsecSecrets,
    "openvpn": ConfigDialect.OpenVpnProfile,
    "softether": ConfigDialect.SoftEtherClientConfig,
    "phonebook": ConfigDialect.WindowsPhonebook,
}


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Entry:
    key: str
    values: list = field(default_factory=list)
    lines: list = field(default_factory=list)

    @property
    def value(self) -> str:
        """Last assignment wins, as in the tools that read these files."""
        return self.values[-1] if self.values else ""

    @property
    def line(self) -> int:
        return self.lines[-1]


@dataclass
class Section:
    name: str
    line: int
    entries: dict = field(default_factory=dict)


class ConfigTree:
    def __init__(self, dialect: ConfigDialect, source: Optional[str] = None):
        self.dialect = ConfigDialect(dialect)
        self.source = source
        self.sections: dict[str, Section] = {}
        self.warnings: list[str] = []

    @property
    def case_insensitive(self) -> bool:
        return self.dialect is ConfigDialect.WindowsPhonebook

    def _norm(self, name: str) -> str:
        return name.casefold() if self.case_insensitive else name

    def add_section(self, name: str, line: int) -> Section:
        key = self._norm(name)
        if key not in self.sections:
            self.sections[key] = Section(name, line)
        return self.sections[key]

    def add(self, section: str, key: str, value, line: int, section_line: Optional[int] = None) -> Entry:
        sec = self.add_section(section, section_line or line)
        k = self._norm(key)
        entry = sec.entries.get(k)
        if entry is None:
            entry = sec.entries[k] = Entry(key)
        if isinstance(value, list):
            entry.values.extend(value)
        else:
            entry.values.append(value)
        entry.lines.append(line)
        return entry

    def section(self, name: str) -> Optional[Section]:
        return self.sections.get(self._norm(name))

    def get(self, section: str, key: str) -> Optional[Entry]:
        sec = self.section(section)
        return None if sec is None else sec.entries.get(self._norm(key))

    def __iter__(self):
        return iter(self.sections.values())

    def __len__(self):
        return len(self.sections)

    def span(self, line: int) -> str:
        return f"{self.source or '<config>'}:{line}"


# ---------------------------------------------------------------- parsing


def _decode(data: bytes, tree: ConfigTree) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        msg = f"not valid UTF-8 ({exc.reason} at byte {exc.start}); undecodable bytes replaced"
        log.warning("%s: %s", tree.source or "config", msg)
        tree.warnings.append(msg)
        return data.decode("utf-8", "replace")


def _lines(text: str):
    if text.startswith("﻿"):
        text = text[1:]
    for no, line in enumerate(text.splitlines(), 1):
        yield no, line


_KV = re.compile(r"^\s*([A-Za-z0-9_.\-]+)\s*=\s*(.*?)\s*$")


def _unquote(v: str) -> str:
    if len(v) >= 2 and v[0] == v[-1] == '"':
        return v[1:-1]
    return v


def _strip_comment(line: str) -> str:
    # '#' starts a comment unless inside double quotes
    out, quoted = [], False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out).rstrip()


def _parse_ipsec_conf(text: str, tree: ConfigTree) -> None:
    current, header_line = None, 0
    for no, raw in _lines(text):
        line = _strip_comment(raw)
        if not line.strip() or line.strip() in ("...", "…"):
            continue  # blank, comment or an elision in a quoted excerpt
        if not line[0].isspace():
            words = line.split()
            if words[0] in ("conn", "ca", "config"):
                if len(words) != 2:
                    raise ConfigParseError(f"'{words[0]}' needs exactly one name", no)
                current, header_line = f"{words[0]} {words[1]}", no
                tree.add_section(current, no)
                continue
            if words[0] == "include":
                tree.add("", "include", line.split(None, 1)[1] if len(words) > 1 else "", no)
                continue
            if words[0] == "version":
                continue
            m = _KV.match(line)
            if m is None:
                raise ConfigParseError(f"expected a section header or key=value, got {line.strip()!r}", no)
            # unindented key=value outside a section: a profile excerpt without its conn line
            current = None
            tree.add("", m.group(1), _unquote(m.group(2)), no)
            continue
        m = _KV.match(line)
        if m is None:
            raise ConfigParseError(f"expected key=value, got {line.strip()!r}", no)
        section = current if current is not None else ""
        tree.add(section, m.group(1), _unquote(m.group(2)), no, header_line or no)


_SECRET = re.compile(r'^(?P<sel>[^:]*?)\s*:\s*(?P<type>[A-Za-z0-9]+)\s*(?P<rest>.*)$')


def _parse_ipsec_secrets(text: str, tree: ConfigTree) -> None:
    for no, raw in _lines(text):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        if line.lstrip().startswith("include "):
            tree.add("", "include", line.split(None, 1)[1], no)
            continue
        m = _SECRET.match(line.strip())
        if m is None:
            raise ConfigParseError("expected 'selectors : TYPE secret'", no)
        rest = m.group("rest").strip()
        try:
            words = shlex.split(rest) if rest else []
        except ValueError as exc:
            raise ConfigParseError(f"bad secret value: {exc}", no)
        value = words[0] if len(words) == 1 else rest
        tree.add(m.group("sel").strip(), m.group("type").upper(), value, no)


def _parse_openvpn(text: str, tree: ConfigTree) -> None:
    block, block_start, block_lines = None, 0, []
    for no, raw in _lines(text):
        stripped = raw.strip()
        if block is not None:
            if stripped == f"</{block}>":
                tree.add("", f"<{block}>", block_lines, block_start)
                block, block_lines = None, []
            elif re.fullmatch(r"</[^>]+>", stripped):
                raise ConfigParseError(f"{stripped} closes <{block}> opened on line {block_start}", no)
            else:
                block_lines.append(raw.rstrip("\r"))
            continue
        if not stripped or stripped[0] in "#;":
            continue
        m = re.fullmatch(r"<([A-Za-z0-9_\-]+)>", stripped)
        if m:
            block, block_start = m.group(1), no
            continue
        if stripped.startswith("</"):
            raise ConfigParseError(f"{stripped} without an opening tag", no)
        name, _, args = stripped.partition(" ")
        tree.add("", name.lstrip("-"), args.strip(), no)
    if block is not None:
        raise ConfigParseError(f"<{block}> is never closed", block_start)


_SE_DECLARE = re.compile(r"^declare\s+(\S+)$")
_SE_ITEM = re.compile(r"^(\w+)\s+(\S+)(?:\s+(.*))?$")


def _parse_softether(text: str, tree: ConfigTree) -> None:
    stack: list[str] = []
    pending: Optional[tuple[str, int]] = None
    for no, raw in _lines(text):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("//"):
            continue
        if pending is not None:
            if line != "{":
                raise ConfigParseError(f"expected '{{' after declare {pending[0]}", no)
            stack.append(pending[0])
            tree.add_section(".".join(stack), pending[1])
            pending = None
            continue
        m = _SE_DECLARE.match(line)
        if m:
            pending = (m.group(1), no)
            continue
        if line == "}":
            if not stack:
                raise ConfigParseError("unbalanced '}'", no)
            stack.pop()
            continue
        m = _SE_ITEM.match(line)
        if m is None or not stack:
            raise ConfigParseError(f"expected '<type> <name> <value>' inside a declare block, got {line!r}", no)
        tree.add(".".join(stack), m.group(2), (m.group(3) or "").strip(), no)
    if pending is not None:
        raise ConfigParseError(f"declare {pending[0]} has no body", pending[1])
    if stack:
        raise ConfigParseError(f"declare {stack[-1]} is never closed", len(text.splitlines()))


def _parse_phonebook(text: str, tree: ConfigTree) -> None:
    current = None
    for no, raw in _lines(text):
        line = raw.strip()
        if not line or line.startswith(";") or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigParseError(f"malformed section header {line!r}", no)
            current = line[1:-1]
            tree.add_section(current, no)
            continue
        key, eq, value = line.partition("=")
        if not eq or not key.strip():
            raise ConfigParseError(f"expected key=value, got {line!r}", no)
        if current is None:
            raise ConfigParseError("key=value before the first [entry]", no)
        tree.add(current, key.strip(), value.strip(), no)


_PARSERS = {
    ConfigDialect.IpsecConf: _parse_ipsec_conf,
    ConfigDialect.IpsecSecrets: _parse_ipsec_secrets,
    ConfigDialect.OpenVpnProfile: _parse_openvpn,
    ConfigDialect.SoftEtherClientConfig: _parse_softether,
    ConfigDialect.WindowsPhonebook: _parse_phonebook,
}


def parse_config(dialect, data, source: Optional[str] = None) -> ConfigTree:
    if isinstance(dialect, str) and dialect in DIALECT_NAMES:
        dialect = DIALECT_NAMES[dialect]
    tree = ConfigTree(ConfigDialect(dialect), source)
    text = _decode(data, tree) if isinstance(data, (bytes, bytearray)) else data
    _PARSERS[tree.dialect](text, tree)
    return tree


def detect_dialect(path: str, data: bytes) -> ConfigDialect:
    name = os.path.basename(path).lower()
    text = data.decode("utf-8", "replace")
    if name.endswith(".ovpn"):
        return ConfigDialect.OpenVpnProfile
    if name.endswith(".pbk"):
        return ConfigDialect.WindowsPhonebook
    if name.endswith(".secrets"):
        return ConfigDialect.IpsecSecrets
    if name == "vpn_client.config" or re.search(r"^\s*declare\s+root\s*$", text, re.M):
        return ConfigDialect.SoftEtherClientConfig
    if re.search(r"^\s*\[[^\]]+\]\s*$", text, re.M) and re.search(
            r"^\s*(VpnStrategy|DataEncryption|PhoneNumber|MEDIA)\s*=", text, re.M | re.I):
        return ConfigDialect.WindowsPhonebook
    if re.search(r'^[^#\n]*:\s*(PSK|RSA|EAP|XAUTH)\b', text, re.M):
        return ConfigDialect.IpsecSecrets
    if re.search(r"^conn\s+\S+", text, re.M) or re.search(r"^\s*(left|right)(auth|id)?\s*=", text, re.M):
        return ConfigDialect.IpsecConf
    if re.search(r"^\s*(client|remote\s+\S+|dev\s+tun|dev\s+tap|auth-user-pass)\b", text, re.M):
        return ConfigDialect.OpenVpnProfile
    raise ValueError(f"cannot tell the configuration dialect of {path}; pass --dialect")


# ---------------------------------------------------------------- rules


@dataclass(frozen=True)
class AuditRule:
    id: str
    dialect: ConfigDialect
    description: str
    vuln_class: VulnClass
    check: Callable = field(repr=False, compare=False)


@dataclass(frozen=True)
class _Hit:
    level: VerdictLevel
    line: int
    detail: str


_HOSTNAME = re.compile(r"^(?=.{1,253}$)([A-Za-z0-9]([A-Za-z0-9\-]{0,61}[A-Za-z0-9])?\.)+[A-Za-z]{2,63}\.?$")


def is_domain_name(value: str) -> bool:
    value = value.strip().lstrip("@")
    if not value or value.startswith("%"):
        return False
    try:
        ipaddress.ip_address(value)
        return False
    except ValueError:
        return bool(_HOSTNAME.match(value))


def _conn_views(tree: ConfigTree):
    """(name, effective key→Entry) per connection, with ``conn %default``
    folded in underneath."""
    default = tree.section("conn %default")
    base = dict(default.entries) if default else {}
    for sec in tree:
        if sec.name.startswith("conn ") and sec.name != "conn %default" or sec.name == "":
            view = dict(base)
            view.update(sec.entries)
            yield (sec.name or "(unnamed profile)"), view


def _r1(tree: ConfigTree, ctx) -> list[_Hit]:
    hits = []
    for name, view in _conn_views(tree):
        auth = view.get("rightauth")
        if auth is None or auth.value.lower() != "pubkey":
            continue
        rid = view.get("rightid")
        if rid is not None and rid.value.strip() in ("%any", ""):
            shown = rid.value.strip() or "(empty)"
            hits.append(_Hit(VerdictLevel.Vulnerable, rid.line,
                             f"{name}: rightid={shown} accepts any certified server"))
        elif rid is None:
            right = view.get("right")
            if right is None or not is_domain_name(right.value):
                where = right.line if right is not None else auth.line
                shown = right.value if right is not None else "(unset)"
                hits.append(_Hit(VerdictLevel.Vulnerable, where,
                                 f"{name}: rightid unset and right={shown} is not a domain name, "
                                 f"so no server name is checked"))
    return hits


def _r2(tree: ConfigTree, ctx) -> list[_Hit]:
    hits = []
    for sec in tree:
        leaf = sec.name.rsplit(".", 1)[-1]
        entry = sec.entries.get("CheckServerCert")
        if entry is not None:
            if entry.value.strip().lower() == "false":
                hits.append(_Hit(VerdictLevel.Vulnerable, entry.line, f"{sec.name}: CheckServerCert false"))
        elif leaf.startswith("Account") and tree.section(sec.name + ".ClientOption") is not None:
            # an account without the key gets the client's default, which is false
            hits.append(_Hit(VerdictLevel.Vulnerable, sec.line,
                             f"{sec.name}: CheckServerCert not set (defaults to false)"))
    return hits


def _r3(tree: ConfigTree, ctx) -> list[_Hit]:
    hits = []
    block = tree.get("", "<auth-user-pass>")
    if block is not None and any(v.strip() for v in block.values):
        hits.append(_Hit(VerdictLevel.Vulnerable, block.lines[0], "credentials inline in <auth-user-pass>"))
    ref = tree.get("", "auth-user-pass")
    if ref is not None:
        for arg, line in zip(ref.values, ref.lines):
            if not arg:
                continue  # prompts interactively
            path = shlex.split(arg)[0] if arg else ""
            if not ctx.get("filesystem") or tree.source is None:
                hits.append(_Hit(VerdictLevel.Weak, line,
                                 f"credentials stored in {path}; permissions not checked"))
                continue
            full = path if os.path.isabs(path) else os.path.join(os.path.dirname(tree.source), path)
            if not os.path.exists(full):
                hits.append(_Hit(VerdictLevel.Weak, line, f"credential file {path} not found; cannot check it"))
            elif readable_by_others(full):
                hits.append(_Hit(VerdictLevel.Vulnerable, line, f"credential file {path} is readable by other users"))
    return hits


# DataEncryption levels: 0 none, 8 optional, 256 require, 512 maximum strength
DATA_ENCRYPTION_MAX = 512
DATA_ENCRYPTION_DEFAULT = 8
PHONEBOOK_DEFAULT_STRATEGY = 0
WEAK_STRATEGIES = frozenset({0, 2, 4, 6, 8})


def _int(entry: Optional["Entry"], default: Optional[int]) -> Optional[int]:
    if entry is None:
        return default
    try:
        return int(entry.value.strip())
    except ValueError:
        return None


def _r4(tree: ConfigTree, ctx) -> list[_Hit]:
    from .core import ProtocolId
    hits = []
    for sec in tree:
        vpn_type = _int(sec.entries.get("type"), 2)
        if vpn_type != 2:
            continue  # not a VPN entry
        strategy = _int(sec.entries.get("vpnstrategy"), PHONEBOOK_DEFAULT_STRATEGY)
        if ProtocolId.PPTP not in VPN_STRATEGY.get(strategy, ()):
            continue
        enc = sec.entries.get("dataencryption")
        level = _int(enc, DATA_ENCRYPTION_DEFAULT)
        if level != DATA_ENCRYPTION_MAX:
            line = enc.line if enc is not None else sec.line
            shown = enc.value if enc is not None else f"unset (={DATA_ENCRYPTION_DEFAULT})"
            hits.append(_Hit(VerdictLevel.Vulnerable, line,
                             f"[{sec.name}] PPTP allowed with DataEncryption={shown}, not maximum strength"))
    return hits


def _r5(tree: ConfigTree, ctx) -> list[_Hit]:
    hits = []
    for sec in tree:
        entry = sec.entries.get("vpnstrategy")
        if entry is not None and _int(entry, None) in WEAK_STRATEGIES:
            hits.append(_Hit(VerdictLevel.Vulnerable, entry.line,
                             f"[{sec.name}] VpnStrategy={entry.value.strip()} falls back through "
                             f"IKEv2, SSTP, PPTP and L2TP/IPsec"))
    return hits


def _r6(tree: ConfigTree, ctx) -> list[_Hit]:
    known = {c.key: c.label for c in ctx["public_psks"].candidates}
    hits = []
    for sec in tree:
        entry = sec.entries.get("PSK")
        if entry is None:
            continue
        for value, line in zip(entry.values, entry.lines):
            key = value.encode("utf-8")
            if key in known:
                who = sec.name or "any peer"
                hits.append(_Hit(VerdictLevel.Vulnerable, line,
                                 f"{who}: pre-shared key is publicly known ({known[key]})"))
    return hits


RULES = (
    AuditRule("R1", ConfigDialect.IpsecConf, "rightauth=pubkey without a server identity to match",
              VulnClass.Ikev2ImproperServerVerification, _r1),
    AuditRule("R2", ConfigDialect.SoftEtherClientConfig, "CheckServerCert false",
              VulnClass.SoftEtherNoServerVerification, _r2),
    AuditRule("R3", ConfigDialect.OpenVpnProfile, "credentials stored inline or in an exposed file",
              VulnClass.OpenVpnCredentialLeakage, _r3),
    AuditRule("R4", ConfigDialect.WindowsPhonebook, "PPTP without maximum-strength encryption",
              VulnClass.PptpOptionalEncryption, _r4),
    AuditRule("R5", ConfigDialect.WindowsPhonebook, "VpnStrategy cycles through weak protocols",
              VulnClass.WeakFallback, _r5),
    AuditRule("R6", ConfigDialect.IpsecSecrets, "publicly known pre-shared key",
              VulnClass.L2tpKnownPsk, _r6),
)


def evaluate_rules(tree: ConfigTree, *, filesystem: bool = False, public_psks: Optional[PskCandidateList] = None,
                   target: Optional[str] = None) -> list[Finding]:
    """One finding per firing rule class, evidence sorted by line."""
    ctx = {"filesystem": filesystem, "public_psks": public_psks or PskCandidateList.public_defaults()}
    target = target or tree.source or "config"
    out = []
    for rule in RULES:
        if rule.dialect is not tree.dialect:
            continue
        hits = sorted(rule.check(tree, ctx), key=lambda h: (h.line, h.detail))
        if not hits:
            continue
        evidence = [tree.span(h.line) for h in hits]
        note = f"{rule.id}: " + "; ".join(h.detail for h in hits)
        if any(h.level is VerdictLevel.Vulnerable for h in hits):
            verdict = Verdict.vulnerable(evidence, note)
        else:
            verdict = Verdict.weak(evidence, note)
        out.append(Finding(rule.vuln_class, verdict, target))
    return out


def audit_file(path: str, dialect=None, *, filesystem: bool = True, public_psks=None) -> list[Finding]:
    with open(path, "rb") as fh:
        data = fh.read()
    if dialect is None:
        dialect = detect_dialect(path, data)
    tree = parse_config(dialect, data, source=path)
    return evaluate_rules(tree, filesystem=filesystem, public_psks=public_psks)


def audit_paths(paths: Iterable[str], dialect=None, **kw) -> list[Finding]:
    out = []
    for p in paths:
        out.extend(audit_file(p, dialect, **kw))
    return out
