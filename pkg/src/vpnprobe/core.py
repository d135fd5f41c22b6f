"""Shared domain model: vulnerability taxonomy, verdicts, findings, transcripts
and report rendering.
"""

from __future__ import annotations

import enum
import json
import random
import secrets
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Optional

REPORT_VERSION = 1


class ProtocolId(str, enum.Enum):
    PPTP = "PPTP"
    SSTP = "SSTP"
    L2TP_IPSEC = "L2TP_IPSEC"
    CISCO_IPSEC = "CISCO_IPSEC"
    IKEV2 = "IKEV2"
    OPENVPN = "OPENVPN"
    SOFTETHER = "SOFTETHER"


class VulnClass(str, enum.Enum):
    # declaration order is the report column order
    PptpOptionalEncryption = "PptpOptionalEncryption"
    SstpIgnoredCertFailure = "SstpIgnoredCertFailure"
    Ikev2ImproperServerVerification = "Ikev2ImproperServerVerification"
    OpenVpnCredentialLeakage = "OpenVpnCredentialLeakage"
    SoftEtherNoServerVerification = "SoftEtherNoServerVerification"
    SoftEtherWrongVpnServer = "SoftEtherWrongVpnServer"
    L2tpKnownPsk = "L2tpKnownPsk"
    CiscoKnownPsk = "CiscoKnownPsk"
    WeakFallback = "WeakFallback"


class AttackerType(str, enum.Enum):
    Network = "Network"
    Local = "Local"


class VerdictLevel(str, enum.Enum):
    Vulnerable = "Vulnerable"
    Weak = "Weak"
    Secure = "Secure"
    Inconclusive = "Inconclusive"


class Direction(str, enum.Enum):
    ClientToProbe = "ClientToProbe"
    ProbeToClient = "ProbeToClient"
    ProbeToUpstream = "ProbeToUpstream"
    UpstreamToProbe = "UpstreamToProbe"
    LocalObservation = "LocalObservation"


LAYERS = frozenset({"tcp", "udp", "tls", "http", "sstp", "pptp", "ppp", "gre",
                    "ike", "esp", "l2tp", "eap", "mgmt", "file", "probe"})

_ATTACKER = {
    VulnClass.PptpOptionalEncryption: AttackerType.Network,
    VulnClass.SstpIgnoredCertFailure: AttackerType.Network,
    VulnClass.Ikev2ImproperServerVerification: AttackerType.Network,
    VulnClass.OpenVpnCredentialLeakage: AttackerType.Local,
    VulnClass.SoftEtherNoServerVerification: AttackerType.Network,
    VulnClass.SoftEtherWrongVpnServer: AttackerType.Local,
    VulnClass.L2tpKnownPsk: AttackerType.Network,
    VulnClass.CiscoKnownPsk: AttackerType.Network,
    VulnClass.WeakFallback: AttackerType.Network,
}

REMEDIATION = {
    VulnClass.PptpOptionalEncryption:
        "Set the PPTP adapter's Data encryption option to 'Maximum strength encryption' "
        "so that MPPE-128 is mandatory; prefer retiring PPTP.",
    VulnClass.SstpIgnoredCertFailure:
        "Do not use an SSTP client that continues after certificate verification errors; "
        "ship or recommend a client that aborts on an untrusted server certificate.",
    VulnClass.Ikev2ImproperServerVerification:
        "Set rightid to the server's domain name or certificate DN instead of %any, "
        "or set right to the server's domain name and leave rightid unset.",
    VulnClass.OpenVpnCredentialLeakage:
        "Restrict the profile's ACL to its owner, or hand credentials to the daemon over "
        "a password-protected management interface instead of writing them to disk.",
    VulnClass.SoftEtherNoServerVerification:
        "Set CheckServerCert to true in the SoftEther connection settings.",
    VulnClass.SoftEtherWrongVpnServer:
        "Require password authentication on the vpnclient management port.",
    VulnClass.L2tpKnownPsk:
        "Replace the service-wide pre-shared key with certificate authentication for IKEv1.",
    VulnClass.CiscoKnownPsk:
        "Replace the service-wide pre-shared key with certificate authentication for IKEv1.",
    VulnClass.WeakFallback:
        "Remove PPTP and public-PSK L2TP/IPsec from automatic protocol selection; "
        "never set VpnStrategy to 0, 2, 4, 6 or 8.",
}

MATRIX_CELL = {
    VerdictLevel.Vulnerable: "✗",
    VerdictLevel.Weak: "✗",
    VerdictLevel.Secure: "✓",
}
NOT_PROBED = "–"


class OrderingError(ValueError):
    """A transcript event would break timestamp ordering."""


class ReportError(ValueError):
    pass


class ProbeError(RuntimeError):
    """A probe could not run (bind failure, unreachable upstream, ...)."""


def attacker_of(vuln: VulnClass) -> AttackerType:
    return _ATTACKER[VulnClass(vuln)]


class Randomness:
    """Source of protocol randomness (nonces, challenges, SPIs, DH exponents).

    Unseeded instances draw from ``secrets``; seeded instances are
    deterministic and exist for reproducible test transcripts only.
    """

    def __init__(self, seed: Optional[int] = None):
        self.seed = seed
        self._rng = random.Random(seed) if seed is not None else None
        self._lock = threading.Lock()

    def bytes(self, n: int) -> bytes:
        if self._rng is None:
            return secrets.token_bytes(n)
        with self._lock:
            return self._rng.randbytes(n)

    def randint(self, lo: int, hi: int) -> int:
        if self._rng is None:
            return lo + secrets.randbelow(hi - lo + 1)
        with self._lock:
            return self._rng.randint(lo, hi)

    def fork(self) -> "Randomness":
        """Independent stream; deterministic when this one is seeded."""
        if self._rng is None:
            return Randomness()
        return Randomness(self.randint(0, 2**63))


@dataclass(frozen=True)
class Credentials:
    username: str
    password: str

    @classmethod
    def parse(cls, text: str) -> "Credentials":
        user, sep, pw = text.partition(":")
        if not sep:
            raise ValueError("credentials must be given as user:password")
        return cls(user, pw)

    def require(self) -> "Credentials":
        if not self.username or not self.password:
            raise ValueError("this probe mode needs a non-empty username and password")
        return self


class TrustRole(str, enum.Enum):
    UntrustedSelfSigned = "UntrustedSelfSigned"
    ValidWrongIdentity = "ValidWrongIdentity"
    ValidCorrectIdentity = "ValidCorrectIdentity"


@dataclass(frozen=True)
class CertificateMaterial:
    """Certificate the probe presents.  ``key_ref`` is opaque to the domain
    model; :mod:`vpnprobe.tlsutil` stores the PEM blobs there."""

    subject_name: str
    self_signed: bool
    trust_role: TrustRole
    key_ref: object = field(default=None, repr=False, compare=False)

    def check_against(self, expected_name: str) -> "CertificateMaterial":
        if self.trust_role is TrustRole.ValidWrongIdentity and self.subject_name == expected_name:
            raise ValueError(f"a wrong-identity certificate must not name {expected_name!r}")
        if self.trust_role is TrustRole.ValidCorrectIdentity and self.subject_name != expected_name:
            raise ValueError(f"certificate names {self.subject_name!r}, expected {expected_name!r}")
        return self


@dataclass(frozen=True)
class TranscriptEvent:
    timestamp: int
    direction: Direction
    layer: str
    plaintext: bool
    summary: str
    raw: Optional[bytes] = None

    def to_json(self) -> dict:
        d = {"timestamp": self.timestamp, "direction": self.direction.value,
             "layer": self.layer, "plaintext": self.plaintext, "summary": self.summary}
        if self.raw is not None:
            d["raw"] = self.raw.hex()
        return d


_session_counter = iter(range(1, 1 << 62))
_session_lock = threading.Lock()


def _next_session_id(prefix: str) -> str:
    with _session_lock:
        return f"{prefix}-{next(_session_counter)}"


class Transcript:
    """Ordered event log for one probe session.

    Sessions own their transcript; it is not shared between threads except
    through :class:`TranscriptCollector`.
    """

    def __init__(self, session: Optional[str] = None, prefix: str = "s"):
        self.session = session or _next_session_id(prefix)
        self.events: list[TranscriptEvent] = []
        self._lock = threading.Lock()
        self.started_at = datetime.now(timezone.utc).isoformat()

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def record(self, direction: Direction, layer: str, summary: str, *,
               plaintext: bool = True, raw: Optional[bytes] = None,
               timestamp: Optional[int] = None) -> str:
        """Append an event stamped now (or at ``timestamp``); returns its reference."""
        with self._lock:
            ts = time.monotonic_ns() if timestamp is None else timestamp
            record_event(self, TranscriptEvent(ts, Direction(direction), layer, plaintext, summary, raw))
            return self.ref(len(self.events) - 1)

    def ref(self, index: int) -> str:
        if index < 0:
            index += len(self.events)
        return f"{self.session}#{index}"

    def last_ref(self) -> str:
        return self.ref(-1)

    def find(self, predicate) -> list[int]:
        return [i for i, e in enumerate(self.events) if predicate(e)]

    def resolve(self, ref: str) -> Optional[TranscriptEvent]:
        session, _, idx = ref.rpartition("#")
        if session != self.session or not idx.isdigit():
            return None
        i = int(idx)
        return self.events[i] if i < len(self.events) else None

    def to_json(self) -> dict:
        return {"session": self.session, "started_at": self.started_at,
                "events": [e.to_json() for e in self.events]}


def record_event(transcript: Transcript, event: TranscriptEvent) -> Transcript:
    if event.layer not in LAYERS:
        raise ValueError(f"unknown transcript layer {event.layer!r}")
    if transcript.events and event.timestamp < transcript.events[-1].timestamp:
        raise OrderingError(
            f"event at {event.timestamp} precedes last event at {transcript.events[-1].timestamp}")
    transcript.events.append(event)
    return transcript


class TranscriptCollector:
    """Gathers events from several sessions into per-session transcripts."""

    def __init__(self):
        self._lock = threading.Lock()
        self._transcripts: dict[str, Transcript] = {}

    def submit(self, session: str, direction: Direction, layer: str, summary: str, **kw) -> str:
        with self._lock:
            tr = self._transcripts.setdefault(session, Transcript(session))
            return tr.record(direction, layer, summary, **kw)

    def transcript(self, session: str) -> Transcript:
        with self._lock:
            return self._transcripts[session]

    def sessions(self) -> list[str]:
        with self._lock:
            return sorted(self._transcripts)


@dataclass(frozen=True)
class Verdict:
    level: VerdictLevel
    evidence: tuple[str, ...] = ()
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "level", VerdictLevel(self.level))
        object.__setattr__(self, "evidence", tuple(self.evidence))
        if self.level in (VerdictLevel.Vulnerable, VerdictLevel.Weak) and not self.evidence:
            raise ValueError(f"{self.level.value} verdict needs at least one evidence reference")
        if self.level is VerdictLevel.Inconclusive and not self.note:
            raise ValueError("Inconclusive verdict needs a timeout/abort reason")

    @classmethod
    def vulnerable(cls, evidence: Iterable[str], note: str = "") -> "Verdict":
        return cls(VerdictLevel.Vulnerable, tuple(evidence), note)

    @classmethod
    def weak(cls, evidence: Iterable[str], note: str = "") -> "Verdict":
        return cls(VerdictLevel.Weak, tuple(evidence), note)

    @classmethod
    def secure(cls, note: str = "", evidence: Iterable[str] = ()) -> "Verdict":
        return cls(VerdictLevel.Secure, tuple(evidence), note)

    @classmethod
    def inconclusive(cls, reason: str, evidence: Iterable[str] = ()) -> "Verdict":
        return cls(VerdictLevel.Inconclusive, tuple(evidence), reason)

    @property
    def is_finding(self) -> bool:
        return self.level in (VerdictLevel.Vulnerable, VerdictLevel.Weak)


@dataclass(frozen=True)
class Finding:
    vuln_class: VulnClass
    verdict: Verdict
    target: str
    attacker: Optional[AttackerType] = None
    remediation: Optional[str] = None

    def __post_init__(self):
        vc = VulnClass(self.vuln_class)
        object.__setattr__(self, "vuln_class", vc)
        expected = attacker_of(vc)
        if self.attacker is None:
            object.__setattr__(self, "attacker", expected)
        elif AttackerType(self.attacker) is not expected:
            raise ValueError(f"{vc.value} is a {expected.value}-attacker class")
        else:
            object.__setattr__(self, "attacker", AttackerType(self.attacker))
        if self.remediation is None:
            object.__setattr__(self, "remediation", REMEDIATION[vc])

    @property
    def key(self) -> tuple[str, VulnClass]:
        return (self.target, self.vuln_class)

    def to_json(self) -> dict:
        return {
            "vuln_class": self.vuln_class.value,
            "attacker": self.attacker.value,
            "verdict": self.verdict.level.value,
            "evidence": list(self.verdict.evidence),
            "note": self.verdict.note,
            "remediation": self.remediation,
        }

    @classmethod
    def from_json(cls, target: str, d: dict) -> "Finding":
        verdict = Verdict(VerdictLevel(d["verdict"]), tuple(d.get("evidence", ())), d.get("note", ""))
        return cls(vuln_class=VulnClass(d["vuln_class"]), verdict=verdict,
                   target=target, attacker=AttackerType(d["attacker"]),
                   remediation=d.get("remediation"))


class FindingsCollector:
    """Thread-safe accumulator with serialized append semantics."""

    def __init__(self):
        self._lock = threading.Lock()
        self._findings: dict[tuple[str, VulnClass], Finding] = {}

    def submit(self, finding: Finding) -> None:
        with self._lock:
            if finding.key in self._findings:
                raise ReportError(f"duplicate finding for {finding.key}")
            self._findings[finding.key] = finding

    def findings(self) -> list[Finding]:
        with self._lock:
            return list(self._findings.values())


@dataclass
class Report:
    findings: list[Finding]
    generated_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def __post_init__(self):
        _check_unique(self.findings)

    def targets(self) -> list[str]:
        return sorted({f.target for f in self.findings})

    def render(self, fmt: str = "json") -> bytes:
        if fmt == "json":
            return _render_json(self)
        if fmt == "matrix":
            return _render_matrix(self)
        raise ReportError(f"unknown report format {fmt!r}")


def _check_unique(findings: Iterable[Finding]) -> None:
    seen = set()
    for f in findings:
        if f.key in seen:
            raise ReportError(f"duplicate finding for target {f.key[0]!r}, {f.key[1].value}")
        seen.add(f.key)


_CLASS_ORDER = {vc: i for i, vc in enumerate(VulnClass)}


def _render_json(report: Report) -> bytes:
    targets = []
    for label in report.targets():
        fs = sorted((f for f in report.findings if f.target == label),
                    key=lambda f: _CLASS_ORDER[f.vuln_class])
        targets.append({"label": label, "findings": [f.to_json() for f in fs]})
    doc = {"version": REPORT_VERSION, "generated_at": report.generated_at, "targets": targets}
    return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _render_matrix(report: Report) -> bytes:
    lines = ["target\t" + " ".join(vc.value for vc in VulnClass)]
    for label in report.targets():
        by_class = {f.vuln_class: f for f in report.findings if f.target == label}
        cells = [MATRIX_CELL.get(by_class[vc].verdict.level, NOT_PROBED) if vc in by_class else NOT_PROBED
                 for vc in VulnClass]
        lines.append(f"{label}\t" + " ".join(cells))
    return ("\n".join(lines) + "\n").encode("utf-8")


def render_report(findings: Iterable[Finding], fmt: str = "json",
                  generated_at: Optional[str] = None) -> bytes:
    findings = list(findings)
    report = Report(findings) if generated_at is None else Report(findings, generated_at)
    return report.render(fmt)


def parse_report(data: bytes) -> Report:
    doc = json.loads(data.decode("utf-8"))
    if doc.get("version") != REPORT_VERSION:
        raise ReportError(f"unsupported report version {doc.get('version')!r}")
    findings = [Finding.from_json(t["label"], f) for t in doc["targets"] for f in t["findings"]]
    return Report(findings, doc["generated_at"])


_LEVEL_RANK = {VerdictLevel.Secure: 0, VerdictLevel.Inconclusive: 0,
               VerdictLevel.Weak: 1, VerdictLevel.Vulnerable: 1}


def exit_code(findings: Iterable[Finding]) -> int:
    """0 when nothing is Vulnerable or Weak, 1 otherwise."""
    return max((_LEVEL_RANK[f.verdict.level] for f in findings), default=0)
