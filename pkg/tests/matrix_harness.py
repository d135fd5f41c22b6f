"""Nine-class oracle matrix: one vulnerable and one hardened run per class.

Each case pairs a probe (or audit) with a simclient or fixture whose policy
knob decides the expected verdict.  Shared by the per-module tests and the
acceptance runner.
"""

from __future__ import annotations

import functools
import os
import stat
import tempfile
from dataclasses import dataclass

from vpnprobe import tlsutil
from vpnprobe.core import Credentials, ProtocolId, Randomness, TrustRole, VerdictLevel, VulnClass
from vpnprobe.net import Background
from vpnprobe.simclients import CertCheck, ClientPolicy, Endpoint, run_client

CREDS = Credentials("alice", "correct horse")
MARKER = bytes(range(64))
SERVER_NAME = "vpn.example.com"


@dataclass
class Material:
    authority: tlsutil.Authority
    self_signed: object
    wrong_identity: object


@functools.lru_cache(maxsize=1)
def material() -> Material:
    ca = tlsutil.make_authority("matrix test root")
    return Material(ca, tlsutil.self_signed(SERVER_NAME),
                    tlsutil.issue(ca, "attacker.example.net", TrustRole.ValidWrongIdentity))


def _serve_and_connect(probe, protocol, policy, endpoint_fn, seed, timeout=5.0):
    probe.bind()
    job = Background(probe.serve).start()
    outcome = run_client(protocol, policy, endpoint_fn(probe), CREDS, MARKER, rng=Randomness(seed + 1),
                         timeout=timeout, linger=0.05)
    finding, tr = job.result(timeout + 5)
    return finding, tr, outcome


def _tcp_ep(probe, ca_pem=None):
    h, p = probe.ports["tcp"].rsplit(":", 1)
    return Endpoint(h, int(p), server_name=SERVER_NAME, ca_pem=ca_pem)


def _udp_ep(probe, ca_pem=None):
    h, p = probe.ports["udp"].rsplit(":", 1)
    return Endpoint(h, int(p), server_name=SERVER_NAME, ca_pem=ca_pem)


def case_pptp(vulnerable: bool, seed: int):
    from vpnprobe.pptp import PptpProbe

    def ep(probe):
        e = _tcp_ep(probe)
        h, p = probe.ports["gre"].rsplit(":", 1)
        e.gre = (h, int(p))
        return e
    probe = PptpProbe(CREDS, port=0, gre_port=0, connect_timeout=5, phase_timeout=2, capture_window=2,
                      rng=Randomness(seed))
    return _serve_and_connect(probe, ProtocolId.PPTP, ClientPolicy(require_encryption=not vulnerable), ep, seed)


def case_sstp(vulnerable: bool, seed: int):
    from vpnprobe.sstp import SstpProbe
    probe = SstpProbe(CREDS, material().self_signed, port=0, connect_timeout=5, phase_timeout=2,
                      capture_window=2, rng=Randomness(seed))
    policy = ClientPolicy(verify_server_cert=CertCheck.Ignore if vulnerable else CertCheck.Strict)
    return _serve_and_connect(probe, ProtocolId.SSTP, policy, _tcp_ep, seed)


def case_ikev2(vulnerable: bool, seed: int, credentials=None):
    from vpnprobe.ipsec import Ikev2Probe
    m = material()
    probe = Ikev2Probe(m.wrong_identity, credentials, port=0, connect_timeout=5, phase_timeout=2,
                       capture_window=2, rng=Randomness(seed))
    policy = ClientPolicy(server_identity="%any" if vulnerable else SERVER_NAME)
    return _serve_and_connect(probe, ProtocolId.IKEV2, policy,
                              lambda p: _udp_ep(p, m.authority.cert_pem), seed)


def case_l2tp(vulnerable: bool, seed: int, cisco: bool = False):
    from vpnprobe.ipsec import Ikev1Mode, Ikev1PskProbe, PskCandidateList
    mode = Ikev1Mode.CiscoXauth if cisco else Ikev1Mode.L2tp
    probe = Ikev1PskProbe(PskCandidateList.public_defaults(), mode, port=0, connect_timeout=5,
                          phase_timeout=2, capture_window=2, rng=Randomness(seed))
    policy = ClientPolicy(psk=b"12345678" if vulnerable else None)
    proto = ProtocolId.CISCO_IPSEC if cisco else ProtocolId.L2TP_IPSEC
    return _serve_and_connect(probe, proto, policy, _udp_ep, seed)


def case_softether_tls(vulnerable: bool, seed: int):
    from vpnprobe.softether import SoftEtherTlsProbe
    probe = SoftEtherTlsProbe(material().self_signed, port=0, connect_timeout=5, phase_timeout=2,
                              rng=Randomness(seed))
    policy = ClientPolicy(verify_server_cert=CertCheck.Ignore if vulnerable else CertCheck.Strict)
    return _serve_and_connect(probe, ProtocolId.SOFTETHER, policy, _tcp_ep, seed)


def case_openvpn_files(vulnerable: bool, seed: int):
    from vpnprobe import local_audit
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "client.ovpn")
        with open(path, "w") as fh:
            fh.write("client\nremote vpn.example.com 1194\n<auth-user-pass>\nalice\n"
                     f"pw-{seed}\n</auth-user-pass>\n")
        os.chmod(path, 0o644 if vulnerable else 0o600)
        exposures = local_audit.scan_credential_files([d])
        return local_audit.exposure_finding(exposures, "openvpn-client"), None, exposures


def case_softether_mgmt(vulnerable: bool, seed: int):
    from vpnprobe import local_audit
    from vpnprobe.simclients.mgmt_servers import SoftEtherMgmtFixture
    with SoftEtherMgmtFixture(password=None if vulnerable else f"admin-{seed}") as fx:
        ep = local_audit.ManagementEndpoint(fx.port, local_audit.MgmtDialect.SoftEtherMgmt)
        finding, tr = local_audit.audit_management_interface(ep, target="softether-client")
    return finding, tr, None


def case_fallback(vulnerable: bool, seed: int):
    from vpnprobe.fallback import FallbackScenario, run_scenario
    P = ProtocolId
    # the hardened client never lists a weak protocol, so blocking leaves it nothing
    order = (P.OPENVPN, P.SSTP, P.L2TP_IPSEC) if vulnerable else (P.OPENVPN, P.SSTP)
    scenario = FallbackScenario(order, {P.OPENVPN, P.SSTP}, timeout=20)
    finding, tr = run_scenario(scenario, rng=Randomness(seed), phase_timeout=2)
    return finding, tr, None


CASES = {
    VulnClass.PptpOptionalEncryption: case_pptp,
    VulnClass.SstpIgnoredCertFailure: case_sstp,
    VulnClass.Ikev2ImproperServerVerification: case_ikev2,
    VulnClass.OpenVpnCredentialLeakage: case_openvpn_files,
    VulnClass.SoftEtherNoServerVerification: case_softether_tls,
    VulnClass.SoftEtherWrongVpnServer: case_softether_mgmt,
    VulnClass.L2tpKnownPsk: case_l2tp,
    VulnClass.CiscoKnownPsk: functools.partial(case_l2tp, cisco=True),
    VulnClass.WeakFallback: case_fallback,
}


def expected(vulnerable: bool) -> VerdictLevel:
    return VerdictLevel.Vulnerable if vulnerable else VerdictLevel.Secure


def run_case(vc: VulnClass, vulnerable: bool, seed: int):
    finding, tr, extra = CASES[vc](vulnerable, seed)
    assert finding.vuln_class is vc
    return finding, tr, extra


def world_readable(path: str) -> bool:
    return bool(os.stat(path).st_mode & stat.S_IROTH)
