"""Command-line entry point.

Every subcommand builds a :class:`RunPlan`; the plan's invocations each
return findings (and optionally a transcript), and the plan writes the
report.  Exit status: 0 nothing Vulnerable/Weak, 1 findings, 2 error.

Defaults for any long option can come from the environment:
``--phase-timeout`` reads ``VPNPROBE_PHASE_TIMEOUT`` and so on.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import tlsutil
from .core import (Credentials, Finding, ProbeError, ProtocolId, Randomness, ReportError, TrustRole,
                   exit_code, parse_report, render_report)

log = logging.getLogger("vpnprobe")

ENV_PREFIX = "VPNPROBE_"


class UsageError(Exception):
    pass


@dataclass
class RunPlan:
    target: str
    invocations: list = field(default_factory=list)  # callables -> (findings, transcripts)
    fmt: str = "json"
    output: Optional[str] = None
    transcript_out: Optional[str] = None

    def __post_init__(self):
        if not self.target:
            raise UsageError("target label must not be empty")

    def add(self, fn: Callable) -> "RunPlan":
        self.invocations.append(fn)
        return self

    def execute(self) -> int:
        if not self.invocations:
            raise UsageError("nothing to run")
        findings, transcripts = [], []
        for fn in self.invocations:
            fs, trs = fn()
            findings.extend(fs)
            transcripts.extend(t for t in trs if t is not None)
        data = render_report(findings, self.fmt)
        if self.output:
            with open(self.output, "wb") as fh:
                fh.write(data)
        else:
            sys.stdout.buffer.write(data)
            sys.stdout.flush()
        if self.transcript_out:
            with open(self.transcript_out, "w", encoding="utf-8") as fh:
                json.dump([t.to_json() for t in transcripts], fh, indent=2)
        return exit_code(findings)


# ---------------------------------------------------------------- helpers


def _hostport(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return default_host, int(text)
    return host or default_host, int(port)


def _creds(text: Optional[str]) -> Optional[Credentials]:
    return Credentials.parse(text) if text else None


def _announce(probe) -> None:
    print(probe.ready_line(), file=sys.stderr, flush=True)


def _single(probe) -> Callable:
    def run():
        probe.bind()
        _announce(probe)
        finding, tr = probe.serve()
        return [finding], [tr]
    return run


def _material(args, role: TrustRole, default_subject: str):
    if args.cert:
        if not args.key:
            raise UsageError("--cert needs --key")
        return tlsutil.load_material(args.cert, args.key, role, getattr(args, "chain", None))
    subject = args.cert_name or default_subject
    if role is TrustRole.UntrustedSelfSigned:
        return tlsutil.self_signed(subject)
    ca = tlsutil.make_authority("vpnprobe ephemeral root")
    if args.ca_out:
        with open(args.ca_out, "wb") as fh:
            fh.write(ca.cert_pem)
    return tlsutil.issue(ca, subject, role)


def _add_cert_options(p, default_subject: str) -> None:
    g = p.add_argument_group("certificate")
    g.add_argument("--cert", help="PEM certificate to present")
    g.add_argument("--key", help="PEM private key for --cert")
    g.add_argument("--chain", help="PEM chain sent after --cert")
    g.add_argument("--ephemeral-cert", action="store_true",
                   help="generate a fresh certificate for this run (the default without --cert)")
    g.add_argument("--cert-name", help=f"subject of the ephemeral certificate (default {default_subject})")
    g.add_argument("--ca-out", help="write the ephemeral issuing CA here, when one is made")


def _add_timeouts(p, capture: bool = True) -> None:
    p.add_argument("--connect-timeout", type=float, default=30.0)
    p.add_argument("--phase-timeout", type=float, default=10.0)
    if capture:
        p.add_argument("--capture-window", type=float, default=30.0)


def _add_output(p) -> None:
    p.add_argument("--format", choices=("json", "matrix"), default="json")
    p.add_argument("-o", "--output", help="write the report here instead of stdout")
    p.add_argument("--transcript-out", help="write transcripts as JSON event streams")


def _plan(args, target: str) -> RunPlan:
    return RunPlan(target, fmt=args.format, output=args.output, transcript_out=args.transcript_out)


# ---------------------------------------------------------------- probe


def _probe_pptp(args, rng) -> RunPlan:
    from .pptp import PptpProbe
    from .ppp import CcpOffer
    offer = {"no-mppe": CcpOffer.NoEncryption, "mppe-40": CcpOffer.Mppe40,
             "mppe-56": CcpOffer.Mppe56}[args.downgrade]
    target = args.target or "pptp-client"
    probe = PptpProbe(_creds(args.creds), args.host, args.port, args.transport, args.gre_port, offer,
                      args.connect_timeout, args.phase_timeout, args.capture_window, target, rng)
    return _plan(args, target).add(_single(probe))


def _probe_sstp(args, rng) -> RunPlan:
    from .sstp import SstpProbe
    target = args.target or "sstp-client"
    material = _material(args, TrustRole.UntrustedSelfSigned, "vpn.example.com")
    probe = SstpProbe(_creds(args.creds), material, args.host, args.port, args.connect_timeout,
                      args.phase_timeout, args.capture_window, target, rng)
    return _plan(args, target).add(_single(probe))


def _probe_ikev2(args, rng) -> RunPlan:
    from .ipsec import Ikev2Probe, ServerIdentityOffer
    target = args.target or "ikev2-client"
    material = _material(args, TrustRole.ValidWrongIdentity, "attacker.example.net")
    offer = ServerIdentityOffer(material, args.identity or material.subject_name)
    probe = Ikev2Probe(offer, _creds(args.creds), args.host, args.port, args.connect_timeout,
                       args.phase_timeout, args.capture_window, target, rng)
    return _plan(args, target).add(_single(probe))


def _psk_candidates(args):
    from .ipsec import PskCandidate, PskCandidateList
    cands = [] if args.no_public_defaults else list(PskCandidateList.public_defaults().candidates)
    for path in args.psk_list or ():
        cands.extend(PskCandidateList.from_file(path, allow_large=True).candidates)
    cands.extend(PskCandidate(k.encode(), "command-line") for k in args.psk or ())
    if not cands:
        raise UsageError("no pre-shared key candidates (add --psk or --psk-list)")
    return PskCandidateList(cands, allow_large=args.allow_large_list)


def _probe_ikev1(args, rng) -> RunPlan:
    from .ipsec import Ikev1Mode, Ikev1PskProbe
    from .ppp import AuthMethod
    mode = Ikev1Mode.L2tp if args.mode == "l2tp" else Ikev1Mode.CiscoXauth
    target = args.target or ("l2tp-client" if mode is Ikev1Mode.L2tp else "cisco-client")
    inner = {"pap": AuthMethod.PAP, "chap": AuthMethod.CHAP, "mschapv2": AuthMethod.MSCHAPv2}[args.inner_auth]
    probe = Ikev1PskProbe(_psk_candidates(args), mode, args.host, args.port, _creds(args.creds), inner,
                          args.xauth_challenge, args.connect_timeout, args.phase_timeout, args.capture_window,
                          target, rng)
    return _plan(args, target).add(_single(probe))


def _probe_softether(args, rng) -> RunPlan:
    from .softether import SoftEtherTlsProbe
    target = args.target or "softether-client"
    material = _material(args, TrustRole.UntrustedSelfSigned, "vpn.example.com")
    probe = SoftEtherTlsProbe(material, args.host, args.port, args.connect_timeout, args.phase_timeout,
                              target, rng)
    return _plan(args, target).add(_single(probe))


def _relay_pptp(args, rng) -> RunPlan:
    from .pptp import PptpRelay
    target = args.target or "pptp-client"
    if args.transport == "udp-sim" and not args.upstream_gre:
        raise UsageError("--upstream-gre is needed with --transport udp-sim")
    upstream_gre = _hostport(args.upstream_gre) if args.upstream_gre else _hostport(args.upstream)
    relay = PptpRelay(_hostport(args.upstream), upstream_gre,
                      args.host, args.port, args.transport, args.gre_port, args.connect_timeout,
                      args.phase_timeout, args.capture_window, target, rng)
    return _plan(args, target).add(_single(relay))


def _relay_sstp(args, rng) -> RunPlan:
    from .sstp import SstpRelay
    target = args.target or "sstp-client"
    material = _material(args, TrustRole.UntrustedSelfSigned, "vpn.example.com")
    relay = SstpRelay(_hostport(args.upstream), material, args.host, args.port, args.connect_timeout,
                      args.phase_timeout, args.capture_window, target, rng, args.upstream_name)
    return _plan(args, target).add(_single(relay))


# ---------------------------------------------------------------- audit


def _audit_config(args, rng) -> RunPlan:
    from .config_audit import DIALECT_NAMES, audit_file
    dialect = DIALECT_NAMES[args.dialect] if args.dialect else None
    plan = _plan(args, args.target or "config")
    for path in args.paths:
        plan.add(lambda path=path: (audit_file(path, dialect, filesystem=not args.static), []))
    return plan


def _audit_local(args, rng) -> RunPlan:
    from . import local_audit as la
    target = args.target or "local-host"
    plan = _plan(args, target)
    if not (args.root or args.watch or args.mgmt):
        raise UsageError("give at least one of --root, --watch, --mgmt")
    if args.root or args.watch:
        def files():
            found = []
            if args.root:
                found.extend(la.scan_credential_files(args.root))
            if args.watch:
                found.extend(la.watch_transient_credentials(args.watch, args.window, args.poll))
            return [la.exposure_finding(found, target)], []
        plan.add(files)
    softether_done = False
    for spec in args.mgmt or ():
        kind, _, port = spec.partition(":")
        dialect = {"openvpn": la.MgmtDialect.OpenVpnMgmt, "softether": la.MgmtDialect.SoftEtherMgmt}.get(kind)
        if dialect is None or not port.isdigit():
            raise UsageError(f"--mgmt wants openvpn:PORT or softether:PORT, got {spec!r}")
        ep = la.ManagementEndpoint(int(port), dialect, args.mgmt_host)
        if dialect is la.MgmtDialect.SoftEtherMgmt and args.exploit_demo and not softether_done:
            softether_done = True
            plan.add(lambda ep=ep: _wrap(la.demo_wrong_server(ep, consent=True, target=target,
                                                              timeout=args.timeout)))
        else:
            plan.add(lambda ep=ep: _wrap(la.audit_management_interface(ep, args.mgmt_password, target,
                                                                       args.timeout)))
    return plan


def _wrap(pair):
    finding, tr = pair
    return [finding], [tr]


# ---------------------------------------------------------------- scenario / simclient


def _protocols(text: str) -> list[ProtocolId]:
    from .fallback import parse_protocol
    return [parse_protocol(p) for p in text.split(",") if p.strip()]


def _scenario_fallback(args, rng) -> RunPlan:
    from .fallback import DEFAULT_PORTS, BlockMode, FallbackScenario, run_scenario
    order = _protocols(args.order) if args.order else None
    if args.vpn_strategy is not None:
        from .fallback import vpnstrategy_order
        order = vpnstrategy_order(args.vpn_strategy)
    if not order:
        raise UsageError("give --order or --vpn-strategy")
    kw = {}
    if args.weak:
        kw["weak"] = frozenset(_protocols(args.weak))
    scenario = FallbackScenario(tuple(order), frozenset(_protocols(args.block or "")),
                                BlockMode(args.mode.capitalize()), timeout=args.timeout, **kw)
    ports = None
    if args.standard_ports:
        ports = {p: DEFAULT_PORTS[p] for p in scenario.order}
        udp = [p for p in scenario.order if ports[p] == 500]
        if len(udp) > 1:
            raise UsageError("only one IKE-based protocol can use the standard port 500 in one scenario")
    target = args.target or "fallback-client"
    return _plan(args, target).add(lambda: _wrap(run_scenario(
        scenario, host=args.host, ports=ports, rng=rng, phase_timeout=args.client_timeout, target=target)))


_POLICY_PRESETS = {
    "vulnerable": dict(require_encryption=False, verify_server_cert="Ignore", server_identity="%any"),
    "hardened": dict(require_encryption=True, verify_server_cert="Strict"),
}


def _policy(text: Optional[str], psk: Optional[str]):
    from .simclients import ClientPolicy
    kw: dict = {}
    for item in (text or "").split(","):
        item = item.strip()
        if not item:
            continue
        if item in _POLICY_PRESETS:
            kw.update(_POLICY_PRESETS[item])
            continue
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"policy item {item!r} is not key=value or a preset")
        if key == "require_encryption":
            kw[key] = value.lower() in ("1", "true", "yes")
        elif key == "retry_budget":
            kw[key] = int(value)
        elif key == "fallback_order":
            kw[key] = tuple(_protocols(value.replace("+", ",")))
        elif key in ("verify_server_cert", "server_identity", "inner_auth", "psk"):
            kw[key] = value
        else:
            raise UsageError(f"unknown policy knob {key!r}")
    if psk is not None:
        kw["psk"] = psk
    return ClientPolicy(**kw)


def _simclient_run(args, rng) -> int:
    from .simclients import Endpoint, run_client
    from .fallback import parse_protocol
    host, port = _hostport(args.endpoint)
    ca = None
    if args.ca:
        with open(args.ca, "rb") as fh:
            ca = fh.read()
    ep = Endpoint(host, port, args.transport, _hostport(args.gre) if args.gre else None, args.server_name, ca)
    policy = _policy(args.policy, args.psk)
    payload = args.payload.encode() if args.payload else bytes(range(64))
    out = run_client(parse_protocol(args.protocol), policy, ep, _creds(args.creds), payload, rng=rng,
                     timeout=args.timeout)
    doc = {"outcome": type(out).__name__, "text": str(out)}
    if hasattr(out, "protocol"):
        doc.update(protocol=out.protocol.value, encrypted=out.encrypted)
    if hasattr(out, "stage"):
        doc.update(stage=out.stage, reason=out.reason)
    print(json.dumps(doc))
    return 0


# ---------------------------------------------------------------- report


def _report_render(args, rng) -> int:
    findings: list[Finding] = []
    for path in args.reports:
        with open(path, "rb") as fh:
            findings.extend(parse_report(fh.read()).findings)
    data = render_report(findings, args.format)
    if args.output:
        with open(args.output, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    if args.figure:
        from .plotting import render_figure
        transcripts = []
        for path in args.transcript or ():
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
            transcripts.extend(doc if isinstance(doc, list) else [doc])
        render_figure(findings, args.figure, transcripts or None)
    return exit_code(findings)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vpnprobe", description="Probe and audit VPN clients for known weaknesses.")
    ap.add_argument("--seed", type=int, help="seed protocol randomness (reproducible transcripts; testing only)")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def server(p, port: int, capture: bool = True):
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=port)
        p.add_argument("--target", help="label for the client under test")
        _add_timeouts(p, capture)
        _add_output(p)

    probe = sub.add_parser("probe", help="run a fake server and classify the connecting client")
    psub = probe.add_subparsers(dest="kind", required=True)

    p = psub.add_parser("pptp")
    server(p, 1723)
    p.add_argument("--creds", required=True, help="user:password the client will use")
    p.add_argument("--downgrade", choices=("no-mppe", "mppe-40", "mppe-56"), default="no-mppe")
    p.add_argument("--transport", choices=("udp-sim", "raw-gre"), default="udp-sim")
    p.add_argument("--gre-port", type=int, default=1723, help="UDP port carrying GRE in udp-sim mode")
    p.set_defaults(func=_probe_pptp)

    p = psub.add_parser("sstp")
    server(p, 443)
    p.add_argument("--creds", required=True)
    _add_cert_options(p, "vpn.example.com")
    p.set_defaults(func=_probe_sstp)

    p = psub.add_parser("ikev2")
    server(p, 500)
    p.add_argument("--creds", help="test credentials; with them the SA and a child SA are completed")
    p.add_argument("--identity", help="IDr to send (default: the certificate subject)")
    _add_cert_options(p, "attacker.example.net")
    p.set_defaults(func=_probe_ikev2, capture_window=5.0)

    p = psub.add_parser("ikev1-psk")
    server(p, 500)
    p.add_argument("--mode", choices=("l2tp", "cisco"), default="l2tp")
    p.add_argument("--psk", action="append", help="candidate key (repeatable)")
    p.add_argument("--psk-list", action="append", help="file of candidate keys, label:key per line")
    p.add_argument("--no-public-defaults", action="store_true", help="do not try the bundled public keys")
    p.add_argument("--allow-large-list", action="store_true")
    p.add_argument("--creds", help="test credentials for the inner PPP or XAUTH")
    p.add_argument("--inner-auth", choices=("pap", "chap", "mschapv2"), default="pap")
    p.add_argument("--xauth-challenge", action="store_true")
    p.set_defaults(func=_probe_ikev1)

    p = psub.add_parser("softether-tls")
    server(p, 443, capture=False)
    _add_cert_options(p, "vpn.example.com")
    p.set_defaults(func=_probe_softether)

    relay = sub.add_parser("relay", help="man-in-the-middle relay towards an honest server")
    rsub = relay.add_subparsers(dest="kind", required=True)
    p = rsub.add_parser("pptp")
    server(p, 1723)
    p.add_argument("--upstream", required=True, help="honest server host:port")
    p.add_argument("--upstream-gre", help="honest server's GRE host:port (udp-sim)")
    p.add_argument("--transport", choices=("udp-sim", "raw-gre"), default="udp-sim")
    p.add_argument("--gre-port", type=int, default=1723)
    p.set_defaults(func=_relay_pptp)
    p = rsub.add_parser("sstp")
    server(p, 443)
    p.add_argument("--upstream", required=True)
    p.add_argument("--upstream-name", default="vpn.example.com")
    _add_cert_options(p, "vpn.example.com")
    p.set_defaults(func=_relay_sstp)

    audit = sub.add_parser("audit", help="static and local audits")
    asub = audit.add_subparsers(dest="kind", required=True)
    p = asub.add_parser("config")
    p.add_argument("paths", nargs="+")
    p.add_argument("--dialect", choices=("ipsec-conf", "ipsec-secrets", "openvpn", "softether", "phonebook"))
    p.add_argument("--static", action="store_true", help="never touch files the configuration refers to")
    p.add_argument("--target")
    _add_output(p)
    p.set_defaults(func=_audit_config)
    p = asub.add_parser("local")
    p.add_argument("--root", action="append", help="directory or file to scan for stored credentials")
    p.add_argument("--watch", help="glob of transient credential files to watch for")
    p.add_argument("--window", type=float, default=30.0)
    p.add_argument("--poll", type=float, default=0.5)
    p.add_argument("--mgmt", action="append", help="openvpn:PORT or softether:PORT on localhost")
    p.add_argument("--mgmt-host", default="127.0.0.1")
    p.add_argument("--mgmt-password")
    p.add_argument("--exploit-demo", action="store_true",
                   help="consent to reconfigure the SoftEther client to connect to a harness server")
    p.add_argument("--timeout", type=float, default=5.0)
    p.add_argument("--target")
    _add_output(p)
    p.set_defaults(func=_audit_local)

    scen = sub.add_parser("scenario", help="downgrade scenarios")
    ssub = scen.add_subparsers(dest="kind", required=True)
    p = ssub.add_parser("fallback")
    p.add_argument("--order", help="comma list, e.g. ovpn,sstp,l2tp")
    p.add_argument("--vpn-strategy", type=int, help="take the order from a Windows VpnStrategy value")
    p.add_argument("--block", help="comma list of protocols to block")
    p.add_argument("--mode", choices=("refuse", "drop"), default="refuse")
    p.add_argument("--weak", help="comma list overriding the weak set (default pptp,l2tp)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--standard-ports", action="store_true", help="listen on 1723/443/500/1194/5555")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--client-timeout", type=float, default=2.0)
    p.add_argument("--target")
    _add_output(p)
    p.set_defaults(func=_scenario_fallback)

    sim = sub.add_parser("simclient", help="run a scripted client")
    simsub = sim.add_subparsers(dest="kind", required=True)
    p = simsub.add_parser("run")
    p.add_argument("--protocol", required=True)
    p.add_argument("--endpoint", required=True, help="host:port")
    p.add_argument("--gre", help="GRE host:port for PPTP in udp-sim mode")
    p.add_argument("--transport", choices=("udp-sim", "raw-gre"), default="udp-sim")
    p.add_argument("--policy", help="presets vulnerable|hardened and/or knob=value, comma separated")
    p.add_argument("--psk")
    p.add_argument("--creds")
    p.add_argument("--ca", help="PEM CA the client trusts")
    p.add_argument("--server-name", default="vpn.example.com")
    p.add_argument("--payload", help="marker payload (default: bytes 0..63)")
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=_simclient_run)

    rep = sub.add_parser("report", help="report utilities")
    repsub = rep.add_subparsers(dest="kind", required=True)
    p = repsub.add_parser("render")
    p.add_argument("reports", nargs="+", help="JSON reports to merge")
    p.add_argument("--format", choices=("json", "matrix"), default="matrix")
    p.add_argument("-o", "--output")
    p.add_argument("--figure", help="also draw a PNG/SVG/PDF heatmap here")
    p.add_argument("--transcript", action="append", help="transcript JSON to draw as a timeline")
    p.set_defaults(func=_report_render)

    _env_defaults(ap)
    return ap


def _env_defaults(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                _env_defaults(child)
            continue
        if not action.option_strings or action.dest == "help" or isinstance(action, argparse._AppendAction):
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if action.nargs == 0:
            action.default = raw.lower() in ("1", "true", "yes")
        elif action.type is not None:
            action.default = action.type(raw)
        else:
            action.default = raw


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    rng = Randomness(args.seed)
    try:
        result = args.func(args, rng)
        return result.execute() if isinstance(result, RunPlan) else result
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vpnprobe: error: {exc}", file=sys.stderr)
        return 2
    except (ProbeError, ReportError, ValueError, OSError) as exc:
        print(f"vpnprobe: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
