import time

import pytest

from vpnprobe.core import ProtocolId, Randomness, VerdictLevel
from vpnprobe.fallback import (DEFAULT_WEAK, BlockMode, FallbackScenario, parse_protocol, run_scenario,
                               vpnstrategy_order)
from vpnprobe.simclients import AbortedAt, Established, GaveUp

P = ProtocolId


def test_vpnstrategy_automatic_orders():
    assert vpnstrategy_order(8) == [P.IKEV2, P.SSTP, P.PPTP, P.L2TP_IPSEC]
    assert vpnstrategy_order(0) == vpnstrategy_order(8)
    assert vpnstrategy_order(2)[0] is P.PPTP
    assert vpnstrategy_order(4)[0] is P.L2TP_IPSEC
    assert vpnstrategy_order(6)[0] is P.SSTP


def test_vpnstrategy_single_protocol_values():
    assert vpnstrategy_order(1) == [P.PPTP]
    assert vpnstrategy_order(3) == [P.L2TP_IPSEC]
    assert vpnstrategy_order(5) == [P.IKEV2]


@pytest.mark.parametrize("bad", [7, 9, -1, "x"])
def test_vpnstrategy_unknown(bad):
    with pytest.raises(ValueError, match="known values"):
        vpnstrategy_order(bad)


def test_parse_protocol_aliases():
    assert parse_protocol("ovpn") is P.OPENVPN
    assert parse_protocol("L2TP") is P.L2TP_IPSEC
    assert parse_protocol("ikev2") is P.IKEV2
    with pytest.raises(ValueError):
        parse_protocol("wireguard")


def test_scenario_validation():
    with pytest.raises(ValueError):
        FallbackScenario(())
    with pytest.raises(ValueError):
        FallbackScenario(("sstp", "sstp"))
    with pytest.raises(ValueError, match="listener"):
        FallbackScenario(("sstp",), {"pptp"})
    s = FallbackScenario(("ovpn", "sstp", "l2tp"), {"ovpn"}, "Drop")
    assert s.order == (P.OPENVPN, P.SSTP, P.L2TP_IPSEC) and s.mode is BlockMode.Drop
    assert s.weak == DEFAULT_WEAK


def test_stronger_blocked_before_ignores_weak_ones():
    s = FallbackScenario((P.PPTP, P.SSTP, P.L2TP_IPSEC), {P.PPTP, P.SSTP})
    assert s.stronger_blocked_before(P.L2TP_IPSEC) == [P.SSTP]


def test_blocked_strong_protocols_push_client_to_l2tp():
    s = FallbackScenario((P.OPENVPN, P.SSTP, P.L2TP_IPSEC), {P.OPENVPN, P.SSTP}, timeout=20)
    f, tr = run_scenario(s, rng=Randomness(1), phase_timeout=1)
    assert f.verdict.level is VerdictLevel.Vulnerable
    assert "L2TP_IPSEC" in f.verdict.note
    assert len(f.verdict.evidence) == 3
    assert all(tr.resolve(r) for r in f.verdict.evidence)


def test_all_blocked_client_gives_up():
    s = FallbackScenario((P.OPENVPN, P.SSTP), {P.OPENVPN, P.SSTP}, timeout=20)
    f, _ = run_scenario(s, rng=Randomness(2), phase_timeout=1)
    assert f.verdict.level is VerdictLevel.Secure
    assert "gave up" in f.verdict.note


def test_first_protocol_wins_without_trying_the_rest():
    s = FallbackScenario((P.SSTP, P.PPTP), timeout=20)
    f, tr = run_scenario(s, rng=Randomness(3), phase_timeout=1)
    assert f.verdict.level is VerdictLevel.Secure
    assert "SSTP" in f.verdict.note
    assert not any(e.summary.startswith("PPTP: client reached") for e in tr)


def test_weak_first_without_blocking_is_not_a_downgrade():
    s = FallbackScenario((P.PPTP, P.SSTP), timeout=20)
    f, _ = run_scenario(s, rng=Randomness(4), phase_timeout=1)
    assert f.verdict.level is VerdictLevel.Secure
    assert "without any stronger option" in f.verdict.note


def test_drop_mode_still_falls_through():
    s = FallbackScenario((P.SSTP, P.PPTP), {P.SSTP}, BlockMode.Drop, timeout=20)
    f, _ = run_scenario(s, rng=Randomness(5), phase_timeout=1)
    assert f.verdict.level is VerdictLevel.Vulnerable


def test_custom_runner_and_timeout():
    s = FallbackScenario((P.SSTP,), timeout=0.5)

    def stuck(endpoints):
        time.sleep(2)

    f, _ = run_scenario(s, stuck)
    assert f.verdict.level is VerdictLevel.Inconclusive


def test_runner_receives_every_endpoint():
    seen = {}

    def runner(endpoints):
        seen.update(endpoints)
        return Established(P.SSTP, True, {"attempted": ["SSTP"]})

    s = FallbackScenario((P.SSTP, P.L2TP_IPSEC), {P.L2TP_IPSEC}, timeout=5)
    f, _ = run_scenario(s, runner)
    assert set(seen) == {P.SSTP, P.L2TP_IPSEC}
    assert f.verdict.level is VerdictLevel.Secure


def test_aborted_runner_inconclusive():
    f, _ = run_scenario(FallbackScenario((P.SSTP,), timeout=5), lambda eps: AbortedAt("Tls", "bad"))
    assert f.verdict.level is VerdictLevel.Inconclusive
    f, _ = run_scenario(FallbackScenario((P.SSTP,), timeout=5), lambda eps: GaveUp(()))
    assert f.verdict.level is VerdictLevel.Secure


def _established(tr):
    for e in tr:
        if e.summary.startswith("client established "):
            return ProtocolId(e.summary.split()[2])
    return None


@pytest.mark.parametrize("order,blocked", [
    ((P.SSTP, P.PPTP), {P.SSTP}),
    ((P.OPENVPN, P.IKEV2, P.L2TP_IPSEC), {P.OPENVPN}),
    ((P.IKEV2, P.SSTP, P.PPTP, P.L2TP_IPSEC), {P.IKEV2, P.SSTP, P.PPTP}),
])
def test_block_mode_changes_timing_not_outcome(order, blocked):
    got = []
    for i, mode in enumerate(BlockMode):
        f, tr = run_scenario(FallbackScenario(order, blocked, mode, timeout=30), rng=Randomness(60 + i),
                             phase_timeout=1)
        got.append((f.verdict.level, _established(tr)))
    assert got[0] == got[1]
    assert got[0][1] is not None


@pytest.mark.parametrize("weak", [P.PPTP, P.L2TP_IPSEC])
def test_everything_ahead_of_weak_blocked_lands_on_it(weak):
    order = (P.OPENVPN, P.IKEV2, P.SSTP, weak)
    f, tr = run_scenario(FallbackScenario(order, set(order[:-1]), timeout=30), rng=Randomness(70), phase_timeout=1)
    assert _established(tr) is weak
    assert f.verdict.level is VerdictLevel.Vulnerable
