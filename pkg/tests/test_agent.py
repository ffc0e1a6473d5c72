import math

import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import sim_at
from oracles import brute_force_dispatch as brute_force
from voltchain import agent as ag
from voltchain.grid import DeviceRecord, OperatingPoint, predict_voltage_change, solve_voltage


def gen(p_max=1.0, q_max=1.0, s_max=2.0, p_set=0.8, q_set=0.0, p_avail=None):
    return DeviceRecord("G", "generator", p_max, q_max, s_max, p_set, q_set,
                        p_set if p_avail is None else p_avail)


class TestDispatch:
    def test_zero_target(self):
        c = ag.dispatch(0.01, 0.01, 0.0, gen(), 1050, 1000, 1.1, 1.0)
        assert c.feasible and (c.dp, c.dq, c.price) == (0.0, 0.0, 0.0)

    def test_reactive_example(self):
        c = ag.dispatch(0.01, 0.01, 0.005, gen(), 1050, 1000, 1.1, 1.0)
        assert c.dp == 0.0 and c.dq == pytest.approx(0.5)
        assert c.cost == pytest.approx(525.0)
        best, slack = brute_force(0.01, 0.01, 0.005, gen(), 1050, 1000, 1.1, 1.0)
        assert best - slack <= c.cost <= best

    def test_no_reactive_capability_curtails(self):
        dg2 = DeviceRecord("DG2", "generator", 1.5, 0.0, 1.5, 1.0, 0.0, 1.0)
        c = ag.dispatch(0.02, 0.015, -0.006, dg2, 0.0, 300.0, 1.3, 1.0)
        assert c.feasible and c.dq == 0.0
        assert c.dp == pytest.approx(-0.3)
        assert c.cost == pytest.approx(1.3 * 300 * 0.3)

    def test_free_headroom_used_first(self):
        c = ag.dispatch(0.01, 0.01, 0.001, gen(p_set=0.5, p_avail=1.0), 1050, 1000, 1.1, 1.0)
        assert c.dp == pytest.approx(0.1) and c.cost == pytest.approx(0.0)

    def test_infeasible_target(self):
        assert not ag.dispatch(0.01, 0.01, 0.5, gen(), 1050, 1000, 1.1, 1.0).feasible
        assert not ag.dispatch(0.0, 0.0, 0.01, gen(), 1050, 1000, 1.1, 1.0).feasible

    @settings(max_examples=150, deadline=None)
    @given(sp=st.floats(0, 0.05), sq=st.floats(0, 0.05), dv=st.floats(-0.02, 0.02),
           kind=st.sampled_from(["generator", "storage"]),
           p_max=st.floats(0.1, 1.5), q_max=st.floats(0, 1.0), s_frac=st.floats(0.3, 1.5),
           p_frac=st.floats(0, 1), pr_q=st.floats(0, 2000), pr_p=st.floats(10, 2000),
           alpha=st.floats(1, 2))
    def test_matches_grid_search(self, sp, sq, dv, kind, p_max, q_max, s_frac, p_frac, pr_q, pr_p,
                                 alpha):
        s_max = max(p_max, q_max) * s_frac
        p_set = p_frac * min(p_max, s_max) if kind == "generator" else (2 * p_frac - 1) * min(p_max, s_max)
        dev = DeviceRecord("D", kind, p_max, q_max, s_max, p_set, 0.0, p_max)
        assume(abs(dv) > 1e-4 and (sp > 1e-3 or sq > 1e-3))
        comp = ag.dispatch(sp, sq, dv, dev, pr_q, pr_p, alpha, 1.0)
        oracle = brute_force(sp, sq, dv, dev, pr_q, pr_p, alpha, 1.0)
        if oracle is not None:
            best, slack = oracle
            assert comp.feasible
            # within 1% of the grid optimum, and never below what the grid proves attainable
            assert comp.cost <= best * 1.01 + 1e-9
            assert comp.cost >= best - slack - 1e-9
        if comp.feasible:
            assert sp * comp.dp + sq * comp.dq == pytest.approx(dv, abs=1e-9)
            assert dev.within_limits(dev.p_set + comp.dp, dev.q_set + comp.dq, tol=1e-7)
            assert comp.cost == pytest.approx(ag.dispatch_cost(comp.dp, comp.dq, pr_q, pr_p, alpha, 1.0))


class TestClamp:
    @settings(max_examples=100, deadline=None)
    @given(p=st.floats(-3, 3), q=st.floats(-3, 3), kind=st.sampled_from(["generator", "storage", "load-bank"]),
           s_max=st.floats(0.2, 2))
    def test_actuation_respects_capability(self, p, q, kind, s_max):
        dev = DeviceRecord("D", kind, 1.0, 0.6, s_max, 0.0, 0.0, 0.7)
        res = ag.act_on_contract(dev, ag.BidComputation(True, p, q))
        assert dev.within_limits(res.device.p_set, res.device.q_set, tol=1e-9)
        assert res.clamped == (not dev.within_limits(p, q, tol=1e-12))

    def test_inside_untouched(self):
        res = ag.act_on_contract(gen(), ag.BidComputation(True, -0.1, 0.2))
        assert not res.clamped
        assert (res.device.p_set, res.device.q_set) == pytest.approx((0.7, 0.2))


class TestRevenue:
    def test_active(self):
        assert ag.revenue_active(50, 1.0, 2.0) == 100.0
        assert ag.revenue_active(1234, 0.0, 1.0) == 0.0

    def test_active_hourly_integration(self):
        prices, p = [40, 50, 60, 55], 0.7
        stepwise = sum(ag.revenue_active(pr, p, 5 / 60) for pr in prices for _ in range(12))
        assert stepwise == pytest.approx(sum(pr * p for pr in prices))

    def test_service(self):
        assert ag.revenue_service(1050, 0.5, 1.0, 0.0, 1.1) == pytest.approx(525.0)
        assert ag.revenue_service(1050, -0.5, 1.0, 0.0, 1.1) == pytest.approx(525.0)
        assert ag.revenue_service(1050, 0.0, 1.0, 0.0, 1.1) == 0.0
        assert ag.revenue_service(0, 0.0, 1.0, 77.7, 1.3) == pytest.approx(101.01)


class TestDecision:
    @pytest.mark.parametrize("local,bid,expected", [
        (77.7, 70.0, "award"), (77.7, 80.0, "self_mitigate"), (77.7, 77.7, "self_mitigate")])
    def test_local_or_market(self, local, bid, expected):
        assert ag.decide_local_or_market(local, bid) == expected


@pytest.fixture(scope="module")
def outage(ieee_cfg):
    return sim_at(ieee_cfg, 18)


class TestUndervoltageFixture:
    def test_violation_detected(self, outage):
        a2 = outage.agents[2]
        prof = solve_voltage(outage.network, OperatingPoint.from_network(outage.network))
        zone_v, meters = ag.read_zone_state(a2, outage.network, prof, 18)
        assert zone_v[33] == prof.v[33] < 0.95
        assert {m["bus"] for m in meters} == {8, 12, 33}
        viol = ag.worst_violation(ag.zone_violations(a2, outage.network, zone_v, 18))
        assert (viol.bus, viol.direction) == (33, "under")
        assert viol.deviation == pytest.approx(0.95 - prof.v[33])

    def test_pzc_targets(self, outage):
        a2 = outage.agents[2]
        viol = outage._worst(a2, 18)
        targets = ag.compute_pzc_targets(a2, viol, outage.sens, outage.neighbor_device_bus)
        assert targets == {1: (8, 0.0033), 3: (12, 0.0034)}

    def test_violation_at_pzc_has_unit_ratio(self, outage):
        a2 = outage.agents[2]
        viol = ag.ViolationReport(8, "over", 0.004, 0)
        targets = ag.compute_pzc_targets(a2, viol, outage.sens, outage.neighbor_device_bus)
        assert targets[1] == (8, -0.004)

    def test_bids_are_reactive_and_honest(self, outage):
        for n, (bus, dv) in {1: (8, 0.0033), 3: (12, 0.0034)}.items():
            a = outage.agents[n]
            comp = ag.evaluate_cfp(a, bus, dv, outage.sens, outage.network, outage.price(18), 1.0)
            assert comp.feasible and comp.dp == 0.0 and comp.dq > 0
            assert comp.price == pytest.approx(a.pr_q * comp.dq)
            assert predict_voltage_change(outage.sens, a.device_bus, comp.dp, comp.dq)[bus] == \
                pytest.approx(dv, abs=1e-12)
            after = ag._apply(outage.network, a.device_id, comp.dp, comp.dq)
            prof = solve_voltage(after, OperatingPoint.from_network(after))
            assert all(0.95 <= prof.v[b] <= 1.05 for b in a.zone_buses)

    def test_winning_dispatch_clears_violation(self, outage):
        a1 = outage.agents[1]
        comp = ag.evaluate_cfp(a1, 8, 0.0033, outage.sens, outage.network, outage.price(18), 1.0)
        after = ag._apply(outage.network, a1.device_id, comp.dp, comp.dq)
        assert solve_voltage(after, OperatingPoint.from_network(after)).v[33] >= 0.95


@pytest.fixture(scope="module")
def overvoltage(over_cfg):
    return sim_at(over_cfg, 54)


class TestOvervoltageFixture:
    def test_direction(self, overvoltage):
        a2 = overvoltage.agents[2]
        viol = overvoltage._worst(a2, 54)
        assert viol.direction == "over"
        targets = ag.compute_pzc_targets(a2, viol, overvoltage.sens, overvoltage.neighbor_device_bus)
        assert targets == {1: (8, -0.017), 3: (12, -0.0175)}
        for n, (bus, dv) in targets.items():
            a = overvoltage.agents[n]
            comp = ag.evaluate_cfp(a, bus, dv, overvoltage.sens, overvoltage.network,
                                   overvoltage.price(54), 1.0)
            if comp.feasible:
                assert predict_voltage_change(overvoltage.sens, a.device_bus, comp.dp, comp.dq)[bus] <= 0

    def test_subcontract_plan(self, overvoltage):
        a3 = overvoltage.agents[3]
        sim = overvoltage
        standalone = ag.evaluate_cfp(a3, 12, -0.0175, sim.sens, sim.network, sim.price(54), 1.0)
        plan = ag.maybe_subcontract(a3, 2, 12, -0.0175, standalone, sim.sens, sim.network,
                                    sim.neighbor_device_bus, sim.price(54), 1.0)
        assert plan is not None and plan.neighbor == 4 and plan.pzc_bus == 15
        assert plan.dv_target == -0.0106
        assert plan.reserve_price == pytest.approx(standalone.cost - plan.own.cost)
        assert plan.own.dq == pytest.approx(-0.5)

    def test_no_downstream_no_subcontract(self, overvoltage):
        sim = overvoltage
        a4 = sim.agents[4]
        a4.subcontract_above = 0.0
        try:
            standalone = ag.evaluate_cfp(a4, 15, -0.005, sim.sens, sim.network, sim.price(54), 1.0)
            assert ag.maybe_subcontract(a4, 3, 15, -0.005, standalone, sim.sens, sim.network,
                                        sim.neighbor_device_bus, sim.price(54), 1.0) is None
        finally:
            a4.subcontract_above = None

    def test_markup(self, overvoltage):
        a3 = overvoltage.agents[3]
        assert ag.quote(a3, 1000.0) == pytest.approx(100.0)


class TestBatteryAction:
    def test_pzc_drop(self, kcm_cfg):
        sim = sim_at(kcm_cfg, 4)
        net = sim.network
        before = solve_voltage(net, OperatingPoint.from_network(net))
        bat = net.device("BAT2")
        res = ag.act_on_contract(bat, ag.BidComputation(True, -0.06, 0.0))
        after_net = net.with_state(devices={"BAT2": res.device})
        after = solve_voltage(after_net, OperatingPoint.from_network(after_net))
        drop = after.v[3] - before.v[3]
        assert not res.clamped
        assert drop == pytest.approx(-0.02, rel=0.2)
        assert math.isclose(drop, predict_voltage_change(sim.sens, 4, -0.06, 0.0)[3], abs_tol=1e-12)
