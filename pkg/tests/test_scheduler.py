import dataclasses

import numpy as np
import pytest
from scipy import optimize

from dynramp import io as dio
from dynramp import scheduler as S
from dynramp.lpmilp import OPTIMAL, brute_force, solve_milp

from conftest import limits, p2, processes, site


def first_hours(prices, demands, n):
    return (S.Prices(prices.buy[:n], prices.sell[:n], prices.fuel[:n]),
            {k: v[:n] for k, v in demands.items()})


def solve(prob):
    sol = solve_milp(prob, log=False)
    assert sol.status == OPTIMAL
    return S.extract_schedule(prob, sol)


@pytest.fixture(scope="module")
def drc():
    prob, sol, _ = p2(S.DRC)
    return prob, sol, S.extract_schedule(prob, sol)


class TestAssembly:
    def test_binary_count(self, drc):
        prob, _, _ = drc
        assert len(prob.binaries) == 2 * 24

    def test_one_hour_matches_enumeration(self):
        system, prices, demands = site()
        pr, dm = first_hours(prices, demands, 1)
        prob = S.build_p2(system, processes(), pr, dm)
        a = solve_milp(prob, log=False)
        b = brute_force(prob)
        assert a.objective == pytest.approx(b.objective, rel=1e-9)

    def test_without_processes_is_unit_commitment(self):
        system, prices, demands = site()
        prob = S.build_p2(system, [], prices, demands)
        sol = solve_milp(prob, log=False)
        integ = np.zeros(prob.n)
        integ[prob.binaries] = 1
        lo, hi = prob.row_bounds()
        ref = optimize.milp(prob.c, constraints=optimize.LinearConstraint(prob.matrix(), lo, hi),
                            integrality=integ, bounds=optimize.Bounds(prob.lb, prob.ub))
        assert sol.objective == pytest.approx(ref.fun, rel=1e-8)

    def test_unknown_mode(self):
        system, prices, demands = site()
        with pytest.raises(S.ConfigError):
            S.build_p2(system, processes(), prices, demands, mode="fast")

    def test_series_length(self):
        system, prices, demands = site()
        with pytest.raises(S.ConfigError):
            S.build_p2(system, processes(), prices, demands, horizon=25)

    def test_unsupplied_demand(self):
        system, prices, demands = site()
        demands = dict(demands, steam=np.ones(24))
        with pytest.raises(S.ConfigError):
            S.build_p2(system, processes(), prices, demands)

    def test_mismatched_surrogate(self):
        a, b = processes()
        bad = dataclasses.replace(a, surrogate=b.surrogate)
        with pytest.raises(S.ConfigError):
            bad.validate()


class TestSchedule:
    def test_binaries_are_exact(self, drc):
        for c in drc[2].components.values():
            assert set(np.unique(c["z"])) <= {0.0, 1.0}

    def test_storage(self, drc):
        _, _, s = drc
        for pr in processes():
            rec = s.processes[pr.name]
            cap = 3.0 * pr.rho_nom
            assert rec["S"][0] == pytest.approx(0.5 * cap) and rec["S"][-1] == pytest.approx(0.5 * cap)
            assert np.all(rec["S"] >= -1e-9) and np.all(rec["S"] <= cap + 1e-9)
            assert abs(rec["storage_telescoping"]) <= 1e-8

    def test_balances_hold(self, drc):
        _, _, s = drc
        assert np.all(s.balance["heat"] >= -1e-7)
        assert np.all(np.abs(s.balance["electricity"]) <= 1e-7)

    def test_box_respected(self, drc):
        _, _, s = drc
        for pr in processes():
            rho = s.processes[pr.name]["rho"]
            assert rho.min() >= pr.rho_min - 1e-9 and rho.max() <= pr.rho_max + 1e-9

    def test_ramp_limits_at_nodes(self, drc):
        _, _, s = drc
        per = (len(s.times) - 1) // s.hours
        for pr in processes():
            rec = s.processes[pr.name]
            for q in range(s.hours):
                PHI = rec["phi"][q * per: (q + 1) * per + 1]
                nu = rec["nu"][q]
                assert np.all(nu <= pr.limits.upper(PHI) + 1e-8)
                assert np.all(nu >= pr.limits.lower(PHI) - 1e-8)

    def test_cost_starts_at_zero(self, drc):
        _, sol, s = drc
        assert s.cost[0] == 0.0
        assert s.objective == pytest.approx(sol.objective, rel=1e-12)

    def test_stale_solution(self):
        system, prices, demands = site()
        pr, dm = first_hours(prices, demands, 2)
        prob = S.build_p2(system, processes(), pr, dm)
        sol = solve_milp(prob, log=False)
        prob.set_obj(0, prob.c[0])
        with pytest.raises(S.StaleSolution):
            S.extract_schedule(prob, sol)

    def test_write_and_read(self, drc, tmp_path):
        _, sol, s = drc
        S.write_schedule(s, tmp_path)
        S.write_manifest(s, tmp_path, {"system": "x"}, {"status": sol.status})
        back = S.read_schedule(tmp_path, site()[0])
        assert back.hours == 24 and back.objective == s.objective
        for name, rec in s.processes.items():
            assert np.array_equal(back.processes[name]["nu"], rec["nu"])
            assert np.array_equal(back.processes[name]["supply.heat"], rec["supply.heat"])
        for name, c in s.components.items():
            assert np.array_equal(back.components[name]["z"], c["z"])
        assert np.array_equal(back.grid_buy, s.grid_buy)

    def test_read_rejects_fractional_binary(self, drc, tmp_path):
        _, sol, s = drc
        S.write_schedule(s, tmp_path)
        S.write_manifest(s, tmp_path, {}, {})
        cols = dio.read_csv(tmp_path / "hourly.csv", ["hour"])
        cols["CHP.z"][3] = 0.5
        dio.write_csv(tmp_path / "hourly.csv", list(cols), zip(*cols.values()))
        with pytest.raises(dio.InputError):
            S.read_schedule(tmp_path)


class TestScenarios:
    def test_steady_waste_heat_is_constant(self):
        prob, sol, _ = p2(S.STEADY)
        s = S.extract_schedule(prob, sol)
        for pr in processes():
            rec = s.processes[pr.name]
            assert np.allclose(rec["rho"], pr.rho_nom, atol=1e-12)
            want = rec["scale"] * pr.surrogate.evaluate("heat", [[pr.rho_nom] + [0.0] * pr.delta])[0]
            assert np.allclose(rec["supply.heat"], want, rtol=1e-12)

    def test_waste_heat_is_worth_something(self):
        system, prices, demands = site()
        none = [dataclasses.replace(p, scaling=0.0) for p in processes()]
        s0 = solve(S.build_steady_baseline(system, none, prices, demands))
        s1 = S.extract_schedule(*p2(S.STEADY)[:2])
        assert s0.objective >= s1.objective - 1e-9

    def test_zero_width_static_limits_freeze_production(self):
        system, prices, demands = site()
        a = processes()[0]
        s = solve(S.build_p2_src(system, [a], prices, demands, src={a.name: (0.0, 0.0)}))
        assert np.allclose(s.processes[a.name]["rho"], a.rho_nom, atol=1e-12)

    def test_static_problem_is_a_restriction(self):
        drc_obj = p2(S.DRC)[1].objective
        src_obj = p2(S.SRC)[1].objective
        steady_obj = p2(S.STEADY)[1].objective
        assert drc_obj <= src_obj + 1e-9 <= steady_obj + 2e-9

    def test_fixed_terminal_state(self):
        system, prices, demands = site()
        pr, dm = first_hours(prices, demands, 4)
        free = solve(S.build_p2(system, processes(), pr, dm))
        fixed = solve(S.build_p2(system, processes(), pr, dm, fix_terminal=True))
        assert fixed.objective >= free.objective - 1e-9
        for p in processes():
            assert fixed.processes[p.name]["rho"][-1] == pytest.approx(p.rho_nom, abs=1e-9)


class TestInfeasible:
    def test_names_first_short_balance(self):
        system, prices, demands = site()
        pr, dm = first_hours(prices, demands, 6)
        # pin the waste-heat scale so it does not follow the demand peak
        procs = [dataclasses.replace(p, scaling=S.waste_heat_scaling(system, p, dm)) for p in processes()]
        dm["heat"] = dm["heat"].copy()
        dm["heat"][4] = 50.0
        prob = S.build_p2(system, procs, pr, dm)
        assert solve_milp(prob, log=False).status == "infeasible"
        form, hour, short = S.first_violated_balance(prob)
        assert (form, hour) == ("heat", 4)
        # the reported shortfall is exactly what is missing
        dm["heat"][4] -= short * (1 + 1e-7)
        assert solve_milp(S.build_p2(system, procs, pr, dm), log=False).ok
        dm["heat"][4] += short * 2e-3
        assert not solve_milp(S.build_p2(system, procs, pr, dm), log=False).ok

    def test_feasible_problem_has_no_short_balance(self):
        system, prices, demands = site()
        pr, dm = first_hours(prices, demands, 3)
        assert S.first_violated_balance(S.build_p2(system, processes(), pr, dm)) is None


class TestFastestRamp:
    def test_no_move(self):
        r = S.build_fastest_ramp(limits("cstr1"), 1.0, 1.0)
        assert r.time == 0.0 and r.lp_solves == 0

    def test_cstr1_trajectory(self):
        lim = limits("cstr1")
        r = S.build_fastest_ramp(lim, 0.8, 1.2)
        assert r.phi[0, 0] == 0.8 and r.phi[-1, 0] == pytest.approx(1.2, abs=1e-9)
        assert np.allclose(np.diff(r.phi[:, 0]), r.step * r.nu, atol=1e-12)
        assert np.all(r.nu <= lim.upper(r.phi[:-1]) + 1e-9) and np.all(r.nu <= lim.upper(r.phi[1:]) + 1e-9)
        # one step less is not enough
        assert S._ramp_lp(lim, [0.8], [1.2], r.steps - 1, r.step, None, lim.box) is None

    def test_down_ramp(self):
        r = S.build_fastest_ramp(limits("cstr1"), 1.2, 0.8)
        assert r.phi[-1, 0] == pytest.approx(0.8, abs=1e-9) and np.all(r.nu <= 1e-12)

    def test_static_is_slower(self):
        lim = limits("cstr1")
        a = S.build_fastest_ramp(lim, 0.8, 1.2)
        b = S.build_fastest_ramp(lim, 0.8, 1.2, static=True, src=S.interior_src(lim))
        assert b.time >= a.time

    def test_crossed_static_limits(self):
        with pytest.raises(S.Unreachable):
            S.build_fastest_ramp(limits("cstr1"), 0.8, 1.2, static=True, src=(0.1, -0.1))

    def test_target_outside_box(self):
        with pytest.raises(S.ConfigError):
            S.build_fastest_ramp(limits("cstr1"), 0.8, 1.5)

    def test_interior_constants_inside_band(self):
        lim = limits("cstr1")
        lo, hi = S.interior_src(lim)
        rho = np.linspace(*lim.box[0], 41)
        assert np.all(lim.lower(rho) <= lo) and np.all(lim.upper(rho) >= hi)
        assert lim.src[0] <= lo < hi <= lim.src[1]


class TestLoaders:
    def test_missing_price_column(self, tmp_path):
        f = tmp_path / "prices.csv"
        f.write_text("hour,buy\n0,1\n1,2\n")
        with pytest.raises(dio.InputError):
            S.load_prices(f)

    def test_hours_must_count(self, tmp_path):
        f = tmp_path / "demands.csv"
        f.write_text("hour,heat\n0,1\n2,2\n")
        with pytest.raises(dio.InputError):
            S.load_demands(f)

    def test_sell_defaults_to_buy(self, tmp_path):
        f = tmp_path / "prices.csv"
        f.write_text("hour,buy,fuel\n0,40,20\n1,50,20\n")
        p = S.load_prices(f)
        assert p.sell.tolist() == [40.0, 50.0]

    def test_bad_component(self):
        data = dio.load_yaml(dio.shipped("system.yaml"), S.SYSTEM_FORMAT)
        data["components"][0]["Q_min_MW"] = 5.0
        with pytest.raises(dio.InputError):
            S.system_from_dict(data)
