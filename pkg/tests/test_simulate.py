import dataclasses

import numpy as np
import pytest

from dynramp import kernels
from dynramp import linearize as L
from dynramp import scheduler as S
from dynramp import simulate as M

from conftest import derivation, limits, model, p2, site


def steady(name, hours=1, dt=1e-3, x0=None):
    d = derivation(name)
    phi0 = d.nominal_phi()
    return M.simulate(model(name), d, M.ChainSignal(d.delta, 1.0, phi0, np.zeros(hours)), dt=dt, x0=x0)


@pytest.fixture(scope="module")
def drc_schedule():
    prob, sol, _ = p2(S.DRC)
    return S.extract_schedule(prob, sol)


@pytest.fixture(scope="module")
def cstr1_replay(drc_schedule):
    return M.simulate(model("cstr1"), derivation("cstr1"), M.signal_from_schedule(drc_schedule.processes["cstr1"]))


class TestSignal:
    def test_first_order(self):
        s = M.ChainSignal(1, 1.0, [0.8], [0.2, -0.1])
        PHI, nu, rho = s.at(np.array([1, 1]), np.array([0.0, 0.5]))
        assert rho.tolist() == pytest.approx([1.0, 0.95])
        assert s.starts[-1, 0] == pytest.approx(0.9)

    def test_second_order_exact(self):
        s = M.ChainSignal(2, 0.5, [1.0, 0.1], [0.2, -0.4, 0.0])
        # closed form at the end of each period
        r, v = 1.0, 0.1
        for q, a in enumerate([0.2, -0.4, 0.0]):
            r, v = r + v * 0.5 + a * 0.125, v + a * 0.5
            assert s.starts[q + 1].tolist() == pytest.approx([r, v], abs=1e-15)
        PHI, _, rho = s.at(1, 0.25)
        assert rho == pytest.approx(s.starts[1, 0] + s.starts[1, 1] * 0.25 - 0.4 * 0.03125)

    def test_delta_zero(self):
        s = M.ChainSignal(0, 1.0, [], [1.0, 1.1])
        _, _, rho = s.at(1, 0.3)
        assert rho == 1.1

    def test_bad_start(self):
        with pytest.raises(ValueError):
            M.ChainSignal(2, 1.0, [1.0], [0.0])


class TestSteady:
    def test_cstr1_holds_concentration_for_a_day(self):
        s = steady("cstr1", hours=24)
        assert np.max(np.abs(s.X[:, 0] - 0.1367)) <= 1e-9
        assert s.clip_count == 0
        assert s.u[0] == pytest.approx(390.0, abs=0.5)

    def test_waste_heat_energy_balance(self):
        s = steady("cstr1")
        p = model("cstr1").parameters
        c, T = s.X[-1]
        want = (p["T_f"] - T) * 1.0 / p["V"] + c * p["k"] * np.exp(-p["N"] / T)
        assert np.max(np.abs(s.waste_heat - want)) <= 1e-9
        assert s.hourly_waste_heat[0] == pytest.approx(want, abs=1e-9)

    def test_cstr2_steady(self):
        s = steady("cstr2")
        assert s.max_deviation <= 1e-9


def test_rk4_fourth_order():
    # steady replays sit at round-off for any step, so start off the fixed point
    d = derivation("cstr2")
    m = model("cstr2")
    x0 = 1.05 * L.solve_gamma(d, d.nominal_phi())
    u0 = L.feedforward_u(d, d.nominal_phi(), 0.0)
    lo = np.array([m.ranges[s][0] for s in m.states])
    hi = np.array([m.ranges[s][1] for s in m.states])

    def end_state(dt):
        n = int(round(2.0 / dt))
        X, status, _ = kernels.rk4_integrate(d._tape("rhs"), x0, np.ones((n, 3)), np.full((n, 3), u0), dt, lo, hi)
        assert status == 0
        return X[-1]

    ref = end_state(0.1 / 1024)
    err = [np.max(np.abs(end_state(h) - ref) / np.abs(ref)) for h in (0.04, 0.02, 0.01, 0.005)]
    order = np.log2(np.array(err[:-1]) / np.array(err[1:]))
    assert np.all((order > 3.7) & (order < 4.4)), order


class TestTracking:
    def test_nu_above_limit_breaks_tracking(self):
        d = derivation("cstr1")
        hi = L.nu_limits_exact(d, [1.0])[1]
        s = M.simulate(model("cstr1"), d, M.ChainSignal(1, 1.0, [1.0], [1.1 * hi]))
        assert s.clip_count > 0 and s.max_deviation > 1e-4
        assert np.all(s.clip_u < 0)
        assert np.all((s.u >= 0) & (s.u <= 700))

    def test_fastest_ramp_is_tracked(self):
        r = S.build_fastest_ramp(limits("cstr1"), 0.8, 1.2)
        s = M.simulate(model("cstr1"), derivation("cstr1"), M.signal_from_ramp(r))
        assert s.clip_count == 0 and s.max_deviation <= 1e-6
        assert s.rho[-1] == pytest.approx(1.2, abs=1e-9)

    def test_schedule_replay(self, cstr1_replay):
        assert cstr1_replay.clip_count == 0
        assert cstr1_replay.max_deviation <= 1e-6
        assert len(cstr1_replay.hourly_waste_heat) == 24

    def test_state_range_abort(self):
        m = model("cstr1")
        narrow = dataclasses.replace(m, ranges=dict(m.ranges, T=(0.70, 0.74)))
        d = derivation("cstr1")
        with pytest.raises(M.StateRangeError) as ei:
            M.simulate(narrow, d, M.ChainSignal(1, 1.0, [1.0], [0.2]))
        assert ei.value.state == "T" and ei.value.time > 0

    @pytest.mark.parametrize("dt", [0.0, 0.02, 0.003])
    def test_bad_step(self, dt):
        with pytest.raises(ValueError):
            steady("cstr1", dt=dt)

    def test_delta_mismatch(self):
        with pytest.raises(ValueError):
            M.simulate(model("cstr1"), derivation("cstr1"), M.ChainSignal(2, 1.0, [1.0, 0.0], [0.0]))


class TestReconcile:
    def _perfect(self, schedule, sim, name="cstr1"):
        rec = schedule.processes[name]
        return dataclasses.replace(sim, hourly_waste_heat=rec["supply.heat"] / rec["scale"])

    def test_perfect_surrogate_keeps_cost(self, drc_schedule, cstr1_replay):
        system, prices, _ = site()
        r = M.reconcile({"cstr1": self._perfect(drc_schedule, cstr1_replay)}, drc_schedule, system, prices)
        assert r.realized_cost == pytest.approx(r.scheduled_cost, rel=1e-8)
        assert np.all(r.unmet["heat"] == 0.0)

    def test_cstr1_replay_cost(self, drc_schedule, cstr1_replay):
        system, prices, _ = site()
        r = M.reconcile({"cstr1": cstr1_replay}, drc_schedule, system, prices)
        assert abs(r.relative_delta) <= 0.05
        assert np.allclose(r.waste_heat_delta["heat"],
                           drc_schedule.processes["cstr1"]["scale"] * cstr1_replay.hourly_waste_heat
                           - drc_schedule.processes["cstr1"]["supply.heat"])

    def test_boiler_off_deficit_is_reported(self, drc_schedule, cstr1_replay):
        system, prices, _ = site()
        comps = dict(drc_schedule.components)
        comps["boiler"] = {k: np.zeros(24) for k in ("Q_in", "Q_out", "z")}
        sched = dataclasses.replace(drc_schedule, components=comps,
                                    balance=dict(drc_schedule.balance, heat=np.zeros(24)))
        low = dataclasses.replace(cstr1_replay, hourly_waste_heat=0.5 * cstr1_replay.hourly_waste_heat)
        r = M.reconcile({"cstr1": low}, sched, system, prices)
        assert np.all(r.unmet["heat"] > 0)
        assert np.all(r.absorbed["boiler"] == 0.0)

    def test_boiler_absorbs_within_bounds(self, drc_schedule, cstr1_replay):
        system, prices, _ = site()
        low = dataclasses.replace(cstr1_replay, hourly_waste_heat=0.9 * cstr1_replay.hourly_waste_heat)
        r = M.reconcile({"cstr1": low}, drc_schedule, system, prices)
        z = drc_schedule.components["boiler"]["z"]
        q = drc_schedule.components["boiler"]["Q_out"] + r.absorbed["boiler"]
        assert np.all(q <= 4.0 * z + 1e-12) and np.all(q >= 0.8 * z - 1e-12)
        assert r.realized_cost > r.scheduled_cost

    def test_grid_only_moves_nothing(self, drc_schedule, cstr1_replay):
        system, prices, _ = site()
        r = M.reconcile({"cstr1": cstr1_replay}, drc_schedule, system, prices, policy=M.GRID_ONLY)
        assert r.absorbed == {}
        assert np.array_equal(r.grid_buy, drc_schedule.grid_buy)

    def test_unknown_policy(self, drc_schedule, cstr1_replay):
        system, prices, _ = site()
        with pytest.raises(ValueError):
            M.reconcile({"cstr1": cstr1_replay}, drc_schedule, system, prices, policy="magic")

    def test_horizon_mismatch(self, drc_schedule):
        system, prices, _ = site()
        with pytest.raises(ValueError):
            M.reconcile({"cstr1": steady("cstr1", hours=2)}, drc_schedule, system, prices)


def test_csv_and_report(tmp_path, cstr1_replay):
    from dynramp import io as dio
    path = M.write_sim_csv(cstr1_replay, tmp_path / "sim" / "cstr1.csv", every=100)
    cols = dio.read_csv(path, ["time_h", "c", "T", "u", "Q_wh", "deviation"])
    assert len(cols["time_h"]) == 24_000 // 100 + 1
    assert cols["time_h"][-1] == pytest.approx(24.0)
    text = M.report({"cstr1": cstr1_replay})
    assert "clip events       = 0" in text
