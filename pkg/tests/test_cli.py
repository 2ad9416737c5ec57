import shutil

import numpy as np
import pytest
import yaml

from dynramp import io as dio
from dynramp.cli import main

DATA = dio.shipped("system.yaml").parent


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def schedule_dir(work):
    out = work / "sched"
    code = main(["schedule", "--system", str(DATA / "system.yaml"),
                 "--prices", str(DATA / "prices_synthetic.csv"),
                 "--demands", str(DATA / "demands_synthetic.csv"),
                 "--process", str(DATA / "cstr1.process.yaml"),
                 "--process", str(DATA / "cstr2.process.yaml"),
                 "--compare-steady", "--out", str(out)])
    assert code == 0
    return out


class TestDerive:
    @pytest.mark.parametrize("name, text", [("cstr1", "r=2, delta=1"), ("cstr2", "r=3, delta=2")])
    def test_orders(self, capsys, tmp_path, name, text):
        code, out, _ = run(capsys, "derive", "--model", DATA / f"{name}.yaml", "--out", tmp_path / f"{name}.deriv.yaml")
        assert code == 0 and text in out
        assert text in (tmp_path / f"{name}.deriv.report.txt").read_text()

    def test_malformed_expression(self, capsys, tmp_path):
        data = yaml.safe_load((DATA / "cstr1.yaml").read_text())
        data["rhs"]["c"] = "(1-c)*rho/V - c*k*exp(-N/T"
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump(data))
        code, _, err = run(capsys, "derive", "--model", bad, "--out", tmp_path / "x.yaml")
        assert code == 2
        assert "rhs[c]" in err and "offset 26" in err

    def test_missing_file(self, capsys, tmp_path):
        code, _, _ = run(capsys, "derive", "--model", tmp_path / "nope.yaml", "--out", tmp_path / "x.yaml")
        assert code == 2


@pytest.fixture(scope="module")
def derivations(work):
    for nm in ("cstr1", "cstr2"):
        assert main(["derive", "--model", str(DATA / f"{nm}.yaml"), "--out", str(work / f"{nm}.deriv.yaml")]) == 0
    return work


class TestFit:
    def test_cstr2_samples(self, capsys, derivations):
        code, out, _ = run(capsys, "fit", "--derivation", derivations / "cstr2.deriv.yaml",
                           "--grid", "100,100", "--out", derivations / "cstr2.limits.yaml")
        assert code == 0 and "10000 samples" in out

    def test_matches_shipped_limits(self, capsys, derivations):
        code, _, _ = run(capsys, "fit", "--derivation", derivations / "cstr1.deriv.yaml",
                         "--out", derivations / "cstr1.limits.yaml")
        assert code == 0
        a = dio.load_limits(derivations / "cstr1.limits.yaml")
        b = dio.load_limits(DATA / "cstr1.limits.yaml")
        assert np.array_equal(a.nu_min, b.nu_min) and np.array_equal(a.nu_max, b.nu_max)

    def test_deterministic(self, capsys, derivations):
        for k in (1, 2):
            run(capsys, "fit", "--derivation", derivations / "cstr1.deriv.yaml", "--grid", "50",
                "--out", derivations / f"det{k}.yaml")
        assert (derivations / "det1.yaml").read_bytes() == (derivations / "det2.yaml").read_bytes()

    @pytest.mark.parametrize("grid", ["1", "1,100", "a,b"])
    def test_bad_grid(self, capsys, derivations, grid):
        code, _, _ = run(capsys, "fit", "--derivation", derivations / "cstr2.deriv.yaml",
                         "--grid", grid, "--out", derivations / "bad.yaml")
        assert code == 2

    def test_demand(self, capsys, derivations):
        run(capsys, "fit", "--derivation", derivations / "cstr1.deriv.yaml", "--out", derivations / "c1.limits.yaml")
        code, out, _ = run(capsys, "fit-demand", "--derivation", derivations / "cstr1.deriv.yaml",
                           "--limits", derivations / "c1.limits.yaml", "--grid", "11,11",
                           "--out", derivations / "c1.demand.yaml")
        assert code == 0
        dev = dio.load_demand(derivations / "c1.demand.yaml").avg_abs_dev["heat"]
        assert 0.03 <= dev <= 0.05
        assert f"{100 * dev:.2f} %" in out


class TestRamp:
    def test_dynamic_and_static(self, capsys, tmp_path):
        code, out, _ = run(capsys, "ramp", "--limits", DATA / "cstr1.limits.yaml", "--from", 0.8, "--to", 1.2,
                           "--out", tmp_path / "r.csv")
        assert code == 0 and ": 1.67 h" in out
        cols = dio.read_csv(tmp_path / "r.csv", ["time_h", "phi0", "nu"])
        assert cols["phi0"][-1] == pytest.approx(1.2, abs=1e-9)
        code, out, _ = run(capsys, "ramp", "--limits", DATA / "cstr1.limits.yaml", "--from", 0.8, "--to", 1.2,
                           "--static", "--interior")
        assert code == 0 and ": 2.31 h" in out

    def test_second_order_is_slower(self, capsys):
        _, out1, _ = run(capsys, "ramp", "--limits", DATA / "cstr1.limits.yaml", "--from", 0.8, "--to", 1.2)
        code, out2, _ = run(capsys, "ramp", "--limits", DATA / "cstr2.limits.yaml", "--from", 0.8, "--to", 1.2)
        assert code == 0
        t1 = float(out1.split(": ")[1].split(" h")[0])
        t2 = float(out2.split(": ")[1].split(" h")[0])
        assert t2 >= t1 + 0.4

    def test_unreachable(self, capsys, tmp_path):
        data = yaml.safe_load((DATA / "cstr1.limits.yaml").read_text())
        data["static_limits"] = [0.1, -0.1]
        f = tmp_path / "l.yaml"
        f.write_text(yaml.safe_dump(data))
        code, _, err = run(capsys, "ramp", "--limits", f, "--from", 0.8, "--to", 1.2, "--static")
        assert code == 3 and "crossed" in err


class TestSchedule:
    def test_log_and_summary(self, schedule_dir):
        log = (schedule_dir / "solver.log").read_text()
        assert "48 binaries" in log and "status: optimal" in log
        summary = dict(ln.split(": ", 1) for ln in (schedule_dir / "summary.txt").read_text().splitlines())
        assert float(summary["cost"]) <= float(summary["steady cost"].split()[0]) + 1e-9
        assert (schedule_dir / "hourly.csv").exists() and (schedule_dir / "schedule.csv").exists()

    def test_missing_price_column(self, capsys, tmp_path):
        prices = tmp_path / "p.csv"
        prices.write_text("hour,buy\n" + "".join(f"{h},40\n" for h in range(24)))
        code, _, err = run(capsys, "schedule", "--system", DATA / "system.yaml", "--prices", prices,
                           "--demands", DATA / "demands_synthetic.csv", "--process", DATA / "cstr1.process.yaml",
                           "--out", tmp_path / "o")
        assert code == 2 and "fuel" in err

    def test_horizon_mismatch(self, capsys, tmp_path):
        src = (DATA / "prices_synthetic.csv").read_text().splitlines()
        prices = tmp_path / "p.csv"
        prices.write_text("\n".join(src[:13]) + "\n")
        code, _, _ = run(capsys, "schedule", "--system", DATA / "system.yaml", "--prices", prices,
                         "--demands", DATA / "demands_synthetic.csv", "--process", DATA / "cstr1.process.yaml",
                         "--out", tmp_path / "o")
        assert code == 2

    def test_infeasible(self, capsys, tmp_path):
        cols = dio.read_csv(DATA / "demands_synthetic.csv", ["hour"])
        cols["heat"][7] = 80.0
        dem = tmp_path / "d.csv"
        dio.write_csv(dem, list(cols), zip(*cols.values()))
        code, _, err = run(capsys, "schedule", "--system", DATA / "system.yaml",
                           "--prices", DATA / "prices_synthetic.csv", "--demands", dem,
                           "--process", DATA / "cstr1.process.yaml", "--out", tmp_path / "o")
        assert code == 3 and "balance.heat[7]" in err


class TestSimulate:
    def test_replay_passes(self, capsys, work, schedule_dir):
        main(["derive", "--model", str(DATA / "cstr1.yaml"), "--out", str(work / "c1.deriv.yaml")])
        code, out, _ = run(capsys, "simulate", "--model", DATA / "cstr1.yaml", "--derivation", work / "c1.deriv.yaml",
                           "--schedule", schedule_dir, "--out", work / "sim")
        assert code == 0 and "pass" in out
        assert "clip events       = 0" in out and "realized cost" in out
        assert (work / "sim" / "cstr1.sim.csv").exists()

    def test_corrupted_schedule(self, capsys, work, schedule_dir, tmp_path):
        bad = tmp_path / "sched"
        shutil.copytree(schedule_dir, bad)
        text = (bad / "hourly.csv").read_text().splitlines()
        text[5] = text[5].replace(",", ",x", 1)
        (bad / "hourly.csv").write_text("\n".join(text) + "\n")
        main(["derive", "--model", str(DATA / "cstr1.yaml"), "--out", str(tmp_path / "d.yaml")])
        code, _, _ = run(capsys, "simulate", "--model", DATA / "cstr1.yaml", "--derivation", tmp_path / "d.yaml",
                         "--schedule", bad, "--out", tmp_path / "sim")
        assert code == 2

    def test_state_range_abort(self, capsys, schedule_dir, tmp_path):
        data = yaml.safe_load((DATA / "cstr1.yaml").read_text())
        data["state_ranges"]["T"] = [0.725, 0.733]
        m = tmp_path / "narrow.yaml"
        m.write_text(yaml.safe_dump(data))
        main(["derive", "--model", str(DATA / "cstr1.yaml"), "--out", str(tmp_path / "d.yaml")])
        code, _, err = run(capsys, "simulate", "--model", m, "--derivation", tmp_path / "d.yaml",
                           "--schedule", schedule_dir, "--out", tmp_path / "sim")
        assert code == 4 and "state T" in err

    def test_wrong_process(self, capsys, schedule_dir, tmp_path):
        main(["derive", "--model", str(DATA / "cstr1.yaml"), "--out", str(tmp_path / "d.yaml")])
        code, _, _ = run(capsys, "simulate", "--model", DATA / "cstr1.yaml", "--derivation", tmp_path / "d.yaml",
                         "--schedule", schedule_dir, "--process", "cstr2", "--out", tmp_path / "sim")
        assert code == 2

    def test_failed_tracking_check(self, capsys, work, schedule_dir, tmp_path):
        main(["derive", "--model", str(DATA / "cstr1.yaml"), "--out", str(tmp_path / "d.yaml")])
        code, out, _ = run(capsys, "simulate", "--model", DATA / "cstr1.yaml", "--derivation", tmp_path / "d.yaml",
                           "--schedule", schedule_dir, "--threshold", "1e-16", "--out", tmp_path / "sim")
        assert code == 1 and "FAIL" in out
