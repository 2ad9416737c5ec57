"""Command-line entry point: ``dynramp <command> ...``.

Exit codes: 0 ok, 1 a replay finished but failed its tracking check,
2 input error, 3 infeasible schedule, 4 runtime abort.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from . import expr as E
from . import io as dio
from . import limitfit as F
from . import linearize as L
from . import scheduler as S
from . import simulate as M
from .lpmilp import ProblemError, solve_milp

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 1, 2, 3, 4


class CommandError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _counts(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CommandError(f"--grid expects integers separated by commas, got {text!r}") from None
    if not vals:
        raise CommandError("--grid is empty")
    return vals


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands

def cmd_derive(a) -> int:
    model = dio.load_model(a.model)
    d = L.derive(model)
    dio.save_derivation(d, _out(a.out))
    text = L.report(d)
    Path(a.out).with_suffix(".report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_fit(a) -> int:
    d = dio.load_derivation(a.derivation)
    counts = _counts(a.grid)
    if len(counts) == 1:
        counts = counts * max(1, d.delta)
    ls = F.fit_limits(d, counts=counts)
    dio.save_limits(ls, _out(a.out))
    print(f"model {ls.model}: delta={ls.delta}, {ls.n_samples} samples ({ls.n_failed} failed)")
    print(f"nu_min = {ls.nu_min.tolist()}")
    print(f"nu_max = {ls.nu_max.tolist()}")
    print(f"max pre-shift violation: lower {ls.violation_min:.3e}, upper {ls.violation_max:.3e}")
    print(f"static limits: [{ls.src[0]:.6g}, {ls.src[1]:.6g}]")
    return EXIT_OK


def cmd_fit_demand(a) -> int:
    d = dio.load_derivation(a.derivation)
    ls = dio.load_limits(a.limits)
    counts = _counts(a.grid)
    if len(counts) == 1:
        counts = counts * (d.delta + 1)
    ds = F.fit_demand(d, ls, counts=counts)
    dio.save_demand(ds, _out(a.out))
    print(f"model {ds.model}: {ds.n_samples} samples ({ds.n_skipped} outside the limits)")
    for form, v in ds.avg_abs_dev.items():
        print(f"{form}: avg abs deviation {100 * v:.2f} % of nominal, max {100 * ds.max_abs_dev[form]:.2f} %")
    return EXIT_OK


def cmd_ramp(a) -> int:
    ls = dio.load_limits(a.limits)
    src = None
    if a.static:
        src = S.interior_src(ls) if a.interior else ls.src
    try:
        r = S.build_fastest_ramp(ls, a.rho_from, a.rho_to, step=a.step, static=a.static, src=src)
    except S.Unreachable as exc:
        raise CommandError(str(exc), EXIT_INFEASIBLE) from None
    kind = "static" if a.static else "dynamic"
    print(f"fastest {kind} ramp {a.rho_from:g} -> {a.rho_to:g}: {r.time:.2f} h "
          f"({r.steps} steps of {r.step:g} h, {r.lp_solves} LP solves)")
    if a.out:
        hdr = ["time_h"] + [f"phi{j}" for j in range(r.phi.shape[1])] + ["nu"]
        nu = np.append(r.nu, np.nan) if len(r.nu) else np.array([np.nan])
        rows = (tuple([r.t[k], *r.phi[k], nu[k]]) for k in range(len(r.t)))
        dio.write_csv(_out(a.out), hdr, rows)
    return EXIT_OK


def _solve(problem, a):
    sol = solve_milp(problem, gap=a.gap, time_limit=a.time_limit, log=False)
    return sol


def cmd_schedule(a) -> int:
    system = S.load_system(a.system)
    prices = S.load_prices(a.prices)
    demands = S.load_demands(a.demands)
    procs = [S.load_process(p) for p in a.process]
    for f, v in demands.items():
        if len(v) != len(prices):
            raise CommandError(f"demand horizon {len(v)} h differs from price horizon {len(prices)} h")
    mode = S.SRC if a.src else (S.STEADY if a.steady else S.DRC)
    src = {p.name: S.interior_src(p.limits) for p in procs} if (a.src and a.interior) else None
    problem = S.build_p2(system, procs, prices, demands, mode=mode, src=src)
    sol = _solve(problem, a)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    log = [f"problem: {problem.name}, {problem.m} rows, {problem.n} columns, {len(problem.binaries)} binaries",
           f"status: {sol.status}", f"nodes: {sol.nodes}", f"simplex iterations: {sol.iterations}",
           f"wall time: {sol.wall_time:.3f} s"]
    if not sol.ok:
        (out / "solver.log").write_text("\n".join(log) + "\n")
        print("\n".join(log))
        hit = S.first_violated_balance(problem)
        if hit is None:
            raise CommandError(f"schedule infeasible ({sol.status}); no hourly balance can be blamed",
                               EXIT_INFEASIBLE)
        form, q, v = hit
        raise CommandError(f"schedule infeasible: balance.{form}[{q}] short by at least {v:.6g} MW",
                           EXIT_INFEASIBLE)
    log += [f"objective: {sol.objective:.6f}", f"bound: {sol.bound:.6f}", f"relative gap: {sol.gap:.3e}"]
    (out / "solver.log").write_text("\n".join(log) + "\n")
    sched = S.extract_schedule(problem, sol)
    S.write_schedule(sched, out)
    inputs = {"system": str(Path(a.system).resolve()), "prices": str(Path(a.prices).resolve()),
              "demands": str(Path(a.demands).resolve()),
              "process": [str(Path(p).resolve()) for p in a.process]}
    solver = {"status": sol.status, "gap": float(sol.gap), "nodes": int(sol.nodes),
              "binaries": len(problem.binaries)}
    S.write_manifest(sched, out, inputs, solver)
    summary = [f"mode: {mode}", f"cost: {sched.objective:.6f}"]
    if a.compare_steady and mode != S.STEADY:
        base = S.build_steady_baseline(system, procs, prices, demands)
        bsol = _solve(base, a)
        if bsol.ok:
            saving = bsol.objective - sched.objective
            summary += [f"steady cost: {bsol.objective:.6f}",
                        f"saving: {saving:.6f} ({100 * saving / abs(bsol.objective):.3f} %)"]
        else:
            summary.append(f"steady baseline: {bsol.status}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(log + summary))
    return EXIT_OK


def cmd_simulate(a) -> int:
    model = dio.load_model(a.model)
    d = dio.load_derivation(a.derivation)
    if d.model.name != model.name:
        raise CommandError(f"derivation is for model {d.model.name!r}, not {model.name!r}")
    out = Path(a.out)
    system = prices = None
    man = dio.load_yaml(Path(a.schedule) / "run.yaml", S.RUN_FORMAT)
    inputs = man.get("inputs") or {}
    if a.system or inputs.get("system"):
        system = S.load_system(a.system or inputs["system"])
    sched = S.read_schedule(a.schedule, system)
    name = a.process or model.name
    if name not in sched.processes:
        raise CommandError(f"schedule has no process {name!r} (has {sorted(sched.processes)})")
    rec = sched.processes[name]
    if rec["delta"] != d.delta:
        raise CommandError(f"process {name} was scheduled with delta={rec['delta']}, derivation has {d.delta}")
    sig = M.signal_from_schedule(rec, float(man.get("period_h", 1.0)))
    try:
        sim = M.simulate(model, d, sig, dt=a.dt)
    except M.StateRangeError as exc:
        raise CommandError(f"simulation aborted: {exc}", EXIT_RUNTIME) from None
    except M.SimulationError as exc:
        raise CommandError(f"simulation aborted: {exc}", EXIT_RUNTIME) from None
    out.mkdir(parents=True, exist_ok=True)
    M.write_sim_csv(sim, out / f"{name}.sim.csv", every=a.every)
    rec_report = None
    if system is not None and (a.prices or inputs.get("prices")):
        prices = S.load_prices(a.prices or inputs["prices"])
        rec_report = M.reconcile({name: sim}, sched, system, prices, policy=a.policy)
    text = M.report({name: sim}, rec_report)
    ok = sim.clip_count == 0 and sim.max_deviation <= a.threshold
    text += f"tracking check (deviation <= {a.threshold:g}, no clips): {'pass' if ok else 'FAIL'}\n"
    (out / f"{name}.report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynramp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("derive", help="derive the ramping constraint of a process model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("fit", help="fit affine dynamic ramping limits")
    p.add_argument("--derivation", required=True)
    p.add_argument("--grid", default="100", help="points per axis, e.g. 100 or 100,100")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-demand", help="fit the affine waste-heat surrogate")
    p.add_argument("--derivation", required=True)
    p.add_argument("--limits", required=True)
    p.add_argument("--grid", default="11")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_demand)

    p = sub.add_parser("ramp", help="fastest ramp between two production rates")
    p.add_argument("--limits", required=True)
    p.add_argument("--from", dest="rho_from", type=float, required=True)
    p.add_argument("--to", dest="rho_to", type=float, required=True)
    p.add_argument("--static", action="store_true", help="use the constant limits instead")
    p.add_argument("--interior", action="store_true",
                   help="with --static: constant limits inside the fitted band")
    p.add_argument("--step", type=float, default=0.01, help="time step in h")
    p.add_argument("--out", help="trajectory CSV")
    p.set_defaults(func=cmd_ramp)

    p = sub.add_parser("schedule", help="day-ahead schedule of the energy system")
    p.add_argument("--system", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--demands", required=True)
    p.add_argument("--process", action="append", default=[], required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--src", action="store_true", help="constant ramping limits")
    g.add_argument("--steady", action="store_true", help="processes at nominal rate")
    p.add_argument("--interior", action="store_true", help="with --src: constant limits inside the fitted band")
    p.add_argument("--compare-steady", action="store_true")
    p.add_argument("--gap", type=float, default=1e-4)
    p.add_argument("--time-limit", type=float, default=600.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="replay a schedule on the nonlinear model")
    p.add_argument("--model", required=True)
    p.add_argument("--derivation", required=True)
    p.add_argument("--schedule", required=True, help="directory written by the schedule command")
    p.add_argument("--process", help="process name in the schedule (default: model name)")
    p.add_argument("--system", help="system file for reconciliation (default: from the run manifest)")
    p.add_argument("--prices", help="price CSV for reconciliation (default: from the run manifest)")
    p.add_argument("--policy", choices=[M.BOILER, M.GRID_ONLY], default=M.BOILER)
    p.add_argument("--dt", type=float, default=M.DEFAULT_DT)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.add_argument("--every", type=int, default=10, help="write every n-th time step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return ap


INPUT_ERRORS = (dio.InputError, E.ExprError, L.ModelError, F.GridError, S.ConfigError, ProblemError,
                yaml.YAMLError, OSError, ValueError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except S.Unreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (L.LinearizeError, F.FitError) as exc:
        if isinstance(exc, (L.ModelError, F.GridError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except M.SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
