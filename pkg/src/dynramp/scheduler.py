"""Scheduling problems over a multi-energy system with flexible processes.

``build_p2`` assembles the day-ahead MILP: one integrator chain per process
(collocated), product storage, hourly component dispatch with on/off
binaries, grid exchange and a collocated cumulative cost. ``build_p2_src``
and ``build_steady_baseline`` are restrictions of the same problem.
``build_fastest_ramp`` finds the shortest transition between two production
rates by bisection over LP feasibility.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as dio
from . import transcribe as T
from .limitfit import AffineLimitSet, DemandSurrogate, cartesian
from .lpmilp import EQ, GE, LE, OPTIMAL, MilpProblem, MilpSolution, solve_lp

SYSTEM_FORMAT = "dynramp-system/1"
PROCESS_FORMAT = "dynramp-process/1"

DRC, SRC, STEADY = "drc", "src", "steady"


class ConfigError(ValueError):
    pass


class Unreachable(RuntimeError):
    pass


class StaleSolution(ValueError):
    pass


class BalanceViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class Component:
    name: str
    consumes: str
    output: str
    slope: float  # output per unit input
    intercept: float  # output offset while on
    q_min: float
    q_max: float
    coproducts: dict = field(default_factory=dict)  # form -> units per unit of output

    def validate(self):
        if not 0.0 <= self.q_min < self.q_max:
            raise ConfigError(f"component {self.name}: need 0 <= Q_min < Q_max")
        if not self.slope > 0.0:
            raise ConfigError(f"component {self.name}: slope must be positive")

    def supplies(self) -> dict:
        out = {self.output: 1.0}
        out.update(self.coproducts)
        return out


@dataclass
class EnergySystemConfig:
    components: list
    forms: list
    grid_form: str = "electricity"
    fuel_forms: tuple = ("gas",)
    buy_max: float = math.inf
    sell_max: float = math.inf
    allow_heat_dump: bool = True
    storage_hours: float = 3.0
    storage_fraction: float | None = 0.5
    waste_heat_share: float = 0.1
    elements_per_hour: int = 2
    points_per_element: int = 4
    name: str = "system"

    def validate(self, demands: dict | None = None):
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate component names")
        for c in self.components:
            c.validate()
            for f in [c.consumes, *c.supplies()]:
                if f not in self.forms:
                    raise ConfigError(f"component {c.name}: unknown energy form {f!r}")
        if demands:
            for f in demands:
                if f not in self.forms:
                    raise ConfigError(f"demand for unknown energy form {f!r}")
                supplied = any(f in c.supplies() for c in self.components) or f == self.grid_form
                if not supplied:
                    raise ConfigError(f"no supplier for demanded energy form {f!r}")


@dataclass
class ProcessFlexConfig:
    name: str
    limits: AffineLimitSet
    surrogate: DemandSurrogate
    rho_min: float
    rho_nom: float
    rho_max: float
    scaling: float | None = None  # None: derived from the system waste-heat share
    storage_hours: float | None = None
    storage_fraction: float | None = -1.0  # -1 means: take the system setting
    supplies: dict = field(default_factory=lambda: {"heat": "heat"})  # surrogate form -> energy form
    src: tuple | None = None

    @property
    def delta(self) -> int:
        return self.limits.delta

    def box(self):
        return [(self.rho_min, self.rho_max)] + [tuple(b) for b in self.limits.box[1:]]

    def validate(self):
        if self.surrogate.delta != self.limits.delta:
            raise ConfigError(f"process {self.name}: surrogate delta {self.surrogate.delta} "
                              f"does not match limit delta {self.limits.delta}")
        if not self.rho_min <= self.rho_nom <= self.rho_max:
            raise ConfigError(f"process {self.name}: need rho_min <= rho_nom <= rho_max")
        for form in self.supplies:
            if form not in self.surrogate.coef:
                raise ConfigError(f"process {self.name}: surrogate has no form {form!r}")


@dataclass
class Prices:
    buy: np.ndarray
    sell: np.ndarray
    fuel: np.ndarray

    def __len__(self):
        return len(self.buy)


def interior_src(limits: AffineLimitSet, box=None) -> tuple:
    """Constant limits lying inside the fitted band over the whole box, so a
    static-ramp problem is a restriction of the dynamic one."""
    box = box if box is not None else limits.box
    corners = cartesian([np.array(b, float) for b in box])
    lo = max(limits.src[0], float(np.max(limits.lower(corners))))
    hi = min(limits.src[1], float(np.min(limits.upper(corners))))
    return lo, hi


# ---------------------------------------------------------------------------
# fastest ramp

@dataclass
class RampResult:
    time: float
    steps: int
    step: float
    t: np.ndarray
    phi: np.ndarray  # (steps + 1, delta)
    nu: np.ndarray  # (steps,)
    lp_solves: int


def _ramp_lp(limits, phi_from, phi_to, steps, dt, src, box):
    d = limits.delta
    p = MilpProblem("ramp")
    phi = [[p.add_var(f"phi{j}[{k}]", box[j][0], box[j][1]) for j in range(d)] for k in range(steps + 1)]
    nu = [p.add_var(f"nu[{k}]", -math.inf, math.inf) for k in range(steps)]
    for j in range(d):
        for k, val in ((0, phi_from[j]), (steps, phi_to[j])):
            if not box[j][0] <= val <= box[j][1]:
                return None
            p.set_bounds(phi[k][j], val, val)

    def propagate(k, tau):
        """Linear forms of phi at time tau into step k."""
        out = []
        for j in range(d):
            row = {}
            for i in range(j, d):
                row[phi[k][i]] = tau ** (i - j) / math.factorial(i - j)
            row[nu[k]] = tau ** (d - j) / math.factorial(d - j)
            out.append(row)
        return out

    def bound_rows(ph, nk):
        if src is not None:
            p.set_bounds(nk, max(p.lb[nk], src[0]), min(p.ub[nk], src[1]))
            return
        for coef, sense in ((limits.nu_max, LE), (limits.nu_min, GE)):
            row = {nk: 1.0}
            for form, a in zip(ph, coef[1:]):
                for v, c in form.items():
                    row[v] = row.get(v, 0.0) - float(a) * c
            p.add_row(row, sense, float(coef[0]))

    for k in range(steps):
        for j, form in enumerate(propagate(k, dt)):
            row = dict(form)
            row[phi[k + 1][j]] = row.get(phi[k + 1][j], 0.0) - 1.0
            p.add_row(row, EQ, 0.0)
        pts = [[{phi[k][j]: 1.0} for j in range(d)], [{phi[k + 1][j]: 1.0} for j in range(d)]]
        if d >= 2:
            mid = propagate(k, 0.5 * dt)
            pts.append(mid)
            p.add_row(mid[0], GE, box[0][0])
            p.add_row(mid[0], LE, box[0][1])
        for ph in pts:
            bound_rows(ph, nu[k])
            if src is not None:
                break
    sol = solve_lp(p)
    if sol.status != OPTIMAL:
        return None
    x = sol.x
    PHI = np.array([[x[v] for v in row] for row in phi])
    NU = np.array([x[v] for v in nu])
    return PHI, NU


def build_fastest_ramp(limits: AffineLimitSet, rho_from: float, rho_to: float, step: float = 0.01,
                       static: bool = False, src=None, box=None, max_hours: float = 48.0) -> RampResult:
    """Minimal time to move the ramping state from (rho_from, 0, ...) to
    (rho_to, 0, ...) with piecewise-constant nu on a grid of ``step`` hours."""
    d = limits.delta
    if d == 0:
        return RampResult(0.0, 0, step, np.array([0.0]), np.array([[rho_to]]), np.zeros(0), 0)
    box = [tuple(b) for b in (box or limits.box)]
    for v in (rho_from, rho_to):
        if not box[0][0] <= v <= box[0][1]:
            raise ConfigError(f"production rate {v} outside box {box[0]}")
    if static:
        src = tuple(src) if src is not None else tuple(limits.src)
        if src[0] > src[1]:
            raise Unreachable(f"static limits are crossed ({src[0]:.6g} > {src[1]:.6g})")
    else:
        src = None
    a = np.zeros(d)
    b = np.zeros(d)
    a[0], b[0] = rho_from, rho_to
    if rho_from == rho_to:
        return RampResult(0.0, 0, step, np.array([0.0]), a[None, :], np.zeros(0), 0)
    solves = 0
    cache = {}

    def feasible(n):
        nonlocal solves
        if n not in cache:
            solves += 1
            cache[n] = _ramp_lp(limits, a, b, n, step, src, box)
        return cache[n]

    n_max = int(math.ceil(max_hours / step))
    hi = max(1, int(round(1.0 / step)))
    lo = 0
    while feasible(hi) is None:
        lo = hi
        if hi >= n_max:
            raise Unreachable(f"no ramp from {rho_from} to {rho_to} within {max_hours} h")
        hi = min(2 * hi, n_max)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid) is None:
            lo = mid
        else:
            hi = mid
    PHI, NU = feasible(hi)
    t = step * np.arange(hi + 1)
    return RampResult(hi * step, hi, step, t, PHI, NU, solves)


# ---------------------------------------------------------------------------
# P2 assembly

class ScheduleProblem(MilpProblem):
    """MILP plus the bookkeeping needed to read a schedule back."""

    layout: dict


def _series(x, n, what):
    x = np.asarray(x, float)
    if x.shape != (n,):
        raise ConfigError(f"{what}: expected {n} hourly values, got {x.shape}")
    return x


def waste_heat_scaling(system: EnergySystemConfig, proc: ProcessFlexConfig, demands: dict) -> float:
    if proc.scaling is not None:
        return float(proc.scaling)
    form = next(iter(proc.supplies))
    target = system.waste_heat_share * float(np.max(demands.get(proc.supplies[form], [0.0])))
    return target / abs(proc.surrogate.nominal[form])


def build_p2(system: EnergySystemConfig, processes, prices: Prices, demands: dict,
             horizon: int | None = None, mode: str = DRC, fix_terminal: bool = False,
             src: dict | None = None) -> ScheduleProblem:
    """Day-ahead MILP. ``mode`` is "drc", "src" or "steady"; ``src`` maps a
    process name to its constant limits in the static mode (default: the
    limit file's static pair). Processes with delta != 1 keep their dynamic
    limits in the static mode."""
    if mode not in (DRC, SRC, STEADY):
        raise ConfigError(f"unknown mode {mode!r}")
    n = horizon if horizon is not None else len(prices)
    if n < 1:
        raise ConfigError("empty horizon")
    buy = _series(prices.buy, n, "buy price")
    sell = _series(prices.sell, n, "sell price")
    fuel = _series(prices.fuel, n, "fuel price")
    dem = {f: _series(v, n, f"{f} demand") for f, v in demands.items()}
    system.validate(dem)
    processes = list(processes)
    for pr in processes:
        pr.validate()
    grid = T.make_grid(n, system.elements_per_hour, system.points_per_element)
    p = ScheduleProblem(f"P2-{mode}")
    lay = {"mode": mode, "grid": grid, "hours": n, "processes": [], "components": {},
           "balance": {}, "demands": dem, "prices": prices, "system": system}

    # processes
    supply_terms = {f: [dict() for _ in range(n)] for f in system.forms}
    supply_const = {f: np.zeros(n) for f in system.forms}
    for pr in processes:
        d = pr.delta
        phi0 = [pr.rho_nom] + [0.0] * (d - 1)
        chain = T.discretize_chain(p, grid, d, phi0 if d else None, name=pr.name)
        if mode == STEADY:
            for v in chain.nu:
                p.set_bounds(v, pr.rho_nom if d == 0 else 0.0, pr.rho_nom if d == 0 else 0.0)
        if mode == SRC and d == 1:
            pair = (src or {}).get(pr.name) or pr.src or pr.limits.src
            T.constraint_rows(p, chain, src=pair, box=pr.box())
        else:
            T.constraint_rows(p, chain, limits=pr.limits, box=pr.box())
        if fix_terminal and d:
            for s, v in zip(chain.phi, phi0):
                p.set_bounds(s.nodes[-1], v, v)
        hours = pr.storage_hours if pr.storage_hours is not None else system.storage_hours
        frac = system.storage_fraction if pr.storage_fraction == -1.0 else pr.storage_fraction
        cap = hours * pr.rho_nom
        level = None if frac is None else frac * cap
        storage = T.add_storage(p, chain, pr.rho_nom, cap, level, level) if cap > 0 else None
        scale = waste_heat_scaling(system, pr, dem)
        for sform, eform in pr.supplies.items():
            coef = np.asarray(pr.surrogate.coef[sform], float) * scale / grid.period
            for q in range(n):
                terms, const = T.period_integral(chain, q, coef)
                acc = supply_terms[eform][q]
                for v, a in terms.items():
                    acc[v] = acc.get(v, 0.0) + a
                supply_const[eform][q] += const
        lay["processes"].append({"config": pr, "chain": chain, "storage": storage, "scale": scale,
                                 "capacity": cap, "level": level})

    # components
    fuel_terms = [dict() for _ in range(n)]
    for c in system.components:
        qin = [p.add_var(f"{c.name}.Qin[{q}]", 0.0, math.inf) for q in range(n)]
        qout = [p.add_var(f"{c.name}.Qout[{q}]", 0.0, c.q_max) for q in range(n)]
        z = [p.add_var(f"{c.name}.on[{q}]", binary=True) for q in range(n)]
        for q in range(n):
            p.add_row({qout[q]: 1.0, qin[q]: -c.slope, z[q]: -c.intercept}, EQ, 0.0, f"{c.name}.conv[{q}]")
            p.add_row({qout[q]: 1.0, z[q]: -c.q_min}, GE, 0.0, f"{c.name}.pmin[{q}]")
            p.add_row({qout[q]: 1.0, z[q]: -c.q_max}, LE, 0.0, f"{c.name}.pmax[{q}]")
            for form, ratio in c.supplies().items():
                acc = supply_terms[form][q]
                acc[qout[q]] = acc.get(qout[q], 0.0) + ratio
            if c.consumes in system.fuel_forms:
                fuel_terms[q][qin[q]] = fuel_terms[q].get(qin[q], 0.0) + 1.0
            else:
                acc = supply_terms[c.consumes][q]
                acc[qin[q]] = acc.get(qin[q], 0.0) - 1.0
        lay["components"][c.name] = {"in": qin, "out": qout, "z": z, "config": c}

    # grid exchange
    gb = [p.add_var(f"grid.buy[{q}]", 0.0, system.buy_max) for q in range(n)]
    gs = [p.add_var(f"grid.sell[{q}]", 0.0, system.sell_max) for q in range(n)]
    lay["buy"], lay["sell"] = gb, gs
    for q in range(n):
        acc = supply_terms[system.grid_form][q]
        acc[gb[q]] = acc.get(gb[q], 0.0) + 1.0
        acc[gs[q]] = acc.get(gs[q], 0.0) - 1.0

    # hourly balances
    for form in system.forms:
        if form in system.fuel_forms:
            continue
        need = dem.get(form, np.zeros(n))
        for q in range(n):
            terms = supply_terms[form][q]
            if not terms and need[q] == 0.0 and supply_const[form][q] == 0.0:
                continue
            rhs = float(need[q] - supply_const[form][q])
            sense = GE if (system.allow_heat_dump and form != system.grid_form) else EQ
            lay["balance"][(form, q)] = p.add_row(terms, sense, rhs, f"balance.{form}[{q}]")

    # cumulative cost
    def rate(q):
        r = {v: fuel[q] * a for v, a in fuel_terms[q].items()}
        r[gb[q]] = r.get(gb[q], 0.0) + buy[q]
        r[gs[q]] = r.get(gs[q], 0.0) - sell[q]
        return r, 0.0

    phi_cost = T.add_cost(p, grid, rate)
    p.set_obj(phi_cost.nodes[-1], 1.0)
    lay["cost"] = phi_cost
    p.layout = lay
    return p


def build_p2_src(system, processes, prices, demands, src: dict | None = None, **kw) -> ScheduleProblem:
    return build_p2(system, processes, prices, demands, mode=SRC, src=src, **kw)


def build_steady_baseline(system, processes, prices, demands, **kw) -> ScheduleProblem:
    return build_p2(system, processes, prices, demands, mode=STEADY, **kw)


# ---------------------------------------------------------------------------
# extraction

@dataclass(frozen=True)
class Schedule:
    mode: str
    hours: int
    times: np.ndarray  # t0 and every node
    processes: dict  # name -> dict of trajectories
    components: dict  # name -> {"Q_in", "Q_out", "z"}
    grid_buy: np.ndarray
    grid_sell: np.ndarray
    cost: np.ndarray  # cumulative cost at t0 and every node
    objective: float
    balance: dict  # form -> hourly surplus (supply - demand)
    solution: object = None


def extract_schedule(problem: ScheduleProblem, sol: MilpSolution, tol: float = 1e-8) -> Schedule:
    if not sol.ok:
        raise ValueError(f"solution status {sol.status} has no schedule")
    if sol.problem_version != problem.version:
        raise StaleSolution("solution was computed for a different version of the problem")
    lay = problem.layout
    x = np.array(sol.x, dtype=float)
    for j in problem.binaries:
        x[j] = float(round(x[j]))
    g = lay["grid"]
    n = lay["hours"]
    procs = {}
    for entry in lay["processes"]:
        pr = entry["config"]
        ch = entry["chain"]
        npts = g.n_nodes + 1
        rho = np.array([x[ch.rho(k)] for k in range(npts)])
        phi = np.array([[x[v] for v in ch.phi_at(k)] for k in range(npts)]) if ch.delta else rho[:, None]
        nu = np.array([x[v] for v in ch.nu])
        rec = {"rho": rho, "phi": phi, "nu": nu, "delta": ch.delta, "scale": entry["scale"]}
        if entry["storage"] is not None:
            S = T.values(x, entry["storage"])
            rec["S"] = S
            integral = 0.0
            for q in range(n):
                for k, w in g.integral_weights(q):
                    integral += w * (rho[k + 1] - pr.rho_nom)
            rec["storage_telescoping"] = float(S[-1] - S[0] - integral)
            if abs(rec["storage_telescoping"]) > tol * max(1.0, entry["capacity"]):
                raise BalanceViolation(f"{pr.name}: storage does not telescope "
                                       f"({rec['storage_telescoping']:.3g})")
        for sform, eform in pr.supplies.items():
            coef = np.asarray(pr.surrogate.coef[sform], float) * entry["scale"]
            avg = np.zeros(n)
            for q in range(n):
                for k, w in g.integral_weights(q):
                    z = np.concatenate([phi[k + 1] if ch.delta else [], [nu[q]]])
                    avg[q] += w * (coef[0] + float(np.dot(coef[1:], z)))
            rec[f"supply.{eform}"] = avg / g.period
        procs[pr.name] = rec
    comps = {}
    for name, c in lay["components"].items():
        comps[name] = {"Q_in": x[c["in"]], "Q_out": x[c["out"]], "z": x[c["z"]]}
    buy = x[lay["buy"]]
    sell = x[lay["sell"]]
    system = lay["system"]
    balance = {}
    for form in system.forms:
        if form in system.fuel_forms:
            continue
        s = np.zeros(n)
        for rec in procs.values():
            s += rec.get(f"supply.{form}", 0.0)
        for name, c in lay["components"].items():
            cfg = c["config"]
            s += cfg.supplies().get(form, 0.0) * comps[name]["Q_out"]
            if cfg.consumes == form:
                s -= comps[name]["Q_in"]
        if form == system.grid_form:
            s += buy - sell
        s -= lay["demands"].get(form, np.zeros(n))
        balance[form] = s
        scale = max(1.0, float(np.max(np.abs(lay["demands"].get(form, [0.0])))))
        dump_ok = system.allow_heat_dump and form != system.grid_form
        bad = (s < -tol * scale) if dump_ok else (np.abs(s) > tol * scale)
        if np.any(bad):
            q = int(np.argmax(bad))
            raise BalanceViolation(f"balance of {form} violated in hour {q} by {s[q]:.3g}")
    cost = T.values(x, lay["cost"])
    return Schedule(lay["mode"], n, g.times(), procs, comps, buy, sell, cost, float(cost[-1]), balance, sol)


# ---------------------------------------------------------------------------
# file formats

def system_from_dict(data) -> EnergySystemConfig:
    where = "system"
    comps = []
    for c in dio._req(data, "components", where):
        nm = str(dio._req(c, "name", "component"))
        comps.append(Component(
            name=nm,
            consumes=str(dio._req(c, "consumes", nm)),
            output=str(dio._req(c, "output", nm)),
            slope=dio._num(dio._req(c, "slope", nm), f"{nm}.slope"),
            intercept=dio._num(c.get("intercept_MW", 0.0), f"{nm}.intercept_MW"),
            q_min=dio._num(dio._req(c, "Q_min_MW", nm), f"{nm}.Q_min_MW"),
            q_max=dio._num(dio._req(c, "Q_max_MW", nm), f"{nm}.Q_max_MW"),
            coproducts={str(k): dio._num(v, f"{nm}.coproducts") for k, v in (c.get("coproducts") or {}).items()},
        ))
    g = data.get("grid") or {}
    st = data.get("storage") or {}
    disc = data.get("discretization") or {}
    frac = st.get("boundary_fraction", 0.5)
    sys_ = EnergySystemConfig(
        components=comps,
        forms=[str(f) for f in dio._req(data, "energy_forms", where)],
        grid_form=str(g.get("form", "electricity")),
        fuel_forms=tuple(str(f) for f in data.get("fuel_forms", ["gas"])),
        buy_max=dio._num(g.get("buy_max_MW", math.inf), "grid.buy_max_MW"),
        sell_max=dio._num(g.get("sell_max_MW", math.inf), "grid.sell_max_MW"),
        allow_heat_dump=bool(data.get("allow_heat_dump", True)),
        storage_hours=dio._num(st.get("capacity_h", 3.0), "storage.capacity_h"),
        storage_fraction=None if frac is None else dio._num(frac, "storage.boundary_fraction"),
        waste_heat_share=dio._num(data.get("waste_heat_share", 0.1), "waste_heat_share"),
        elements_per_hour=int(disc.get("elements_per_hour", 2)),
        points_per_element=int(disc.get("points_per_element", 4)),
        name=str(data.get("name", "system")),
    )
    try:
        sys_.validate()
    except ConfigError as exc:
        raise dio.InputError(str(exc)) from None
    return sys_


def load_system(path) -> EnergySystemConfig:
    return system_from_dict(dio.load_yaml(Path(path), SYSTEM_FORMAT))


def load_process(path) -> ProcessFlexConfig:
    """Process file: names the limit and demand files (relative to itself)."""
    path = Path(path)
    data = dio.load_yaml(path, PROCESS_FORMAT)
    base = path.parent
    nm = str(dio._req(data, "name", "process"))
    limits = dio.load_limits(base / dio._req(data, "limits", nm))
    sur = dio.load_demand(base / dio._req(data, "demand", nm))
    rb = dio._req(data, "production_rate", nm)
    src = data.get("static_limits")
    return ProcessFlexConfig(
        name=nm,
        limits=limits,
        surrogate=sur,
        rho_min=dio._num(dio._req(rb, "min_per_h", nm), "min_per_h"),
        rho_nom=dio._num(dio._req(rb, "nom_per_h", nm), "nom_per_h"),
        rho_max=dio._num(dio._req(rb, "max_per_h", nm), "max_per_h"),
        scaling=None if data.get("scaling") is None else dio._num(data["scaling"], "scaling"),
        storage_hours=None if data.get("storage_h") is None else dio._num(data["storage_h"], "storage_h"),
        supplies={str(k): str(v) for k, v in (data.get("supplies") or {"heat": "heat"}).items()},
        src=None if src is None else (dio._num(src[0], "static_limits"), dio._num(src[1], "static_limits")),
    )


def load_prices(path) -> Prices:
    cols = dio.read_csv(path, ["hour", "buy", "fuel"])
    sell = cols.get("sell", cols["buy"])
    _check_hours(cols["hour"], path)
    return Prices(cols["buy"], sell, cols["fuel"])


def load_demands(path) -> dict:
    cols = dio.read_csv(path, ["hour"])
    _check_hours(cols["hour"], path)
    out = {k: v for k, v in cols.items() if k != "hour"}
    if not out:
        raise dio.InputError(f"{path}: no demand columns")
    return out


def _check_hours(h, path):
    if not np.array_equal(h, np.arange(len(h))):
        raise dio.InputError(f"{path}: hour column must count 0, 1, 2, ...")


def write_schedule(s: Schedule, out_dir) -> tuple:
    """Node-level and hourly CSV files; returns their paths."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    n_nodes = len(s.times)
    hdr = ["time_h"]
    cols = [s.times]
    hours_of_node = np.concatenate([[0], np.minimum(np.floor(s.times[1:] - 1e-12), s.hours - 1)]).astype(int)
    for name, rec in s.processes.items():
        hdr.append(f"{name}.rho")
        cols.append(rec["rho"])
        for j in range(1, rec["delta"]):
            hdr.append(f"{name}.phi{j}")
            cols.append(rec["phi"][:, j])
        hdr.append(f"{name}.nu")
        cols.append(rec["nu"][hours_of_node])
        if "S" in rec:
            hdr.append(f"{name}.S")
            cols.append(rec["S"])
    for name, c in s.components.items():
        for key in ("Q_in", "Q_out", "z"):
            hdr.append(f"{name}.{key}")
            cols.append(c[key][hours_of_node])
    hdr += ["grid.buy", "grid.sell", "cost"]
    cols += [s.grid_buy[hours_of_node], s.grid_sell[hours_of_node], s.cost]
    nodes_path = out / "schedule.csv"
    dio.write_csv(nodes_path, hdr, (tuple(c[i] for c in cols) for i in range(n_nodes)))
    hdr = ["hour"]
    cols = [np.arange(s.hours)]
    for name, rec in s.processes.items():
        hdr.append(f"{name}.nu")
        cols.append(rec["nu"])
        hdr.append(f"{name}.rho_start")
        cols.append(_hour_starts(s, rec["rho"]))
        for j in range(1, rec["delta"]):
            hdr.append(f"{name}.phi{j}_start")
            cols.append(_hour_starts(s, rec["phi"][:, j]))
        for key, v in rec.items():
            if key.startswith("supply."):
                hdr.append(f"{name}.{key}")
                cols.append(v)
    for name, c in s.components.items():
        for key in ("Q_in", "Q_out", "z"):
            hdr.append(f"{name}.{key}")
            cols.append(c[key])
    hdr += ["grid.buy", "grid.sell"]
    cols += [s.grid_buy, s.grid_sell]
    for form, v in s.balance.items():
        hdr.append(f"surplus.{form}")
        cols.append(v)
    hourly_path = out / "hourly.csv"
    dio.write_csv(hourly_path, hdr, (tuple(c[i] for c in cols) for i in range(s.hours)))
    return nodes_path, hourly_path


def _hour_starts(s: Schedule, v) -> np.ndarray:
    per_hour = (len(s.times) - 1) // s.hours
    return np.array([v[q * per_hour] for q in range(s.hours)])


# ---------------------------------------------------------------------------
# infeasibility diagnosis

def first_violated_balance(problem: ScheduleProblem, time_limit: float = 60.0):
    """Smallest total shortfall over the hourly balances (each balance gets a
    penalized slack) and the earliest balance that needs it.

    Returns ``(form, hour, shortfall)`` or None when the balances are not
    what makes the problem infeasible.
    """
    from .lpmilp import solve_milp

    lay = problem.layout
    p = problem.copy()
    for j in range(p.n):
        p.c[j] = 0.0
    p.offset = 0.0
    slacks = {}
    for (form, q), i in lay["balance"].items():
        s = p.add_var(f"short.{form}[{q}]", 0.0, math.inf, obj=1.0)
        p.rows[i][s] = 1.0
        slacks[(form, q)] = [s]
        if p.senses[i] == EQ:
            e = p.add_var(f"excess.{form}[{q}]", 0.0, math.inf, obj=1.0)
            p.rows[i][e] = -1.0
            slacks[(form, q)].append(e)
    sol = solve_milp(p, gap=1e-6, time_limit=time_limit, log=False)
    if not sol.ok:
        return None
    worst = []
    for (form, q), cols in slacks.items():
        v = sum(sol.x[j] for j in cols)
        scale = max(1.0, float(np.max(np.abs(lay["demands"].get(form, [0.0])))))
        if v > 1e-7 * scale:
            worst.append((q, lay["system"].forms.index(form), form, float(v)))
    if not worst:
        return None
    q, _, form, v = min(worst)
    return form, q, v


# ---------------------------------------------------------------------------
# run manifest and schedule read-back

RUN_FORMAT = "dynramp-run/1"


def write_manifest(s: Schedule, out_dir, inputs: dict, solver: dict) -> Path:
    """Record what a schedule was computed from, so it can be replayed."""
    procs = {}
    for name, rec in s.processes.items():
        procs[name] = {"delta": int(rec["delta"]), "scale": float(rec["scale"]),
                       "phi_start": [float(v) for v in np.asarray(rec["phi"])[0][: max(1, rec["delta"])]]}
    data = {"format": RUN_FORMAT, "mode": s.mode, "hours": int(s.hours), "objective": float(s.objective),
            "period_h": 1.0, "processes": procs, "inputs": inputs, "solver": solver}
    path = Path(out_dir) / "run.yaml"
    dio.dump_yaml(data, path)
    return path


def read_schedule(out_dir, system: EnergySystemConfig | None = None) -> Schedule:
    """Rebuild the hourly view of a schedule written by ``write_schedule``
    and ``write_manifest``. Node-level trajectories are not restored."""
    out = Path(out_dir)
    man = dio.load_yaml(out / "run.yaml", RUN_FORMAT)
    n = int(dio._req(man, "hours", "run"))
    cols = dio.read_csv(out / "hourly.csv", ["hour"])
    if len(cols["hour"]) != n:
        raise dio.InputError(f"{out / 'hourly.csv'}: expected {n} rows, got {len(cols['hour'])}")
    _check_hours(cols["hour"], out / "hourly.csv")

    def col(key):
        if key not in cols:
            raise dio.InputError(f"{out / 'hourly.csv'}: missing column {key!r}")
        v = cols[key]
        if not np.all(np.isfinite(v)):
            raise dio.InputError(f"{out / 'hourly.csv'}: non-finite values in {key!r}")
        return v

    procs = {}
    for name, info in (man.get("processes") or {}).items():
        d = int(info["delta"])
        rec = {"delta": d, "scale": dio._num(info["scale"], "scale"), "nu": col(f"{name}.nu")}
        first = [col(f"{name}.rho_start")[0]] + [col(f"{name}.phi{j}_start")[0] for j in range(1, d)]
        rec["phi"] = np.array([first])
        for key in cols:
            if key.startswith(f"{name}.supply."):
                rec[key[len(name) + 1:]] = col(key)
        procs[name] = rec
    comps = {}
    names = sorted({k.rsplit(".", 1)[0] for k in cols if k.endswith(".z")})
    for nm in names:
        z = col(f"{nm}.z")
        if np.any((z != 0.0) & (z != 1.0)):
            raise dio.InputError(f"{out / 'hourly.csv'}: {nm}.z must be 0 or 1")
        comps[nm] = {"Q_in": col(f"{nm}.Q_in"), "Q_out": col(f"{nm}.Q_out"), "z": z}
    if system is not None:
        missing = [c.name for c in system.components if c.name not in comps]
        if missing:
            raise dio.InputError(f"schedule has no columns for components {missing}")
    balance = {k[len("surplus."):]: col(k) for k in cols if k.startswith("surplus.")}
    obj = dio._num(dio._req(man, "objective", "run"), "objective")
    return Schedule(str(man.get("mode", DRC)), n, np.arange(n + 1, dtype=float), procs, comps,
                    col("grid.buy"), col("grid.sell"), np.array([0.0, obj]), obj, balance)
