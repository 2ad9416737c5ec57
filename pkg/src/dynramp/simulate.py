"""Replay of schedules on the nonlinear process model.

The production rate is rebuilt exactly from the integrator chain (start
state plus piecewise-constant top derivative), the input is the
feedforward law evaluated along that trajectory, and the state equations
are integrated with classic fixed-step RK4. ``reconcile`` settles the
difference between scheduled and realized waste heat in the energy system.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as dio
from . import kernels
from . import linearize as L
from .tape import compile_exprs

DEFAULT_DT = 1e-3
MAX_DT = 1e-2
BOILER, GRID_ONLY = "boiler", "grid-only"


class SimulationError(RuntimeError):
    pass


class StateRangeError(SimulationError):
    def __init__(self, message, time=None, state=None, value=None):
        super().__init__(message)
        self.time = time
        self.state = state
        self.value = value


# ---------------------------------------------------------------------------
# ramp signal

@dataclass
class ChainSignal:
    """Production rate as the exact solution of the integrator chain.

    ``phi0`` is the ramping state at t=0, ``nu[q]`` the top derivative held
    over period q. With delta = 0 the rate itself is ``nu``.
    """
    delta: int
    period: float
    phi0: np.ndarray
    nu: np.ndarray
    starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.phi0 = np.atleast_1d(np.asarray(self.phi0, float))[: self.delta]
        self.nu = np.asarray(self.nu, float)
        if self.phi0.shape != (self.delta,):
            raise ValueError(f"start state needs {self.delta} entries")
        if not self.period > 0:
            raise ValueError("period must be positive")
        starts = np.empty((len(self.nu) + 1, self.delta))
        starts[0] = self.phi0
        for q in range(len(self.nu)):
            starts[q + 1] = self._advance(starts[q], self.nu[q], self.period)
        self.starts = starts

    @property
    def periods(self) -> int:
        return len(self.nu)

    @property
    def horizon(self) -> float:
        return self.periods * self.period

    def _advance(self, phi, nu, tau):
        d = self.delta
        out = np.empty(d)
        for j in range(d):
            s = sum(phi[i] * tau ** (i - j) / math.factorial(i - j) for i in range(j, d))
            out[j] = s + nu * tau ** (d - j) / math.factorial(d - j)
        return out

    def at(self, q, tau):
        """(phi, nu, rho) arrays for times ``tau`` (local to period ``q``)."""
        q = np.asarray(q, int)
        tau = np.asarray(tau, float)
        d = self.delta
        nu = self.nu[q]
        PHI = np.empty(tau.shape + (d,))
        for j in range(d):
            acc = nu * tau ** (d - j) / math.factorial(d - j)
            for i in range(j, d):
                acc = acc + self.starts[q, i] * tau ** (i - j) / math.factorial(i - j)
            PHI[..., j] = acc
        rho = PHI[..., 0] if d else nu
        return PHI, nu, rho


def signal_from_schedule(rec: dict, period: float = 1.0) -> ChainSignal:
    """Chain signal of one process record of a ``Schedule``."""
    d = int(rec["delta"])
    phi0 = np.asarray(rec["phi"], float)[0][:d] if d else np.zeros(0)
    return ChainSignal(d, period, phi0, np.asarray(rec["nu"], float))


def signal_from_ramp(ramp) -> ChainSignal:
    return ChainSignal(ramp.phi.shape[1], ramp.step, ramp.phi[0], ramp.nu)


# ---------------------------------------------------------------------------
# simulation

@dataclass
class SimResult:
    model: str
    dt: float
    t: np.ndarray
    X: np.ndarray  # states at every grid point
    states: list
    rho: np.ndarray
    u: np.ndarray  # applied input at every grid point (right limit, left at the end)
    y: np.ndarray
    y_nom: float
    u_bounds: tuple
    clip_t: np.ndarray  # times of clipped input samples
    clip_u: np.ndarray  # unclipped feedforward value at those times
    max_excess: float  # largest distance of the raw input outside its bounds
    waste_heat: np.ndarray | None  # at every grid point
    hourly_waste_heat: np.ndarray | None  # mean per period
    period: float

    @property
    def clip_count(self) -> int:
        return len(self.clip_t)

    @property
    def deviation(self) -> np.ndarray:
        return np.abs(self.y - self.y_nom)

    @property
    def max_deviation(self) -> float:
        return float(np.max(self.deviation))


def _steps(signal: ChainSignal, dt: float) -> tuple[int, int]:
    if not 0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}] h, got {dt}")
    per = signal.period / dt
    m = int(round(per))
    if m < 1 or abs(per - m) > 1e-9 * per:
        raise ValueError(f"dt={dt} does not divide the period {signal.period}")
    return m, m * signal.periods


def feedforward_series(d: L.RampingDerivation, PHI, nu):
    """Feedforward input for many (phi, nu) samples; also returns Gamma states."""
    PHI = np.asarray(PHI, float).reshape(-1, d.delta)
    X, ok = L.solve_gamma_batch(d, PHI, check_range=False)
    if not ok.all():
        i = int(np.argmin(ok))
        raise SimulationError(f"state recovery failed for ramping state {PHI[i].tolist()}")
    v = d._tape("limits").eval_batch(np.hstack([X, PHI]), raise_on_error=False)
    u = (-v[:, 0] - v[:, 2] * np.asarray(nu, float).ravel()) / v[:, 1]
    return u, X


def simulate(model: L.ProcessModel, d: L.RampingDerivation, signal: ChainSignal, dt: float = DEFAULT_DT,
             x0=None, clip_tol: float = 1e-9) -> SimResult:
    """RK4 replay of ``signal`` with the feedforward input.

    The input is clipped to its bounds; samples more than
    ``clip_tol * (u_max - u_min)`` outside are logged as clip events.
    Raises ``StateRangeError`` when a state leaves its declared range.
    """
    if signal.delta != d.delta:
        raise ValueError(f"signal has delta={signal.delta}, derivation has {d.delta}")
    m_per, N = _steps(signal, dt)
    k = np.arange(N)
    q = k // m_per
    tau0 = (k - q * m_per) * dt
    taus = np.stack([tau0, tau0 + 0.5 * dt, tau0 + dt], axis=1)  # (N, 3)
    qq = np.repeat(q[:, None], 3, axis=1)
    PHI, NU, RHO = signal.at(qq, taus)
    u_raw, Xg = feedforward_series(d, PHI.reshape(-1, d.delta), NU.ravel())
    u_raw = u_raw.reshape(N, 3)
    lo_u, hi_u = model.u_min, model.u_max
    slack = clip_tol * (hi_u - lo_u)
    u = np.clip(u_raw, lo_u, hi_u)
    out = (u_raw < lo_u - slack) | (u_raw > hi_u + slack)
    excess = float(np.max(np.maximum(lo_u - u_raw, u_raw - hi_u)))
    t_stage = q[:, None] * signal.period + taus
    clip_t = t_stage[out]
    clip_u = u_raw[out]

    if x0 is None:
        x0 = Xg[0]
    x0 = np.ascontiguousarray(x0, float)
    lo = np.array([model.ranges[s][0] for s in model.states])
    hi = np.array([model.ranges[s][1] for s in model.states])
    rhs = d._tape("rhs")
    X, status, where = kernels.rk4_integrate(rhs, x0, np.ascontiguousarray(RHO, float),
                                             np.ascontiguousarray(u), float(dt), lo, hi)
    if status == 1:
        raise SimulationError(f"right-hand side evaluation failed in step {where} (t={where * dt:.6g} h)")
    if status == 2:
        x = X[where]
        i = int(np.argmax((x < lo) | (x > hi)))
        s = model.states[i]
        raise StateRangeError(f"state {s}={x[i]:.6g} left its range {model.ranges[s]} at t={where * dt:.6g} h",
                              where * dt, s, float(x[i]))

    t = np.arange(N + 1) * dt
    rho = np.concatenate([RHO[:, 0], RHO[-1:, 2]])
    u_grid = np.concatenate([u[:, 0], u[-1:, 2]])
    y = compile_exprs([model.h], list(model.states)).eval_batch(X)[:, 0]
    wh = hourly = None
    if model.waste_heat is not None:
        wt = d._tape("waste_heat")
        start = wt.eval_batch(np.column_stack([X[:-1], RHO[:, 0], u[:, 0]]))[:, 0]
        end = wt.eval_batch(np.column_stack([X[1:], RHO[:, 2], u[:, 2]]))[:, 0]
        wh = np.concatenate([start, end[-1:]])
        per_step = 0.5 * dt * (start + end)
        hourly = per_step.reshape(signal.periods, m_per).sum(axis=1) / signal.period
    return SimResult(model.name, dt, t, X, list(model.states), rho, u_grid, y, model.y_nom, (lo_u, hi_u),
                     clip_t, clip_u, excess, wh, hourly, signal.period)


# ---------------------------------------------------------------------------
# reconciliation

@dataclass
class Reconciliation:
    policy: str
    scheduled_cost: float
    realized_cost: float
    waste_heat_delta: dict  # form -> hourly realized minus scheduled supply
    absorbed: dict  # component name -> hourly change of output
    unmet: dict  # form -> hourly unmet demand (>= 0)
    dumped: dict  # form -> hourly surplus released (>= 0)
    grid_buy: np.ndarray
    grid_sell: np.ndarray

    @property
    def delta_cost(self) -> float:
        return self.realized_cost - self.scheduled_cost

    @property
    def relative_delta(self) -> float:
        return self.delta_cost / abs(self.scheduled_cost) if self.scheduled_cost else math.inf


def _modulated(system, form, boiler):
    """Heat-only components supplying ``form`` (the named one if given)."""
    if boiler is not None:
        return [c for c in system.components if c.name == boiler]
    return [c for c in system.components if c.output == form and not c.coproducts]


def reconcile(sims: dict, schedule, system, prices, policy: str = BOILER, boiler: str | None = None,
              tol: float = 1e-12) -> Reconciliation:
    """Settle realized waste heat against the schedule.

    ``sims`` maps process names of the schedule to their ``SimResult``.
    Under the boiler policy heat-only components follow the mismatch within
    [Q_min*z, Q_max*z] at their scheduled on/off state (a deficit is first
    met from heat the schedule already released); what is left is reported
    as unmet or released heat.
    Grid-form mismatches always go through the grid. Under "grid-only" no
    component is modulated.
    """
    if policy not in (BOILER, GRID_ONLY):
        raise ValueError(f"unknown policy {policy!r}")
    n = schedule.hours
    period = 1.0
    delta = {}
    for name, sim in sims.items():
        rec = schedule.processes[name]
        if sim.hourly_waste_heat is None or len(sim.hourly_waste_heat) != n:
            raise ValueError(f"simulation of {name} does not cover the {n} h horizon")
        period = sim.period
        for key, sched in rec.items():
            if not key.startswith("supply."):
                continue
            form = key[len("supply."):]
            real = rec["scale"] * sim.hourly_waste_heat
            delta[form] = delta.get(form, np.zeros(n)) + (real - sched)
    comps = {nm: {k: np.array(v, float) for k, v in c.items()} for nm, c in schedule.components.items()}
    cfg = {c.name: c for c in system.components}
    buy = np.array(schedule.grid_buy, float)
    sell = np.array(schedule.grid_sell, float)
    absorbed, unmet, dumped = {}, {}, {}
    for form, dl in delta.items():
        if form == system.grid_form:
            net = dl + schedule.balance.get(form, np.zeros(n))
            extra = np.minimum(np.maximum(-net, 0.0), system.buy_max - buy)
            buy = buy + extra
            more_sell = np.minimum(np.maximum(net, 0.0), system.sell_max - sell)
            sell = sell + more_sell
            unmet[form] = np.maximum(-net - extra, 0.0)
            dumped[form] = np.maximum(net - more_sell, 0.0)
            continue
        net = schedule.balance.get(form, np.zeros(n)) + dl  # realized surplus before modulation
        if policy == BOILER:
            for c in _modulated(system, form, boiler):
                rec = comps[c.name]
                z = rec["z"]
                up = np.minimum(np.maximum(-net, 0.0), np.maximum(c.q_max * z - rec["Q_out"], 0.0))
                down = np.minimum(np.maximum(np.minimum(dl, net), 0.0),
                                  np.maximum(rec["Q_out"] - c.q_min * z, 0.0))
                change = up - down
                rec["Q_out"] = rec["Q_out"] + change
                rec["Q_in"] = (rec["Q_out"] - c.intercept * z) / c.slope
                net = net + change
                absorbed[c.name] = absorbed.get(c.name, np.zeros(n)) + change
        unmet[form] = np.where(net < -tol, -net, 0.0)
        dumped[form] = np.maximum(net, 0.0)
    fuel_use = np.zeros(n)
    for nm, rec in comps.items():
        if cfg[nm].consumes in system.fuel_forms:
            fuel_use += rec["Q_in"]
    cost_rate = (np.asarray(prices.fuel[:n]) * fuel_use + np.asarray(prices.buy[:n]) * buy
                 - np.asarray(prices.sell[:n]) * sell)
    realized = float(np.sum(cost_rate) * period)
    return Reconciliation(policy, float(schedule.objective), realized, delta, absorbed, unmet, dumped, buy, sell)


# ---------------------------------------------------------------------------
# output

def write_sim_csv(sim: SimResult, path, every: int = 1) -> Path:
    """Time series CSV; ``every`` thins the rows (the last point is kept)."""
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    idx = np.arange(0, len(sim.t), max(1, int(every)))
    if idx[-1] != len(sim.t) - 1:
        idx = np.append(idx, len(sim.t) - 1)
    hdr = ["time_h", *sim.states, "rho", "u", "y", "deviation"]
    cols = [sim.t, *sim.X.T, sim.rho, sim.u, sim.y, sim.deviation]
    if sim.waste_heat is not None:
        hdr.append("Q_wh")
        cols.append(sim.waste_heat)
    dio.write_csv(path, hdr, (tuple(c[i] for c in cols) for i in idx))
    return path


def report(sims: dict, rec: Reconciliation | None = None) -> str:
    lines = []
    for name, s in sims.items():
        lines.append(f"process {name} (model {s.model}), dt = {s.dt:g} h, horizon {s.t[-1]:g} h")
        lines.append(f"  max |y - y_nom|   = {s.max_deviation:.3e}")
        lines.append(f"  clip events       = {s.clip_count}")
        lines.append(f"  input range used  = [{float(np.min(s.u)):.6g}, {float(np.max(s.u)):.6g}]"
                     f" of [{s.u_bounds[0]:g}, {s.u_bounds[1]:g}]")
        if s.hourly_waste_heat is not None:
            lines.append(f"  mean waste heat   = {float(np.mean(s.hourly_waste_heat)):.6g}")
    if rec is not None:
        lines.append(f"reconciliation policy: {rec.policy}")
        lines.append(f"  scheduled cost    = {rec.scheduled_cost:.6f}")
        lines.append(f"  realized cost     = {rec.realized_cost:.6f}")
        lines.append(f"  difference        = {rec.delta_cost:+.6f} ({100 * rec.relative_delta:+.3f} %)")
        for form, v in rec.unmet.items():
            lines.append(f"  unmet {form:<11} = {float(np.sum(v)):.6g} (hours: {int(np.sum(v > 0))})")
        for form, v in rec.dumped.items():
            lines.append(f"  released {form:<8} = {float(np.sum(v)):.6g}")
    return "\n".join(lines) + "\n"
