"""Radau collocation on finite elements for linear dynamics.

Everything here writes rows into a :class:`MilpProblem`. A state is stored
as one variable at t0, one variable per element start and one per
collocation node; element starts are tied to the previous element end by
continuity rows. Inputs (ramp signal, component powers) are constant per
period, normally one hour.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import legendre as leg

from .lpmilp import EQ, GE, LE, MilpProblem

MAX_K = 6


class TranscribeError(ValueError):
    pass


@dataclass(frozen=True)
class CollocationScheme:
    K: int
    h: float  # element length in hours
    nodes: np.ndarray  # on (0, 1], last one is 1
    D: np.ndarray  # K x (K+1): derivative at node i of the Lagrange basis on (0, nodes)
    weights: np.ndarray  # quadrature weights on [0, 1] for the nodes


def radau_nodes(K: int) -> np.ndarray:
    if K == 1:
        return np.array([1.0])
    # roots of P_K(s) - P_{K-1}(s) on [-1, 1]; s = 1 is one of them
    c = np.zeros(K + 1)
    c[K] = 1.0
    c[K - 1] = -1.0
    s = np.sort(leg.legroots(c).real)
    dc = leg.legder(c)
    for _ in range(3):  # polish
        s = s - leg.legval(s, c) / leg.legval(s, dc)
    s[-1] = 1.0
    return (s + 1.0) / 2.0


def _diff_matrix(pts: np.ndarray) -> np.ndarray:
    n = len(pts)
    w = np.array([1.0 / np.prod([pts[j] - pts[k] for k in range(n) if k != j]) for j in range(n)])
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (w[j] / w[i]) / (pts[i] - pts[j])
        D[i, i] = -D[i].sum()
    return D


def radau_scheme(K: int, h: float = 0.5) -> CollocationScheme:
    if not isinstance(K, (int, np.integer)) or not 1 <= K <= MAX_K:
        raise TranscribeError(f"unsupported number of collocation points {K!r} (1..{MAX_K})")
    if not h > 0:
        raise TranscribeError("element length must be positive")
    tau = radau_nodes(int(K))
    pts = np.concatenate([[0.0], tau])
    D = _diff_matrix(pts)[1:]
    V = np.vander(tau, K, increasing=True).T
    weights = np.linalg.solve(V, 1.0 / np.arange(1, K + 1))
    return CollocationScheme(int(K), float(h), tau, D, weights)


@dataclass(frozen=True)
class TimeGrid:
    periods: int
    period: float  # hours per period
    E: int  # elements per period
    scheme: CollocationScheme

    @property
    def n_elements(self) -> int:
        return self.periods * self.E

    @property
    def n_nodes(self) -> int:
        return self.n_elements * self.scheme.K

    @property
    def horizon(self) -> float:
        return self.periods * self.period

    def element_of(self, k: int) -> int:
        return k // self.scheme.K

    def period_of_element(self, e: int) -> int:
        return e // self.E

    def node_period(self, k: int) -> int:
        return self.period_of_element(self.element_of(k))

    def times(self) -> np.ndarray:
        """t0 followed by every node time."""
        h = self.scheme.h
        t = [0.0]
        for e in range(self.n_elements):
            t.extend(e * h + h * self.scheme.nodes)
        return np.array(t)

    def period_nodes(self, q: int) -> range:
        K = self.scheme.K
        return range(q * self.E * K, (q + 1) * self.E * K)

    def integral_weights(self, q: int):
        """(node, weight) pairs so that sum w f(node) = integral of f over period q."""
        K = self.scheme.K
        h = self.scheme.h
        out = []
        for k in self.period_nodes(q):
            out.append((k, h * self.scheme.weights[k % K]))
        return out


def make_grid(periods: int, E: int = 2, K: int = 4, period: float = 1.0) -> TimeGrid:
    if periods < 1 or E < 1:
        raise TranscribeError("need at least one period and one element per period")
    return TimeGrid(int(periods), float(period), int(E), radau_scheme(K, period / E))


@dataclass
class StateTrajectory:
    name: str
    start: int  # variable at t0
    elem_start: list  # variable per element start (element 0 uses ``start``)
    nodes: list  # variable per collocation node
    continuity_rows: list = field(default_factory=list)

    def at(self, k: int) -> int:
        """Variable at grid point k (0 = t0, k >= 1 = node k-1)."""
        return self.start if k == 0 else self.nodes[k - 1]

    def all_vars(self) -> list:
        return [self.start] + list(self.elem_start[1:]) + list(self.nodes)


Rhs = Callable[[int], tuple]  # node index -> ({var: coef}, constant)


def add_state(p: MilpProblem, grid: TimeGrid, name: str, rhs: Rhs, x0=None,
              lb: float = -math.inf, ub: float = math.inf) -> StateTrajectory:
    """Collocated state with x' = rhs(node). ``x0`` fixes the initial value."""
    sc = grid.scheme
    K = sc.K
    if x0 is None:
        s0 = p.add_var(f"{name}(t0)", lb, ub)
    else:
        s0 = p.add_var(f"{name}(t0)", float(x0), float(x0))
    starts = [s0]
    nodes = []
    cont = []
    for e in range(grid.n_elements):
        if e > 0:
            s = p.add_var(f"{name}[e{e}]", lb, ub)
            cont.append(p.add_row({s: 1.0, nodes[-1]: -1.0}, EQ, 0.0, f"cont.{name}[e{e}]"))
            starts.append(s)
        elem = [p.add_var(f"{name}[{e * K + i}]", lb, ub) for i in range(K)]
        nodes.extend(elem)
        cols = [starts[e]] + elem
        for i in range(K):
            k = e * K + i
            terms, const = rhs(k)
            row = {}
            for j, v in enumerate(cols):
                row[v] = row.get(v, 0.0) + sc.D[i, j]
            for v, a in terms.items():
                row[v] = row.get(v, 0.0) - sc.h * a
            p.add_row(row, EQ, sc.h * const, f"col.{name}[{k}]")
    return StateTrajectory(name, s0, starts, nodes, cont)


@dataclass
class DiscretizedChain:
    delta: int
    grid: TimeGrid
    nu: list  # one variable per period
    phi: list  # StateTrajectory per ramping state component
    name: str = "p"

    def rho(self, k: int) -> int:
        """Variable holding rho at grid point k (0 = t0)."""
        if self.delta == 0:
            return self.nu[0] if k == 0 else self.nu[self.grid.node_period(k - 1)]
        return self.phi[0].at(k)

    def phi_at(self, k: int) -> list:
        return [s.at(k) for s in self.phi]

    def period_points(self, q: int) -> list:
        """Grid points covering period q: its start followed by its nodes."""
        ks = [k + 1 for k in self.grid.period_nodes(q)]
        return [ks[0] - 1] + ks


def discretize_chain(p: MilpProblem, grid: TimeGrid, delta: int, phi0=None, name: str = "p",
                     nu_bounds=(-math.inf, math.inf)) -> DiscretizedChain:
    """Integrator chain rho^(delta) = nu with nu constant per period."""
    if delta < 0:
        raise TranscribeError("ramping order must be nonnegative")
    nu = [p.add_var(f"{name}.nu[{q}]", nu_bounds[0], nu_bounds[1]) for q in range(grid.periods)]
    phi: list[StateTrajectory] = []
    if delta == 0:
        return DiscretizedChain(0, grid, nu, phi, name)
    if phi0 is not None and len(phi0) != delta:
        raise TranscribeError(f"initial ramping state needs {delta} entries")
    # create from the top of the chain down so each rhs refers to existing vars
    for j in reversed(range(delta)):
        x0 = None if phi0 is None else phi0[j]
        if j == delta - 1:
            def rhs(k, _nu=nu, _g=grid):
                return {_nu[_g.node_period(k)]: 1.0}, 0.0
        else:
            above = phi[0]

            def rhs(k, _a=above):
                return {_a.nodes[k]: 1.0}, 0.0
        phi.insert(0, add_state(p, grid, f"{name}.phi{j}", rhs, x0))
    return DiscretizedChain(delta, grid, nu, phi, name)


def add_storage(p: MilpProblem, chain: DiscretizedChain, rho_nom: float, capacity: float,
                s0=None, s_end=None) -> StateTrajectory:
    """Product storage S' = rho - rho_nom within [0, capacity]."""
    def rhs(k):
        return {chain.rho(k + 1): 1.0}, -rho_nom
    st = add_state(p, chain.grid, f"{chain.name}.S", rhs, s0, 0.0, capacity)
    if s_end is not None:
        last = st.nodes[-1]
        p.set_bounds(last, float(s_end), float(s_end))
    return st


def add_cost(p: MilpProblem, grid: TimeGrid, rate) -> StateTrajectory:
    """Cumulative cost with Phi(t0) = 0; ``rate(q)`` gives the linear cost
    rate of period q as ({var: coef}, constant)."""
    def rhs(k):
        return rate(grid.node_period(k))
    return add_state(p, grid, "Phi", rhs, 0.0)


def constraint_rows(p: MilpProblem, chain: DiscretizedChain, limits=None, src=None, box=None) -> list:
    """Ramp limits and the ramping-state box.

    ``limits`` (an affine limit set) gives state-dependent rows at the start
    and every node of each period; ``src`` = (lo, hi) gives two constant rows
    per period. ``box`` bounds every node value of each ramping-state
    component (for delta = 0 it bounds nu directly).
    """
    if limits is None and src is None:
        raise TranscribeError("no ramp limits given")
    rows = []
    g = chain.grid
    if limits is not None:
        if limits.delta != chain.delta:
            raise TranscribeError(f"limit set has delta={limits.delta}, chain has {chain.delta}")
        for q in range(g.periods):
            nu = chain.nu[q]
            for k in chain.period_points(q):
                ph = chain.phi_at(k) if chain.delta else []
                for coef, sense, tag in ((limits.nu_max, LE, "max"), (limits.nu_min, GE, "min")):
                    row = {nu: 1.0}
                    for v, a in zip(ph, coef[1:]):
                        row[v] = row.get(v, 0.0) - float(a)
                    rows.append(p.add_row(row, sense, float(coef[0]), f"{chain.name}.drc_{tag}[{q},{k}]"))
    if src is not None:
        lo, hi = float(src[0]), float(src[1])
        if lo > hi:
            raise TranscribeError("static limits are crossed")
        for q in range(g.periods):
            rows.append(p.add_row({chain.nu[q]: 1.0}, LE, hi, f"{chain.name}.src_max[{q}]"))
            rows.append(p.add_row({chain.nu[q]: 1.0}, GE, lo, f"{chain.name}.src_min[{q}]"))
    if box is not None:
        box = list(box)
        if chain.delta == 0:
            for v in chain.nu:
                _tighten(p, v, box[0])
        else:
            if len(box) != chain.delta:
                raise TranscribeError(f"box has {len(box)} axes, chain has {chain.delta}")
            for s, b in zip(chain.phi, box):
                for v in s.all_vars():
                    _tighten(p, v, b)
    return rows


def _tighten(p: MilpProblem, v: int, b):
    lo = max(p.lb[v], float(b[0]))
    hi = min(p.ub[v], float(b[1]))
    if lo > hi:
        raise TranscribeError(f"box excludes the fixed value of {p.var_names[v]}")
    p.set_bounds(v, lo, hi)


def period_integral(chain: DiscretizedChain, q: int, coef) -> tuple:
    """Linear form of the integral over period q of an affine function of
    (phi, nu) with coefficients ``coef`` (intercept first).

    Returns ({var: coef}, constant)."""
    g = chain.grid
    d = chain.delta
    terms: dict = {}
    const = 0.0
    for k, w in g.integral_weights(q):
        const += w * float(coef[0])
        if d == 0:
            terms[chain.nu[q]] = terms.get(chain.nu[q], 0.0) + w * float(coef[1])
            continue
        for v, a in zip(chain.phi_at(k + 1), coef[1: d + 1]):
            terms[v] = terms.get(v, 0.0) + w * float(a)
        terms[chain.nu[q]] = terms.get(chain.nu[q], 0.0) + w * float(coef[d + 1])
    return terms, const


def values(x, traj: StateTrajectory) -> np.ndarray:
    """Solution values at t0 and every node."""
    return np.array([x[traj.start]] + [x[v] for v in traj.nodes])
