"""LP front end, best-bound branch and bound, and a brute-force reference."""
from __future__ import annotations

import heapq
import itertools
import math
import time

import numpy as np

from .problem import (DEFAULT_TOL, GAP_LIMIT, INFEASIBLE, NODE_LIMIT, NUMERICAL, OPTIMAL, TIME_LIMIT,
                      UNBOUNDED, MilpProblem, MilpSolution, ProblemError, Tolerances, relative_gap)
from .simplex import BoundedSimplex, SimplexError

MAX_BRUTE_BINARIES = 20


def _engine(p: MilpProblem, tol: Tolerances) -> BoundedSimplex:
    p.validate()
    lo, hi = p.row_bounds()
    return BoundedSimplex(p.matrix(), p.c, p.lb, p.ub, lo, hi, tol)


def _finish_lp(p, eng, status, t0) -> MilpSolution:
    if status == OPTIMAL:
        res = eng.clean()
        x = eng.structural()
        if res > 1e-6:
            return MilpSolution(NUMERICAL, x, p.objective(x), iterations=eng.iterations,
                                wall_time=time.perf_counter() - t0, problem_version=p.version)
        obj = p.objective(x)
        return MilpSolution(OPTIMAL, x, obj, obj, 0.0, 1, eng.iterations, time.perf_counter() - t0,
                            p.version, basis=eng.get_basis())
    return MilpSolution(status, None, iterations=eng.iterations, nodes=1,
                        wall_time=time.perf_counter() - t0, problem_version=p.version)


def solve_lp(p: MilpProblem, tol: Tolerances = DEFAULT_TOL) -> MilpSolution:
    """LP relaxation (binaries treated as continuous in [0, 1])."""
    t0 = time.perf_counter()
    eng = _engine(p, tol)
    try:
        st = eng.solve()
    except SimplexError:
        st = NUMERICAL
    return _finish_lp(p, eng, st, t0)


class _Node:
    __slots__ = ("bound", "nid", "depth", "fix", "basis")

    def __init__(self, bound, nid, depth, fix, basis):
        self.bound = bound
        self.nid = nid
        self.depth = depth
        self.fix = fix  # dict var -> 0/1
        self.basis = basis

    def __lt__(self, other):
        return (self.bound, self.nid) < (other.bound, other.nid)


def _most_fractional(x, binaries, itol):
    best_j, best_f = -1, itol
    for j in binaries:
        f = x[j] - math.floor(x[j])
        f = min(f, 1.0 - f)
        if f > best_f + 1e-15:  # strictly larger keeps the lowest index on ties
            best_j, best_f = j, f
    return best_j


def _shift_binaries(eng: BoundedSimplex, binaries, itol, ftol):
    """Move fractional binaries of the current LP point to 0 or 1 where that
    keeps every row feasible and does not raise the cost. The result is an
    equally good relaxation point with fewer fractional binaries."""
    n = eng.n
    x = eng.x[:n].copy()
    act = eng.x[n:].copy()
    rlo = eng.lo[n:]
    rhi = eng.hi[n:]
    for j in binaries:
        v = x[j]
        f = v - math.floor(v)
        if f <= itol or f >= 1.0 - itol:
            continue
        near = float(round(v))
        for target in (near, 1.0 - near):
            if not eng.lo[j] <= target <= eng.hi[j]:
                continue
            dlt = target - v
            if eng.cost[j] * dlt > 0.0:
                continue
            idx, val = eng._column(j)
            new = act[idx] + val * dlt
            if np.all(new >= rlo[idx] - ftol) and np.all(new <= rhi[idx] + ftol):
                x[j] = target
                act[idx] = new
                break
    return x


def solve_milp(p: MilpProblem, gap: float | None = None, node_limit: int = 1_000_000,
               time_limit: float = math.inf, tol: Tolerances = DEFAULT_TOL, log: bool = True,
               dive: bool = True, heuristic: bool = True) -> MilpSolution:
    """Best-bound branch and bound with depth-first dives.

    Branches on the most fractional binary (lowest index on ties); the
    child on the rounding side is explored first in a dive, its sibling goes
    to the queue. Deterministic for a given problem.
    """
    t0 = time.perf_counter()
    gap_tol = tol.gap if gap is None else float(gap)
    eng = _engine(p, tol)
    base_lo = eng.lo.copy()
    base_hi = eng.hi.copy()
    binaries = list(p.binaries)
    itol = tol.integrality
    events: list = []
    nodes = 0

    def apply(fix):
        eng.lo[:] = base_lo
        eng.hi[:] = base_hi
        for j, v in fix.items():
            eng.lo[j] = eng.hi[j] = float(v)

    def run(fix, basis, cutoff):
        apply(fix)
        if basis is not None:
            eng.set_basis(basis)
        try:
            st = eng.solve(warm=basis is not None, cutoff=cutoff)
        except SimplexError:
            eng._slack_basis()
            try:
                st = eng.solve()
            except SimplexError:
                st = NUMERICAL
        return st

    st = run({}, None, math.inf)
    nodes = 1
    if st != OPTIMAL:
        return MilpSolution(st if st != "cutoff" else INFEASIBLE, None, nodes=1, iterations=eng.iterations,
                            wall_time=time.perf_counter() - t0, problem_version=p.version, log=events)
    root_bound = eng.objective()
    inc_x = None
    inc_obj = math.inf
    heap: list[_Node] = []
    counter = itertools.count(1)
    global_bound = root_bound

    def cutoff_value():
        if not math.isfinite(inc_obj):
            return math.inf
        return inc_obj - max(gap_tol * abs(inc_obj), 1e-9 * max(1.0, abs(inc_obj)))

    def record(event, nid, bound):
        if log:
            events.append((event, nid, float(bound), float(inc_obj + p.offset) if math.isfinite(inc_obj) else math.inf))

    def polish(fix_all, basis):
        """Re-solve with every binary fixed so the incumbent has exact 0/1."""
        st2 = run(fix_all, basis, math.inf)
        if st2 != OPTIMAL:
            return None
        eng.clean()
        return eng.structural(), eng.objective()

    def round_up(node_fix):
        """Fix every binary that is positive in the relaxation to 1 (and the
        rest to 0); cheap incumbent for covering-type on/off structure."""
        nonlocal inc_x, inc_obj
        x = eng.x
        fix_all = dict(node_fix)
        for b in binaries:
            if b not in fix_all:
                fix_all[b] = 1.0 if x[b] > itol else 0.0
        got = polish(fix_all, eng.get_basis())
        if got is not None and got[1] < inc_obj:
            inc_x, inc_obj = got
            record("incumbent", -1, got[1])

    # process root and subsequent nodes
    pending = [(_Node(root_bound, 0, 0, {}, None), True, True)]  # (node, already solved, starts a dive)
    status = OPTIMAL
    while True:
        if not pending:
            # drop nodes that cannot improve
            while heap and heap[0].bound >= cutoff_value():
                heapq.heappop(heap)
            if not heap:
                break
            global_bound = min(heap[0].bound, inc_obj)
            if math.isfinite(inc_obj) and relative_gap(inc_obj + p.offset, global_bound + p.offset) <= gap_tol:
                status = GAP_LIMIT if gap_tol > 0 else OPTIMAL
                break
            if nodes >= node_limit:
                status = NODE_LIMIT
                break
            if time.perf_counter() - t0 > time_limit:
                status = TIME_LIMIT
                break
            node = heapq.heappop(heap)
            pending.append((node, False, True))
        node, solved, dive_start = pending.pop()
        if not solved:
            st = run(node.fix, node.basis, cutoff_value())
            nodes += 1
            if st in (INFEASIBLE, "cutoff"):
                record("pruned", node.nid, node.bound)
                continue
            if st != OPTIMAL:
                record("numerical", node.nid, node.bound)
                continue
        obj = eng.objective()
        if obj >= cutoff_value():
            record("pruned", node.nid, obj)
            continue
        x = _shift_binaries(eng, binaries, itol, tol.feasibility) if heuristic else eng.x
        j = _most_fractional(x, binaries, itol)
        if j >= 0 and heuristic and dive_start:
            basis = eng.get_basis()
            round_up(node.fix)
            # restore the node relaxation for branching
            if run(node.fix, basis, math.inf) != OPTIMAL:  # pragma: no cover
                continue
            x = _shift_binaries(eng, binaries, itol, tol.feasibility)
            obj = eng.objective()
            if obj >= cutoff_value():
                record("pruned", node.nid, obj)
                continue
        if j < 0:
            fix_all = {b: float(round(x[b])) for b in binaries}
            got = polish(fix_all, eng.get_basis())
            if got is not None and got[1] < inc_obj:
                inc_x, inc_obj = got
                record("incumbent", node.nid, obj)
            continue
        record("branch", node.nid, obj)
        basis = eng.get_basis()
        up_first = x[j] >= 0.5
        first = dict(node.fix)
        first[j] = 1.0 if up_first else 0.0
        second = dict(node.fix)
        second[j] = 0.0 if up_first else 1.0
        heapq.heappush(heap, _Node(obj, next(counter), node.depth + 1, second, basis))
        child = _Node(obj, next(counter), node.depth + 1, first, basis)
        if dive:
            pending.append((child, False, False))
        else:
            heapq.heappush(heap, child)

    wall = time.perf_counter() - t0
    if inc_x is None:
        st_final = INFEASIBLE if status == OPTIMAL else status
        return MilpSolution(st_final, None, math.nan, global_bound + p.offset, math.inf, nodes,
                            eng.iterations, wall, p.version, events)
    if not heap and status == OPTIMAL:
        global_bound = inc_obj
    bound = min(global_bound, inc_obj)
    g = relative_gap(inc_obj + p.offset, bound + p.offset)
    return MilpSolution(status, inc_x, inc_obj + p.offset, bound + p.offset, g, nodes,
                        eng.iterations, wall, p.version, events)


def brute_force(p: MilpProblem, tol: Tolerances = DEFAULT_TOL) -> MilpSolution:
    """Enumerate every binary assignment and keep the best LP (first found
    on ties, in Gray-code order)."""
    k = len(p.binaries)
    if k > MAX_BRUTE_BINARIES:
        raise ProblemError(f"{k} binaries exceed the brute-force limit of {MAX_BRUTE_BINARIES}")
    t0 = time.perf_counter()
    if k == 0:
        return solve_lp(p, tol)
    eng = _engine(p, tol)
    base_lo = eng.lo.copy()
    base_hi = eng.hi.copy()
    best_x, best_obj = None, math.inf
    basis = None
    count = 0
    for g in range(1 << k):
        code = g ^ (g >> 1)
        eng.lo[:] = base_lo
        eng.hi[:] = base_hi
        for i, j in enumerate(p.binaries):
            v = float((code >> i) & 1)
            eng.lo[j] = eng.hi[j] = v
        if basis is not None:
            eng.set_basis(basis)
        try:
            st = eng.solve(warm=basis is not None)
        except SimplexError:
            eng._slack_basis()
            st = eng.solve()
        count += 1
        if st == OPTIMAL:
            eng.clean()
            obj = eng.objective()
            if obj < best_obj - 1e-12 * max(1.0, abs(obj)):
                best_obj = obj
                best_x = eng.structural()
            basis = eng.get_basis()
        elif st == UNBOUNDED:
            return MilpSolution(UNBOUNDED, None, nodes=count, wall_time=time.perf_counter() - t0,
                                problem_version=p.version)
        else:
            eng._slack_basis()
            basis = None
    wall = time.perf_counter() - t0
    if best_x is None:
        return MilpSolution(INFEASIBLE, None, nodes=count, wall_time=wall, problem_version=p.version)
    obj = best_obj + p.offset
    return MilpSolution(OPTIMAL, best_x, obj, obj, 0.0, count, eng.iterations, wall, p.version)
