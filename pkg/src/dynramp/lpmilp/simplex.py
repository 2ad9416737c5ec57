"""Bounded-variable revised simplex.

Rows are turned into logical variables, ``A x - s = 0`` with the row bounds
moved onto ``s``, so every constraint is a variable bound. The basis is
factorized with a sparse LU and updated with eta vectors (product form);
after ``REFACTOR`` updates it is refactorized from scratch.

Nonbasic status codes: 0 at lower, 1 at upper, 2 free at zero, 3 basic.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .. import kernels
from .problem import DEFAULT_TOL, INFEASIBLE, NUMERICAL, OPTIMAL, UNBOUNDED, Tolerances

AT_LO, AT_UP, FREE, BASIC = 0, 1, 2, 3
REFACTOR = 50


class SimplexError(Exception):
    pass


class LPResult:
    __slots__ = ("status", "x", "objective", "iterations", "residual")

    def __init__(self, status, x=None, objective=math.nan, iterations=0, residual=0.0):
        self.status = status
        self.x = x
        self.objective = objective
        self.iterations = iterations
        self.residual = residual

    def __repr__(self):
        return f"LPResult({self.status}, obj={self.objective!r}, it={self.iterations})"


class Basis:
    """Snapshot of a basis: basic column per row and status of every column."""

    __slots__ = ("head", "status")

    def __init__(self, head, status):
        self.head = np.array(head, dtype=np.int64)
        self.status = np.array(status, dtype=np.int8)


class BoundedSimplex:
    def __init__(self, A, c, lb, ub, row_lo, row_hi, tol: Tolerances = DEFAULT_TOL):
        A = sp.csc_matrix(A, dtype=float)
        self.m, self.n = A.shape
        self.A = A
        self.At = A.T.tocsr()
        self.AI = sp.hstack([A, -sp.identity(A.shape[0], format="csc")], format="csc")
        self.tol = tol
        m, n = self.m, self.n
        self.N = n + m
        self.cost = np.concatenate([np.asarray(c, float), np.zeros(m)])
        self.lo = np.concatenate([np.asarray(lb, float), np.asarray(row_lo, float)])
        self.hi = np.concatenate([np.asarray(ub, float), np.asarray(row_hi, float)])
        if np.any(self.lo > self.hi):
            raise SimplexError("inconsistent bounds")
        self.x = np.zeros(self.N)
        self.status = np.zeros(self.N, dtype=np.int8)
        self.head = np.arange(n, n + m, dtype=np.int64)
        self.pos = np.full(self.N, -1, dtype=np.int64)  # row position of basic columns
        self.lu = None
        self.etas: list = []
        self.iterations = 0
        self._slack_basis()

    # -- basis bookkeeping ----------------------------------------------------
    def _nonbasic_value(self, j):
        lo, hi = self.lo[j], self.hi[j]
        if math.isfinite(lo):
            return AT_LO, lo
        if math.isfinite(hi):
            return AT_UP, hi
        return FREE, 0.0

    def _slack_basis(self):
        for j in range(self.n):
            self.status[j], self.x[j] = self._nonbasic_value(j)
        self.head = np.arange(self.n, self.N, dtype=np.int64)
        self.status[self.n:] = BASIC
        self._refactor()

    def get_basis(self) -> Basis:
        return Basis(self.head, self.status)

    def set_basis(self, basis: Basis):
        self.head = basis.head.copy()
        self.status = basis.status.copy()
        self._place_nonbasic()
        try:
            self._refactor()
        except SimplexError:
            self._slack_basis()

    def _place_nonbasic(self):
        """Put nonbasic columns on their (current) bounds."""
        st = self.status
        for j in np.nonzero(st != BASIC)[0]:
            lo, hi = self.lo[j], self.hi[j]
            s = st[j]
            if s == AT_LO and not math.isfinite(lo):
                s = AT_UP if math.isfinite(hi) else FREE
            elif s == AT_UP and not math.isfinite(hi):
                s = AT_LO if math.isfinite(lo) else FREE
            elif s == FREE and (math.isfinite(lo) or math.isfinite(hi)):
                s = AT_LO if math.isfinite(lo) else AT_UP
            st[j] = s
            self.x[j] = lo if s == AT_LO else (hi if s == AT_UP else 0.0)

    def set_bounds(self, j, lo, hi):
        self.lo[j] = lo
        self.hi[j] = hi

    def _column(self, j):
        if j < self.n:
            a, b = self.A.indptr[j], self.A.indptr[j + 1]
            return self.A.indices[a:b], self.A.data[a:b]
        return np.array([j - self.n]), np.array([-1.0])

    def _dense_column(self, j):
        v = np.zeros(self.m)
        idx, val = self._column(j)
        v[idx] = val
        return v

    def _refactor(self):
        m = self.m
        self.etas = []
        self.pos[:] = -1
        self.pos[self.head] = np.arange(m)
        if m == 0:
            self.lu = None
            return
        B = self.AI[:, self.head]
        try:
            self.lu = spla.splu(B, permc_spec="COLAMD", diag_pivot_thresh=0.1)
        except RuntimeError as exc:  # exactly singular
            raise SimplexError(f"singular basis: {exc}") from None
        self._recompute_xb()

    def _recompute_xb(self):
        if self.m == 0:
            return
        nb = self.status != BASIC
        xn = np.where(nb, self.x, 0.0)
        rhs = -(self.A @ xn[: self.n]) + xn[self.n:]
        self.x[self.head] = self.ftran(rhs)

    def ftran(self, v):
        y = self.lu.solve(np.asarray(v, dtype=float))
        for r, al in self.etas:
            t = y[r] / al[r]
            if t != 0.0:
                y -= t * al
            y[r] = t
        return y

    def btran(self, v):
        y = np.array(v, dtype=float)
        for r, al in reversed(self.etas):
            yr = y[r]
            y[r] = (yr - (al @ y - al[r] * yr)) / al[r]
        return self.lu.solve(y, trans="T")

    def _push_eta(self, r, alpha):
        self.etas.append((r, alpha.copy()))
        if len(self.etas) >= REFACTOR:
            self._refactor()

    def _pivot(self, r, q, alpha, leaving_status, leaving_value):
        old = self.head[r]
        self.status[old] = leaving_status
        self.x[old] = leaving_value
        self.pos[old] = -1
        self.head[r] = q
        self.status[q] = BASIC
        self.pos[q] = r
        self._push_eta(r, alpha)

    def reduced_costs(self, cb, phase1: bool = False):
        y = self.btran(cb)
        d = np.empty(self.N)
        d[: self.n] = (0.0 if phase1 else self.cost[: self.n]) - self.At @ y
        d[self.n:] = y
        d[self.head] = 0.0
        return d, y

    def objective(self):
        return float(self.cost @ self.x)

    # -- primal simplex ---------------------------------------------------------
    def _infeasibility(self):
        xb = self.x[self.head]
        lo = self.lo[self.head]
        hi = self.hi[self.head]
        t = self.tol.primal
        below = xb < lo - t
        above = xb > hi + t
        return below, above

    def primal(self, max_iter=None) -> str:
        """Run phase 1 (if needed) and phase 2 from the current basis."""
        m, N = self.m, self.N
        max_iter = max_iter or 50 * (N + m) + 1000
        stall_limit = 10 * (m + N)
        tol = self.tol
        best = math.inf
        stall = 0
        bland = False
        phase = 0
        w = np.ones(self.N)  # devex reference weights
        for _ in range(max_iter):
            below, above = self._infeasibility()
            infeasible = bool(below.any() or above.any())
            if infeasible:
                cb = np.where(below, -1.0, np.where(above, 1.0, 0.0))
                measure = float(np.sum(self.lo[self.head][below] - self.x[self.head][below])
                                + np.sum(self.x[self.head][above] - self.hi[self.head][above]))
                if phase != 1:
                    phase, best, stall, bland = 1, math.inf, 0, False
                    w[:] = 1.0
            else:
                cb = self.cost[self.head]
                measure = self.objective()
                if phase != 2:
                    phase, best, stall, bland = 2, math.inf, 0, False
                    w[:] = 1.0
            if measure < best - 1e-12 * max(1.0, abs(best) if math.isfinite(best) else 1.0):
                best = measure
                stall = 0
            else:
                stall += 1
                if stall > stall_limit:
                    bland = True
            d, _ = self.reduced_costs(cb, phase1=infeasible)
            q = self._price_bland(d) if bland else kernels.price_weighted(d, w, self.status, tol.dual)
            if q < 0:
                if infeasible:
                    return INFEASIBLE
                return OPTIMAL
            sigma = 1.0 if (d[q] < 0.0) else -1.0
            alpha = self.ftran(self._dense_column(q))
            xb = self.x[self.head]
            lo = self.lo[self.head].copy()
            hi = self.hi[self.head].copy()
            if infeasible:
                # infeasible basics may move freely away from feasibility but
                # stop when they reach the violated bound
                lo[below], hi[below] = -math.inf, lo[below]
                lo[above], hi[above] = hi[above], math.inf
            sa = sigma * alpha
            if bland:
                theta, r, to_up = self._ratio_bland(xb, lo, hi, sa)
            else:
                theta, r, to_up = kernels.ratio_test_primal(xb, lo, hi, sa, tol.primal)
            span = self.hi[q] - self.lo[q]
            self.iterations += 1
            if span <= theta and math.isfinite(span):
                # bound flip of the entering column, no basis change
                step = span
                self.x[q] += sigma * step
                self.status[q] = AT_UP if sigma > 0 else AT_LO
                self.x[q] = self.hi[q] if sigma > 0 else self.lo[q]
                self.x[self.head] = xb - step * sa
                continue
            if r < 0:
                if infeasible:  # cannot happen with a bounded phase-1 step
                    raise SimplexError("unbounded phase-1 direction")
                return UNBOUNDED
            if abs(alpha[r]) < tol.pivot:
                self._refactor()
                continue
            leaving = self.head[r]
            if not bland:
                self._devex_update(w, r, q, alpha[r])
            self.x[q] += sigma * theta
            self.x[self.head] = xb - theta * sa
            lv = hi[r] if to_up else lo[r]
            st = AT_UP if to_up else AT_LO
            # leaving variable lands on one of its own bounds
            if lv == self.hi[leaving]:
                st = AT_UP
            elif lv == self.lo[leaving]:
                st = AT_LO
            self._pivot(r, q, alpha, st, lv)
        raise SimplexError("iteration limit reached")

    def pivot_row(self, r):
        """Row r of the tableau B^-1 [A, -I] (zero on basic columns)."""
        e = np.zeros(self.m)
        e[r] = 1.0
        rho = self.btran(e)
        row = np.empty(self.N)
        row[: self.n] = self.At @ rho
        row[self.n:] = -rho
        row[self.head] = 0.0
        return row

    def _devex_update(self, w, r, q, arq):
        row = self.pivot_row(r)
        wq = w[q]
        ratio = row / arq
        np.maximum(w, ratio * ratio * wq, out=w)
        w[self.head[r]] = max(wq / (arq * arq), 1.0)
        if w.max() > 1e8:
            w[:] = 1.0

    def _price_bland(self, d):
        t = self.tol.dual
        st = self.status
        for j in range(self.N):
            s = st[j]
            if (s == AT_LO and d[j] < -t) or (s == AT_UP and d[j] > t) or (s == FREE and abs(d[j]) > t):
                return j
        return -1

    def _ratio_bland(self, xb, lo, hi, sa):
        best = math.inf
        r = -1
        to_up = False
        for i in range(len(xb)):
            a = sa[i]
            if a > 1e-9 and math.isfinite(lo[i]):
                t = (xb[i] - lo[i]) / a
                up = False
            elif a < -1e-9 and math.isfinite(hi[i]):
                t = (xb[i] - hi[i]) / a
                up = True
            else:
                continue
            t = max(t, 0.0)
            if t < best - 1e-12 or (abs(t - best) <= 1e-12 and self.head[i] < self.head[r]):
                best, r, to_up = t, i, up
        return best, r, to_up

    # -- dual simplex -----------------------------------------------------------
    def make_dual_feasible(self) -> bool:
        """Flip boxed nonbasic columns whose reduced cost has the wrong sign.

        Returns False if a column without a finite opposite bound is dual
        infeasible (the dual simplex then cannot start here).
        """
        d, _ = self.reduced_costs(self.cost[self.head])
        t = self.tol.dual
        flipped = False
        for j in np.nonzero(self.status != BASIC)[0]:
            s = self.status[j]
            if s == AT_LO and d[j] < -t:
                if math.isfinite(self.hi[j]):
                    self.status[j], self.x[j] = AT_UP, self.hi[j]
                    flipped = True
                else:
                    return False
            elif s == AT_UP and d[j] > t:
                if math.isfinite(self.lo[j]):
                    self.status[j], self.x[j] = AT_LO, self.lo[j]
                    flipped = True
                else:
                    return False
            elif s == FREE and abs(d[j]) > t:
                return False
        if flipped:
            self._recompute_xb()
        return True

    def dual(self, cutoff=math.inf, max_iter=None) -> str:
        """Dual simplex from a dual feasible basis. Stops early (status
        'cutoff') once the objective exceeds ``cutoff``."""
        max_iter = max_iter or 20 * (self.N + self.m) + 1000
        tol = self.tol
        for _ in range(max_iter):
            xb = self.x[self.head]
            lo = self.lo[self.head]
            hi = self.hi[self.head]
            viol_lo = lo - xb
            viol_hi = xb - hi
            viol = np.maximum(viol_lo, viol_hi)
            r = int(np.argmax(viol)) if len(viol) else -1
            if r < 0 or viol[r] <= tol.primal:
                return OPTIMAL
            if math.isfinite(cutoff) and self.objective() > cutoff:
                return "cutoff"
            leaving_up = viol_hi[r] > viol_lo[r]
            alpha_r = self.pivot_row(r)
            d, _ = self.reduced_costs(self.cost[self.head])
            q = kernels.ratio_test_dual(d, alpha_r, self.status, leaving_up, tol.dual)
            if q < 0:
                return INFEASIBLE
            alpha = self.ftran(self._dense_column(q))
            if abs(alpha[r]) < tol.pivot or abs(alpha[r] - alpha_r[q]) > 1e-7 * (1.0 + abs(alpha[r])):
                self._refactor()
                if abs(alpha[r]) < tol.pivot:
                    return NUMERICAL
                continue
            bound = hi[r] if leaving_up else lo[r]
            delta_q = (xb[r] - bound) / alpha[r]
            self.x[q] += delta_q
            self.x[self.head] = xb - delta_q * alpha
            self.iterations += 1
            self._pivot(r, q, alpha, AT_UP if leaving_up else AT_LO, bound)
        raise SimplexError("dual iteration limit reached")

    # -- drivers ----------------------------------------------------------------
    def solve(self, warm: bool = False, cutoff=math.inf) -> str:
        """Solve from the current basis. With ``warm`` the dual simplex is
        tried first (after bound changes of a previously optimal basis)."""
        if self.m == 0:
            # only bounds: each column goes to its cheaper end
            for j in range(self.n):
                c = self.cost[j]
                if c > 0:
                    v = self.lo[j]
                elif c < 0:
                    v = self.hi[j]
                else:
                    v = self.lo[j] if math.isfinite(self.lo[j]) else (self.hi[j] if math.isfinite(self.hi[j]) else 0.0)
                if not math.isfinite(v):
                    return UNBOUNDED
                self.x[j] = v
            return OPTIMAL
        self._place_nonbasic()
        self._refactor()
        if warm and self.make_dual_feasible():
            try:
                st = self.dual(cutoff=cutoff)
            except SimplexError:
                st = NUMERICAL
            if st in (INFEASIBLE, "cutoff"):
                return st
            if st == OPTIMAL:
                # clean up any dual infeasibility left by tolerances
                return self.primal()
            self._refactor()
        return self.primal()

    def structural(self):
        return self.x[: self.n].copy()

    def residual(self) -> float:
        """Largest violation of A x = s and of the bounds."""
        xs = self.x[: self.n]
        s = self.x[self.n:]
        r = float(np.max(np.abs(self.A @ xs - s), initial=0.0))
        b = float(max(np.max(self.lo - self.x, initial=0.0), np.max(self.x - self.hi, initial=0.0)))
        return max(r, b)

    def clean(self):
        """Refactor and recompute basics; returns the residual."""
        self._refactor()
        return self.residual()


def solve_lp_arrays(A, c, lb, ub, row_lo, row_hi, tol: Tolerances = DEFAULT_TOL):
    s = BoundedSimplex(A, c, lb, ub, row_lo, row_hi, tol)
    st = s.solve()
    if st == OPTIMAL:
        res = s.clean()
        if res > 1e-6:
            return LPResult(NUMERICAL, s.structural(), s.objective(), s.iterations, res), s
        return LPResult(OPTIMAL, s.structural(), s.objective(), s.iterations, res), s
    return LPResult(st, None, math.nan, s.iterations), s
