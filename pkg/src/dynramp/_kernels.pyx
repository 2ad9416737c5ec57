# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: tape evaluation and simplex pricing/ratio tests."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, pow, floor, isinf, isfinite, fabs, INFINITY, NAN

cnp.import_array()

cdef enum:
    OP_CONST = 0
    OP_INPUT = 1
    OP_ADD = 2
    OP_SUB = 3
    OP_MUL = 4
    OP_DIV = 5
    OP_POW = 6
    OP_POWI = 7
    OP_EXP = 8
    OP_LN = 9
    OP_NEG = 10


cdef int _run(const int[::1] ops, const int[::1] a, const int[::1] b, const double[::1] c,
              const double* x, double[::1] w) noexcept nogil:
    cdef Py_ssize_t i, n = ops.shape[0]
    cdef double u, v
    cdef int op
    for i in range(n):
        op = ops[i]
        if op == OP_CONST:
            w[i] = c[i]
        elif op == OP_INPUT:
            w[i] = x[a[i]]
        elif op == OP_ADD:
            w[i] = w[a[i]] + w[b[i]]
        elif op == OP_SUB:
            w[i] = w[a[i]] - w[b[i]]
        elif op == OP_MUL:
            w[i] = w[a[i]] * w[b[i]]
        elif op == OP_DIV:
            v = w[b[i]]
            if v == 0.0:
                return i + 1
            w[i] = w[a[i]] / v
        elif op == OP_POW:
            u = w[a[i]]
            v = w[b[i]]
            if (u == 0.0 and v < 0.0) or (u < 0.0 and v != floor(v)):
                return i + 1
            w[i] = pow(u, v)
            if isinf(w[i]) and isfinite(u):
                return i + 1
        elif op == OP_POWI:
            u = w[a[i]]
            if c[i] == 2.0:
                w[i] = u * u
            else:
                if u == 0.0 and c[i] < 0.0:
                    return i + 1
                w[i] = pow(u, c[i])
                if isinf(w[i]) and isfinite(u):
                    return i + 1
        elif op == OP_EXP:
            u = w[a[i]]
            w[i] = exp(u)
            if isinf(w[i]) and isfinite(u):
                return i + 1
        elif op == OP_LN:
            u = w[a[i]]
            if u <= 0.0:
                return i + 1
            w[i] = log(u)
        elif op == OP_NEG:
            w[i] = -w[a[i]]
    return 0


cdef class ScalarEvaluator:
    cdef int[::1] ops, a, b, outputs
    cdef double[::1] c, work

    def __init__(self, tape):
        self.ops = tape.ops
        self.a = tape.a
        self.b = tape.b
        self.c = tape.c
        self.outputs = tape.outputs
        self.work = np.empty(max(len(tape.ops), 1))

    def __call__(self, const double[::1] x, double[::1] out):
        cdef int status
        cdef Py_ssize_t k
        status = _run(self.ops, self.a, self.b, self.c, &x[0] if x.shape[0] else NULL, self.work)
        if status:
            return status
        for k in range(self.outputs.shape[0]):
            out[k] = self.work[self.outputs[k]]
        return 0


def make_scalar_evaluator(tape):
    return ScalarEvaluator(tape)


def tape_eval_batch(tape, const double[:, ::1] X):
    cdef int[::1] ops = tape.ops
    cdef int[::1] a = tape.a
    cdef int[::1] b = tape.b
    cdef double[::1] c = tape.c
    cdef int[::1] outputs = tape.outputs
    cdef Py_ssize_t n = X.shape[0], m = outputs.shape[0], r, k
    out_arr = np.empty((n, m))
    bad_arr = np.zeros(n, dtype=np.bool_)
    cdef double[:, ::1] out = out_arr
    cdef cnp.npy_bool[::1] bad = bad_arr
    cdef double[::1] w = np.empty(max(ops.shape[0], 1))
    cdef int status
    with nogil:
        for r in range(n):
            status = _run(ops, a, b, c, &X[r, 0] if X.shape[1] else NULL, w)
            if status:
                bad[r] = 1
                for k in range(m):
                    out[r, k] = NAN
            else:
                for k in range(m):
                    out[r, k] = w[outputs[k]]
    return out_arr, bad_arr


def price_dantzig(const double[::1] d, const signed char[::1] status, double tol):
    cdef Py_ssize_t j, n = d.shape[0]
    cdef Py_ssize_t best = -1
    cdef double bestv = tol, v
    for j in range(n):
        if status[j] == 0:
            v = -d[j]
        elif status[j] == 1:
            v = d[j]
        elif status[j] == 2:
            v = fabs(d[j])
        else:
            continue
        if v > bestv:
            bestv = v
            best = j
    return best


def price_weighted(const double[::1] d, const double[::1] w, const signed char[::1] status, double tol):
    cdef Py_ssize_t j, n = d.shape[0]
    cdef Py_ssize_t best = -1
    cdef double bestv = -1.0, v, score
    for j in range(n):
        if status[j] == 0:
            v = -d[j]
        elif status[j] == 1:
            v = d[j]
        elif status[j] == 2:
            v = fabs(d[j])
        else:
            continue
        if v > tol:
            score = v * v / w[j]
            if score > bestv:
                bestv = score
                best = j
    return best


def ratio_test_primal(const double[::1] xb, const double[::1] lb, const double[::1] ub,
                      const double[::1] alpha, double tol):
    cdef Py_ssize_t i, n = xb.shape[0], r = -1
    cdef double tmax = INFINITY, t, al, best = -1.0
    for i in range(n):
        al = alpha[i]
        if al > 1e-9:
            t = (xb[i] - lb[i] + tol) / al
        elif al < -1e-9:
            t = (xb[i] - ub[i] - tol) / al
        else:
            continue
        if t < tmax:
            tmax = t
    if not isfinite(tmax):
        return INFINITY, -1, False
    for i in range(n):
        al = alpha[i]
        if al > 1e-9:
            t = (xb[i] - lb[i]) / al
        elif al < -1e-9:
            t = (xb[i] - ub[i]) / al
        else:
            continue
        if t <= tmax and fabs(al) > best:
            best = fabs(al)
            r = i
    al = alpha[r]
    if al > 0:
        t = (xb[r] - lb[r]) / al
    else:
        t = (xb[r] - ub[r]) / al
    return (t if t > 0.0 else 0.0), r, al < 0


def ratio_test_dual(const double[::1] d, const double[::1] alpha_r, const signed char[::1] status,
                    bint leaving_up, double tol):
    cdef Py_ssize_t j, n = d.shape[0], q = -1
    cdef double s, tmax = INFINITY, t, best = -1.0
    cdef signed char st
    for j in range(n):
        st = status[j]
        s = -alpha_r[j] if leaving_up else alpha_r[j]
        if (st == 0 and s < -1e-9) or (st == 1 and s > 1e-9) or (st == 2 and fabs(s) > 1e-9):
            t = (fabs(d[j]) + tol) / fabs(s)
            if t < tmax:
                tmax = t
    if not isfinite(tmax):
        return -1
    for j in range(n):
        st = status[j]
        s = -alpha_r[j] if leaving_up else alpha_r[j]
        if (st == 0 and s < -1e-9) or (st == 1 and s > 1e-9) or (st == 2 and fabs(s) > 1e-9):
            t = fabs(d[j]) / fabs(s)
            if t <= tmax and fabs(s) > best:
                best = fabs(s)
                q = j
    return q


cdef int _rhs(const int[::1] ops, const int[::1] a, const int[::1] b, const double[::1] c,
              const int[::1] outputs, double* z, double[::1] w, double* k, Py_ssize_t n) noexcept nogil:
    cdef int status = _run(ops, a, b, c, z, w)
    cdef Py_ssize_t i
    if status:
        return status
    for i in range(n):
        k[i] = w[outputs[i]]
    return 0


def rk4_integrate(tape, const double[::1] x0, const double[:, ::1] rho, const double[:, ::1] u, double dt,
                  const double[::1] lo, const double[::1] hi):
    cdef int[::1] ops = tape.ops
    cdef int[::1] a = tape.a
    cdef int[::1] b = tape.b
    cdef double[::1] c = tape.c
    cdef int[::1] outputs = tape.outputs
    cdef Py_ssize_t n = x0.shape[0], N = rho.shape[0], s, i, st
    X_arr = np.full((N + 1, n), NAN)
    cdef double[:, ::1] X = X_arr
    cdef double[::1] w = np.empty(max(ops.shape[0], 1))
    cdef double[::1] z = np.empty(n + 2)
    cdef double[::1] k1 = np.empty(n), k2 = np.empty(n), k3 = np.empty(n), k4 = np.empty(n)
    cdef int status = 0
    cdef Py_ssize_t where = -1
    for i in range(n):
        X[0, i] = x0[i]
    with nogil:
        for s in range(N):
            for st in range(4):
                for i in range(n):
                    if st == 0:
                        z[i] = X[s, i]
                    elif st == 1:
                        z[i] = X[s, i] + 0.5 * dt * k1[i]
                    elif st == 2:
                        z[i] = X[s, i] + 0.5 * dt * k2[i]
                    else:
                        z[i] = X[s, i] + dt * k3[i]
                if st == 0:
                    z[n] = rho[s, 0]
                    z[n + 1] = u[s, 0]
                    status = _rhs(ops, a, b, c, outputs, &z[0], w, &k1[0], n)
                elif st == 1:
                    z[n] = rho[s, 1]
                    z[n + 1] = u[s, 1]
                    status = _rhs(ops, a, b, c, outputs, &z[0], w, &k2[0], n)
                elif st == 2:
                    status = _rhs(ops, a, b, c, outputs, &z[0], w, &k3[0], n)
                else:
                    z[n] = rho[s, 2]
                    z[n + 1] = u[s, 2]
                    status = _rhs(ops, a, b, c, outputs, &z[0], w, &k4[0], n)
                if status:
                    break
            if status:
                status = 1
                where = s
                break
            for i in range(n):
                X[s + 1, i] = X[s, i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if not (lo[i] <= X[s + 1, i] <= hi[i]):
                    status = 2
                    where = s + 1
            if status:
                break
    return X_arr, status, where
