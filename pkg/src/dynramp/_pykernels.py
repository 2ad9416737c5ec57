"""Pure-Python/numpy versions of the hot loops. Same signatures as _kernels."""
from __future__ import annotations

import math

import numpy as np

_CONST, _INPUT, _ADD, _SUB, _MUL, _DIV, _POW, _POWI, _EXP, _LN, _NEG = range(11)


def _pow(a, b):
    if a == 0.0 and b < 0.0:
        raise ValueError
    if a < 0.0 and b != math.floor(b):
        raise ValueError
    return math.pow(a, b)


def make_scalar_evaluator(tape):
    """Generate a straight-line Python function for the tape.

    The returned callable has the kernel signature ``f(x, out) -> status``
    where status is 0 or 1 + index of the failing instruction.
    """
    lines = ["def _run(x, out):"]
    lines.append("    i = -1")
    lines.append("    try:")
    for i, (op, a, b, c) in enumerate(zip(tape.ops.tolist(), tape.a.tolist(), tape.b.tolist(), tape.c.tolist())):
        lines.append(f"        i = {i}")
        if op == _CONST:
            rhs = repr(c)
        elif op == _INPUT:
            rhs = f"x[{a}]"
        elif op == _ADD:
            rhs = f"v{a} + v{b}"
        elif op == _SUB:
            rhs = f"v{a} - v{b}"
        elif op == _MUL:
            rhs = f"v{a} * v{b}"
        elif op == _DIV:
            rhs = f"v{a} / v{b}"
        elif op == _POW:
            rhs = f"_pow(v{a}, v{b})"
        elif op == _POWI:
            n = int(c)
            rhs = f"v{a} * v{a}" if n == 2 else f"_pow(v{a}, {float(n)!r})"
        elif op == _EXP:
            rhs = f"_exp(v{a})"
        elif op == _LN:
            rhs = f"_log(v{a})"
        elif op == _NEG:
            rhs = f"-v{a}"
        else:
            raise ValueError(f"bad opcode {op}")
        lines.append(f"        v{i} = {rhs}")
    for k, o in enumerate(tape.outputs.tolist()):
        lines.append(f"        out[{k}] = v{o}")
    lines.append("    except (ZeroDivisionError, ValueError, OverflowError):")
    lines.append("        return i + 1")
    lines.append("    return 0")
    ns = {"_pow": _pow, "_exp": math.exp, "_log": math.log}
    exec(compile("\n".join(lines), "<tape>", "exec"), ns)
    run = ns["_run"]

    def evaluate(x, out):
        return run(x.tolist() if hasattr(x, "tolist") else x, out)

    return evaluate


def tape_eval_batch(tape, X):
    n = X.shape[0]
    vals = [None] * len(tape.ops)
    bad = np.zeros(n, dtype=bool)
    with np.errstate(all="ignore"):
        for i, (op, a, b, c) in enumerate(zip(tape.ops.tolist(), tape.a.tolist(), tape.b.tolist(), tape.c.tolist())):
            if op == _CONST:
                v = np.full(n, c)
            elif op == _INPUT:
                v = X[:, a]
            elif op == _ADD:
                v = vals[a] + vals[b]
            elif op == _SUB:
                v = vals[a] - vals[b]
            elif op == _MUL:
                v = vals[a] * vals[b]
            elif op == _DIV:
                den = vals[b]
                bad |= den == 0.0
                v = vals[a] / den
            elif op == _POW:
                x, y = vals[a], vals[b]
                bad |= ((x == 0.0) & (y < 0.0)) | ((x < 0.0) & (y != np.floor(y)))
                v = np.power(x, y)
            elif op == _POWI:
                x = vals[a]
                if int(c) == 2:
                    v = x * x
                else:
                    if c < 0:
                        bad |= x == 0.0
                    v = np.power(x, c)
            elif op == _EXP:
                v = np.exp(vals[a])
                bad |= np.isinf(v) & np.isfinite(vals[a])
            elif op == _LN:
                x = vals[a]
                bad |= x <= 0.0
                v = np.log(x)
            elif op == _NEG:
                v = -vals[a]
            else:
                raise ValueError(f"bad opcode {op}")
            vals[i] = v
    out = np.empty((n, len(tape.outputs)))
    for k, o in enumerate(tape.outputs.tolist()):
        out[:, k] = vals[o]
    out[bad] = np.nan
    return out, bad


# ---------------------------------------------------------------------------
# simplex helpers
#
# status codes for nonbasic variables: 0 at lower, 1 at upper, 2 free (at 0),
# 3 basic. Shared with the compiled version.

def price_dantzig(d, status, tol):
    """Entering candidate with the largest dual infeasibility, or -1."""
    viol = np.zeros_like(d)
    at_lo = status == 0
    at_up = status == 1
    free = status == 2
    viol[at_lo] = np.maximum(-d[at_lo], 0.0)
    viol[at_up] = np.maximum(d[at_up], 0.0)
    viol[free] = np.abs(d[free])
    j = int(np.argmax(viol))
    if viol[j] <= tol:
        return -1
    return j


def price_weighted(d, w, status, tol):
    """Entering candidate maximizing infeasibility^2 / weight, or -1."""
    viol = np.zeros_like(d)
    at_lo = status == 0
    at_up = status == 1
    free = status == 2
    viol[at_lo] = np.maximum(-d[at_lo], 0.0)
    viol[at_up] = np.maximum(d[at_up], 0.0)
    viol[free] = np.abs(d[free])
    score = np.where(viol > tol, viol * viol / w, -1.0)
    j = int(np.argmax(score))
    if score[j] < 0.0:
        return -1
    return j


def ratio_test_primal(xb, lb, ub, alpha, tol):
    """Harris two-pass ratio test for x_B(θ) = x_B − θ·alpha, θ ≥ 0.

    Returns (theta, row, to_upper) with row -1 when unbounded.
    """
    inc = alpha < -1e-9  # basic increases
    dec = alpha > 1e-9
    big = np.inf
    t1 = np.full(len(xb), big)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1[dec] = (xb[dec] - lb[dec] + tol) / alpha[dec]
        t1[inc] = (xb[inc] - ub[inc] - tol) / alpha[inc]
    tmax = t1.min() if len(t1) else big
    if not np.isfinite(tmax):
        return np.inf, -1, False
    t2 = np.full(len(xb), big)
    with np.errstate(divide="ignore", invalid="ignore"):
        t2[dec] = (xb[dec] - lb[dec]) / alpha[dec]
        t2[inc] = (xb[inc] - ub[inc]) / alpha[inc]
    cand = np.nonzero(t2 <= tmax)[0]
    absal = np.abs(alpha[cand])
    r = int(cand[np.argmax(absal)])
    theta = max(t2[r], 0.0)
    return theta, r, bool(inc[r])


def ratio_test_dual(d, alpha_r, status, leaving_up, tol):
    """Dual ratio test (Harris two-pass) on nonbasic columns.

    ``leaving_up`` is True when the leaving basic variable exceeds its upper
    bound. Returns the entering column index or -1 (dual unbounded).
    """
    # the leaving variable moves to its violated bound; entering columns must
    # keep dual feasibility
    s = -alpha_r if leaving_up else alpha_r
    elig = ((status == 0) & (s < -1e-9)) | ((status == 1) & (s > 1e-9)) | ((status == 2) & (np.abs(s) > 1e-9))
    idx = np.nonzero(elig)[0]
    if len(idx) == 0:
        return -1
    dj = d[idx]
    sj = s[idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        relaxed = (np.abs(dj) + tol) / np.abs(sj)
    tmax = relaxed.min()
    exact = np.abs(dj) / np.abs(sj)
    cand = np.nonzero(exact <= tmax)[0]
    best = cand[np.argmax(np.abs(sj[cand]))]
    return int(idx[best])


# ---------------------------------------------------------------------------
# fixed-step RK4 for x' = f(x, rho, u); rho and u are given per step at
# (start, midpoint, end) so jumps between steps are exact

def rk4_integrate(tape, x0, rho, u, dt, lo, hi):
    """Returns (X, status, where): status 0 ok, 1 evaluation failure during
    step ``where``, 2 state out of range at grid point ``where``."""
    n = len(x0)
    N = len(rho)
    f = tape._scalar
    X = np.full((N + 1, n), np.nan)
    x = np.array(x0, dtype=float)
    X[0] = x
    z = np.empty(n + 2)
    ks = [np.empty(n) for _ in range(4)]
    rho = np.asarray(rho, float)
    u = np.asarray(u, float)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    for s in range(N):
        k1, k2, k3, k4 = ks
        for stage, (g, k) in enumerate(((0, k1), (1, k2), (1, k3), (2, k4))):
            if stage == 0:
                z[:n] = x
            elif stage == 1:
                z[:n] = x + 0.5 * dt * k1
            elif stage == 2:
                z[:n] = x + 0.5 * dt * k2
            else:
                z[:n] = x + dt * k3
            z[n] = rho[s, g]
            z[n + 1] = u[s, g]
            if f(z, k):
                return X, 1, s
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        X[s + 1] = x
        if not (np.all(x >= lo) and np.all(x <= hi)):
            return X, 2, s + 1
    return X, 0, -1
