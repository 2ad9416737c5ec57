"""Exact input-state linearization of input-affine SISO process models.

For a model ``x' = f1(x) + f2_1(x) u + f2_2(x) rho`` with output ``y = h(x)``
the output is differentiated until the input appears. The production rate
and its time derivatives ride along as extra variables, which gives the
ramping order ``delta`` and the ramping state ``phi = (rho, ..., rho^(delta-1))``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as E
from .tape import Tape, compile_exprs


class LinearizeError(Exception):
    pass


class ModelError(LinearizeError):
    pass


class RelativeDegreeMismatch(LinearizeError):
    pass


class DegenerateOutput(LinearizeError):
    pass


class SingularJacobian(LinearizeError):
    pass


class NoConvergence(LinearizeError):
    pass


class OutOfRange(LinearizeError):
    pass


class SignFlip(LinearizeError):
    pass


class OutOfRampRange(LinearizeError):
    pass


NEWTON_TOL = 1e-11
NEWTON_MAXIT = 50
DET_EPS = 1e-12
SIGN_PROBE = 50


def deriv_name(rho: str, j: int) -> str:
    """Name of the j-th time derivative of the production rate."""
    return rho if j == 0 else f"{rho}_d{j}"


@dataclass
class ProcessModel:
    name: str
    states: list[str]
    f1: list[E.Expr]
    f2_1: list[E.Expr]
    f2_2: list[E.Expr]
    h: E.Expr
    u_name: str
    u_min: float
    u_max: float
    rho_min: float
    rho_nom: float
    rho_max: float
    y_nom: float
    x_nom: dict[str, float]
    ranges: dict[str, tuple[float, float]]
    rho_name: str = "rho"
    ramp_box: list[tuple[float, float]] = field(default_factory=list)
    waste_heat: E.Expr | None = None
    parameters: dict[str, float] = field(default_factory=dict)
    source: dict | None = None  # raw file content, kept for serialization

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.f1) == len(self.f2_1) == len(self.f2_2) == n) or n == 0:
            raise ModelError("f1, f2_1 and f2_2 must each have one entry per state")
        if len(set(self.states)) != n:
            raise ModelError("duplicate state names")
        allowed = set(self.states) | {self.rho_name}
        for label, group in (("f1", self.f1), ("f2_1", self.f2_1), ("f2_2", self.f2_2)):
            for i, e in enumerate(group):
                extra = E.free_vars(e) - allowed
                if extra:
                    raise ModelError(f"{label}[{i}] uses undeclared symbols {sorted(extra)}")
        extra = E.free_vars(self.h) - set(self.states)
        if extra:
            raise ModelError(f"output uses undeclared symbols {sorted(extra)}")
        if not self.u_min < self.u_max:
            raise ModelError("u_min must be below u_max")
        if not self.rho_min < self.rho_nom < self.rho_max:
            raise ModelError("need rho_min < rho_nom < rho_max")
        for s in self.states:
            if s not in self.x_nom:
                raise ModelError(f"nominal value missing for state {s}")
            if s not in self.ranges:
                raise ModelError(f"range missing for state {s}")
            lo, hi = self.ranges[s]
            if not lo < hi:
                raise ModelError(f"empty range for state {s}")
        if self.waste_heat is not None:
            extra = E.free_vars(self.waste_heat) - allowed - {self.u_name}
            if extra:
                raise ModelError(f"waste heat uses undeclared symbols {sorted(extra)}")

    @property
    def n(self) -> int:
        return len(self.states)

    def rhs(self) -> list[E.Expr]:
        u = E.var(self.u_name)
        rho = E.var(self.rho_name)
        return [E.simplify(E.add(a, E.mul(b, u), E.mul(c, rho)))
                for a, b, c in zip(self.f1, self.f2_1, self.f2_2)]

    def phi_box(self, delta: int) -> list[tuple[float, float]]:
        box = [(self.rho_min, self.rho_max)]
        for j in range(1, delta):
            if j - 1 < len(self.ramp_box):
                box.append(tuple(self.ramp_box[j - 1]))
            else:
                w = 0.1 * self.rho_nom
                box.append((-w, w))
        return box[:delta]


def split_affine(rhs: Sequence[E.Expr], u: str, rho: str, ranges=None):
    """Split full right-hand sides into (f1, f2_1, f2_2), checking that each
    is affine in ``u`` and ``rho`` with coefficients free of both."""
    f1, g, p = [], [], []
    for i, e in enumerate(rhs):
        du = E.simplify(E.differentiate(e, u))
        dr = E.simplify(E.differentiate(e, rho))
        for coef, label in ((du, u), (dr, rho)):
            if {u, rho} & E.free_vars(coef):
                raise ModelError(f"right-hand side {i} is not affine in {u} and {rho}")
        base = E.simplify(E.substitute(e, {u: 0.0, rho: 0.0}))
        f1.append(base)
        g.append(du)
        p.append(dr)
    return f1, g, p


@dataclass
class RampingDerivation:
    model: ProcessModel
    r: int
    delta: int
    alphas: list[E.Expr]  # alpha_0 .. alpha_n (alpha_n without the nu term)
    beta_u: E.Expr
    beta_rho: E.Expr
    jac: list[list[E.Expr]]
    det_j: E.Expr
    phi_names: list[str]
    nu_name: str
    sign_u: int = 0
    sign_rho: int = 0
    nominal: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    _tapes: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def same_sign(self) -> bool:
        return self.sign_u * self.sign_rho > 0

    @property
    def variables(self) -> list[str]:
        return list(self.model.states) + list(self.phi_names)

    # compiled evaluators, built on first use ---------------------------------
    def _tape(self, key) -> Tape:
        t = self._tapes.get(key)
        if t is not None:
            return t
        m = self.model
        names = self.variables
        if key == "gamma":
            res = [E.add(self.alphas[0], E.const(-m.y_nom))] + list(self.alphas[1:self.n])
            flat = [e for row in self.jac for e in row]
            t = compile_exprs(res + flat, names)
        elif key == "limits":
            t = compile_exprs([self.alphas[self.n], self.beta_u, self.beta_rho], names)
        elif key == "rhs":
            t = compile_exprs(m.rhs(), list(m.states) + [m.rho_name, m.u_name])
        elif key == "waste_heat":
            if m.waste_heat is None:
                raise ModelError(f"model {m.name} has no waste heat expression")
            t = compile_exprs([m.waste_heat], list(m.states) + [m.rho_name, m.u_name])
        elif key == "chain":
            # alpha_0..alpha_{n-1} in states and all rho derivatives up to delta
            t = compile_exprs(list(self.alphas[: self.n]), names + [self.nu_name])
        else:
            raise KeyError(key)
        self._tapes[key] = t
        return t

    def phi_point(self, phi) -> np.ndarray:
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        if phi.shape != (self.delta,):
            raise ValueError(f"ramping state needs {self.delta} entries, got {phi.shape}")
        return phi

    def nominal_phi(self) -> np.ndarray:
        phi = np.zeros(self.delta)
        if self.delta:
            phi[0] = self.model.rho_nom
        return phi


def _chain(model: ProcessModel):
    """alpha chain with all rho derivatives as free symbols; also the input
    coefficient of each step."""
    x = model.states
    rho = model.rho_name
    n = model.n
    drift = [E.add(a, E.mul(c, E.var(rho))) for a, c in zip(model.f1, model.f2_2)]
    ranges = dict(model.ranges)
    ranges[rho] = (model.rho_min, model.rho_max)
    for j in range(1, n + 1):
        lo, hi = model.ramp_box[j - 1] if j - 1 < len(model.ramp_box) else (-0.1, 0.1)
        ranges[deriv_name(rho, j)] = (lo, hi)

    a = [E.simplify(model.h)]
    grads = [E.simplify(E.differentiate(a[0], s)) for s in x]
    if all(E.is_identically_zero(g, ranges) for g in grads):
        raise DegenerateOutput("output does not depend on any state")
    u_coef = []
    for k in range(n):
        ak = a[k]
        gx = [E.differentiate(ak, s) for s in x]
        g = E.simplify(E.add(*[E.mul(gi, fi) for gi, fi in zip(gx, model.f2_1)]))
        u_coef.append(g)
        terms = [E.mul(gi, fi) for gi, fi in zip(gx, drift)]
        for j in range(k + 1):
            dj = E.differentiate(ak, deriv_name(rho, j))
            if not (dj.kind == E.CONST and dj.value == 0.0):
                terms.append(E.mul(dj, E.var(deriv_name(rho, j + 1))))
        a.append(E.simplify(E.add(*terms)))
    return a, u_coef, ranges


def derive(model: ProcessModel, probe: int = SIGN_PROBE) -> RampingDerivation:
    """Relative degree, ramping order, alpha chain and Jacobian of a model."""
    n = model.n
    rho = model.rho_name
    a, u_coef, ranges = _chain(model)

    r = None
    for k in range(n):
        if not E.is_identically_zero(u_coef[k], ranges):
            r = k + 1
            break
    if r is None:
        raise RelativeDegreeMismatch(f"input does not appear within {n} differentiations")
    if r != n:
        raise RelativeDegreeMismatch(f"relative degree {r} differs from state dimension {n}")

    kstar = None
    for k in range(n + 1):
        if not E.is_identically_zero(E.differentiate(a[k], rho), ranges):
            kstar = k
            break
    if kstar is None:
        raise LinearizeError("production rate never influences the output")
    delta = n - kstar

    top = deriv_name(rho, delta)
    an_full = a[n]
    beta_rho = E.simplify(E.differentiate(an_full, top))
    if top in E.free_vars(beta_rho):
        raise LinearizeError(f"output derivative is not affine in {top}")
    alpha_n = E.simplify(E.substitute(an_full, {top: 0.0}))
    alphas = a[:n] + [alpha_n]
    beta_u = u_coef[n - 1]

    phi_names = [deriv_name(rho, j) for j in range(delta)]
    jac = [[E.simplify(E.differentiate(a[k], s)) for s in model.states] for k in range(n)]
    det = E.simplify(E.determinant(jac))

    d = RampingDerivation(
        model=model, r=r, delta=delta, alphas=alphas, beta_u=beta_u, beta_rho=beta_rho,
        jac=jac, det_j=det, phi_names=phi_names, nu_name=top,
    )
    _orient(d, probe)
    return d


def _orient(d: RampingDerivation, probe: int):
    m = d.model
    phi0 = d.nominal_phi()
    x0 = solve_gamma(d, phi0)
    vals = d._tape("limits").eval(np.concatenate([x0, phi0]))
    detv = evaluate_det(d, x0, phi0)
    d.sign_u = int(np.sign(vals[1]))
    d.sign_rho = int(np.sign(vals[2]))
    if d.sign_u == 0:
        raise SingularJacobian("input coefficient vanishes at the nominal point")
    d.nominal = {
        "phi": phi0.tolist(),
        "x": {s: float(v) for s, v in zip(m.states, x0)},
        "alpha_n": float(vals[0]),
        "beta_u": float(vals[1]),
        "beta_rho": float(vals[2]),
        "det_j": float(detv),
    }
    # sign probe over the ramping box
    counts = probe if d.delta <= 2 else max(4, int(round(probe ** (2.0 / d.delta))))
    axes = [np.linspace(lo, hi, counts) for lo, hi in m.phi_box(d.delta)]
    n_ok = n_fail = 0
    su = set()
    sr = set()
    guess = x0
    for point in itertools.product(*axes) if axes else [()]:
        phi = np.array(point, dtype=float)
        try:
            x = solve_gamma(d, phi, guess)
        except LinearizeError:
            n_fail += 1
            continue
        guess = x
        v = d._tape("limits").eval(np.concatenate([x, phi]))
        su.add(int(np.sign(v[1])))
        sr.add(int(np.sign(v[2])))
        n_ok += 1
    d.probe = {"points": n_ok, "failed": n_fail}
    if len(su) > 1 or len(sr) > 1 or (d.sign_rho != 0 and 0 in sr):
        raise SignFlip("input or production-rate coefficient changes sign over the ramping box")


def jacobian_det(d: RampingDerivation) -> tuple[E.Expr, float]:
    """Symbolic determinant of the Gamma Jacobian and its nominal value."""
    return d.det_j, float(d.nominal.get("det_j", evaluate_det(d, solve_gamma(d, d.nominal_phi()), d.nominal_phi())))


def evaluate_det(d: RampingDerivation, x, phi) -> float:
    t = d._tapes.get("det")
    if t is None:
        t = compile_exprs([d.det_j], d.variables)
        d._tapes["det"] = t
    return float(t.eval(np.concatenate([np.asarray(x, float), np.asarray(phi, float)]))[0])


def solve_gamma(d: RampingDerivation, phi, guess=None, check_range: bool = True) -> np.ndarray:
    """States implied by holding the output at its nominal value.

    Newton on ``alpha_k(x, phi) = (y_nom, 0, ..., 0)`` using the symbolic
    Jacobian; step halving on evaluation failures.
    """
    m = d.model
    n = m.n
    phi = d.phi_point(phi)
    tape = d._tape("gamma")
    if guess is None:
        x = np.array([m.x_nom[s] for s in m.states], dtype=float)
    else:
        x = np.array(guess, dtype=float)
    buf = np.empty(n + d.delta)
    buf[n:] = phi

    def at(xv):
        buf[:n] = xv
        out = tape.eval(buf)
        return out[:n], out[n:].reshape(n, n)

    try:
        res, J = at(x)
    except E.EvalDomainError as exc:
        raise NoConvergence(f"model not defined at the initial guess: {exc}") from None
    for it in range(NEWTON_MAXIT + 1):
        if np.max(np.abs(res)) <= NEWTON_TOL:
            break
        if it == NEWTON_MAXIT:
            raise NoConvergence(f"no convergence after {NEWTON_MAXIT} iterations (residual {np.max(np.abs(res)):.3e})")
        det = J[0, 0] if n == 1 else (J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0] if n == 2 else np.linalg.det(J))
        if not abs(det) >= DET_EPS:
            raise SingularJacobian(f"|det J| = {abs(det):.3e} at iterate {x.tolist()}")
        step = np.linalg.solve(J, res)
        lam = 1.0
        for _ in range(30):
            xn = x - lam * step
            try:
                rn, Jn = at(xn)
            except E.EvalDomainError:
                lam *= 0.5
                continue
            if np.all(np.isfinite(rn)):
                break
            lam *= 0.5
        else:
            raise NoConvergence("Newton step left the model domain")
        x, res, J = xn, rn, Jn
    if check_range:
        for s, v in zip(m.states, x):
            lo, hi = m.ranges[s]
            if not lo <= v <= hi:
                raise OutOfRange(f"state {s}={v:.6g} outside [{lo}, {hi}] at phi={phi.tolist()}")
    return x


def limit_terms(d: RampingDerivation, phi, guess=None):
    """(x, alpha_n, beta_u, beta_rho) at Gamma(phi)."""
    phi = d.phi_point(phi)
    x = solve_gamma(d, phi, guess)
    v = d._tape("limits").eval(np.concatenate([x, phi]))
    return x, float(v[0]), float(v[1]), float(v[2])


def _limits_from(d, an, bu, br):
    m = d.model
    if int(np.sign(bu)) != d.sign_u or int(np.sign(br)) != d.sign_rho:
        raise SignFlip("coefficient sign differs from the nominal orientation")
    lo_u = (-an - bu * m.u_max) / br
    hi_u = (-an - bu * m.u_min) / br
    return (lo_u, hi_u) if lo_u <= hi_u else (hi_u, lo_u)


def nu_limits_exact(d: RampingDerivation, phi, guess=None, return_state: bool = False):
    """Exact bounds on nu = rho^(delta) at ``phi`` implied by the input bounds."""
    x, an, bu, br = limit_terms(d, phi, guess)
    lo, hi = _limits_from(d, an, bu, br)
    if return_state:
        return lo, hi, x
    return lo, hi


def feedforward_u(d: RampingDerivation, phi, nu: float, guess=None, check: bool = True,
                  tol: float = 1e-9) -> float:
    """Input that keeps the output at its nominal value for ramp input ``nu``."""
    x, an, bu, br = limit_terms(d, phi, guess)
    if check:
        lo, hi = _limits_from(d, an, bu, br)
        slack = tol * max(1.0, abs(lo), abs(hi))
        if nu < lo - slack or nu > hi + slack:
            raise OutOfRampRange(f"nu={nu:.6g} outside [{lo:.6g}, {hi:.6g}]")
    return (-an - br * nu) / bu


def chain_values(d: RampingDerivation, x, rho_derivs) -> np.ndarray:
    """alpha_0..alpha_{n-1} at state ``x`` with rho and its derivatives
    ``rho_derivs = (rho, rho', ..., rho^(delta))``."""
    rd = np.asarray(rho_derivs, dtype=float)
    return d._tape("chain").eval(np.concatenate([np.asarray(x, float), rd[: d.delta + 1]]))


def report(d: RampingDerivation) -> str:
    """Plain-text derivation summary."""
    m = d.model
    lines = [f"model: {m.name}", f"r={d.r}, delta={d.delta}"]
    lines.append("ramping state: (" + ", ".join(d.phi_names) + f"), nu = {d.nu_name}")
    for k, a in enumerate(d.alphas):
        label = f"alpha_{k}"
        lines.append(f"{label} = {E.to_string(a)}")
    lines.append(f"beta_u = {E.to_string(d.beta_u)}")
    lines.append(f"beta_rho = {E.to_string(d.beta_rho)}")
    lines.append(f"det J = {E.to_string(d.det_j)}")
    nom = d.nominal
    lines.append("nominal point:")
    lines.append("  phi = " + ", ".join(f"{v:.10g}" for v in nom["phi"]))
    for s, v in nom["x"].items():
        lines.append(f"  {s} = {v:.10g}")
    for key in ("alpha_n", "beta_u", "beta_rho", "det_j"):
        lines.append(f"  {key} = {nom[key]:.10g}")
    status = "nonzero" if abs(nom["det_j"]) >= DET_EPS else "SINGULAR"
    lines.append(f"det J at nominal: {status}")
    orient = "same sign" if d.same_sign else "opposite sign"
    lines.append(f"beta_u/beta_rho orientation: {orient} (probe points {d.probe.get('points', 0)}, failed {d.probe.get('failed', 0)})")
    return "\n".join(lines) + "\n"


def solve_gamma_batch(d: RampingDerivation, PHI, guess=None, check_range: bool = True):
    """Vectorized Newton for many ramping states at once.

    Rows that fail in the batch pass are retried one at a time, warm-started
    from the nearest solved row. Returns ``(X, ok)``.
    """
    m = d.model
    n = m.n
    PHI = np.asarray(PHI, dtype=float).reshape(-1, d.delta)
    N = len(PHI)
    tape = d._tape("gamma")
    x0 = np.array([m.x_nom[s] for s in m.states], dtype=float) if guess is None else np.asarray(guess, float)
    X = np.tile(x0, (N, 1)) if x0.ndim == 1 else x0.copy()
    done = np.zeros(N, dtype=bool)
    active = np.ones(N, dtype=bool)
    Z = np.empty((N, n + d.delta))
    Z[:, n:] = PHI
    for _ in range(NEWTON_MAXIT + 1):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        Z[idx, :n] = X[idx]
        out = tape.eval_batch(Z[idx], raise_on_error=False)
        R = out[:, :n]
        J = out[:, n:].reshape(-1, n, n)
        bad = ~np.all(np.isfinite(out), axis=1)
        conv = ~bad & (np.max(np.abs(R), axis=1) <= NEWTON_TOL)
        done[idx[conv]] = True
        active[idx[conv | bad]] = False
        go = ~bad & ~conv
        if not go.any():
            break
        Jg = J[go]
        with np.errstate(all="ignore"):
            det = np.linalg.det(Jg)
        sing = ~(np.abs(det) >= DET_EPS)
        gi = idx[go]
        active[gi[sing]] = False
        keep = ~sing
        if keep.any():
            step = np.linalg.solve(Jg[keep], R[go][keep][..., None])[..., 0]
            X[gi[keep]] -= step
    if check_range:
        for k, s in enumerate(m.states):
            lo, hi = m.ranges[s]
            done &= (X[:, k] >= lo) & (X[:, k] <= hi)
    # sequential retry for stragglers
    failed = np.nonzero(~done)[0]
    if len(failed) and done.any():
        good = np.nonzero(done)[0]
        for i in failed:
            j = good[np.argmin(np.sum((PHI[good] - PHI[i]) ** 2, axis=1))]
            try:
                X[i] = solve_gamma(d, PHI[i], X[j], check_range)
                done[i] = True
            except LinearizeError:
                X[i] = np.nan
    else:
        X[~done] = np.nan
    return X, done


def limits_batch(d: RampingDerivation, PHI, guess=None):
    """Exact (nu_min, nu_max) and Gamma states for many ramping states.

    Returns ``(lo, hi, X, ok)``; rows that could not be solved are NaN.
    """
    PHI = np.asarray(PHI, dtype=float).reshape(-1, d.delta)
    X, ok = solve_gamma_batch(d, PHI, guess)
    m = d.model
    lo = np.full(len(PHI), np.nan)
    hi = np.full(len(PHI), np.nan)
    if ok.any():
        v = d._tape("limits").eval_batch(np.hstack([X[ok], PHI[ok]]), raise_on_error=False)
        an, bu, br = v[:, 0], v[:, 1], v[:, 2]
        if np.any(np.sign(bu) != d.sign_u) or np.any(np.sign(br) != d.sign_rho):
            raise SignFlip("coefficient sign differs from the nominal orientation on the grid")
        a = (-an - bu * m.u_max) / br
        b = (-an - bu * m.u_min) / br
        lo[ok] = np.minimum(a, b)
        hi[ok] = np.maximum(a, b)
    return lo, hi, X, ok
