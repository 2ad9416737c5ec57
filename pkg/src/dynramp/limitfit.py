"""Affine surrogates for the ramping limits and for the process energy demand.

Limits are sampled on a Cartesian grid over the ramping box, fitted by least
squares (normal equations) and then shifted to the safe side so that the
fitted band lies inside the exact one at every grid point.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linearize as L


class FitError(Exception):
    pass


class GridError(FitError, ValueError):
    pass


class RankDeficient(FitError):
    pass


class EmptyBand(FitError):
    pass


class TooManyFailures(FitError):
    pass


RCOND_MIN = 1e-12
MAX_FAIL_FRACTION = 0.01


def affine_eval(coef, X) -> np.ndarray:
    """``coef[0] + sum_j coef[j+1] * X[:, j]`` in a fixed order.

    All conservativeness checks go through this function so that the
    arithmetic is identical everywhere.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.full(X.shape[0], float(coef[0]))
    for j in range(X.shape[1]):
        out = out + float(coef[j + 1]) * X[:, j]
    return out


def grid_axes(box: Sequence[tuple[float, float]], counts) -> list[np.ndarray]:
    if np.isscalar(counts):
        counts = [int(counts)] * len(box)
    counts = [int(c) for c in counts]
    if len(counts) != len(box):
        raise GridError(f"need {len(box)} grid counts, got {len(counts)}")
    for c in counts:
        if c < 2:
            raise GridError("grid needs at least 2 points per axis")
    return [np.linspace(lo, hi, c) for (lo, hi), c in zip(box, counts)]


def cartesian(axes: Sequence[np.ndarray]) -> np.ndarray:
    if not axes:
        return np.zeros((1, 0))
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, len(axes))


@dataclass
class SampleTable:
    phi: np.ndarray  # (N, delta)
    nu_min: np.ndarray
    nu_max: np.ndarray
    x: np.ndarray  # Gamma states, (N, n)
    ok: np.ndarray  # bool
    counts: tuple
    box: list

    @property
    def n_failed(self) -> int:
        return int((~self.ok).sum())

    def __len__(self):
        return len(self.phi)

    def valid(self):
        k = self.ok
        return self.phi[k], self.nu_min[k], self.nu_max[k]

    def rows(self):
        for i in range(len(self.phi)):
            yield list(self.phi[i]) + [self.nu_min[i], self.nu_max[i], int(self.ok[i])]


def sample_limits(d: L.RampingDerivation, box=None, counts=100) -> SampleTable:
    """Exact limits on a Cartesian grid over the ramping box."""
    if d.delta == 0:
        raise GridError("no ramping state to sample when delta is 0")
    box = list(box) if box is not None else d.model.phi_box(d.delta)
    axes = grid_axes(box, counts)
    PHI = cartesian(axes)
    lo, hi, X, ok = L.limits_batch(d, PHI)
    bad = int((~ok).sum())
    if bad > MAX_FAIL_FRACTION * len(PHI):
        raise TooManyFailures(f"{bad} of {len(PHI)} grid points could not be solved")
    return SampleTable(PHI, lo, hi, X, ok, tuple(len(a) for a in axes), box)


@dataclass
class FitResult:
    coef: np.ndarray
    rcond: float
    max_abs_residual: float
    mean_abs_residual: float
    n: int


def fit_affine(X, y) -> FitResult:
    """Ordinary least squares ``y ~ c0 + X c`` via the normal equations."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and np.ndim(y) and len(y) != 1:
        X = X.T
    y = np.asarray(y, dtype=float)
    if X.shape[0] != len(y):
        raise FitError("sample count mismatch")
    A = np.hstack([np.ones((len(y), 1)), X])
    if len(y) < A.shape[1]:
        raise RankDeficient(f"need at least {A.shape[1]} samples, got {len(y)}")
    G = A.T @ A
    with np.errstate(all="ignore"):
        rcond = 1.0 / np.linalg.cond(G)
    if not rcond >= RCOND_MIN:
        raise RankDeficient(f"normal matrix reciprocal condition {rcond:.3e} below {RCOND_MIN}")
    coef = np.linalg.solve(G, A.T @ y)
    res = affine_eval(coef, X) - y
    return FitResult(coef, float(rcond), float(np.max(np.abs(res))), float(np.mean(np.abs(res))), len(y))


def conservative_shift(coef, X, exact, side: str):
    """Move the intercept so the affine function is on the safe side of
    ``exact`` at every row of ``X``. Returns (coef, shift, max_violation).

    ``side='upper'`` requires fit <= exact, ``'lower'`` requires fit >= exact.
    """
    coef = np.array(coef, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    exact = np.asarray(exact, dtype=float)
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")
    sgn = 1.0 if side == "upper" else -1.0

    def violation(c):
        return sgn * (affine_eval(c, X) - exact)

    vmax = float(np.max(violation(coef)))
    shift = max(vmax, 0.0)
    if shift > 0.0:
        coef[0] -= sgn * shift
        # rounding in the shifted sum can leave a residual violation of a few ulps
        for _ in range(64):
            v = float(np.max(violation(coef)))
            if v <= 0.0:
                break
            coef[0] = np.nextafter(coef[0], -sgn * np.inf)
            coef[0] -= sgn * v
        else:  # pragma: no cover
            raise FitError("could not remove rounding violations")
    return coef, shift, vmax


def interpolation_margin(values, counts) -> float:
    """Bound on how far a smooth function sampled on a Cartesian grid can
    exceed its cell-wise multilinear interpolant: sum over axes of the
    largest second difference divided by 8. ``values`` is in the row order
    of :func:`cartesian`; NaN marks failed points."""
    V = np.asarray(values, dtype=float).reshape(tuple(counts))
    m = 0.0
    for ax in range(V.ndim):
        if V.shape[ax] < 3:
            continue
        d2 = np.diff(V, n=2, axis=ax)
        d2 = d2[np.isfinite(d2)]
        if d2.size:
            m += float(np.max(np.abs(d2))) / 8.0
    return m


@dataclass
class AffineLimitSet:
    delta: int
    phi_names: list[str]
    nu_min: np.ndarray  # intercept, then one slope per phi component
    nu_max: np.ndarray
    box: list
    counts: tuple
    violation_min: float  # max violation before shifting
    violation_max: float
    shift_min: float  # total intercept shift, interpolation margin included
    shift_max: float
    src: tuple  # constant limits: (max of exact nu_min, min of exact nu_max)
    n_samples: int
    n_failed: int
    rcond: float
    model: str = ""

    def lower(self, PHI) -> np.ndarray:
        return affine_eval(self.nu_min, np.asarray(PHI, float).reshape(-1, self.delta))

    def upper(self, PHI) -> np.ndarray:
        return affine_eval(self.nu_max, np.asarray(PHI, float).reshape(-1, self.delta))

    @property
    def src_width(self) -> float:
        return self.src[1] - self.src[0]


def fit_limits(d: L.RampingDerivation, box=None, counts=100, samples: SampleTable | None = None,
               margin: bool = True) -> AffineLimitSet:
    """Sample, fit and shift both limit hyperplanes.

    The shift makes the planes safe at every grid point; with ``margin``
    they are moved further by :func:`interpolation_margin` so they also
    stay safe between grid points.
    """
    st = samples if samples is not None else sample_limits(d, box, counts)
    PHI, lo, hi = st.valid()
    fmin = fit_affine(PHI, lo)
    fmax = fit_affine(PHI, hi)
    cmin, smin, vmin = conservative_shift(fmin.coef, PHI, lo, "lower")
    cmax, smax, vmax = conservative_shift(fmax.coef, PHI, hi, "upper")
    if margin:
        # the exact limits curve between grid points; keep clear of that too
        lo_all = np.where(st.ok, st.nu_min, np.nan)
        hi_all = np.where(st.ok, st.nu_max, np.nan)
        mmin = interpolation_margin(lo_all, st.counts)
        mmax = interpolation_margin(hi_all, st.counts)
        cmin[0] += mmin
        cmax[0] -= mmax
        smin += mmin
        smax += mmax
    band = affine_eval(cmax, PHI) - affine_eval(cmin, PHI)
    if np.any(band <= 0.0):
        raise EmptyBand(f"shifted limits cross at {int((band <= 0).sum())} grid points")
    return AffineLimitSet(
        delta=d.delta,
        phi_names=list(d.phi_names),
        nu_min=cmin,
        nu_max=cmax,
        box=[tuple(map(float, b)) for b in st.box],
        counts=tuple(st.counts),
        violation_min=vmin,
        violation_max=vmax,
        shift_min=smin,
        shift_max=smax,
        src=(float(np.max(lo)), float(np.min(hi))),
        n_samples=len(st),
        n_failed=st.n_failed,
        rcond=min(fmin.rcond, fmax.rcond),
        model=d.model.name,
    )


def verify_limits(d: L.RampingDerivation, limits: AffineLimitSet, refine: int = 4):
    """Re-check a fitted band on a grid ``refine`` times denser per axis.

    Returns a dict with the worst violation on each side, the band width at
    the nominal point, and whether the band stayed nonempty.
    """
    counts = [refine * (c - 1) + 1 for c in limits.counts]
    axes = grid_axes(limits.box, counts)
    PHI = cartesian(axes)
    lo, hi, _, ok = L.limits_batch(d, PHI)
    PHI, lo, hi = PHI[ok], lo[ok], hi[ok]
    flo = limits.lower(PHI)
    fhi = limits.upper(PHI)
    width = float(np.median(hi - lo))
    return {
        "points": int(len(PHI)),
        "failed": int((~ok).sum()),
        "violation_lower": float(max(0.0, np.max(lo - flo))),
        "violation_upper": float(max(0.0, np.max(fhi - hi))),
        "band_width": width,
        "nonempty": bool(np.all(fhi > flo)),
    }


@dataclass
class DemandSurrogate:
    """Affine energy demand per energy form over (phi, nu)."""

    delta: int
    variables: list[str]
    coef: dict  # energy form -> array of delta + 2 coefficients
    nominal: dict  # energy form -> nominal demand (phi nominal, nu = 0)
    avg_abs_dev: dict  # energy form -> mean |fit - exact| / nominal
    max_abs_dev: dict
    n_samples: int
    n_skipped: int
    counts: tuple
    nu_range: tuple
    box: list
    model: str = ""

    def evaluate(self, form: str, Z) -> np.ndarray:
        return affine_eval(self.coef[form], np.asarray(Z, float).reshape(-1, self.delta + 1))


def nu_sampling_range(limits: AffineLimitSet) -> tuple[float, float]:
    """Extremes of the shifted limits over the box (attained at corners)."""
    corners = cartesian([np.array(b, dtype=float) for b in limits.box])
    return float(np.min(limits.lower(corners))), float(np.max(limits.upper(corners)))


def demand_samples(d: L.RampingDerivation, limits: AffineLimitSet, counts=11, box=None):
    """Exact waste heat on the (phi, nu) grid; rows outside the exact limits
    are dropped. Returns (Z, q, skipped)."""
    box = list(box) if box is not None else list(limits.box)
    nlo, nhi = nu_sampling_range(limits)
    axes = grid_axes(box + [(nlo, nhi)], counts)
    Z = cartesian(axes)
    PHI = Z[:, : d.delta]
    nu = Z[:, d.delta]
    lo, hi, X, ok = L.limits_batch(d, PHI)
    slack = 1e-12 * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    inside = ok & (nu >= lo - slack) & (nu <= hi + slack)
    v = d._tape("limits").eval_batch(np.hstack([X[inside], PHI[inside]]))
    u = (-v[:, 0] - v[:, 2] * nu[inside]) / v[:, 1]
    q = d._tape("waste_heat").eval_batch(np.column_stack([X[inside], PHI[inside, :1], u]))[:, 0]
    return Z[inside], q, int((~inside).sum())


def nominal_waste_heat(d: L.RampingDerivation) -> float:
    phi = d.nominal_phi()
    x = L.solve_gamma(d, phi)
    u = L.feedforward_u(d, phi, 0.0, guess=x)
    return float(d._tape("waste_heat").eval(np.concatenate([x, [d.model.rho_nom, u]]))[0])


def fit_demand(d: L.RampingDerivation, limits: AffineLimitSet, counts=11, box=None,
               form: str = "heat") -> DemandSurrogate:
    """Affine waste-heat surrogate and its average deviation (fraction of the
    nominal waste heat)."""
    if d.delta == 0:
        raise GridError("demand fit needs delta >= 1")
    Z, q, skipped = demand_samples(d, limits, counts, box)
    fr = fit_affine(Z, q)
    qn = nominal_waste_heat(d)
    dev = np.abs(affine_eval(fr.coef, Z) - q)
    nu_rng = nu_sampling_range(limits)
    ax = grid_axes(list(box or limits.box) + [nu_rng], counts)
    return DemandSurrogate(
        delta=d.delta,
        variables=list(d.phi_names) + [d.nu_name],
        coef={form: fr.coef},
        nominal={form: qn},
        avg_abs_dev={form: float(np.mean(dev) / abs(qn))},
        max_abs_dev={form: float(np.max(dev) / abs(qn))},
        n_samples=int(len(q)),
        n_skipped=skipped,
        counts=tuple(len(a) for a in ax),
        nu_range=nu_rng,
        box=[tuple(map(float, b)) for b in (box or limits.box)],
        model=d.model.name,
    )
