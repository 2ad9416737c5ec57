import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynramp import _pykernels as py
from dynramp import expr as E
from dynramp import kernels
from dynramp.tape import compile_exprs

from dynramp import linearize as L

from conftest import derivation, model

pytestmark = pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")


@pytest.fixture(scope="module")
def cy():
    from dynramp import _kernels
    return _kernels


TEXTS = ["x*y - exp(-2/y)", "ln(x) + y^2.5", "(x + 1)^3 / (y - 1)", "-x^2 + y^-1"]
TAPE = compile_exprs([E.parse(t) for t in TEXTS], ["x", "y"])


def test_batch_parity(cy, rng):
    X = np.ascontiguousarray(rng.uniform(-2, 3, (500, 2)))
    X[:5, 1] = 1.0  # division by zero
    X[5:10, 0] = 0.0  # log of zero
    a, bad_a = py.tape_eval_batch(TAPE, X)
    b, bad_b = cy.tape_eval_batch(TAPE, X)
    assert np.array_equal(bad_a, bad_b) and bad_a[:10].all()
    assert np.allclose(a[~bad_a], b[~bad_b], rtol=1e-14, atol=0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_scalar_parity(x, y):
    from dynramp import _kernels as cy
    fa, fb = py.make_scalar_evaluator(TAPE), cy.make_scalar_evaluator(TAPE)
    oa, ob = np.empty(4), np.empty(4)
    z = np.array([x, y])
    sa, sb = fa(z, oa), fb(z, ob)
    assert sa == sb
    if sa == 0:
        assert np.allclose(oa, ob, rtol=1e-14, atol=0)


def test_failure_index(cy):
    t = compile_exprs([E.parse("1/x")], ["x"])
    out = np.empty(1)
    assert py.make_scalar_evaluator(t)(np.array([0.0]), out) == cy.make_scalar_evaluator(t)(np.array([0.0]), out) > 0


@pytest.mark.parametrize("seed", range(5))
def test_pricing_parity(cy, seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(40)
    status = rng.integers(0, 4, 40).astype(np.int8)
    w = rng.uniform(0.5, 2.0, 40)
    assert py.price_dantzig(d, status, 1e-9) == cy.price_dantzig(d, status, 1e-9)
    assert py.price_weighted(d, w, status, 1e-9) == cy.price_weighted(d, w, status, 1e-9)
    assert py.price_dantzig(np.zeros(5), np.zeros(5, np.int8), 1e-9) == -1


@pytest.mark.parametrize("seed", range(5))
def test_ratio_parity(cy, seed):
    rng = np.random.default_rng(seed)
    lb = rng.uniform(-1, 0, 30)
    ub = lb + rng.uniform(0.5, 2, 30)
    xb = lb + rng.uniform(0, 1, 30) * (ub - lb)
    alpha = rng.standard_normal(30)
    ta, ra, ua = py.ratio_test_primal(xb, lb, ub, alpha, 1e-9)
    tb, rb, ub_ = cy.ratio_test_primal(xb, lb, ub, alpha, 1e-9)
    assert (ra, ua) == (rb, ub_) and ta == pytest.approx(tb, rel=1e-14)
    d = np.abs(rng.standard_normal(30))
    status = rng.integers(0, 3, 30).astype(np.int8)
    d[status == 1] *= -1
    for up in (False, True):
        assert py.ratio_test_dual(d, alpha, status, up, 1e-9) == cy.ratio_test_dual(d, alpha, status, up, 1e-9)


def test_unbounded_ratio(cy):
    z = np.zeros(3)
    assert py.ratio_test_primal(z, z - 1, z + np.inf, -np.ones(3), 1e-9)[1] == -1
    assert cy.ratio_test_primal(z, z - 1, z + np.inf, -np.ones(3), 1e-9)[1] == -1


def test_rk4_parity(cy):
    d = derivation("cstr2")
    m = model("cstr2")
    x0 = 1.02 * L.solve_gamma(d, d.nominal_phi())
    u0 = L.feedforward_u(d, d.nominal_phi(), 0.0)
    n = 500
    lo = np.array([m.ranges[s][0] for s in m.states])
    hi = np.array([m.ranges[s][1] for s in m.states])
    rho = np.ascontiguousarray(np.linspace(1.0, 1.1, 3 * n).reshape(n, 3))
    u = np.full((n, 3), u0)
    tape = copy.copy(d._tape("rhs"))
    tape._scalar = py.make_scalar_evaluator(tape)
    Xa, sa, wa = py.rk4_integrate(tape, x0, rho, u, 0.002, lo, hi)
    Xb, sb, wb = cy.rk4_integrate(tape, x0, rho, u, 0.002, lo, hi)
    assert (sa, wa) == (sb, wb) == (0, -1)
    assert np.allclose(Xa, Xb, rtol=1e-12, atol=0)
    # range violation is reported at the same grid point
    k = int(np.argmax(np.abs(Xa[:, 0] - x0[0]))) // 2
    hi2, lo2 = hi.copy(), lo.copy()
    if Xa[k, 0] > x0[0]:
        hi2[0] = Xa[k, 0] - 1e-12
    else:
        lo2[0] = Xa[k, 0] + 1e-12
    ra = py.rk4_integrate(tape, x0, rho, u, 0.002, lo2, hi2)
    rb = cy.rk4_integrate(tape, x0, rho, u, 0.002, lo2, hi2)
    assert ra[1] == 2 and ra[1:] == rb[1:]


def test_backend_switch():
    before = kernels.BACKEND
    try:
        kernels.use_backend("python")
        assert kernels.BACKEND == "python"
        kernels.use_backend("cython")
        assert kernels.BACKEND == "cython"
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(before)
