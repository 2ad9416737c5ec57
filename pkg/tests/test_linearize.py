import math

import numpy as np
import pytest

from dynramp import expr as E
from dynramp import kernels
from dynramp import linearize as L

from conftest import derivation, toy


def cstr1_T(rho, c=0.1367, V=20.0, k=300.0, N=5.0):
    return N / math.log(V * c * k / (rho * (1 - c)))


class TestDerive:
    def test_cstr1_orders(self, cstr1):
        assert (cstr1.r, cstr1.delta) == (2, 1)
        assert cstr1.phi_names == ["rho"]

    def test_cstr2_orders(self, cstr2):
        assert (cstr2.r, cstr2.delta) == (3, 2)
        assert cstr2.phi_names == ["rho", "rho_d1"]

    def test_toy_without_ramping_state(self):
        d = L.derive(toy(["u + rho"]))
        assert (d.r, d.delta) == (1, 0)
        assert d.phi_names == [] and d.nu_name == "rho"

    def test_uncontrollable_output(self):
        m = toy(["-x + rho", "u"], output="x", states=("x", "z"))
        with pytest.raises(L.RelativeDegreeMismatch):
            L.derive(m)

    def test_relative_degree_below_dimension(self):
        m = toy(["u - x", "x - z + rho"], output="x", states=("x", "z"))
        with pytest.raises(L.RelativeDegreeMismatch):
            L.derive(m)

    def test_output_without_states(self):
        m = toy(["u + rho"], output="2")
        with pytest.raises(L.DegenerateOutput):
            L.derive(m)

    def test_betas_match_definition(self, cstr1):
        # beta_rho = d alpha_1 / d rho, beta_u = (d alpha_1 / d x) f2_1
        m = cstr1.model
        a1 = cstr1.alphas[1]
        br = E.differentiate(a1, "rho")
        bu = E.add(*[E.mul(E.differentiate(a1, s), g) for s, g in zip(m.states, m.f2_1)])
        rng = np.random.default_rng(0)
        for _ in range(20):
            b = {"c": rng.uniform(0.05, 0.4), "T": rng.uniform(0.5, 1.0), "rho": rng.uniform(0.8, 1.2)}
            assert E.evaluate(cstr1.beta_rho, b) == pytest.approx(E.evaluate(br, b), rel=1e-13)
            assert E.evaluate(cstr1.beta_u, b) == pytest.approx(E.evaluate(bu, b), rel=1e-13)

    def test_cstr1_printed_coefficients(self, cstr1):
        p = cstr1.model.parameters
        rng = np.random.default_rng(1)
        for _ in range(20):
            c, T, rho = rng.uniform(0.05, 0.4), rng.uniform(0.5, 1.0), rng.uniform(0.8, 1.2)
            b = {"c": c, "T": T, "rho": rho}
            e = math.exp(-p["N"] / T)
            bu = c * p["k"] * p["N"] * e * p["alpha_c"] * (T - p["T_c"]) / T ** 2
            assert E.evaluate(cstr1.beta_u, b) == pytest.approx(bu, rel=1e-12)
            assert E.evaluate(cstr1.beta_rho, b) == pytest.approx((1 - c) / p["V"], rel=1e-12)

    def test_report(self, cstr1, cstr2):
        assert "r=2, delta=1" in L.report(cstr1)
        assert "r=3, delta=2" in L.report(cstr2)


class TestJacobian:
    def test_cstr1_determinant(self, cstr1):
        p = cstr1.model.parameters
        det, nominal = L.jacobian_det(cstr1)
        rng = np.random.default_rng(2)
        for _ in range(20):
            c, T, rho = rng.uniform(0.05, 0.4), rng.uniform(0.5, 1.0), rng.uniform(0.8, 1.2)
            want = -c * p["k"] * p["N"] * math.exp(-p["N"] / T) / T ** 2
            assert E.evaluate(det, {"c": c, "T": T, "rho": rho}) == pytest.approx(want, rel=1e-12)
        assert nominal < 0

    def test_cstr2_determinant_nonzero(self, cstr2):
        _, nominal = L.jacobian_det(cstr2)
        assert abs(nominal) > 1e-12

    def test_singular_jacobian_is_reported(self):
        d = L.derive(toy(["u + rho"], output="x^3", x_nom={"x": 1.0}))
        assert d.delta == 0
        with pytest.raises(L.SingularJacobian):
            L.solve_gamma(d, [], guess=[0.0])


class TestGamma:
    @pytest.mark.parametrize("rho", [0.8, 1.0, 1.2])
    def test_cstr1_closed_form(self, cstr1, rho):
        x = L.solve_gamma(cstr1, [rho])
        assert x[0] == pytest.approx(0.1367, abs=1e-12)
        assert x[1] == pytest.approx(cstr1_T(rho), abs=1e-10)

    def test_cstr1_reference_temperatures(self, cstr1):
        assert L.solve_gamma(cstr1, [1.0])[1] == pytest.approx(0.7292, abs=1e-4)
        assert L.solve_gamma(cstr1, [0.8])[1] == pytest.approx(0.7062, abs=1e-4)

    def test_batch_matches_scalar(self, cstr2):
        PHI = np.array([[0.8, -0.2], [1.0, 0.0], [1.2, 0.1], [0.9, 0.25]])
        X, ok = L.solve_gamma_batch(cstr2, PHI)
        assert ok.all()
        for phi, x in zip(PHI, X):
            assert np.allclose(x, L.solve_gamma(cstr2, phi), rtol=1e-10, atol=1e-12)

    def test_wrong_phi_length(self, cstr2):
        with pytest.raises(ValueError):
            L.solve_gamma(cstr2, [1.0])

    def test_out_of_range(self, cstr1):
        with pytest.raises(L.OutOfRange):
            L.solve_gamma(cstr1, [20.0])


class TestLimits:
    def test_cstr1_reference_values(self, cstr1):
        lo, hi = L.nu_limits_exact(cstr1, [1.0])
        assert hi == pytest.approx(0.249, abs=1e-3)
        assert lo == pytest.approx(-0.198, abs=1e-3)
        assert L.nu_limits_exact(cstr1, [0.8])[1] == pytest.approx(0.177, abs=1e-3)
        assert L.nu_limits_exact(cstr1, [1.2])[1] == pytest.approx(0.326, abs=1e-3)

    def test_cstr1_independent_oracle(self, cstr1):
        # nu limits from the input bounds, with Gamma in closed form and
        # alpha_2 = -A [(T_f - T) rho/V + c k e^{-N/T}] since alpha_1 = 0
        p = cstr1.model.parameters
        c = 0.1367
        for rho in np.linspace(0.8, 1.2, 9):
            T = cstr1_T(rho)
            e = math.exp(-p["N"] / T)
            A = c * p["k"] * p["N"] * e / T ** 2
            a2 = -A * ((p["T_f"] - T) * rho / p["V"] + c * p["k"] * e)
            bu = A * p["alpha_c"] * (T - p["T_c"])
            br = (1 - c) / p["V"]
            lo, hi = L.nu_limits_exact(cstr1, [rho])
            assert hi == pytest.approx(-a2 / br, rel=1e-9)
            assert lo == pytest.approx((-a2 - bu * 700.0) / br, rel=1e-9)

    def test_batch_matches_scalar(self, cstr1):
        PHI = np.linspace(0.8, 1.2, 7)[:, None]
        lo, hi, _, ok = L.limits_batch(cstr1, PHI)
        assert ok.all()
        for p, a, b in zip(PHI, lo, hi):
            a2, b2 = L.nu_limits_exact(cstr1, p)
            assert a == pytest.approx(a2, rel=1e-12) and b == pytest.approx(b2, rel=1e-12)


class TestFeedforward:
    def test_steady_coolant_flow(self, cstr1):
        assert L.feedforward_u(cstr1, [1.0], 0.0) == pytest.approx(390.0, abs=0.5)

    def test_limits_map_to_input_bounds(self, cstr1):
        lo, hi = L.nu_limits_exact(cstr1, [1.05])
        assert L.feedforward_u(cstr1, [1.05], hi) == pytest.approx(0.0, abs=1e-9)
        assert L.feedforward_u(cstr1, [1.05], lo) == pytest.approx(700.0, rel=1e-12)

    def test_outside_limits(self, cstr1):
        lo, hi = L.nu_limits_exact(cstr1, [1.0])
        with pytest.raises(L.OutOfRampRange):
            L.feedforward_u(cstr1, [1.0], hi + 1e-3)
        u = L.feedforward_u(cstr1, [1.0], hi + 1e-3, check=False)
        assert u < 0

    @pytest.mark.parametrize("name", ["cstr1", "cstr2"])
    def test_steady_state_fixed_point(self, name):
        d = derivation(name)
        m = d.model
        rhs = d._tape("rhs")
        for rho in (0.85, 1.0, 1.15):
            phi = np.zeros(d.delta)
            phi[0] = rho
            x = L.solve_gamma(d, phi)
            u = L.feedforward_u(d, phi, 0.0)
            assert m.u_min <= u <= m.u_max
            chain = L.chain_values(d, x, np.concatenate([phi, [0.0]]))
            assert np.max(np.abs(chain[1:])) <= 1e-10
            assert np.max(np.abs(rhs.eval(np.concatenate([x, [rho, u]])))) <= 1e-9


@pytest.mark.parametrize("name", ["cstr1", "cstr2"])
def test_chain_matches_simulated_output_derivatives(name):
    """Finite differences of y along an RK4 run with a constant, non-tracking
    input agree with alpha_1..alpha_{n-1} at the simulated state."""
    d = derivation(name)
    m = d.model
    dt, N = 1e-3, 400
    x0 = L.solve_gamma(d, d.nominal_phi())
    u0 = 0.9 * L.feedforward_u(d, d.nominal_phi(), 0.0)
    rho = np.full((N, 3), 1.0)
    u = np.full((N, 3), u0)
    lo = np.array([m.ranges[s][0] for s in m.states])
    hi = np.array([m.ranges[s][1] for s in m.states])
    X, status, _ = kernels.rk4_integrate(d._tape("rhs"), x0, rho, u, dt, lo, hi)
    assert status == 0
    y = X[:, 0]
    rd = np.zeros(d.delta + 1)
    rd[0] = 1.0
    for i in (100, 250, 350):
        a = L.chain_values(d, X[i], rd)
        d1 = (y[i + 1] - y[i - 1]) / (2 * dt)
        assert d1 == pytest.approx(a[1], rel=1e-5, abs=1e-9)
        if m.n > 2:
            d2 = (y[i + 1] - 2 * y[i] + y[i - 1]) / dt ** 2
            assert d2 == pytest.approx(a[2], rel=1e-4, abs=1e-6)


def test_cstr1_orientation_on_box(cstr1):
    rng = np.random.default_rng(3)
    n = 10_000
    P = np.column_stack([rng.uniform(0.01, 0.5, n), rng.uniform(0.4, 1.2, n), rng.uniform(0.8, 1.2, n)])
    v = cstr1._tape("limits").eval_batch(P)
    assert np.all(v[:, 1] > 0) and np.all(v[:, 2] > 0)
    assert cstr1.same_sign


def test_first_order_step_breaks_second_order_process(cstr2):
    """A step in rho' cannot be followed with a held input when delta = 2."""
    m = cstr2.model
    dt, N = 1e-3, 5
    x0 = L.solve_gamma(cstr2, [1.0, 0.0])
    u0 = L.feedforward_u(cstr2, [1.0, 0.0], 0.0)
    lo = np.array([m.ranges[s][0] for s in m.states])
    hi = np.array([m.ranges[s][1] for s in m.states])
    t = dt * (np.arange(N)[:, None] + np.array([0.0, 0.5, 1.0]))
    u = np.full((N, 3), u0)
    held, _, _ = kernels.rk4_integrate(cstr2._tape("rhs"), x0, np.full((N, 3), 1.0), u, dt, lo, hi)
    ramp, _, _ = kernels.rk4_integrate(cstr2._tape("rhs"), x0, 1.0 + 0.1 * t, u, dt, lo, hi)
    assert np.max(np.abs(held[:, 0] - m.y_nom)) < 1e-11
    assert abs(ramp[1, 0] - m.y_nom) > 1e-10
