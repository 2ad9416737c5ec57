import functools
import time

import numpy as np
import pytest

from dynramp import io as dio
from dynramp import linearize as L
from dynramp import limitfit as F
from dynramp import scheduler as S
from dynramp.lpmilp import solve_milp


def toy(rhs, output="x", states=("x",), **extra):
    data = {
        "format": "dynramp-model/1",
        "name": "toy",
        "states": list(states),
        "input": "u",
        "production_rate": "rho",
        "rhs": dict(zip(states, rhs)),
        "output": {"expr": output, "nominal": extra.pop("y_nom", 1.0)},
        "input_bounds": {"u_min_per_h": -10, "u_max_per_h": 10},
        "production_rate_bounds": {"min_per_h": 0.5, "nom_per_h": 1.0, "max_per_h": 1.5},
        "nominal_state": extra.pop("x_nom", {s: 1.0 for s in states}),
        "state_ranges": {s: [-5, 5] for s in states},
    }
    data.update(extra)
    return dio.model_from_dict(data)


@functools.lru_cache(maxsize=None)
def model(name):
    return dio.load_model(dio.shipped(f"{name}.yaml"))


@functools.lru_cache(maxsize=None)
def derivation(name):
    return L.derive(model(name))


@functools.lru_cache(maxsize=None)
def limits(name):
    return F.fit_limits(derivation(name))


@functools.lru_cache(maxsize=None)
def surrogate(name):
    return F.fit_demand(derivation(name), limits(name))


def site():
    system = S.load_system(dio.shipped("system.yaml"))
    prices = S.load_prices(dio.shipped("prices_synthetic.csv"))
    demands = S.load_demands(dio.shipped("demands_synthetic.csv"))
    return system, prices, demands


def processes():
    return [S.load_process(dio.shipped(f"{nm}.process.yaml")) for nm in ("cstr1", "cstr2")]


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def p2(mode, interior=True):
    """Day-ahead problem on the shipped site, solved once per mode."""
    system, prices, demands = site()
    procs = processes()
    src = {p.name: S.interior_src(p.limits) for p in procs} if (mode == S.SRC and interior) else None
    prob = S.build_p2(system, procs, prices, demands, mode=mode, src=src)
    sol, wall = timed(solve_milp, prob, log=False)
    return prob, sol, wall


@pytest.fixture(scope="session")
def cstr1():
    return derivation("cstr1")


@pytest.fixture(scope="session")
def cstr2():
    return derivation("cstr2")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in lines:
            terminalreporter.write_line(ln)
