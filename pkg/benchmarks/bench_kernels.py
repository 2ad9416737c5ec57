"""Compare the compiled kernels with the numpy/Python fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--lp]

Each kernel runs on the same inputs under both backends; results are
checked for agreement before timings are printed.
"""
import argparse
import time

import numpy as np

from dynramp import io as dio
from dynramp import kernels
from dynramp import linearize as L
from dynramp import simulate as M


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def fresh(model_file):
    # tapes pick their scalar evaluator when built, so rebuild per backend
    return L.derive(dio.load_model(dio.shipped(model_file)))


def cases():
    m = dio.load_model(dio.shipped("cstr2.yaml"))

    def tape_batch():
        rng = np.random.default_rng(0)
        d = fresh("cstr2.yaml")
        t = d._tape("gamma")
        X = np.column_stack([rng.uniform(*m.ranges[s], 20000) for s in m.states]
                            + [rng.uniform(0.8, 1.2, 20000), rng.uniform(-0.1, 0.1, 20000)])
        return lambda: t.eval_batch(X, raise_on_error=False)

    def scalar_eval():
        d = fresh("cstr2.yaml")
        t = d._tape("rhs")
        x = np.array([m.x_nom[s] for s in m.states] + [1.0, 500.0])
        out = np.empty(t.n_outputs)

        def run():
            for _ in range(20000):
                t._scalar(x, out)
            return out.copy()
        return run

    def rk4():
        d = fresh("cstr1.yaml")
        sig = M.ChainSignal(1, 1.0, [1.0], [0.1, -0.1, 0.05, 0.0])
        return lambda: M.simulate(d.model, d, sig, 1e-3).X

    def pricing():
        rng = np.random.default_rng(0)
        d = rng.normal(size=50000)
        w = rng.uniform(0.5, 2.0, 50000)
        st = rng.integers(0, 4, 50000).astype(np.int8)
        return lambda: np.array([kernels.price_weighted(d, w, st, 1e-9) for _ in range(200)])

    def ratio():
        rng = np.random.default_rng(0)
        n = 50000
        xb = rng.uniform(0, 1, n)
        lb = np.zeros(n)
        ub = np.ones(n)
        alpha = rng.normal(size=n)
        return lambda: np.array([kernels.ratio_test_primal(xb, lb, ub, alpha, 1e-9)[0] for _ in range(200)])

    return {"tape batch (20k rows)": tape_batch, "scalar tape (20k calls)": scalar_eval,
            "RK4 replay (4 h, dt=1e-3)": rk4, "devex pricing (200x50k)": pricing,
            "primal ratio test (200x50k)": ratio}


def lp_case():
    from dynramp import scheduler as S
    from dynramp.lpmilp import solve_lp

    def build():
        procs = [S.load_process(dio.shipped(f"{nm}.process.yaml")) for nm in ("cstr1", "cstr2")]
        system = S.load_system(dio.shipped("system.yaml"))
        prices = S.load_prices(dio.shipped("prices_synthetic.csv"))
        dem = S.load_demands(dio.shipped("demands_synthetic.csv"))
        p = S.build_p2(system, procs, prices, dem)
        return lambda: np.array([solve_lp(p).objective])
    return {"day-ahead LP relaxation": build}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--lp", action="store_true", help="also time the day-ahead LP relaxation")
    args = ap.parse_args()
    if not kernels.compiled_available():
        raise SystemExit("compiled extension not built; run pip install -e . first")
    todo = cases()
    if args.lp:
        todo.update(lp_case())
    print(f"{'kernel':<30} {'python [s]':>11} {'cython [s]':>11} {'speedup':>8}")
    for name, make in todo.items():
        res = {}
        for backend in ("python", "cython"):
            kernels.use_backend(backend)
            res[backend] = best_of(make(), args.repeat)
        a, b = res["python"][1], res["cython"][1]
        if not np.allclose(a, b, rtol=1e-9, atol=1e-12, equal_nan=True):
            raise SystemExit(f"{name}: backends disagree")
        tp, tc = res["python"][0], res["cython"][0]
        print(f"{name:<30} {tp:>11.4f} {tc:>11.4f} {tp / tc:>7.1f}x")
    kernels.use_backend("cython")


if __name__ == "__main__":
    main()
