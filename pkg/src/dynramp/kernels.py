"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting the environment
variable ``DYNRAMP_PURE_PYTHON=1`` forces the numpy/Python fallback.
"""
from __future__ import annotations

import importlib
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DYNRAMP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name: str) -> None:
    """Switch backend at runtime (mainly for benchmarks and tests).

    Tapes built before the switch keep their scalar evaluator.
    """
    global _impl, BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _kernels as compiled  # raises ImportError if missing

        _impl = compiled
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def compiled_available() -> bool:
    try:
        importlib.import_module("._kernels", __package__)
    except ImportError:
        return False
    return True


def make_scalar_evaluator(tape):
    return _impl.make_scalar_evaluator(tape)


def tape_eval_batch(tape, X):
    return _impl.tape_eval_batch(tape, X)


def price_dantzig(d, status, tol):
    return _impl.price_dantzig(d, status, tol)


def price_weighted(d, w, status, tol):
    return _impl.price_weighted(d, w, status, tol)


def ratio_test_primal(xb, lb, ub, alpha, tol):
    return _impl.ratio_test_primal(xb, lb, ub, alpha, tol)


def ratio_test_dual(d, alpha_r, status, leaving_up, tol):
    return _impl.ratio_test_dual(d, alpha_r, status, leaving_up, tol)


def rk4_integrate(tape, x0, rho, u, dt, lo, hi):
    return _impl.rk4_integrate(tape, x0, rho, u, dt, lo, hi)
