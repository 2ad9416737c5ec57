"""Problem container, solution record, tolerances and the LP text format.

Text format (one item per line, ``#`` starts a comment)::

    dynramp-lp/1
    minimize
      offset 0.0
      1.5 x0 -2.0 x1
    subject to
      r0: 1.0 x0 2.0 x1 <= 3.0
    bounds
      x0 0.0 1.0
      x1 -inf inf
    binary
      x0
    end

Every coefficient is written with ``repr`` so a dump/load cycle is exact.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

LE, GE, EQ = "<=", ">=", "="
SENSES = (LE, GE, EQ)

FORMAT_HEADER = "dynramp-lp/1"
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\[\],:]*$")


class ProblemError(Exception):
    pass


@dataclass(frozen=True)
class Tolerances:
    feasibility: float = 1e-8
    integrality: float = 1e-9
    gap: float = 0.0
    # internal simplex tolerances
    primal: float = 1e-9
    dual: float = 1e-9
    pivot: float = 1e-9


DEFAULT_TOL = Tolerances()


class MilpProblem:
    """Minimize ``c x + offset`` subject to sparse rows and variable bounds."""

    def __init__(self, name: str = "problem"):
        self.name = name
        self.c: list[float] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.var_names: list[str] = []
        self.binaries: list[int] = []
        self._is_bin: list[bool] = []
        self.rows: list[dict[int, float]] = []
        self.senses: list[str] = []
        self.rhs: list[float] = []
        self.row_names: list[str] = []
        self.offset = 0.0
        self._names: dict[str, int] = {}
        self._version = 0

    # -- construction -------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.c)

    @property
    def m(self) -> int:
        return len(self.rows)

    @property
    def version(self) -> int:
        return self._version

    def add_var(self, name: str | None = None, lb: float = 0.0, ub: float = math.inf,
                obj: float = 0.0, binary: bool = False) -> int:
        j = len(self.c)
        name = name or f"x{j}"
        if name in self._names:
            raise ProblemError(f"duplicate variable name {name!r}")
        if binary:
            lb = max(float(lb), 0.0)
            ub = min(float(ub), 1.0)
        if not float(lb) <= float(ub):
            raise ProblemError(f"variable {name}: lower bound {lb} above upper bound {ub}")
        self.c.append(float(obj))
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.var_names.append(name)
        self._names[name] = j
        self._is_bin.append(bool(binary))
        if binary:
            self.binaries.append(j)
        self._version += 1
        return j

    def add_vars(self, prefix: str, count: int, **kw) -> list[int]:
        return [self.add_var(f"{prefix}[{i}]", **kw) for i in range(count)]

    def var(self, name: str) -> int:
        return self._names[name]

    def add_row(self, entries, sense: str, rhs: float, name: str | None = None) -> int:
        if sense not in SENSES:
            raise ProblemError(f"unknown row sense {sense!r}")
        row: dict[int, float] = {}
        items = entries.items() if isinstance(entries, Mapping) else entries
        for j, a in items:
            j = int(j)
            if not 0 <= j < len(self.c):
                raise ProblemError(f"row {name}: column {j} out of range")
            row[j] = row.get(j, 0.0) + float(a)
        row = {j: a for j, a in row.items() if a != 0.0}
        i = len(self.rows)
        self.rows.append(row)
        self.senses.append(sense)
        self.rhs.append(float(rhs))
        self.row_names.append(name or f"r{i}")
        self._version += 1
        return i

    def set_obj(self, j: int, value: float) -> None:
        self.c[j] = float(value)
        self._version += 1

    def add_obj(self, j: int, value: float) -> None:
        self.c[j] += float(value)
        self._version += 1

    def set_bounds(self, j: int, lb: float | None = None, ub: float | None = None) -> None:
        if lb is not None:
            self.lb[j] = float(lb)
        if ub is not None:
            self.ub[j] = float(ub)
        if not self.lb[j] <= self.ub[j]:
            raise ProblemError(f"variable {self.var_names[j]}: empty bounds")
        self._version += 1

    def is_binary(self, j: int) -> bool:
        return self._is_bin[j]

    def copy(self) -> "MilpProblem":
        p = MilpProblem(self.name)
        p.c = list(self.c)
        p.lb = list(self.lb)
        p.ub = list(self.ub)
        p.var_names = list(self.var_names)
        p.binaries = list(self.binaries)
        p._is_bin = list(self._is_bin)
        p.rows = [dict(r) for r in self.rows]
        p.senses = list(self.senses)
        p.rhs = list(self.rhs)
        p.row_names = list(self.row_names)
        p.offset = self.offset
        p._names = dict(self._names)
        p._version = self._version
        return p

    # -- views --------------------------------------------------------------
    def matrix(self) -> sp.csr_matrix:
        indptr = [0]
        idx: list[int] = []
        val: list[float] = []
        for row in self.rows:
            for j in sorted(row):
                idx.append(j)
                val.append(row[j])
            indptr.append(len(idx))
        return sp.csr_matrix((np.array(val, float), np.array(idx, np.int64), np.array(indptr, np.int64)),
                             shape=(self.m, self.n))

    def row_bounds(self):
        lo = np.empty(self.m)
        hi = np.empty(self.m)
        for i, (s, b) in enumerate(zip(self.senses, self.rhs)):
            lo[i] = b if s in (GE, EQ) else -math.inf
            hi[i] = b if s in (LE, EQ) else math.inf
        return lo, hi

    def validate(self) -> None:
        for j, (a, b) in enumerate(zip(self.lb, self.ub)):
            if not a <= b:
                raise ProblemError(f"variable {self.var_names[j]}: lower bound above upper bound")
        for j in self.binaries:
            if self.lb[j] < 0.0 or self.ub[j] > 1.0:
                raise ProblemError(f"binary {self.var_names[j]} has bounds outside [0, 1]")
        for i, row in enumerate(self.rows):
            for j in row:
                if not 0 <= j < self.n:
                    raise ProblemError(f"row {self.row_names[i]}: column out of range")

    def violation(self, x) -> float:
        """Largest bound or row violation of point ``x``."""
        x = np.asarray(x, dtype=float)
        v = 0.0
        lb = np.array(self.lb)
        ub = np.array(self.ub)
        v = max(v, float(np.max(lb - x, initial=0.0)), float(np.max(x - ub, initial=0.0)))
        if self.m:
            ax = self.matrix() @ x
            lo, hi = self.row_bounds()
            with np.errstate(invalid="ignore"):
                v = max(v, float(np.max(np.nan_to_num(lo - ax, nan=0.0, neginf=0.0), initial=0.0)),
                        float(np.max(np.nan_to_num(ax - hi, nan=0.0, neginf=0.0), initial=0.0)))
        return v

    def row_activity(self, x) -> np.ndarray:
        return self.matrix() @ np.asarray(x, dtype=float)

    def objective(self, x) -> float:
        return float(np.dot(self.c, x)) + self.offset

    # -- text format --------------------------------------------------------
    def dumps(self) -> str:
        for nm in self.var_names + self.row_names:
            if not _NAME.match(nm):
                raise ProblemError(f"name {nm!r} cannot be written in the text format")
        out = [FORMAT_HEADER, f"name {self.name}", "minimize", f"  offset {self.offset!r}"]
        terms = [f"{c!r} {self.var_names[j]}" for j, c in enumerate(self.c) if c != 0.0]
        out.append("  " + " ".join(terms) if terms else "  ")
        out.append("subject to")
        for i, row in enumerate(self.rows):
            body = " ".join(f"{row[j]!r} {self.var_names[j]}" for j in sorted(row))
            out.append(f"  {self.row_names[i]}: {body} {self.senses[i]} {self.rhs[i]!r}")
        out.append("bounds")
        for j in range(self.n):
            out.append(f"  {self.var_names[j]} {self.lb[j]!r} {self.ub[j]!r}")
        out.append("binary")
        for j in self.binaries:
            out.append(f"  {self.var_names[j]}")
        out.append("end")
        return "\n".join(out) + "\n"

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "MilpProblem":
        lines = [ln.split("#", 1)[0].rstrip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln.strip()]
        if not lines or lines[0].strip() != FORMAT_HEADER:
            raise ProblemError(f"missing header {FORMAT_HEADER!r}")
        p = cls()
        section = None
        obj_terms: list[tuple[float, str]] = []
        pending_rows = []
        bounds = {}
        bins = []
        for ln in lines[1:]:
            s = ln.strip()
            if s in ("minimize", "subject to", "bounds", "binary", "end"):
                section = s
                continue
            if s.startswith("name ") and section is None:
                p.name = s[5:].strip()
                continue
            tok = s.split()
            if section == "minimize":
                if tok[0] == "offset":
                    p.offset = float(tok[1])
                else:
                    obj_terms += [(float(tok[k]), tok[k + 1]) for k in range(0, len(tok), 2)]
            elif section == "subject to":
                name, rest = s.split(":", 1)
                tok = rest.split()
                sense, rhs = tok[-2], float(tok[-1])
                body = [(float(tok[k]), tok[k + 1]) for k in range(0, len(tok) - 2, 2)]
                pending_rows.append((name.strip(), body, sense, rhs))
            elif section == "bounds":
                bounds[tok[0]] = (float(tok[1]), float(tok[2]))
            elif section == "binary":
                bins.append(tok[0])
            else:
                raise ProblemError(f"unexpected line {s!r}")
        if section != "end":
            raise ProblemError("missing 'end'")
        binset = set(bins)
        for name, (lo, hi) in bounds.items():
            j = p.add_var(name, -math.inf, math.inf, binary=False)
            p.lb[j], p.ub[j] = lo, hi
            if name in binset:
                p._is_bin[j] = True
                p.binaries.append(j)
        # keep the binary order of the file
        p.binaries = [p.var(b) for b in bins]
        for c, nm in obj_terms:
            p.c[p.var(nm)] = c
        for name, body, sense, rhs in pending_rows:
            i = p.add_row([], sense, rhs, name)
            p.rows[i] = {p.var(nm): c for c, nm in body}
        return p

    @classmethod
    def load(cls, path) -> "MilpProblem":
        with open(path) as fh:
            return cls.loads(fh.read())


OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
GAP_LIMIT = "gap-limit"
NODE_LIMIT = "node-limit"
TIME_LIMIT = "time-limit"
NUMERICAL = "numerical-failure"


@dataclass
class MilpSolution:
    status: str
    x: np.ndarray | None = None
    objective: float = math.nan
    bound: float = math.nan
    gap: float = math.nan
    nodes: int = 0
    iterations: int = 0
    wall_time: float = 0.0
    problem_version: int = -1
    log: list = field(default_factory=list)
    basis: object = None

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, GAP_LIMIT) and self.x is not None


def relative_gap(incumbent: float, bound: float) -> float:
    """(incumbent - bound) / max(|incumbent|, 1e-9); 0 when they coincide."""
    if not math.isfinite(incumbent):
        return math.inf
    if not math.isfinite(bound):
        return math.inf
    diff = incumbent - bound
    if diff <= 0.0:
        return 0.0
    return diff / max(abs(incumbent), 1e-9)
