"""Straight-line compilation of expression lists for fast repeated evaluation.

A tape is a flat instruction list. Each instruction writes one slot::

    op   a      b      c
    CONST               value
    INPUT  var index
    ADD/SUB/MUL/DIV/POW  slot  slot
    POWI   slot          integer exponent (stored as float)
    EXP/LN/NEG  slot

The evaluation loop itself lives in :mod:`dynramp.kernels`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import expr as E
from . import kernels

OP_CONST, OP_INPUT, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW, OP_POWI, OP_EXP, OP_LN, OP_NEG = range(11)
OP_NAMES = ["CONST", "INPUT", "ADD", "SUB", "MUL", "DIV", "POW", "POWI", "EXP", "LN", "NEG"]

ERROR_TEXT = {
    OP_DIV: "division by zero",
    OP_POW: "invalid power",
    OP_POWI: "invalid power",
    OP_EXP: "overflow in exp",
    OP_LN: "ln of a nonpositive number",
}


class Tape:
    __slots__ = ("ops", "a", "b", "c", "names", "outputs", "_index", "_scalar")

    def __init__(self, ops, a, b, c, names, outputs):
        self.ops = np.ascontiguousarray(ops, dtype=np.int32)
        self.a = np.ascontiguousarray(a, dtype=np.int32)
        self.b = np.ascontiguousarray(b, dtype=np.int32)
        self.c = np.ascontiguousarray(c, dtype=np.float64)
        self.names = tuple(names)
        self.outputs = np.ascontiguousarray(outputs, dtype=np.int32)
        self._index = {n: i for i, n in enumerate(self.names)}
        self._scalar = kernels.make_scalar_evaluator(self)

    def __len__(self):
        return len(self.ops)

    @property
    def n_outputs(self) -> int:
        return len(self.outputs)

    def eval(self, x) -> np.ndarray:
        """Evaluate all outputs at one point (sequence ordered like ``names``)."""
        out = np.empty(len(self.outputs))
        status = self._scalar(np.ascontiguousarray(x, dtype=np.float64), out)
        if status:
            op = int(self.ops[status - 1])
            raise E.EvalDomainError(ERROR_TEXT.get(op, "domain error"))
        return out

    def eval_map(self, binding) -> np.ndarray:
        try:
            x = [float(binding[n]) for n in self.names]
        except KeyError as exc:
            raise E.UnboundVariableError(f"variable {exc.args[0]!r} is not bound") from None
        return self.eval(x)

    def eval_batch(self, X, raise_on_error: bool = True) -> np.ndarray:
        """Evaluate at every row of ``X``; failing rows become NaN unless
        ``raise_on_error``."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        if X.shape[1] != len(self.names):
            raise ValueError(f"expected {len(self.names)} columns, got {X.shape[1]}")
        out, bad = kernels.tape_eval_batch(self, X)
        if raise_on_error and bad.any():
            raise E.EvalDomainError(f"domain error in {int(bad.sum())} of {len(X)} rows")
        return out

    def listing(self) -> str:
        lines = []
        for i, (op, a, b, c) in enumerate(zip(self.ops, self.a, self.b, self.c)):
            name = OP_NAMES[op]
            if op == OP_CONST:
                arg = repr(float(c))
            elif op == OP_INPUT:
                arg = self.names[a]
            elif op == OP_POWI:
                arg = f"s{a} {int(c)}"
            elif op in (OP_EXP, OP_LN, OP_NEG):
                arg = f"s{a}"
            else:
                arg = f"s{a} s{b}"
            lines.append(f"s{i} = {name} {arg}")
        lines.append("out " + " ".join(f"s{o}" for o in self.outputs))
        return "\n".join(lines)


def compile_exprs(exprs: Sequence[E.Expr], names: Sequence[str]) -> Tape:
    """Compile ``exprs`` into a single tape over input variables ``names``.

    Structurally equal subtrees are emitted once.
    """
    index = {n: i for i, n in enumerate(names)}
    ops: list[int] = []
    aa: list[int] = []
    bb: list[int] = []
    cc: list[float] = []
    slot: dict = {}
    consts: dict[float, int] = {}

    def emit(op, a=0, b=0, c=0.0):
        ops.append(op)
        aa.append(a)
        bb.append(b)
        cc.append(c)
        return len(ops) - 1

    def const_slot(v):
        key = float(v)
        if key in consts and not (key == 0.0 and np.signbit(key)):
            return consts[key]
        s = emit(OP_CONST, c=key)
        consts[key] = s
        return s

    def lower(node):
        k = node.kind
        if k == E.CONST:
            return const_slot(node.value)
        if k == E.VAR:
            if node.value not in index:
                raise E.UnboundVariableError(f"variable {node.value!r} is not an input")
            return emit(OP_INPUT, a=index[node.value])
        args = node.args
        if k == E.SUM:
            first = args[0]
            acc = slot[first.args[0]] if first.kind == E.NEG else slot[first]
            if first.kind == E.NEG:
                acc = emit(OP_NEG, acc)
            for t in args[1:]:
                if t.kind == E.NEG:
                    acc = emit(OP_SUB, acc, slot[t.args[0]])
                else:
                    acc = emit(OP_ADD, acc, slot[t])
            return acc
        if k == E.PRODUCT:
            acc = slot[args[0]]
            for t in args[1:]:
                acc = emit(OP_MUL, acc, slot[t])
            return acc
        if k == E.QUOTIENT:
            return emit(OP_DIV, slot[args[0]], slot[args[1]])
        if k == E.POWER:
            base, ex = args
            if ex.kind == E.CONST and float(ex.value).is_integer() and abs(ex.value) <= 64:
                return emit(OP_POWI, slot[base], c=float(ex.value))
            return emit(OP_POW, slot[base], slot[ex])
        if k == E.EXP:
            return emit(OP_EXP, slot[args[0]])
        if k == E.LN:
            return emit(OP_LN, slot[args[0]])
        if k == E.NEG:
            return emit(OP_NEG, slot[args[0]])
        raise E.ExprError(f"cannot compile node kind {k}")

    outputs = []
    for e in exprs:
        for node in E.walk(e):
            if node in slot:
                continue
            # children of a NEG inside a SUM are needed unnegated
            slot[node] = lower(node)
        outputs.append(slot[e])
    return Tape(ops, aa, bb, cc, names, outputs)
