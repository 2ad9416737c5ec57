"""Symbolic scalar expressions: parsing, printing, differentiation, evaluation.

Expressions are immutable trees (DAGs when subtrees are shared by reference).
Node kinds::

    const, var, sum, product, quotient, power, exp, ln, neg

Grammar accepted by :func:`parse`::

    expr    := term (('+' | '-') term)*
    term    := power (('*' | '/') power)*
    power   := unary ('^' power)?          # right-associative
    unary   := ('-' | '+') unary | primary # binds tighter than '^' base
    primary := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'

so ``2^3^2 == 512`` and ``-x^2 == (-x)^2``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

CONST = "const"
VAR = "var"
SUM = "sum"
PRODUCT = "product"
QUOTIENT = "quotient"
POWER = "power"
EXP = "exp"
LN = "ln"
NEG = "neg"

FUNCTIONS = {"exp": EXP, "ln": LN}


class ExprError(Exception):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at offset {offset}")


class UnknownFunctionError(ExprSyntaxError):
    pass


class UnboundVariableError(ExprError):
    pass


class EvalDomainError(ExprError, ArithmeticError):
    pass


class Expr:
    """Immutable expression node.

    ``value`` holds the float of a constant or the name of a variable;
    ``args`` holds the children. Structural hash is computed once.
    """

    __slots__ = ("kind", "args", "value", "_hash", "__weakref__")

    def __init__(self, kind: str, args: tuple = (), value=None):
        self.kind = kind
        self.args = tuple(args)
        if kind == CONST:
            value = float(value)
        self.value = value
        h = hash((kind, value))
        for a in self.args:
            h = hash((h, a._hash))
        self._hash = h

    # structural identity
    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Expr) or self._hash != other._hash:
            return False
        if self.kind != other.kind or len(self.args) != len(other.args):
            return False
        if self.kind == CONST:
            # -0.0 and 0.0 are the same constant; bitwise for the rest
            return self.value == other.value
        if self.value != other.value:
            return False
        return all(a == b for a, b in zip(self.args, other.args))

    def __repr__(self):
        return f"Expr({to_string(self)!r})"

    def __str__(self):
        return to_string(self)

    # arithmetic sugar, routed through the folding constructors
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), neg(self))

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, other):
        return power(self, _coerce(other))

    def __neg__(self):
        return neg(self)

    @property
    def is_const(self) -> bool:
        return self.kind == CONST


def _coerce(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return const(float(x))
    raise TypeError(f"cannot use {type(x).__name__} in an expression")


ZERO = Expr(CONST, value=0.0)
ONE = Expr(CONST, value=1.0)


def const(v: float) -> Expr:
    v = float(v)
    if v == 0.0:
        return ZERO
    if v == 1.0:
        return ONE
    return Expr(CONST, value=v)


def var(name: str) -> Expr:
    return Expr(VAR, value=name)


def _is(e: Expr, v: float) -> bool:
    return e.kind == CONST and e.value == v


# ---------------------------------------------------------------------------
# folding constructors (used by differentiate/simplify and operator sugar)

def add(*terms: Expr) -> Expr:
    flat = []
    c = 0.0
    for t in terms:
        if t.kind == SUM:
            items = t.args
        else:
            items = (t,)
        for s in items:
            if s.kind == CONST:
                c += s.value
            else:
                flat.append(s)
    if c != 0.0:
        flat.append(const(c))
    if not flat:
        return ZERO
    if len(flat) == 1:
        return flat[0]
    return Expr(SUM, tuple(flat))


def mul(*factors: Expr) -> Expr:
    flat = []
    c = 1.0
    for f in factors:
        items = f.args if f.kind == PRODUCT else (f,)
        for s in items:
            if s.kind == CONST:
                c *= s.value
            elif s.kind == NEG:
                c = -c
                inner = s.args[0]
                if inner.kind == PRODUCT:
                    for q in inner.args:
                        if q.kind == CONST:
                            c *= q.value
                        else:
                            flat.append(q)
                elif inner.kind == CONST:
                    c *= inner.value
                else:
                    flat.append(inner)
            else:
                flat.append(s)
    if c == 0.0:
        return ZERO
    if not flat:
        return const(c)
    body = flat[0] if len(flat) == 1 else Expr(PRODUCT, tuple(flat))
    if c == 1.0:
        return body
    if c == -1.0:
        return Expr(NEG, (body,))
    return Expr(PRODUCT, (const(c),) + tuple(flat))


def div(a: Expr, b: Expr) -> Expr:
    if b.kind == CONST:
        if b.value == 0.0:
            return Expr(QUOTIENT, (a, b))
        if b.value == 1.0:
            return a
        if a.kind == CONST:
            return const(a.value / b.value)
    if _is(a, 0.0):
        return ZERO
    return Expr(QUOTIENT, (a, b))


def power(a: Expr, b: Expr) -> Expr:
    if _is(b, 0.0):
        return ONE
    if _is(b, 1.0):
        return a
    if a.kind == CONST and b.kind == CONST:
        try:
            v = _pow_checked(a.value, b.value)
        except EvalDomainError:
            return Expr(POWER, (a, b))
        return const(v)
    return Expr(POWER, (a, b))


def neg(a: Expr) -> Expr:
    if a.kind == CONST:
        return const(-a.value)
    if a.kind == NEG:
        return a.args[0]
    return Expr(NEG, (a,))


def exp(a: Expr) -> Expr:
    if a.kind == CONST:
        try:
            return const(math.exp(a.value))
        except OverflowError:
            pass
    return Expr(EXP, (a,))


def ln(a: Expr) -> Expr:
    if a.kind == CONST and a.value > 0.0:
        return const(math.log(a.value))
    return Expr(LN, (a,))


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str):
    pos = 0
    tokens = []
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos), text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str, constants: Mapping[str, float] | None):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.constants = constants or {}

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, msg, tok=None, cls=ExprSyntaxError):
        tok = tok or self.peek()
        raise cls(msg, _byte_offset(self.text, tok[2]), self.text)

    def expect(self, value):
        tok = self.take()
        if tok[1] != value or tok[0] != "op":
            self.error(f"expected {value!r}", tok)
        return tok

    def parse(self) -> Expr:
        if self.peek()[0] == "end":
            self.error("empty expression")
        e = self.expr()
        if self.peek()[0] != "end":
            self.error(f"unexpected token {self.peek()[1]!r}")
        return e

    def expr(self) -> Expr:
        terms = [self.term()]
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            t = self.term()
            terms.append(t if op == "+" else Expr(NEG, (t,)))
        return terms[0] if len(terms) == 1 else Expr(SUM, tuple(terms))

    def term(self) -> Expr:
        factors = [self.power()]
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            rhs = self.power()
            if op == "*":
                factors.append(rhs)
            else:
                num = factors[0] if len(factors) == 1 else Expr(PRODUCT, tuple(factors))
                factors = [Expr(QUOTIENT, (num, rhs))]
        return factors[0] if len(factors) == 1 else Expr(PRODUCT, tuple(factors))

    def power(self) -> Expr:
        base = self.unary()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Expr(POWER, (base, self.power()))
        return base

    def unary(self) -> Expr:
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.take()
            return Expr(NEG, (self.unary(),))
        if tok[0] == "op" and tok[1] == "+":
            self.take()
            return self.unary()
        return self.primary()

    def primary(self) -> Expr:
        tok = self.take()
        kind, text, _ = tok
        if kind == "num":
            return Expr(CONST, value=float(text))
        if kind == "id":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if text not in FUNCTIONS:
                    self.error(f"unknown function {text!r}", tok, UnknownFunctionError)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Expr(FUNCTIONS[text], (arg,))
            if text in FUNCTIONS:
                self.error(f"function {text!r} needs an argument", tok)
            if text in self.constants:
                return Expr(CONST, value=float(self.constants[text]))
            return Expr(VAR, value=text)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "end":
            self.error("unexpected end of expression", tok)
        self.error(f"unexpected token {text!r}", tok)


def parse(text: str, constants: Mapping[str, float] | None = None) -> Expr:
    """Parse ``text`` into an expression tree.

    Identifiers listed in ``constants`` are replaced by their values.
    Raises :class:`ExprSyntaxError` (with a byte ``offset``) on bad input.
    """
    return _Parser(text, constants).parse()


# ---------------------------------------------------------------------------
# printing

_PREC = {SUM: 1, PRODUCT: 2, QUOTIENT: 2, POWER: 3, NEG: 4}


def _prec(e: Expr) -> int:
    if e.kind == CONST:
        return 4 if (e.value < 0 or math.copysign(1.0, e.value) < 0) else 5
    return _PREC.get(e.kind, 5)


def _fmt_const(v: float) -> str:
    if math.isinf(v) or math.isnan(v):
        raise ExprError(f"cannot print non-finite constant {v}")
    s = repr(v)
    return s


def to_string(e: Expr) -> str:
    """Print with enough parentheses that :func:`parse` rebuilds the same tree
    (up to negative constants, which come back as negated literals)."""
    memo: dict[int, str] = {}
    keep: list[Expr] = []  # temporaries must outlive the id-keyed memo

    def wrap(child: Expr, min_prec: int) -> str:
        s = go(child)
        return f"({s})" if _prec(child) < min_prec else s

    def go(node: Expr) -> str:
        key = id(node)
        if key in memo:
            return memo[key]
        k = node.kind
        if k == CONST:
            s = _fmt_const(node.value)
        elif k == VAR:
            s = node.value
        elif k == SUM:
            parts = [wrap(node.args[0], 2) if node.args[0].kind == SUM else go(node.args[0])]
            for a in node.args[1:]:
                if a.kind == NEG:
                    parts.append(" - " + wrap(a.args[0], 2))
                elif a.kind == PRODUCT and a.args[0].kind == CONST and a.args[0].value < 0:
                    flipped = Expr(PRODUCT, (const(-a.args[0].value),) + a.args[1:])
                    keep.append(flipped)
                    parts.append(" - " + wrap(flipped, 2))
                elif a.kind == CONST and a.value < 0:
                    parts.append(" - " + _fmt_const(-a.value))
                else:
                    parts.append(" + " + wrap(a, 2))
            s = "".join(parts)
        elif k == PRODUCT:
            parts = [wrap(node.args[0], 2) if node.args[0].kind != QUOTIENT else go(node.args[0])]
            parts += [wrap(a, 3) for a in node.args[1:]]
            s = "*".join(parts)
        elif k == QUOTIENT:
            a, b = node.args
            left = go(a) if a.kind == QUOTIENT else wrap(a, 2)
            if a.kind == PRODUCT:
                left = f"({go(a)})"
            s = left + "/" + wrap(b, 3)
        elif k == POWER:
            a, b = node.args
            s = wrap(a, 4) + "^" + wrap(b, 3)
        elif k == NEG:
            s = "-" + wrap(node.args[0], 4)
        elif k in (EXP, LN):
            s = f"{k}({go(node.args[0])})"
        else:  # pragma: no cover
            raise ExprError(f"unknown node kind {k}")
        memo[key] = s
        return s

    return go(e)


# ---------------------------------------------------------------------------
# traversal helpers

def walk(e: Expr):
    """Yield each distinct node (by identity) once, children before parents."""
    seen = set()
    stack = [(e, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded or not node.args:
            seen.add(id(node))
            yield node
        else:
            stack.append((node, True))
            for a in reversed(node.args):
                if id(a) not in seen:
                    stack.append((a, False))


def free_vars(e: Expr) -> set[str]:
    return {n.value for n in walk(e) if n.kind == VAR}


def node_count(e: Expr) -> int:
    return sum(1 for _ in walk(e))


def substitute(e: Expr, mapping: Mapping[str, Expr | float]) -> Expr:
    """Replace variables by expressions (or numbers), refolding on the way up."""
    repl = {k: _coerce(v) for k, v in mapping.items()}
    memo: dict[int, Expr] = {}
    for node in walk(e):
        if node.kind == VAR:
            out = repl.get(node.value, node)
        elif node.kind == CONST:
            out = node
        else:
            args = tuple(memo[id(a)] for a in node.args)
            if all(x is y for x, y in zip(args, node.args)):
                out = node
            else:
                out = _rebuild(node.kind, args)
        memo[id(node)] = out
    return memo[id(e)]


def _rebuild(kind: str, args: tuple) -> Expr:
    if kind == SUM:
        return add(*args)
    if kind == PRODUCT:
        return mul(*args)
    if kind == QUOTIENT:
        return div(*args)
    if kind == POWER:
        return power(*args)
    if kind == NEG:
        return neg(args[0])
    if kind == EXP:
        return exp(args[0])
    if kind == LN:
        return ln(args[0])
    raise ExprError(f"cannot rebuild {kind}")


# ---------------------------------------------------------------------------
# differentiation

def differentiate(e: Expr, v: str) -> Expr:
    """Exact partial derivative of ``e`` with respect to variable ``v``.

    Shared subtrees are differentiated once; results reuse the original
    nodes by reference.
    """
    memo: dict[int, Expr] = {}
    for node in walk(e):
        memo[id(node)] = _d(node, v, memo)
    return memo[id(e)]


def _d(node: Expr, v: str, memo) -> Expr:
    k = node.kind
    if k == CONST:
        return ZERO
    if k == VAR:
        return ONE if node.value == v else ZERO
    da = [memo[id(a)] for a in node.args]
    if all(_is(x, 0.0) for x in da):
        return ZERO
    if k == SUM:
        return add(*da)
    if k == NEG:
        return neg(da[0])
    if k == PRODUCT:
        terms = []
        for i, di in enumerate(da):
            if _is(di, 0.0):
                continue
            others = node.args[:i] + node.args[i + 1:]
            terms.append(mul(di, *others))
        return add(*terms)
    if k == QUOTIENT:
        a, b = node.args
        d_a, d_b = da
        if _is(d_b, 0.0):
            return div(d_a, b)
        num = add(mul(d_a, b), neg(mul(a, d_b)))
        return div(num, power(b, const(2.0)))
    if k == POWER:
        a, b = node.args
        d_a, d_b = da
        if _is(d_b, 0.0):
            # b * a^(b-1) * a'
            if b.kind == CONST:
                lowered = power(a, const(b.value - 1.0))
            else:
                lowered = power(a, add(b, const(-1.0)))
            return mul(b, lowered, d_a)
        # a^b * (b' ln a + b a'/a)
        inner = add(mul(d_b, ln(a)), div(mul(b, d_a), a))
        return mul(node, inner)
    if k == EXP:
        return mul(node, da[0])
    if k == LN:
        return div(da[0], node.args[0])
    raise ExprError(f"cannot differentiate {k}")


def gradient(e: Expr, names: Iterable[str]) -> list[Expr]:
    return [differentiate(e, n) for n in names]


# ---------------------------------------------------------------------------
# simplification

def _split_coeff(t: Expr):
    if t.kind == NEG:
        c, core = _split_coeff(t.args[0])
        return -c, core
    if t.kind == PRODUCT and t.args[0].kind == CONST:
        rest = t.args[1:]
        core = rest[0] if len(rest) == 1 else Expr(PRODUCT, rest)
        return t.args[0].value, core
    return 1.0, t


def _collect_sum(args) -> Expr:
    flat = add(*args)
    if flat.kind != SUM:
        return flat
    order: list[Expr] = []
    coeff: dict[Expr, float] = {}
    c0 = 0.0
    for t in flat.args:
        if t.kind == CONST:
            c0 += t.value
            continue
        c, core = _split_coeff(t)
        if core in coeff:
            coeff[core] += c
        else:
            coeff[core] = c
            order.append(core)
    terms = []
    for core in order:
        c = coeff[core]
        if c == 0.0:
            continue
        terms.append(mul(const(c), core))
    if c0 != 0.0:
        terms.append(const(c0))
    return add(*terms)


def simplify(e: Expr) -> Expr:
    """Local rewrites: identities, constant folding, cancellation of like
    terms in sums. The result evaluates to the same value as ``e``."""
    memo: dict[int, Expr] = {}
    for node in walk(e):
        k = node.kind
        if k in (CONST, VAR):
            out = node
        else:
            args = tuple(memo[id(a)] for a in node.args)
            if k == SUM:
                out = _collect_sum(args)
            elif k == PRODUCT:
                out = mul(*args)
            elif k == QUOTIENT:
                a, b = args
                if a == b and a.kind != CONST:
                    out = _rebuild(QUOTIENT, args)
                else:
                    out = div(a, b)
                if out.kind == QUOTIENT and out.args[0].kind == NEG:
                    out = neg(div(out.args[0].args[0], out.args[1]))
            else:
                out = _rebuild(k, args)
        memo[id(node)] = out
    return memo[id(e)]


@dataclass(frozen=True)
class ZeroCheck:
    """Outcome of :func:`is_identically_zero`. Truthy when zero.

    ``method`` is ``"symbolic"`` (proved), ``"numeric"`` (zero on every
    probe, not proved) or ``"nonzero"``.
    """

    is_zero: bool
    method: str

    def __bool__(self):
        return self.is_zero

    @property
    def numerically_zero(self) -> bool:
        return self.method == "numeric"


def is_identically_zero(
    e: Expr,
    ranges: Mapping[str, tuple[float, float]] | None = None,
    samples: int = 50,
    tol: float = 1e-10,
    seed: int = 0,
) -> ZeroCheck:
    s = simplify(e)
    if s.kind == CONST:
        return ZeroCheck(s.value == 0.0, "symbolic" if s.value == 0.0 else "nonzero")
    names = sorted(free_vars(s))
    ranges = ranges or {}
    rng = np.random.default_rng(seed)
    lo = np.array([ranges.get(n, (0.5, 1.5))[0] for n in names], dtype=float)
    hi = np.array([ranges.get(n, (0.5, 1.5))[1] for n in names], dtype=float)
    pts = lo + (hi - lo) * rng.random((samples, len(names)))
    from .tape import compile_exprs  # local import: tape depends on this module

    tape = compile_exprs([s], names)
    vals = tape.eval_batch(pts, raise_on_error=False)[:, 0]
    finite = np.isfinite(vals)
    if not finite.any():
        return ZeroCheck(False, "nonzero")
    if np.all(np.abs(vals[finite]) <= tol):
        return ZeroCheck(True, "numeric")
    return ZeroCheck(False, "nonzero")


# ---------------------------------------------------------------------------
# reference evaluation (tree walk); the fast path lives in tape.py

def _pow_checked(a: float, b: float) -> float:
    if a == 0.0 and b < 0.0:
        raise EvalDomainError("zero raised to a negative power")
    if a < 0.0 and b != math.floor(b):
        raise EvalDomainError("negative base with non-integer exponent")
    try:
        v = math.pow(a, b)
    except OverflowError as exc:
        raise EvalDomainError("overflow in power") from exc
    return v


def evaluate(e: Expr, binding: Mapping[str, float]) -> float:
    """Evaluate in double precision by walking the tree.

    Raises :class:`UnboundVariableError` for a missing variable and
    :class:`EvalDomainError` for ln of a nonpositive number, division by
    zero, or an invalid power.
    """
    memo: dict[int, float] = {}
    for node in walk(e):
        k = node.kind
        if k == CONST:
            v = node.value
        elif k == VAR:
            try:
                v = float(binding[node.value])
            except KeyError:
                raise UnboundVariableError(f"variable {node.value!r} is not bound") from None
        else:
            a = [memo[id(x)] for x in node.args]
            if k == SUM:
                v = sum(a)
            elif k == PRODUCT:
                v = 1.0
                for x in a:
                    v *= x
            elif k == QUOTIENT:
                if a[1] == 0.0:
                    raise EvalDomainError("division by zero")
                v = a[0] / a[1]
            elif k == POWER:
                v = _pow_checked(a[0], a[1])
            elif k == NEG:
                v = -a[0]
            elif k == EXP:
                try:
                    v = math.exp(a[0])
                except OverflowError as exc:
                    raise EvalDomainError("overflow in exp") from exc
            elif k == LN:
                if a[0] <= 0.0:
                    raise EvalDomainError("ln of a nonpositive number")
                v = math.log(a[0])
            else:  # pragma: no cover
                raise ExprError(k)
        memo[id(node)] = v
    return memo[id(e)]


def jacobian(exprs: list[Expr], names: list[str]) -> list[list[Expr]]:
    return [[differentiate(f, n) for n in names] for f in exprs]


def determinant(m: list[list[Expr]]) -> Expr:
    """Symbolic determinant by cofactor expansion along the first row."""
    n = len(m)
    if n == 0:
        return ONE
    if n == 1:
        return m[0][0]
    if n == 2:
        return add(mul(m[0][0], m[1][1]), neg(mul(m[0][1], m[1][0])))
    terms = []
    for j in range(n):
        if _is(m[0][j], 0.0):
            continue
        minor = [row[:j] + row[j + 1:] for row in m[1:]]
        t = mul(m[0][j], determinant(minor))
        terms.append(t if j % 2 == 0 else neg(t))
    return add(*terms)
