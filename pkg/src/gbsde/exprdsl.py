"""A small expression language for coefficient and generator functions.

Grammar (lowest to highest precedence)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power               # no unary plus: '2*+x1' is rejected
    power   := primary ('^' unary)?          # right associative
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``t``, ``x1..xk`` (state), ``y1..yn`` (solution components) and
``z1..zd`` (the own-component row of Z).  Inside the generator of component
``l`` the qualified form ``z<l>_<i>`` is accepted for the own row only, so the
diagonal-in-z structure is enforced when the source is parsed.

Expressions evaluate on floats or on numpy arrays (broadcast over grid nodes).
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DiagonalityError, ExprSyntaxError, NumericalDomainError

FUNCTIONS: dict[str, int] = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
    "abs": 1,
    "sqrt": 1,
    "tanh": 1,
    "max": 2,
    "min": 2,
    "pow": 2,
}

_VAR_RE = re.compile(r"^(t|[xyz][1-9][0-9]*)$")
_QUALIFIED_Z_RE = re.compile(r"^z([1-9][0-9]*)_([1-9][0-9]*)$")


class Expr:
    """Base class of the AST.  Nodes are immutable and hashable."""

    def __str__(self) -> str:
        return to_source(self)

    def evaluate(self, env: Mapping[str, float | np.ndarray]):
        fn = self.__dict__.get("_compiled")
        if fn is None:
            fn = _compile(self)
            object.__setattr__(self, "_compiled", fn)
        return fn(env)

    @property
    def variables(self) -> frozenset[str]:
        cached = self.__dict__.get("_vars")
        if cached is None:
            cached = frozenset(_collect_vars(self))
            object.__setattr__(self, "_vars", cached)
        return cached


@dataclass(frozen=True, eq=True)
class Num(Expr):
    value: float


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str


@dataclass(frozen=True, eq=True)
class Unary(Expr):
    op: str
    operand: Expr


@dataclass(frozen=True, eq=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True, eq=True)
class Call(Expr):
    name: str
    args: tuple[Expr, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class Dims:
    """Declared problem dimensions used to validate variable indices."""

    k: int | None = None
    n: int | None = None
    d: int | None = None
    own: int | None = None  # 1-based component owning the z-row, if any
    allow: frozenset[str] = frozenset({"t", "x", "y", "z"})


@dataclass(frozen=True)
class EvalContext:
    t: float
    x: Sequence[float] = ()
    y: Sequence[float] = ()
    z: Sequence[float] = ()

    def env(self) -> dict[str, float]:
        out: dict[str, float] = {"t": float(self.t)}
        for prefix, vec in (("x", self.x), ("y", self.y), ("z", self.z)):
            for i, v in enumerate(vec, start=1):
                out[f"{prefix}{i}"] = float(v)
        return out


# ---------------------------------------------------------------- tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind != "ws":
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


# ------------------------------------------------------------------- parser


class _Parser:
    def __init__(self, src: str, dims: Dims):
        self.toks = _tokenize(src)
        self.i = 0
        self.dims = dims

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.peek()
        if tok.text != text:
            found = tok.text or "end of input"
            raise ExprSyntaxError(f"expected {text!r}, found {found!r}", tok.line, tok.col)
        return self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        tok = self.peek()
        if tok.kind != "eof":
            raise ExprSyntaxError(f"unexpected token {tok.text!r}", tok.line, tok.col)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek().text in ("+", "-"):
            op = self.advance().text
            e = Binary(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.advance().text
            e = Binary(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.text == "-":
            self.advance()
            nxt, after = self.toks[self.i], self.toks[min(self.i + 1, len(self.toks) - 1)]
            if nxt.kind == "num" and after.text != "^":
                # a signed literal is one Num node, so negative constants round-trip
                self.advance()
                return Num(-float(nxt.text))
            return Unary("-", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.peek().text == "^":
            self.advance()
            return Binary("^", base, self.unary())
        return base

    def primary(self) -> Expr:
        tok = self.advance()
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if tok.kind == "name":
            if self.peek().text == "(":
                return self.call(tok)
            return self.variable(tok)
        found = tok.text or "end of input"
        raise ExprSyntaxError(f"unexpected {found!r}", tok.line, tok.col)

    def call(self, name_tok: _Tok) -> Expr:
        name = name_tok.text
        if name not in FUNCTIONS:
            raise ExprSyntaxError(f"unknown function {name!r}", name_tok.line, name_tok.col)
        self.expect("(")
        args = [self.expr()]
        while self.peek().text == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        if len(args) != FUNCTIONS[name]:
            raise ExprSyntaxError(
                f"{name} takes {FUNCTIONS[name]} argument(s), got {len(args)}",
                name_tok.line,
                name_tok.col,
            )
        return Call(name, tuple(args))

    def variable(self, tok: _Tok) -> Expr:
        name = tok.text
        dims = self.dims
        q = _QUALIFIED_Z_RE.match(name)
        if q:
            comp, idx = int(q.group(1)), int(q.group(2))
            if dims.own is not None and comp != dims.own:
                raise DiagonalityError(
                    f"{name!r} references row {comp} of Z inside the generator of "
                    f"component {dims.own} (line {tok.line}, column {tok.col})"
                )
            name = f"z{idx}"
        elif not _VAR_RE.match(name):
            raise ExprSyntaxError(f"unknown identifier {name!r}", tok.line, tok.col)
        prefix = name[0]
        if prefix not in dims.allow:
            raise ExprSyntaxError(f"variable {name!r} not allowed here", tok.line, tok.col)
        if prefix != "t":
            bound = {"x": dims.k, "y": dims.n, "z": dims.d}[prefix]
            if bound is not None and int(name[1:]) > bound:
                raise ExprSyntaxError(
                    f"variable {name!r} out of range (dimension {bound})", tok.line, tok.col
                )
        return Var(name)


def parse(src: str, dims: Dims | None = None) -> Expr:
    """Parse ``src`` into an AST, validating identifiers against ``dims``."""
    if not isinstance(src, str) or not src.strip():
        raise ExprSyntaxError("empty expression", 1, 1)
    return _Parser(src, dims or Dims()).parse()


# ------------------------------------------------------------------ printer


def to_source(e: Expr) -> str:
    """Fully parenthesized source; ``parse(to_source(e)) == e``."""
    if isinstance(e, Num):
        v = float(e.value)
        return f"({v!r})" if math.copysign(1.0, v) < 0 else repr(v)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        inner = to_source(e.operand)
        return f"({e.op}({inner}))" if isinstance(e.operand, Num) else f"({e.op}{inner})"
    if isinstance(e, Binary):
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    raise TypeError(f"not an expression node: {e!r}")


def _collect_vars(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Unary):
        return _collect_vars(e.operand)
    if isinstance(e, Binary):
        return _collect_vars(e.left) | _collect_vars(e.right)
    if isinstance(e, Call):
        out: set[str] = set()
        for a in e.args:
            out |= _collect_vars(a)
        return out
    return set()


# --------------------------------------------------------------- evaluation


def _domain_error(node: Expr, what: str) -> NumericalDomainError:
    return NumericalDomainError(f"{what} in subexpression '{to_source(node)}'")


def _check(node: Expr, value):
    if not np.all(np.isfinite(value)):
        raise _domain_error(node, "non-finite value")
    return value


_UNARY_FUNCS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "abs": np.abs,
    "tanh": np.tanh,
}


def _compile(e: Expr) -> Callable:
    if isinstance(e, Num):
        v = float(e.value)
        return lambda env: v

    if isinstance(e, Var):
        name = e.name

        def var(env):
            try:
                value = env[name]
            except KeyError:
                raise NumericalDomainError(f"variable {name!r} is not bound") from None
            return _check(e, value)

        return var

    if isinstance(e, Unary):
        inner = _compile(e.operand)
        return lambda env: -inner(env)

    if isinstance(e, Binary):
        left, right, op = _compile(e.left), _compile(e.right), e.op
        if op == "+":
            return lambda env: left(env) + right(env)
        if op == "-":
            return lambda env: left(env) - right(env)
        if op == "*":
            return lambda env: _check(e, left(env) * right(env))
        if op == "/":

            def div(env):
                num, den = left(env), right(env)
                if np.any(np.asarray(den) == 0.0):
                    raise _domain_error(e, "division by zero")
                return _check(e, num / den)

            return div
        if op == "^":

            def power(env):
                with np.errstate(all="ignore"):
                    return _check(e, np.power(np.asarray(left(env), dtype=float), right(env)))

            return power
        raise ValueError(f"unknown operator {op!r}")

    if isinstance(e, Call):
        args = [_compile(a) for a in e.args]
        name = e.name
        if name in _UNARY_FUNCS:
            fn, a0 = _UNARY_FUNCS[name], args[0]

            def unary_call(env):
                with np.errstate(over="ignore"):
                    return _check(e, fn(a0(env)))

            return unary_call
        if name == "log":

            def log(env):
                v = args[0](env)
                if np.any(np.asarray(v) <= 0.0):
                    raise _domain_error(e, "log of non-positive argument")
                return np.log(v)

            return log
        if name == "sqrt":

            def sqrt(env):
                v = args[0](env)
                if np.any(np.asarray(v) < 0.0):
                    raise _domain_error(e, "sqrt of negative argument")
                return np.sqrt(v)

            return sqrt
        if name == "max":
            return lambda env: np.maximum(args[0](env), args[1](env))
        if name == "min":
            return lambda env: np.minimum(args[0](env), args[1](env))
        if name == "pow":

            def pow_(env):
                with np.errstate(all="ignore"):
                    return _check(e, np.power(np.asarray(args[0](env), dtype=float), args[1](env)))

            return pow_
    raise TypeError(f"not an expression node: {e!r}")


def evaluate(e: Expr, ctx: EvalContext | Mapping[str, float | np.ndarray]) -> float:
    """Evaluate at a single point; returns a Python float."""
    env = ctx.env() if isinstance(ctx, EvalContext) else ctx
    return float(e.evaluate(env))


def evaluate_array(e: Expr, env: Mapping[str, float | np.ndarray], shape) -> np.ndarray:
    """Evaluate over arrays, always returning a float array of ``shape``."""
    out = e.evaluate(env)
    return np.broadcast_to(np.asarray(out, dtype=float), shape)


# ---------------------------------------------------------------- builders


def const(c: float) -> Expr:
    return Num(float(c))


def add(e: Expr, other: Expr | float) -> Expr:
    return Binary("+", e, other if isinstance(other, Expr) else Num(float(other)))


def scale(e: Expr, c: float) -> Expr:
    return Binary("*", Num(float(c)), e)


def is_zero(e: Expr) -> bool:
    return isinstance(e, Num) and e.value == 0.0


# ---------------------------------------------------------- Lipschitz probe


@dataclass(frozen=True)
class LipschitzEstimate:
    estimate: float
    declared: float | None
    exceeds_declared: bool
    pairs: int


def lipschitz_probe(
    e: Expr,
    box: Mapping[str, tuple[float, float]],
    samples: int = 1000,
    declared: float | None = None,
    seed: int = 0,
) -> LipschitzEstimate:
    """Sampled lower estimate of the Lipschitz constant of ``e`` in (y, z).

    The ratio ``|e(p) - e(q)| / (|y_p - y_q| + |z_p - z_q|)`` is maximized over
    pairs sharing ``t`` and ``x``.  Each base point is paired with a nearby
    perturbation and with an independent draw from ``box``; the corners of the
    (y, z) box are always included as base points.  Variables of ``e`` that
    are missing from ``box`` default to ``[0, 0]``.
    """
    if samples < 100:
        raise ValueError("lipschitz_probe needs at least 100 samples")
    rng = np.random.default_rng(seed)
    names = sorted(e.variables | set(box))
    live = [v for v in names if v[0] in "yz"]
    fixed = [v for v in names if v[0] not in "yz"]
    bounds = {v: tuple(map(float, box.get(v, (0.0, 0.0)))) for v in names}

    def draw(count: int) -> dict[str, np.ndarray]:
        return {v: rng.uniform(*bounds[v], size=count) for v in names}

    base = draw(samples)
    if live and len(live) <= 10:
        corners = np.array(np.meshgrid(*[[0, 1]] * len(live), indexing="ij")).reshape(len(live), -1)
        extra = draw(corners.shape[1])
        for j, v in enumerate(live):
            lo, hi = bounds[v]
            extra[v] = np.where(corners[j] == 1, hi, lo)
        base = {v: np.concatenate([base[v], extra[v]]) for v in names}
    count = len(base[names[0]]) if names else samples

    near = dict(base)
    far = draw(count)
    for v in live:
        lo, hi = bounds[v]
        step = 1e-3 * (hi - lo) * rng.uniform(-1.0, 1.0, size=count)
        cand = base[v] + step
        near[v] = np.where((cand > hi) | (cand < lo), base[v] - step, cand)
    for v in fixed:
        far[v] = base[v]

    ratios = []
    f0 = evaluate_array(e, base, (count,))
    for partner in (near, far):
        f1 = evaluate_array(e, partner, (count,))
        dy = np.sqrt(sum((partner[v] - base[v]) ** 2 for v in live if v[0] == "y") + np.zeros(count))
        dz = np.sqrt(sum((partner[v] - base[v]) ** 2 for v in live if v[0] == "z") + np.zeros(count))
        denom = dy + dz
        ok = denom > 0
        if np.any(ok):
            ratios.append(np.max(np.abs(f1[ok] - f0[ok]) / denom[ok]))
    estimate = float(max(ratios)) if ratios else 0.0
    exceeds = declared is not None and estimate > declared * (1 + 1e-9)
    if exceeds:
        warnings.warn(
            f"sampled Lipschitz constant {estimate:.6g} of '{to_source(e)}' exceeds declared L={declared}",
            stacklevel=2,
        )
    return LipschitzEstimate(estimate, declared, exceeds, 2 * count)

