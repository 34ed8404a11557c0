"""Scalar expression language for problem coefficients.

Expressions are parsed once into an immutable tree and evaluated many times,
usually with numpy arrays bound to the variables so that a whole path
ensemble is processed in one call.

Grammar (loosest to tightest)::

    sum     := product (('+' | '-') product)*
    product := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := atom ('^' unary)?          # right-associative
    atom    := NUMBER | NAME | NAME '(' args ')' | '(' sum ')'

so ``-2^2 == -4`` and ``2^3^2 == 512``.  ``V(e1, ..., en)`` evaluates the
current candidate value function at ``(t, e1, ..., en)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Union

import numpy as np

__all__ = [
    "Expression",
    "Num",
    "Var",
    "Unary",
    "Binary",
    "Call",
    "VTerm",
    "ExpressionError",
    "ParseError",
    "EvaluationError",
    "parse",
    "evaluate",
    "to_string",
    "substitute",
    "num",
    "var",
    "add",
    "sub",
    "mul",
    "neg",
    "call",
    "from_node",
    "is_constant",
    "constant_value",
]

FUNCTIONS = {"exp": 1, "log": 1, "sqrt": 1, "abs": 1, "min": 2, "max": 2, "pow": 2}
VTERM = "V"


class ExpressionError(ValueError):
    """Base class for expression failures."""


class ParseError(ExpressionError):
    def __init__(self, message: str, text: str = "", pos: int = -1):
        self.text = text
        self.pos = pos
        if pos >= 0:
            message = f"{message} at position {pos} in {text!r}"
        super().__init__(message)


class EvaluationError(ExpressionError):
    pass


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


@dataclass(frozen=True)
class VTerm:
    args: tuple


Node = Union[Num, Var, Unary, Binary, Call, VTerm]


def _walk(node: Node) -> Iterable[Node]:
    yield node
    if isinstance(node, Unary):
        yield from _walk(node.operand)
    elif isinstance(node, Binary):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, (Call, VTerm)):
        for a in node.args:
            yield from _walk(a)


@dataclass(frozen=True)
class Expression:
    """A parsed expression together with its source text."""

    root: Node
    text: str

    @property
    def variables(self) -> frozenset:
        return frozenset(n.name for n in _walk(self.root) if isinstance(n, Var))

    @property
    def has_vterms(self) -> bool:
        return any(isinstance(n, VTerm) for n in _walk(self.root))

    def uses(self, name: str) -> bool:
        return name in self.variables

    def __call__(self, env, value_fn=None):
        return evaluate(self, env, value_fn)

    def __str__(self) -> str:
        return to_string(self)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[bad]!r}", text, bad)
        start = m.start(m.lastgroup)
        tokens.append((m.lastgroup, m.group(m.lastgroup), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, allowed: frozenset, v_arity: int | None):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.allowed = allowed
        self.v_arity = v_arity

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value:
            found = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {value!r}, found {found}", self.text, pos)

    def parse(self) -> Node:
        node = self.sum()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", self.text, pos)
        return node

    def sum(self) -> Node:
        node = self.product()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.product())
        return node

    def product(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, val, _ = self.peek()
        if kind == "op" and val in ("-", "+"):
            self.take()
            operand = self.unary()
            return Unary("-", operand) if val == "-" else operand
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Binary("^", base, self.unary())
        return base

    def args(self) -> list:
        self.expect("(")
        out = []
        if self.peek()[1] == ")":
            self.take()
            return out
        out.append(self.sum())
        while self.peek()[1] == ",":
            self.take()
            out.append(self.sum())
        self.expect(")")
        return out

    def atom(self) -> Node:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "op" and val == "(":
            node = self.sum()
            self.expect(")")
            return node
        if kind == "name":
            is_call = self.peek()[1] == "("
            if val == VTERM and is_call:
                if VTERM not in self.allowed:
                    raise ParseError("non-local term forbidden here", self.text, pos)
                args = self.args()
                if self.v_arity is not None and len(args) != self.v_arity:
                    raise ParseError(
                        f"V expects {self.v_arity} argument(s), got {len(args)}", self.text, pos
                    )
                return VTerm(tuple(args))
            if is_call:
                if val not in FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", self.text, pos)
                args = self.args()
                if len(args) != FUNCTIONS[val]:
                    raise ParseError(
                        f"{val} expects {FUNCTIONS[val]} argument(s), got {len(args)}",
                        self.text,
                        pos,
                    )
                return Call(val, tuple(args))
            if val not in self.allowed or val == VTERM:
                raise ParseError(f"unknown variable {val!r}", self.text, pos)
            return Var(val)
        found = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"unexpected {found}", self.text, pos)


def parse(text: str, allowed_vars: Iterable[str], v_arity: int | None = None) -> Expression:
    """Parse ``text`` into an :class:`Expression`.

    ``allowed_vars`` lists the variable names the context permits; include
    ``"V"`` to permit non-local terms, whose argument count must equal
    ``v_arity`` when that is given.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression")
    root = _Parser(text, frozenset(allowed_vars), v_arity).parse()
    return Expression(root, text)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _bad(mask) -> bool:
    return bool(np.any(mask))


def _eval(node: Node, env: Mapping, value_fn):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvaluationError(f"missing binding for {node.name!r}") from None
    if isinstance(node, Unary):
        return -_eval(node.operand, env, value_fn)
    if isinstance(node, Binary):
        a = _eval(node.left, env, value_fn)
        b = _eval(node.right, env, value_fn)
        op = node.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            if _bad(np.asarray(b) == 0):
                raise EvaluationError(f"division by zero in '{_fmt(node)}'")
            return a / b
        return _power(a, b, node)
    if isinstance(node, Call):
        vals = [_eval(a, env, value_fn) for a in node.args]
        f = node.func
        if f == "exp":
            return np.exp(vals[0])
        if f == "log":
            if _bad(np.asarray(vals[0]) <= 0):
                raise EvaluationError(f"log of non-positive argument in '{_fmt(node)}'")
            return np.log(vals[0])
        if f == "sqrt":
            if _bad(np.asarray(vals[0]) < 0):
                raise EvaluationError(f"sqrt of negative argument in '{_fmt(node)}'")
            return np.sqrt(vals[0])
        if f == "abs":
            return np.abs(vals[0])
        if f == "min":
            return np.minimum(vals[0], vals[1])
        if f == "max":
            return np.maximum(vals[0], vals[1])
        return _power(vals[0], vals[1], node)
    if isinstance(node, VTerm):
        if value_fn is None:
            raise EvaluationError(f"no value function supplied for '{_fmt(node)}'")
        if "t" not in env:
            raise EvaluationError("missing binding for 't' required by V-term")
        args = [_eval(a, env, value_fn) for a in node.args]
        return value_fn(env["t"], args)
    raise TypeError(f"not an expression node: {node!r}")


def _power(a, b, node):
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.power(np.asarray(a, dtype=float), b)
    if _bad(~np.isfinite(out) & np.isfinite(a) & np.isfinite(b)):
        raise EvaluationError(f"invalid power in '{_fmt(node)}'")
    return out if np.ndim(out) else float(out)


def evaluate(e: Expression | Node, env: Mapping, value_fn: Callable | None = None):
    """Evaluate ``e`` under ``env``.

    Variables may be bound to floats or numpy arrays (broadcast together).
    ``value_fn(t, args)`` receives the bound time and the list of evaluated
    V-term arguments and must return the value function there.
    """
    root = e.root if isinstance(e, Expression) else e
    return _eval(root, env, value_fn)


# ---------------------------------------------------------------------------
# Printing and rewriting
# ---------------------------------------------------------------------------


def _fmt(node: Node) -> str:
    if isinstance(node, Num):
        r = repr(float(node.value))
        return f"({r})" if node.value < 0 or r in ("inf", "nan") else r
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return f"(-{_fmt(node.operand)})"
    if isinstance(node, Binary):
        return f"({_fmt(node.left)} {node.op} {_fmt(node.right)})"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_fmt(a) for a in node.args)})"
    if isinstance(node, VTerm):
        return f"V({', '.join(_fmt(a) for a in node.args)})"
    raise TypeError(node)


def to_string(e: Expression | Node) -> str:
    """Fully parenthesized text that parses back to an equivalent tree."""
    return _fmt(e.root if isinstance(e, Expression) else e)


def substitute(e: Expression | Node, mapping: Mapping[str, Node]) -> Node:
    """Replace variables by subtrees (V-term arguments included)."""
    node = e.root if isinstance(e, Expression) else e
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Unary):
        return Unary(node.op, substitute(node.operand, mapping))
    if isinstance(node, Binary):
        return Binary(node.op, substitute(node.left, mapping), substitute(node.right, mapping))
    if isinstance(node, Call):
        return Call(node.func, tuple(substitute(a, mapping) for a in node.args))
    return VTerm(tuple(substitute(a, mapping) for a in node.args))


def num(value: float) -> Num:
    return Num(float(value))


def var(name: str) -> Var:
    return Var(name)


def add(a: Node, b: Node) -> Node:
    return Binary("+", a, b)


def sub(a: Node, b: Node) -> Node:
    return Binary("-", a, b)


def mul(a: Node, b: Node) -> Node:
    return Binary("*", a, b)


def neg(a: Node) -> Node:
    return Unary("-", a)


def call(func: str, *args: Node) -> Node:
    return Call(func, tuple(args))


def from_node(node: Node, allowed_vars: Iterable[str], v_arity: int | None = None) -> Expression:
    """Wrap a rewritten tree as an Expression, re-validating it through the parser."""
    return parse(to_string(node), allowed_vars, v_arity)


def is_constant(e: Expression) -> bool:
    return not e.variables and not e.has_vterms


def constant_value(e: Expression) -> float:
    return float(evaluate(e, {}))
