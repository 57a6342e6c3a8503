"""Scalar expression trees for vector fields and verification conditions.

Expressions are immutable ASTs over variables x1..xn supporting point
evaluation (scalar and batched), symbolic differentiation, and printing.
The grammar is deliberately small: + - * / ^ (non-negative integer
exponents only), unary minus, and the functions tanh/exp/ln.  Keeping
the operator set this small means every node has a cheap interval
extension and a closed-form derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expr", "Constant", "Var", "Add", "Sub", "Mul", "Div", "Neg",
    "IntPow", "Tanh", "Exp", "Ln", "VectorField",
    "ParseError", "DomainError",
    "parse", "evaluate", "evaluate_many", "diff", "to_str",
]


class ParseError(ValueError):
    """Malformed expression text. ``position`` is the 0-based offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class DomainError(ArithmeticError):
    """Point evaluation hit ln of a non-positive value or division by zero."""


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 0-based coordinate

    def __post_init__(self):
        if self.index < 0:
            raise IndexError(f"variable index must be >= 0, got {self.index}")


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Div:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class IntPow:
    base: "Expr"
    exponent: int

    def __post_init__(self):
        if not isinstance(self.exponent, int) or self.exponent < 0:
            raise ValueError(f"IntPow exponent must be a non-negative integer, got {self.exponent!r}")


@dataclass(frozen=True)
class Tanh:
    arg: "Expr"


@dataclass(frozen=True)
class Exp:
    arg: "Expr"


@dataclass(frozen=True)
class Ln:
    arg: "Expr"


Expr = Union[Constant, Var, Add, Sub, Mul, Div, Neg, IntPow, Tanh, Exp, Ln]


def max_var_index(e: Expr) -> int:
    """Largest Var index in the tree, or -1 if there are no variables."""
    if isinstance(e, Constant):
        return -1
    if isinstance(e, Var):
        return e.index
    if isinstance(e, (Add, Sub, Mul, Div)):
        return max(max_var_index(e.left), max_var_index(e.right))
    if isinstance(e, IntPow):
        return max_var_index(e.base)
    return max_var_index(e.arg)  # Neg, Tanh, Exp, Ln


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_FUNCS = ("tanh", "exp", "ln")


class _Tokenizer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self._skip_ws()
        if self.pos >= len(self.text):
            return ("end", "", self.pos)
        ch = self.text[self.pos]
        start = self.pos
        if ch in "+-*/^()":
            return ("op", ch, start)
        if ch.isdigit() or ch == ".":
            j = self.pos
            seen_dot = False
            while j < len(self.text) and (self.text[j].isdigit() or (self.text[j] == "." and not seen_dot)):
                if self.text[j] == ".":
                    seen_dot = True
                j += 1
            # optional exponent part
            if j < len(self.text) and self.text[j] in "eE":
                k = j + 1
                if k < len(self.text) and self.text[k] in "+-":
                    k += 1
                if k < len(self.text) and self.text[k].isdigit():
                    while k < len(self.text) and self.text[k].isdigit():
                        k += 1
                    j = k
            return ("num", self.text[start:j], start)
        if ch.isalpha() or ch == "_":
            j = self.pos
            while j < len(self.text) and (self.text[j].isalnum() or self.text[j] == "_"):
                j += 1
            return ("ident", self.text[start:j], start)
        raise ParseError(f"unexpected character {ch!r}", start)

    def next(self):
        tok = self.peek()
        self.pos = tok[2] + len(tok[1])
        return tok


class _Parser:
    def __init__(self, text: str, dim: int):
        self.toks = _Tokenizer(text)
        self.dim = dim

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, pos = self.toks.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", pos)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            kind, val, _ = self.toks.peek()
            if kind == "op" and val in "+-":
                self.toks.next()
                rhs = self.term()
                e = Add(e, rhs) if val == "+" else Sub(e, rhs)
            else:
                return e

    def term(self) -> Expr:
        e = self.unary()
        while True:
            kind, val, _ = self.toks.peek()
            if kind == "op" and val in "*/":
                self.toks.next()
                rhs = self.unary()
                e = Mul(e, rhs) if val == "*" else Div(e, rhs)
            else:
                return e

    def unary(self) -> Expr:
        kind, val, _ = self.toks.peek()
        if kind == "op" and val == "-":
            self.toks.next()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.toks.next()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        e = self.atom()
        while True:
            kind, val, _ = self.toks.peek()
            if kind == "op" and val == "^":
                self.toks.next()
                k2, v2, p2 = self.toks.next()
                if k2 != "num" or any(c in v2 for c in ".eE"):
                    raise ParseError("exponent must be a non-negative integer literal", p2)
                e = IntPow(e, int(v2))
            else:
                return e

    def atom(self) -> Expr:
        kind, val, pos = self.toks.next()
        if kind == "num":
            return Constant(float(val))
        if kind == "ident":
            if val in _FUNCS:
                k2, v2, p2 = self.toks.next()
                if not (k2 == "op" and v2 == "("):
                    raise ParseError(f"expected '(' after {val}", p2)
                arg = self.expr()
                k3, v3, p3 = self.toks.next()
                if not (k3 == "op" and v3 == ")"):
                    raise ParseError("expected ')'", p3)
                return {"tanh": Tanh, "exp": Exp, "ln": Ln}[val](arg)
            if val.startswith("x") and val[1:].isdigit():
                idx = int(val[1:])
                if idx < 1:
                    raise ParseError("variables are named x1, x2, ...", pos)
                if idx > self.dim:
                    raise IndexError(f"variable {val} exceeds dimension {self.dim}")
                return Var(idx - 1)
            raise ParseError(f"unknown identifier {val!r}", pos)
        if kind == "op" and val == "(":
            e = self.expr()
            k2, v2, p2 = self.toks.next()
            if not (k2 == "op" and v2 == ")"):
                raise ParseError("expected ')'", p2)
            return e
        raise ParseError(f"unexpected token {val!r}" if val else "unexpected end of input", pos)


def parse(text: str, dim: int) -> Expr:
    """Parse an infix expression over x1..x{dim} into an AST.

    Precedence: ``^`` (integer exponents only) binds tighter than unary
    minus, which binds tighter than ``* /``, which bind tighter than
    ``+ -``.  Whitespace is insignificant.
    """
    return _Parser(text, dim).parse()


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(e: Expr, x) -> float:
    """Evaluate at a single point. Raises DomainError on ln(<=0) or x/0."""
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Var):
        return float(x[e.index])
    if isinstance(e, Add):
        return evaluate(e.left, x) + evaluate(e.right, x)
    if isinstance(e, Sub):
        return evaluate(e.left, x) - evaluate(e.right, x)
    if isinstance(e, Mul):
        return evaluate(e.left, x) * evaluate(e.right, x)
    if isinstance(e, Div):
        d = evaluate(e.right, x)
        if d == 0.0:
            raise DomainError("division by zero")
        return evaluate(e.left, x) / d
    if isinstance(e, Neg):
        return -evaluate(e.arg, x)
    if isinstance(e, IntPow):
        return evaluate(e.base, x) ** e.exponent
    if isinstance(e, Tanh):
        return float(np.tanh(evaluate(e.arg, x)))
    if isinstance(e, Exp):
        return float(np.exp(evaluate(e.arg, x)))
    if isinstance(e, Ln):
        a = evaluate(e.arg, x)
        if a <= 0.0:
            raise DomainError(f"ln of non-positive value {a}")
        return float(np.log(a))
    raise TypeError(f"not an Expr node: {e!r}")


def evaluate_many(e: Expr, X: np.ndarray) -> np.ndarray:
    """Vectorized evaluation over points X of shape (K, n) -> (K,).

    Unlike :func:`evaluate`, out-of-domain points silently produce
    inf/nan so a batch is never aborted by a single bad sample.
    """
    if isinstance(e, Constant):
        return np.full(X.shape[0], e.value)
    if isinstance(e, Var):
        return X[:, e.index].astype(float, copy=True)
    if isinstance(e, Add):
        return evaluate_many(e.left, X) + evaluate_many(e.right, X)
    if isinstance(e, Sub):
        return evaluate_many(e.left, X) - evaluate_many(e.right, X)
    if isinstance(e, Mul):
        return evaluate_many(e.left, X) * evaluate_many(e.right, X)
    if isinstance(e, Div):
        with np.errstate(divide="ignore", invalid="ignore"):
            return evaluate_many(e.left, X) / evaluate_many(e.right, X)
    if isinstance(e, Neg):
        return -evaluate_many(e.arg, X)
    if isinstance(e, IntPow):
        return evaluate_many(e.base, X) ** e.exponent
    if isinstance(e, Tanh):
        return np.tanh(evaluate_many(e.arg, X))
    if isinstance(e, Exp):
        return np.exp(evaluate_many(e.arg, X))
    if isinstance(e, Ln):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(evaluate_many(e.arg, X))
    raise TypeError(f"not an Expr node: {e!r}")


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def diff(e: Expr, var: int) -> Expr:
    """Symbolic partial derivative with respect to x_{var+1}. Unreduced."""
    if isinstance(e, Constant):
        return Constant(0.0)
    if isinstance(e, Var):
        return Constant(1.0) if e.index == var else Constant(0.0)
    if isinstance(e, Add):
        return Add(diff(e.left, var), diff(e.right, var))
    if isinstance(e, Sub):
        return Sub(diff(e.left, var), diff(e.right, var))
    if isinstance(e, Mul):
        return Add(Mul(diff(e.left, var), e.right), Mul(e.left, diff(e.right, var)))
    if isinstance(e, Div):
        num = Sub(Mul(diff(e.left, var), e.right), Mul(e.left, diff(e.right, var)))
        return Div(num, IntPow(e.right, 2))
    if isinstance(e, Neg):
        return Neg(diff(e.arg, var))
    if isinstance(e, IntPow):
        if e.exponent == 0:
            return Constant(0.0)
        if e.exponent == 1:
            return diff(e.base, var)
        return Mul(Mul(Constant(float(e.exponent)), IntPow(e.base, e.exponent - 1)),
                   diff(e.base, var))
    if isinstance(e, Tanh):
        return Mul(Sub(Constant(1.0), IntPow(Tanh(e.arg), 2)), diff(e.arg, var))
    if isinstance(e, Exp):
        return Mul(Exp(e.arg), diff(e.arg, var))
    if isinstance(e, Ln):
        return Div(diff(e.arg, var), e.arg)
    raise TypeError(f"not an Expr node: {e!r}")


# ---------------------------------------------------------------------------
# Printing (round-trips through parse)
# ---------------------------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(e: Expr) -> int:
    if isinstance(e, (Add, Sub)):
        return _PREC_ADD
    if isinstance(e, (Mul, Div)):
        return _PREC_MUL
    if isinstance(e, Neg):
        return _PREC_UNARY
    if isinstance(e, IntPow):
        return _PREC_POW
    if isinstance(e, Constant) and (e.value < 0 or (e.value == 0 and np.signbit(e.value))):
        return _PREC_UNARY  # prints with a leading minus
    return _PREC_ATOM


def _wrap(e: Expr, parent_prec: int) -> str:
    s = to_str(e)
    return f"({s})" if _prec(e) < parent_prec else s


def to_str(e: Expr) -> str:
    """Render to the concrete grammar; `parse(to_str(e), n)` evaluates identically."""
    if isinstance(e, Constant):
        return repr(e.value)
    if isinstance(e, Var):
        return f"x{e.index + 1}"
    if isinstance(e, Add):
        return f"{_wrap(e.left, _PREC_ADD)} + {_wrap(e.right, _PREC_ADD + 1)}"
    if isinstance(e, Sub):
        return f"{_wrap(e.left, _PREC_ADD)} - {_wrap(e.right, _PREC_ADD + 1)}"
    if isinstance(e, Mul):
        return f"{_wrap(e.left, _PREC_MUL)}*{_wrap(e.right, _PREC_MUL + 1)}"
    if isinstance(e, Div):
        return f"{_wrap(e.left, _PREC_MUL)}/{_wrap(e.right, _PREC_MUL + 1)}"
    if isinstance(e, Neg):
        return f"-{_wrap(e.arg, _PREC_UNARY)}"
    if isinstance(e, IntPow):
        return f"{_wrap(e.base, _PREC_ATOM)}^{e.exponent}"
    if isinstance(e, Tanh):
        return f"tanh({to_str(e.arg)})"
    if isinstance(e, Exp):
        return f"exp({to_str(e.arg)})"
    if isinstance(e, Ln):
        return f"ln({to_str(e.arg)})"
    raise TypeError(f"not an Expr node: {e!r}")


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VectorField:
    """An n-dimensional vector field with one Expr per component."""

    dim: int
    components: tuple

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) != self.dim:
            raise ValueError(f"expected {self.dim} components, got {len(comps)}")
        for i, c in enumerate(comps):
            k = max_var_index(c)
            if k >= self.dim:
                raise IndexError(f"component {i} references x{k + 1} beyond dimension {self.dim}")

    def __call__(self, x) -> np.ndarray:
        return np.array([evaluate(c, x) for c in self.components])

    def eval_many(self, X: np.ndarray) -> np.ndarray:
        """(K, n) points -> (K, n) field values."""
        return np.stack([evaluate_many(c, X) for c in self.components], axis=1)

    def jacobian_exprs(self) -> list:
        """Row-major list of lists: entry [i][j] = d f_i / d x_j."""
        return [[diff(c, j) for j in range(self.dim)] for c in self.components]
