"""Minimal data-expression language for boundary data and sources.

Grammar (left associative except '^', which is right associative and
restricted to constant nonnegative integer exponents):

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := unary ('^' factor)?
    unary  := '-'? atom
    atom   := number | 'x'digit | func '(' expr ')' | '(' expr ')'
    func   := sin | cos | exp | abs

Free variables are the coordinates x1..xd.  Division by zero raises at
evaluation time; there is no value for which evaluation silently produces
non-finite output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["parse_expr", "Expr", "ParseError", "EvalError"]

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}


class ParseError(ValueError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


class EvalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Expr:
    """Parsed expression; ``node`` is a nested tuple AST."""

    node: tuple
    src: str

    @property
    def free_vars(self) -> frozenset:
        out = set()

        def walk(n):
            kind = n[0]
            if kind == "var":
                out.add(n[1])
            elif kind in ("num",):
                pass
            elif kind in ("neg", "call"):
                walk(n[-1])
            elif kind in ("add", "sub", "mul", "div"):
                walk(n[1])
                walk(n[2])
            elif kind == "pow":
                walk(n[1])

        walk(self.node)
        return frozenset(out)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Evaluate on (N, d) points; returns (N,)."""
        points = np.atleast_2d(np.asarray(points, float))

        def ev(n):
            kind = n[0]
            if kind == "num":
                return np.full(points.shape[0], n[1])
            if kind == "var":
                if n[1] >= points.shape[1]:
                    raise EvalError(
                        f"x{n[1] + 1} referenced but points have d={points.shape[1]}"
                    )
                return points[:, n[1]].copy()
            if kind == "neg":
                return -ev(n[1])
            if kind == "add":
                return ev(n[1]) + ev(n[2])
            if kind == "sub":
                return ev(n[1]) - ev(n[2])
            if kind == "mul":
                return ev(n[1]) * ev(n[2])
            if kind == "div":
                denom = ev(n[2])
                if (denom == 0).any():
                    raise EvalError(f"division by zero in {self.src!r}")
                return ev(n[1]) / denom
            if kind == "pow":
                return ev(n[1]) ** n[2]
            if kind == "call":
                return _FUNCS[n[1]](ev(n[2]))
            raise AssertionError(kind)

        return ev(self.node)


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.pos = 0

    def error(self, msg):
        raise ParseError(msg, self.pos)

    def skip_ws(self):
        while self.pos < len(self.src) and self.src[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.src[self.pos] if self.pos < len(self.src) else ""

    def take(self, ch):
        if self.peek() == ch:
            self.pos += 1
            return True
        return False

    def expect(self, ch):
        if not self.take(ch):
            self.error(f"expected {ch!r}")

    def parse(self):
        node = self.expr()
        self.skip_ws()
        if self.pos != len(self.src):
            self.error("trailing input")
        return node

    def expr(self):
        node = self.term()
        while True:
            c = self.peek()
            if c == "+":
                self.pos += 1
                node = ("add", node, self.term())
            elif c == "-":
                self.pos += 1
                node = ("sub", node, self.term())
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            c = self.peek()
            if c == "*":
                self.pos += 1
                node = ("mul", node, self.factor())
            elif c == "/":
                self.pos += 1
                node = ("div", node, self.factor())
            else:
                return node

    def factor(self):
        base = self.unary()
        if self.peek() == "^":
            self.pos += 1
            at = self.pos
            exponent = self.factor()  # right associative
            value = _fold_constant(exponent)
            if value is None or value < 0 or value != int(value):
                raise ParseError("exponent must be a nonnegative integer", at)
            return ("pow", base, int(value))
        return base

    def unary(self):
        if self.peek() == "-":
            self.pos += 1
            return ("neg", self.atom())
        return self.atom()

    def atom(self):
        c = self.peek()
        if c == "(":
            self.pos += 1
            node = self.expr()
            self.expect(")")
            return node
        if c.isdigit() or c == ".":
            return self.number()
        if c.isalpha():
            return self.identifier()
        self.error("expected a number, coordinate, function, or '('")

    def number(self):
        start = self.pos
        seen_dot = False
        while self.pos < len(self.src):
            ch = self.src[self.pos]
            if ch.isdigit():
                self.pos += 1
            elif ch == "." and not seen_dot:
                seen_dot = True
                self.pos += 1
            else:
                break
        text = self.src[start : self.pos]
        if text in (".", ""):
            self.error("malformed number")
        return ("num", float(text))

    def identifier(self):
        start = self.pos
        while self.pos < len(self.src) and (
            self.src[self.pos].isalnum() or self.src[self.pos] == "_"
        ):
            self.pos += 1
        name = self.src[start : self.pos]
        if len(name) >= 2 and name[0] == "x" and name[1:].isdigit():
            idx = int(name[1:])
            if idx < 1:
                raise ParseError("coordinates are numbered from x1", start)
            return ("var", idx - 1)
        if name in _FUNCS:
            self.expect("(")
            node = self.expr()
            self.expect(")")
            return ("call", name, node)
        raise ParseError(f"unknown identifier {name!r}", start)


def _fold_constant(node):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "neg":
        v = _fold_constant(node[1])
        return None if v is None else -v
    if kind == "pow":
        v = _fold_constant(node[1])
        return None if v is None else v ** node[2]
    if kind in ("add", "sub", "mul", "div"):
        a, b = _fold_constant(node[1]), _fold_constant(node[2])
        if a is None or b is None:
            return None
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        if kind == "mul":
            return a * b
        return a / b if b != 0 else None
    return None


def parse_expr(src: str) -> Expr:
    if not src or not src.strip():
        raise ParseError("empty expression", 0)
    return Expr(_Parser(src).parse(), src)
