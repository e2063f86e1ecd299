"""Scalar expressions in (t, B) for random coefficient fields.

The grammar is a product of factors, each one of

    number | t | B | exp(k*B [+ h*t]) | exp(h*t) | (c - t)^k | t^k

so every expression canonicalizes to

    g(t) * B^p * exp(kappa*B),   g(t) = c * t^q * prod_i (c_i - t)^{k_i} * exp(eta*t).

The factored form keeps Gaussian moments of the B-part available in closed
form, which the constraint generators and several estimators rely on.
Decimal literals are parsed with float() so round-trips are bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ExpressionParseError

_IDENT_CHARS = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")


def _tokenize(text: str) -> list[tuple[str, object, int]]:
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or (text[j] == "." and not seen_dot)):
                seen_dot = seen_dot or text[j] == "."
                j += 1
            tokens.append(("num", text[i:j], i))
            i = j
            continue
        if ch in _IDENT_CHARS:
            j = i
            while j < n and text[j] in _IDENT_CHARS:
                j += 1
            word = text[i:j]
            if word not in ("t", "B", "exp"):
                raise ExpressionParseError(f"unknown token {word!r}", text, i)
            tokens.append((word, word, i))
            i = j
            continue
        if ch in "()*+-^":
            tokens.append((ch, ch, i))
            i += 1
            continue
        raise ExpressionParseError(f"unknown token {ch!r}", text, i)
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> str:
        return self.tokens[self.pos][0]

    def next(self) -> tuple[str, object, int]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str) -> tuple[str, object, int]:
        tok = self.next()
        if tok[0] != kind:
            raise ExpressionParseError(f"expected {kind!r}, found {tok[1]!r}", self.text, tok[2])
        return tok

    def fail(self, message: str):
        tok = self.tokens[self.pos]
        raise ExpressionParseError(message, self.text, tok[2])

    def number(self) -> float:
        sign = 1.0
        while self.peek() in ("+", "-"):
            if self.next()[0] == "-":
                sign = -sign
        tok = self.expect("num")
        return sign * float(tok[1])

    def integer(self) -> int:
        sign = 1
        while self.peek() in ("+", "-"):
            if self.next()[0] == "-":
                sign = -sign
        tok = self.expect("num")
        if "." in tok[1]:
            raise ExpressionParseError("exponent must be an integer", self.text, tok[2])
        return sign * int(tok[1])


@dataclass(frozen=True)
class Expression:
    """Canonical product form of a grammar expression."""

    coeff: float = 1.0
    t_pow: int = 0
    shifted: tuple[tuple[float, int], ...] = ()  # factors (c - t)^k
    b_pow: int = 0
    exp_b: float = 0.0
    exp_t: float = 0.0
    source: str = field(default="", compare=False)

    @property
    def depends_on_b(self) -> bool:
        return self.b_pow != 0 or self.exp_b != 0.0

    @staticmethod
    def constant(value: float) -> "Expression":
        return Expression(coeff=float(value), source=repr(float(value)))

    def deterministic_part(self, t):
        """Evaluate the B-free factor g(t)."""
        out = np.asarray(t, dtype=float) * 0.0 + self.coeff
        if self.t_pow:
            out = out * np.asarray(t, dtype=float) ** self.t_pow
        for c, k in self.shifted:
            out = out * (c - np.asarray(t, dtype=float)) ** k
        if self.exp_t:
            out = out * np.exp(self.exp_t * np.asarray(t, dtype=float))
        return out

    def __call__(self, t, b):
        out = self.deterministic_part(t)
        b = np.asarray(b, dtype=float)
        if self.b_pow:
            out = out * b**self.b_pow
        if self.exp_b:
            out = out * np.exp(self.exp_b * b)
        else:
            out = out * np.ones_like(b)
        return out

    def gaussian_moment(self, t: float, sigma2: float, power: int = 1) -> float:
        """E[expr(t, B)^power] for B ~ N(0, sigma2), exact in the B-part."""
        g = float(self.deterministic_part(t)) ** power
        return g * _b_factor_moment(power * self.b_pow, power * self.exp_b, sigma2)

    def scaled(self, factor: float) -> "Expression":
        return Expression(
            coeff=self.coeff * factor,
            t_pow=self.t_pow,
            shifted=self.shifted,
            b_pow=self.b_pow,
            exp_b=self.exp_b,
            exp_t=self.exp_t,
            source=f"{factor!r} * {self.source}" if self.source else repr(factor),
        )


def _b_factor_moment(p: int, kappa: float, sigma2: float) -> float:
    """E[B^p exp(kappa B)] for B ~ N(0, sigma2), via the Gaussian shift identity."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    if sigma2 == 0.0:
        return 0.0 if p > 0 else 1.0
    shift = kappa * sigma2
    total = 0.0
    for j in range(0, p + 1, 2):
        # E[Z^j] = (j-1)!! sigma^j for even j, Z ~ N(0, sigma2)
        central = math.prod(range(1, j, 2)) * sigma2 ** (j // 2)
        total += math.comb(p, j) * shift ** (p - j) * central
    return math.exp(0.5 * kappa**2 * sigma2) * total


def parse_expression(text: str) -> Expression:
    """Parse a scalar expression; unknown tokens are a hard error."""
    parser = _Parser(text)
    coeff = 1.0
    t_pow = 0
    shifted: dict[float, int] = {}
    b_pow = 0
    exp_b = 0.0
    exp_t = 0.0

    while True:
        kind = parser.peek()
        if kind in ("num", "+", "-"):
            coeff *= parser.number()
        elif kind == "t":
            parser.next()
            if parser.peek() == "^":
                parser.next()
                t_pow += parser.integer()
            else:
                t_pow += 1
        elif kind == "B":
            parser.next()
            if parser.peek() == "^":
                parser.fail("write repeated B factors instead of B^k")
            b_pow += 1
        elif kind == "exp":
            parser.next()
            parser.expect("(")
            db, dt = _parse_linear(parser)
            parser.expect(")")
            exp_b += db
            exp_t += dt
        elif kind == "(":
            parser.next()
            c = parser.number()
            parser.expect("-")
            parser.expect("t")
            parser.expect(")")
            parser.expect("^")
            k = parser.integer()
            shifted[c] = shifted.get(c, 0) + k
        else:
            parser.fail("expected a factor")

        if parser.peek() == "*":
            parser.next()
            continue
        parser.expect("end")
        break

    return Expression(
        coeff=coeff,
        t_pow=t_pow,
        shifted=tuple(sorted((c, k) for c, k in shifted.items() if k != 0)),
        b_pow=b_pow,
        exp_b=exp_b,
        exp_t=exp_t,
        source=text,
    )


def _parse_linear(parser: _Parser) -> tuple[float, float]:
    """lin := number*B [+ number*t] | number*t, returning (B coef, t coef)."""
    first = parser.number()
    parser.expect("*")
    tok = parser.next()
    if tok[0] == "B":
        if parser.peek() in ("+", "-"):
            second = parser.number()
            parser.expect("*")
            parser.expect("t")
            return first, second
        return first, 0.0
    if tok[0] == "t":
        return 0.0, first
    raise ExpressionParseError("expected B or t in exp()", parser.text, tok[2])


ZERO = Expression.constant(0.0)
ONE = Expression.constant(1.0)
