"""Sparse multivariate polynomials with exact term bookkeeping.

A polynomial in n variables is stored as a dict mapping exponent tuples
(length n, non-negative ints) to float coefficients.  The zero polynomial is
the empty dict.  All operations are pure: they return new Polynomial objects
and never mutate their inputs.  Coefficients with |c| < COEF_DROP_TOL are
dropped after every arithmetic step so round-off dust does not accumulate
into spurious terms.

Term order everywhere is graded lexicographic: sort key (total degree,
exponent tuple).  monomial_basis enumerates in ascending graded-lex order;
printing uses descending order so the leading term comes first.
"""

from __future__ import annotations

import math
import re
from typing import Dict, List, Sequence, Tuple

import numpy as np

Mono = Tuple[int, ...]

# Coefficients smaller than this in absolute value are treated as exact zeros.
COEF_DROP_TOL = 1e-14


def monomial_basis(nvars: int, max_degree: int) -> List[Mono]:
    """All exponent tuples with total degree <= max_degree, graded-lex ascending."""
    if nvars < 1:
        raise ValueError("nvars must be >= 1")
    if max_degree < 0:
        raise ValueError("max_degree must be >= 0")
    out: List[Mono] = []

    def rec(prefix: Tuple[int, ...], remaining: int, budget: int) -> None:
        if remaining == 0:
            out.append(prefix)
            return
        for e in range(budget + 1):
            rec(prefix + (e,), remaining - 1, budget - e)

    rec((), nvars, max_degree)
    out.sort(key=lambda m: (sum(m), m))
    return out


class ParseError(ValueError):
    """Raised on malformed polynomial text; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class Polynomial:
    """Immutable sparse polynomial over float coefficients."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Dict[Mono, float] | None = None):
        if nvars < 1:
            raise ValueError("nvars must be >= 1")
        clean: Dict[Mono, float] = {}
        for mono, coef in (terms or {}).items():
            if len(mono) != nvars:
                raise ValueError(f"exponent tuple {mono} has wrong length for nvars={nvars}")
            if any(e < 0 or int(e) != e for e in mono):
                raise ValueError(f"exponents must be non-negative integers, got {mono}")
            c = float(coef)
            if abs(c) < COEF_DROP_TOL:
                continue
            clean[tuple(int(e) for e in mono)] = c
        object.__setattr__(self, "nvars", nvars)
        object.__setattr__(self, "terms", clean)

    def __setattr__(self, name, value):  # pragma: no cover - guard only
        raise AttributeError("Polynomial is immutable")

    # ------------------------------------------------------------------
    # constructors

    @staticmethod
    def zero(nvars: int) -> "Polynomial":
        return Polynomial(nvars, {})

    @staticmethod
    def constant(nvars: int, value: float) -> "Polynomial":
        return Polynomial(nvars, {(0,) * nvars: value})

    @staticmethod
    def variable(nvars: int, index: int) -> "Polynomial":
        if not 0 <= index < nvars:
            raise ValueError(f"variable index {index} out of range for nvars={nvars}")
        mono = tuple(1 if i == index else 0 for i in range(nvars))
        return Polynomial(nvars, {mono: 1.0})

    # ------------------------------------------------------------------
    # basic queries

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        """Total degree; the zero polynomial has degree 0 by convention."""
        if not self.terms:
            return 0
        return max(sum(m) for m in self.terms)

    def coefficient(self, mono: Mono) -> float:
        return self.terms.get(tuple(mono), 0.0)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Polynomial)
            and self.nvars == other.nvars
            and self.terms == other.terms
        )

    __hash__ = None  # type: ignore[assignment]

    # ------------------------------------------------------------------
    # arithmetic

    def _check_same_space(self, other: "Polynomial") -> None:
        if self.nvars != other.nvars:
            raise ValueError(f"nvars mismatch: {self.nvars} vs {other.nvars}")

    def __add__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        self._check_same_space(other)
        terms = dict(self.terms)
        for mono, c in other.terms.items():
            terms[mono] = terms.get(mono, 0.0) + c
        return Polynomial(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.nvars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        return self + (-other)

    def __rsub__(self, other) -> "Polynomial":
        return (-self) + other

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            return Polynomial(self.nvars, {m: c * other for m, c in self.terms.items()})
        self._check_same_space(other)
        terms: Dict[Mono, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                mono = tuple(a + b for a, b in zip(m1, m2))
                terms[mono] = terms.get(mono, 0.0) + c1 * c2
        return Polynomial(self.nvars, terms)

    __rmul__ = __mul__

    def __pow__(self, exponent: int) -> "Polynomial":
        if exponent < 0 or int(exponent) != exponent:
            raise ValueError("exponent must be a non-negative integer")
        # plain repeated multiplication: degrees here are small and this keeps
        # the float rounding identical to an explicit product chain
        result = Polynomial.constant(self.nvars, 1.0)
        for _ in range(int(exponent)):
            result = result * self
        return result

    # ------------------------------------------------------------------
    # calculus and evaluation

    def gradient(self) -> List["Polynomial"]:
        """Partial derivatives with respect to every variable."""
        grads = []
        for i in range(self.nvars):
            terms: Dict[Mono, float] = {}
            for mono, c in self.terms.items():
                if mono[i] == 0:
                    continue
                new = list(mono)
                new[i] -= 1
                key = tuple(new)
                terms[key] = terms.get(key, 0.0) + c * mono[i]
            grads.append(Polynomial(self.nvars, terms))
        return grads

    def evaluate(self, point: Sequence[float]) -> float:
        if len(point) != self.nvars:
            raise ValueError("point has wrong dimension")
        total = 0.0
        for mono, c in self.terms.items():
            v = c
            for x, e in zip(point, mono):
                if e:
                    v *= x ** e
            total += v
        return total

    __call__ = evaluate

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation at an (m, nvars) array of points."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.nvars:
            raise ValueError("points must have shape (m, nvars)")
        total = np.zeros(pts.shape[0])
        for mono, c in self.terms.items():
            v = np.full(pts.shape[0], c)
            for j, e in enumerate(mono):
                if e:
                    v *= pts[:, j] ** e
            total += v
        return total

    def compose(self, assignments: Sequence["Polynomial"]) -> "Polynomial":
        """Substitute assignments[i] for variable i; exact polynomial composition.

        All assignment polynomials must share a common variable space, which
        becomes the space of the result.
        """
        if len(assignments) != self.nvars:
            raise ValueError("need one assignment per variable")
        if not assignments:
            raise ValueError("empty assignment list")
        out_n = assignments[0].nvars
        for a in assignments:
            if a.nvars != out_n:
                raise ValueError("assignment polynomials live in different spaces")
        # memoized powers of each assignment
        powers: List[Dict[int, Polynomial]] = [
            {0: Polynomial.constant(out_n, 1.0)} for _ in assignments
        ]

        def power(i: int, e: int) -> Polynomial:
            memo = powers[i]
            if e not in memo:
                memo[e] = power(i, e - 1) * assignments[i]
            return memo[e]

        result = Polynomial.zero(out_n)
        for mono, c in self.terms.items():
            term = Polynomial.constant(out_n, c)
            for i, e in enumerate(mono):
                if e:
                    term = term * power(i, e)
            result = result + term
        return result

    def max_abs_coef(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    # ------------------------------------------------------------------
    # printing

    def to_string(self, names: Sequence[str] | None = None) -> str:
        """Canonical text form; parse(to_string()) reproduces the polynomial."""
        if names is None:
            names = [f"x{i}" for i in range(self.nvars)]
        if len(names) != self.nvars:
            raise ValueError("need one name per variable")
        if not self.terms:
            return "0"
        ordered = sorted(self.terms.items(), key=lambda kv: (sum(kv[0]), kv[0]), reverse=True)
        pieces: List[str] = []
        for idx, (mono, coef) in enumerate(ordered):
            mag = abs(coef)
            factors = []
            for name, e in zip(names, mono):
                if e == 1:
                    factors.append(name)
                elif e > 1:
                    factors.append(f"{name}^{e}")
            if not factors:
                body = repr(mag)
            elif mag == 1.0:
                body = "*".join(factors)
            else:
                body = repr(mag) + "*" + "*".join(factors)
            if idx == 0:
                pieces.append(("-" if coef < 0 else "") + body)
            else:
                pieces.append((" - " if coef < 0 else " + ") + body)
        return "".join(pieces)

    def __repr__(self) -> str:
        return f"Polynomial<{self.nvars}>({self.to_string()})"


# ----------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*^()]))"
)


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            bad_at = len(text) - len(stripped)
            raise ParseError(f"unexpected character {text[bad_at]!r}", bad_at)
        if m.group("number") is not None:
            tokens.append(("number", m.group("number"), m.start("number")))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    return tokens


class _Parser:
    """Recursive descent over: expr := sign? term ((+|-) term)*;
    term := factor (* factor)*; factor := base (^ uint)?;
    base := number | identifier | ( expr )."""

    def __init__(self, tokens: List[Tuple[str, str, int]], names: Sequence[str], textlen: int):
        self.tokens = tokens
        self.pos = 0
        self.index = {name: i for i, name in enumerate(names)}
        self.nvars = len(names)
        self.textlen = textlen

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next_pos(self) -> int:
        tok = self.peek()
        return tok[2] if tok else self.textlen

    def expr(self) -> Polynomial:
        sign = 1.0
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] in "+-":
            self.pos += 1
            sign = -1.0 if tok[1] == "-" else 1.0
        result = self.term() * sign
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] in "+-":
                self.pos += 1
                nxt = self.term()
                result = result + nxt if tok[1] == "+" else result - nxt
            else:
                return result

    def term(self) -> Polynomial:
        result = self.factor()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] == "*":
                self.pos += 1
                result = result * self.factor()
            else:
                return result

    def factor(self) -> Polynomial:
        base = self.base()
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] == "^":
            self.pos += 1
            etok = self.peek()
            if not etok or etok[0] != "number" or not etok[1].isdigit():
                raise ParseError("exponent must be a non-negative integer", self.next_pos())
            self.pos += 1
            return base ** int(etok[1])
        return base

    def base(self) -> Polynomial:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of expression", self.textlen)
        kind, value, position = tok
        if kind == "number":
            self.pos += 1
            return Polynomial.constant(self.nvars, float(value))
        if kind == "ident":
            if value not in self.index:
                raise ParseError(f"unknown variable {value!r}", position)
            self.pos += 1
            return Polynomial.variable(self.nvars, self.index[value])
        if kind == "op" and value == "(":
            self.pos += 1
            inner = self.expr()
            tok = self.peek()
            if not tok or tok[0] != "op" or tok[1] != ")":
                raise ParseError("expected ')'", self.next_pos())
            self.pos += 1
            return inner
        raise ParseError(f"unexpected token {value!r}", position)


def parse_poly(text: str, names: Sequence[str]) -> Polynomial:
    """Parse an expression over the given variable names into a Polynomial.

    Supported syntax: float literals, variable names, +, -, *, ^ with
    non-negative integer exponents, and parentheses.  A leading sign is
    allowed.  Raises ParseError with a character position on bad input.
    """
    if len(set(names)) != len(names):
        raise ValueError("duplicate variable names")
    if not names:
        raise ValueError("need at least one variable name")
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty expression", 0)
    parser = _Parser(tokens, names, len(text))
    result = parser.expr()
    if parser.peek() is not None:
        raise ParseError(f"trailing input {parser.peek()[1]!r}", parser.next_pos())
    return result


# ----------------------------------------------------------------------
# vector/matrix conveniences; PolyVec and PolyMat are plain lists

PolyVec = List[Polynomial]
PolyMat = List[List[Polynomial]]


def check_same_space(polys: Sequence[Polynomial]) -> int:
    """Validate that all entries share one variable space; return nvars."""
    if not polys:
        raise ValueError("empty polynomial collection")
    n = polys[0].nvars
    for p in polys:
        if p.nvars != n:
            raise ValueError("polynomials live in different variable spaces")
    return n


def grad_dot(f: Sequence[Polynomial], v: Polynomial) -> Polynomial:
    """f . grad(v), the derivative of v along the vector field f."""
    n = check_same_space(list(f) + [v])
    if len(f) != n:
        raise ValueError("vector field dimension must equal nvars")
    out = Polynomial.zero(n)
    for fi, dvi in zip(f, v.gradient()):
        out = out + fi * dvi
    return out
