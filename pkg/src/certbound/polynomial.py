"""Sparse multivariate polynomials over named variables.

Polynomials are immutable maps from exponent tuples to float coefficients.
Exactly-zero coefficients are never stored.  Monomials are ordered
graded-lexicographically everywhere (basis enumeration, coefficient
equations, rendering), so assembly downstream is reproducible.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

Monomial = tuple[int, ...]


class PolynomialError(ValueError):
    pass


class SpaceMismatchError(PolynomialError):
    pass


class ParseError(PolynomialError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


@dataclass(frozen=True)
class VariableSpace:
    names: tuple[str, ...]

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if not names:
            raise PolynomialError("variable space must contain at least one name")
        for name in names:
            if not isinstance(name, str) or not _IDENT.match(name):
                raise PolynomialError(f"invalid variable name {name!r}")
        if len(set(names)) != len(names):
            raise PolynomialError(f"duplicate variable names in {names}")
        object.__setattr__(self, "names", names)

    @property
    def dim(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise PolynomialError(f"unknown variable {name!r} (space {self.names})") from None

    def __contains__(self, name: object) -> bool:
        return name in self.names

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)


def grlex_key(m: Monomial) -> tuple:
    """Sort key: total degree first, then lexicographic with the first variable largest."""
    return (sum(m), m)


def basis_key(m: Monomial) -> tuple:
    # Ascending degree; within a degree the first variable comes first (1, x1, x2, x1^2, ...).
    return (sum(m), tuple(-e for e in m))


def monomial_basis(space: VariableSpace, max_degree: int) -> list[Monomial]:
    """All monomials of total degree <= max_degree, ordered 1, x1, x2, ..., x1^2, x1*x2, ..."""
    if max_degree < 0:
        raise PolynomialError("max_degree must be nonnegative")
    n = space.dim
    out: list[Monomial] = []
    for d in range(max_degree + 1):
        for combo in combinations_with_replacement(range(n), d):
            e = [0] * n
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


def _ipow(x: float, k: int) -> float:
    result = 1.0
    while k:
        if k & 1:
            result *= x
        x *= x
        k >>= 1
    return result


def _format_coeff(c: float) -> str:
    s = f"{c:.17g}"
    if s in ("inf", "-inf", "nan"):
        raise PolynomialError(f"non-finite coefficient {c}")
    return s


class Polynomial:
    """Immutable sparse polynomial.  ``terms`` maps exponent tuples to coefficients."""

    __slots__ = ("_space", "_terms", "_hash")

    def __init__(self, space: VariableSpace, terms: Mapping[Monomial, float] | None = None):
        self._space = space
        clean: dict[Monomial, float] = {}
        if terms:
            n = space.dim
            for m, c in terms.items():
                m = tuple(int(e) for e in m)
                if len(m) != n or any(e < 0 for e in m):
                    raise PolynomialError(f"monomial {m} does not conform to space {space.names}")
                c = float(c)
                if c != 0.0:
                    clean[m] = clean.get(m, 0.0) + c
            clean = {m: c for m, c in clean.items() if c != 0.0}
        self._terms = clean
        self._hash = None

    @classmethod
    def _raw(cls, space: VariableSpace, terms: dict[Monomial, float]) -> "Polynomial":
        # Caller guarantees canonical terms.
        p = cls.__new__(cls)
        p._space = space
        p._terms = terms
        p._hash = None
        return p

    # construction helpers
    @classmethod
    def zero(cls, space: VariableSpace) -> "Polynomial":
        return cls._raw(space, {})

    @classmethod
    def constant(cls, space: VariableSpace, value: float) -> "Polynomial":
        value = float(value)
        return cls._raw(space, {(0,) * space.dim: value} if value != 0.0 else {})

    @classmethod
    def variable(cls, space: VariableSpace, name: str) -> "Polynomial":
        e = [0] * space.dim
        e[space.index(name)] = 1
        return cls._raw(space, {tuple(e): 1.0})

    @classmethod
    def monomial(cls, space: VariableSpace, exponents: Sequence[int], coeff: float = 1.0) -> "Polynomial":
        return cls(space, {tuple(exponents): coeff})

    @property
    def space(self) -> VariableSpace:
        return self._space

    @property
    def terms(self) -> Mapping[Monomial, float]:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def __len__(self) -> int:
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def coefficient(self, m: Monomial) -> float:
        return self._terms.get(tuple(m), 0.0)

    @property
    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((sum(m) for m in self._terms), default=-1)

    def degree_in(self, name: str) -> int:
        i = self._space.index(name)
        return max((m[i] for m in self._terms), default=-1)

    def depends_on(self, name: str) -> bool:
        return self.degree_in(name) > 0

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        """Terms in graded-lex descending order."""
        return sorted(self._terms.items(), key=lambda mc: grlex_key(mc[0]), reverse=True)

    # arithmetic
    def _check(self, other: "Polynomial") -> None:
        if self._space != other._space:
            raise SpaceMismatchError(f"space mismatch: {self._space.names} vs {other._space.names}")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.integer, np.floating)):
            return Polynomial.constant(self._space, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(self, other)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial._raw(self._space, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(self, -other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(other, -self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.integer, np.floating)):
            return self.scale(float(other))
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return multiply(self, other)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "Polynomial":
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise PolynomialError("polynomial exponent must be a nonnegative integer")
        result = Polynomial.constant(self._space, 1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                result = multiply(result, base)
            k >>= 1
            if k:
                base = multiply(base, base)
        return result

    def scale(self, factor: float) -> "Polynomial":
        if factor == 0.0:
            return Polynomial.zero(self._space)
        return Polynomial(self._space, {m: c * factor for m, c in self._terms.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._space == other._space and self._terms == other._terms

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self._space, frozenset(self._terms.items())))
        return self._hash

    def __repr__(self) -> str:
        return f"Polynomial({render(self)!r}, space={self._space.names})"

    def __str__(self) -> str:
        return render(self)

    # calculus and evaluation
    def diff(self, name: str) -> "Polynomial":
        return partial_derivative(self, name)

    def __call__(self, *point: float) -> float:
        return evaluate(self, point)

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at each row of ``points`` (shape (N, dim))."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self._space.dim:
            raise PolynomialError(f"points must have shape (N, {self._space.dim})")
        out = np.zeros(pts.shape[0])
        if not self._terms:
            return out
        maxdeg = [max(m[i] for m in self._terms) for i in range(self._space.dim)]
        powers = []
        for i, d in enumerate(maxdeg):
            col = [np.ones(pts.shape[0])]
            for _ in range(d):
                col.append(col[-1] * pts[:, i])
            powers.append(col)
        for m, c in self.sorted_terms():
            term = np.full(pts.shape[0], c)
            for i, e in enumerate(m):
                if e:
                    term = term * powers[i][e]
            out += term
        return out

    def compile(self):
        """Return a fast callable ``f(*values)`` that also broadcasts over numpy arrays."""
        args = [f"_a{i}" for i in range(self._space.dim)]
        pieces = []
        for m, c in self.sorted_terms():
            factors = [repr(c)]
            for a, e in zip(args, m):
                if e == 1:
                    factors.append(a)
                elif e > 1:
                    factors.append(f"{a}**{e}")
            pieces.append("*".join(factors))
        body = " + ".join(pieces) if pieces else "0.0"
        if not pieces or all(sum(m) == 0 for m in self._terms):
            body = f"{body} + 0.0 * ({' + '.join(args)})"
        src = f"def _f({', '.join(args)}):\n    return {body}\n"
        scope: dict = {}
        exec(src, scope)
        return scope["_f"]

    def substitute(self, mapping: Mapping[str, "Polynomial | float"], target: VariableSpace | None = None) -> "Polynomial":
        """Compose: replace each named variable by a polynomial over ``target``.

        Variables not in ``mapping`` must exist in ``target`` and are carried over.
        """
        return substitute(self, mapping, target)

    def embed(self, target: VariableSpace) -> "Polynomial":
        """Re-express over a larger space that contains every variable used here."""
        idx = []
        for i, name in enumerate(self._space.names):
            if name in target:
                idx.append((i, target.index(name)))
            elif self.degree_in(name) > 0:
                raise PolynomialError(f"variable {name!r} missing from target space {target.names}")
        terms = {}
        for m, c in self._terms.items():
            e = [0] * target.dim
            for i, j in idx:
                e[j] = m[i]
            terms[tuple(e)] = c
        return Polynomial._raw(target, terms)


def add(p: Polynomial, q: Polynomial) -> Polynomial:
    p._check(q)
    terms = dict(p._terms)
    for m, c in q._terms.items():
        s = terms.get(m, 0.0) + c
        if s == 0.0:
            terms.pop(m, None)
        else:
            terms[m] = s
    return Polynomial._raw(p._space, terms)


def negate(p: Polynomial) -> Polynomial:
    return -p


def multiply(p: Polynomial, q: Polynomial) -> Polynomial:
    p._check(q)
    terms: dict[Monomial, float] = {}
    for m1, c1 in p._terms.items():
        for m2, c2 in q._terms.items():
            m = tuple(a + b for a, b in zip(m1, m2))
            terms[m] = terms.get(m, 0.0) + c1 * c2
    return Polynomial._raw(p._space, {m: c for m, c in terms.items() if c != 0.0})


def partial_derivative(p: Polynomial, var: str) -> Polynomial:
    i = p._space.index(var)
    terms: dict[Monomial, float] = {}
    for m, c in p._terms.items():
        e = m[i]
        if e == 0:
            continue
        nm = m[:i] + (e - 1,) + m[i + 1:]
        terms[nm] = terms.get(nm, 0.0) + c * e
    return Polynomial._raw(p._space, {m: c for m, c in terms.items() if c != 0.0})


def evaluate(p: Polynomial, point: Sequence[float]) -> float:
    point = [float(x) for x in point]
    if len(point) != p._space.dim:
        raise PolynomialError(f"point has length {len(point)}, space dimension is {p._space.dim}")
    total = 0.0
    for m, c in p.sorted_terms():
        term = c
        for x, e in zip(point, m):
            if e:
                term *= _ipow(x, e)
        total += term
    return total


def substitute(p: Polynomial, mapping: Mapping[str, "Polynomial | float"], target: VariableSpace | None = None) -> Polynomial:
    target = target or p._space
    images: list[Polynomial] = []
    for name in p._space.names:
        if name in mapping:
            img = mapping[name]
            if not isinstance(img, Polynomial):
                img = Polynomial.constant(target, float(img))
            elif img.space != target:
                raise SpaceMismatchError(f"image of {name!r} is not over the target space")
        else:
            img = Polynomial.variable(target, name)
        images.append(img)
    cache: list[dict[int, Polynomial]] = [{0: Polynomial.constant(target, 1.0), 1: img} for img in images]

    def power(i: int, k: int) -> Polynomial:
        c = cache[i]
        if k not in c:
            c[k] = multiply(power(i, k - 1), images[i])
        return c[k]

    acc: dict[Monomial, float] = {}
    for m, coeff in p._terms.items():
        term = Polynomial.constant(target, coeff)
        for i, e in enumerate(m):
            if e:
                term = multiply(term, power(i, e))
        for mm, cc in term._terms.items():
            acc[mm] = acc.get(mm, 0.0) + cc
    return Polynomial._raw(target, {m: c for m, c in acc.items() if c != 0.0})


def coefficient_vector(p: Polynomial, basis: Sequence[Monomial]) -> np.ndarray:
    """Coefficients of ``p`` aligned with ``basis``; every monomial of ``p`` must be in it."""
    index = {m: i for i, m in enumerate(basis)}
    out = np.zeros(len(basis))
    for m, c in p._terms.items():
        j = index.get(m)
        if j is None:
            raise PolynomialError(f"monomial {m} of the polynomial is not in the basis")
        out[j] = c
    return out


def render(p: Polynomial) -> str:
    """Canonical text: graded-lex descending terms, ``c*x1^a*x2^b``, 17 significant digits."""
    if not p._terms:
        return "0"
    parts: list[str] = []
    for k, (m, c) in enumerate(p.sorted_terms()):
        factors = [] if abs(c) == 1.0 and any(m) else [_format_coeff(abs(c))]
        for name, e in zip(p._space.names, m):
            if e == 1:
                factors.append(name)
            elif e > 1:
                factors.append(f"{name}^{e}")
        body = "*".join(factors)
        if k == 0:
            parts.append(("-" if c < 0 else "") + body)
        else:
            parts.append((" - " if c < 0 else " + ") + body)
    return "".join(parts)


# ---------------------------------------------------------------------------
# expression parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str, space: VariableSpace):
        self.text = text
        self.space = space
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, msg: str, tok=None):
        tok = tok or self.peek()
        raise ParseError(msg, tok[2], self.text)

    def parse(self) -> Polynomial:
        if self.peek()[0] == "end":
            self.error("empty expression")
        p = self.expr()
        if self.peek()[0] != "end":
            tok = self.peek()
            if tok[0] in ("num", "ident") or tok[1] == "(":
                self.error("implicit multiplication is not allowed; use '*'")
            self.error(f"unexpected token {tok[1]!r}")
        return p

    def expr(self) -> Polynomial:
        p = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            q = self.term()
            p = add(p, q) if op == "+" else add(p, -q)
        return p

    def term(self) -> Polynomial:
        p = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] == "*":
            self.take()
            p = multiply(p, self.unary())
        return p

    def unary(self) -> Polynomial:
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("-", "+"):
            self.take()
            p = self.unary()
            return -p if tok[1] == "-" else p
        return self.power()

    def power(self) -> Polynomial:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            tok = self.peek()
            if tok[0] == "op" and tok[1] == "-":
                self.error("negative exponents are not allowed")
            if tok[0] != "num":
                self.error("exponent must be a nonnegative integer literal")
            if not tok[1].isdigit():
                self.error(f"exponent {tok[1]!r} is not an integer")
            self.take()
            base = base ** int(tok[1])
            if self.peek()[0] == "op" and self.peek()[1] == "^":
                self.error("chained exponents are ambiguous; use parentheses")
        return base

    def atom(self) -> Polynomial:
        tok = self.take()
        kind, val, pos = tok
        if kind == "num":
            return Polynomial.constant(self.space, float(val))
        if kind == "ident":
            if val not in self.space:
                raise ParseError(f"unknown variable {val!r}", pos, self.text)
            return Polynomial.variable(self.space, val)
        if kind == "op" and val == "(":
            p = self.expr()
            close = self.take()
            if close[1] != ")":
                self.error("expected ')'", close)
            return p
        if kind == "end":
            self.error("unexpected end of expression", tok)
        self.error(f"unexpected token {val!r}", tok)


def parse_expression(text: str, space: VariableSpace) -> Polynomial:
    """Parse ``+ - * ^`` expressions with parentheses into a canonical polynomial.

    >>> space = VariableSpace(["x1", "x2"])
    >>> render(parse_expression("(x1 - x2)^2", space))
    '1*x1^2 - 2*x1*x2 + 1*x2^2'
    """
    return _Parser(text, space).parse()


def binomial_count(dim: int, degree: int) -> int:
    return math.comb(dim + degree, degree)
