"""Recursive-descent parser for the PCTL fragment.

Grammar (whitespace-insensitive)::

    property := "P" bound "[" path "]"
              | "R" "{" STRING "}" bound "[" path "]"
    bound    := ("<=" | ">=") NUMBER | "=?"
    path     := "F" expr | expr "U" expr | "U" expr
    expr     := conj ("|" conj)*
    conj     := unary ("&" unary)*
    unary    := "!" unary | "(" expr ")" | "true" | "false" | IDENT cmp INTEGER
    cmp      := "=" | "!=" | "<" | "<=" | ">" | ">="

A bare ``U expr`` reads as ``true U expr``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

from amlas_rl.pctl.formula import (
    TRUE,
    And,
    Atom,
    Eventually,
    FalseExpr,
    Formula,
    Not,
    Or,
    PathFormula,
    ProbQuery,
    RewardQuery,
    StateExpr,
    TrueExpr,
    Until,
)


class PctlError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"at position {position}: {message}")
        self.position = position


class PctlSyntaxError(PctlError):
    def __init__(self, position: int, expected: Iterable[str], found: str):
        self.expected = frozenset(expected)
        self.found = found
        super().__init__(f"expected {' or '.join(sorted(self.expected))}, found {found}", position)


class PctlSemanticError(PctlError):
    pass


_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>"[^"]*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>=\?|<=|>=|!=|[=<>!&|()\[\]{}])
    """,
    re.VERBOSE,
)

_CMP = {"=", "!=", "<", "<=", ">", ">="}
_KEYWORDS = {"P", "R", "F", "U", "true", "false"}


@dataclass(frozen=True)
class Token:
    kind: str  # number | string | ident | op | eof
    text: str
    pos: int

    def describe(self) -> str:
        return "end of input" if self.kind == "eof" else repr(self.text)


def tokenize(text: str) -> list[Token]:
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise PctlSyntaxError(pos, ["a token"], repr(text[pos]))
        if m.lastgroup != "ws":
            tokens.append(Token(m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, *expected: str):
        raise PctlSyntaxError(self.tok.pos, expected, self.tok.describe())

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind not in ("op", "ident"):
            self.fail(repr(text))
        return self.advance()

    def at(self, text: str) -> bool:
        return self.tok.kind in ("op", "ident") and self.tok.text == text

    # property level

    def formula(self) -> Formula:
        tok = self.tok
        if tok.kind == "ident" and tok.text == "P":
            self.advance()
            comparator, bound = self.bound(probability=True)
            path = self.bracketed_path()
            result: Formula = ProbQuery(comparator, bound, path)
        elif tok.kind == "ident" and tok.text == "R":
            self.advance()
            self.expect("{")
            if self.tok.kind != "string":
                self.fail("a quoted reward label")
            label = self.advance().text[1:-1]
            self.expect("}")
            comparator, bound = self.bound(probability=False)
            path = self.bracketed_path()
            result = RewardQuery(label, comparator, bound, path)
        else:
            self.fail("'P'", "'R'")
        if self.tok.kind != "eof":
            self.fail("end of input")
        return result

    def bound(self, probability: bool) -> tuple[str, float | None]:
        if self.at("=?"):
            self.advance()
            return "=?", None
        if not (self.at(">=") or self.at("<=")):
            self.fail("'>='", "'<='", "'=?'")
        comparator = self.advance().text
        if self.tok.kind != "number":
            self.fail("a number")
        tok = self.advance()
        value = float(tok.text)
        if probability and not 0.0 <= value <= 1.0:
            raise PctlSemanticError(f"probability bound {tok.text} outside [0, 1]", tok.pos)
        if not probability and value < 0:
            raise PctlSemanticError(f"reward bound {tok.text} is negative", tok.pos)
        return comparator, value

    def bracketed_path(self) -> PathFormula:
        self.expect("[")
        path = self.path()
        self.expect("]")
        return path

    def path(self) -> PathFormula:
        if self.at("F"):
            self.advance()
            return Eventually(self.expr())
        if self.at("U"):
            self.advance()
            return Until(TRUE, self.expr())
        left = self.expr()
        if not self.at("U"):
            self.fail("'U'")
        self.advance()
        return Until(left, self.expr())

    # state expressions

    def expr(self) -> StateExpr:
        parts = [self.conj()]
        while self.at("|"):
            self.advance()
            parts.append(self.conj())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def conj(self) -> StateExpr:
        parts = [self.unary()]
        while self.at("&"):
            self.advance()
            parts.append(self.unary())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def unary(self) -> StateExpr:
        tok = self.tok
        if self.at("!"):
            self.advance()
            return Not(self.unary())
        if self.at("("):
            self.advance()
            inner = self.expr()
            self.expect(")")
            return inner
        if tok.kind == "ident":
            if tok.text == "true":
                self.advance()
                return TrueExpr()
            if tok.text == "false":
                self.advance()
                return FalseExpr()
            if tok.text in _KEYWORDS:
                self.fail("a state expression")
            self.advance()
            if not (self.tok.kind == "op" and self.tok.text in _CMP):
                self.fail(*(repr(c) for c in sorted(_CMP)))
            op = self.advance().text
            if self.tok.kind != "number":
                self.fail("an integer")
            num = self.advance()
            if not num.text.isdigit():
                raise PctlSemanticError(f"field value {num.text} must be a non-negative integer", num.pos)
            return Atom(tok.text, op, int(num.text))
        self.fail("'!'", "'('", "'true'", "'false'", "a field name")
        raise AssertionError("unreachable")


def parse(text: str) -> Formula:
    """Parse one property; raises :class:`PctlSyntaxError` or :class:`PctlSemanticError`."""
    return _Parser(text).formula()


class PctlFileError(ValueError):
    def __init__(self, lineno: int, cause: PctlError):
        super().__init__(f"line {lineno}, {cause}")
        self.lineno = lineno
        self.cause = cause


_NAMED = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.*)$")


@dataclass(frozen=True)
class NamedProperty:
    name: str
    formula: Formula
    lineno: int
    text: str


def parse_properties(text: str) -> list[NamedProperty]:
    """One property per line, ``#`` comments, optional ``name:`` prefix."""
    props = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _NAMED.match(line)
        name, body = (m.group(1), m.group(2)) if m else (f"prop{len(props) + 1}", line)
        try:
            formula = parse(body)
        except PctlError as exc:
            raise PctlFileError(lineno, exc) from None
        props.append(NamedProperty(name, formula, lineno, body))
    return props


