"""Immutable AST for the PCTL fragment and its canonical rendering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

COMPARISONS = ("=", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True)
class TrueExpr:
    pass


@dataclass(frozen=True)
class FalseExpr:
    pass


@dataclass(frozen=True)
class Atom:
    """``field op value`` over an abstract-state field (``m``, ``e``, ``do``, ``du``)."""

    field: str
    op: str
    value: int


@dataclass(frozen=True)
class Not:
    operand: "StateExpr"


@dataclass(frozen=True)
class And:
    operands: tuple["StateExpr", ...]


@dataclass(frozen=True)
class Or:
    operands: tuple["StateExpr", ...]


StateExpr = Union[TrueExpr, FalseExpr, Atom, Not, And, Or]


@dataclass(frozen=True)
class Eventually:
    target: StateExpr


@dataclass(frozen=True)
class Until:
    constraint: StateExpr
    target: StateExpr


PathFormula = Union[Eventually, Until]


@dataclass(frozen=True)
class ProbQuery:
    comparator: str  # ">=", "<=" or "=?"
    bound: float | None
    path: PathFormula


@dataclass(frozen=True)
class RewardQuery:
    label: str
    comparator: str
    bound: float | None
    path: PathFormula


Formula = Union[ProbQuery, RewardQuery]

TRUE = TrueExpr()


def as_until(path: PathFormula) -> Until:
    return Until(TRUE, path.target) if isinstance(path, Eventually) else path


def render_expr(expr: StateExpr) -> str:
    if isinstance(expr, TrueExpr):
        return "true"
    if isinstance(expr, FalseExpr):
        return "false"
    if isinstance(expr, Atom):
        return f"{expr.field}{expr.op}{expr.value}"
    if isinstance(expr, Not):
        inner = render_expr(expr.operand)
        return f"!({inner})" if isinstance(expr.operand, (And, Or)) else f"!{inner}"
    if isinstance(expr, And):
        return " & ".join(f"({render_expr(o)})" if isinstance(o, (And, Or)) else render_expr(o) for o in expr.operands)
    if isinstance(expr, Or):
        return " | ".join(f"({render_expr(o)})" if isinstance(o, Or) else render_expr(o) for o in expr.operands)
    raise TypeError(f"not a state expression: {expr!r}")


def render_path(path: PathFormula) -> str:
    if isinstance(path, Eventually):
        return f"F {render_expr(path.target)}"
    return f"{render_expr(path.constraint)} U {render_expr(path.target)}"


def _bound(comparator: str, bound: float | None) -> str:
    return "=?" if comparator == "=?" else f"{comparator}{bound!r}"


def render(formula: Formula) -> str:
    if isinstance(formula, ProbQuery):
        head = "P" + _bound(formula.comparator, formula.bound)
    else:
        head = f'R{{"{formula.label}"}}' + _bound(formula.comparator, formula.bound)
    return f"{head} [ {render_path(formula.path)} ]"
