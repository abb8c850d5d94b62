"""Exact checking of reachability probabilities and reachability rewards
on a :class:`~amlas_rl.abstraction.Dtmc`.

Probabilities: graph precomputation of the prob-0 and prob-1 sets, then a
linear solve on the remaining states. Systems with at most
:data:`DIRECT_LIMIT` unknowns go to a dense LU solve; larger ones use value
iteration, processed energy layer by energy layer when no transition
increases the energy bin (each layer only depends on lower layers).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from amlas_rl import kernels
from amlas_rl.abstraction import FIELDS, Dtmc
from amlas_rl.pctl.formula import (
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
    as_until,
    render,
)
from amlas_rl.pctl.parser import PctlSemanticError

DIRECT_LIMIT = 2_000
VI_TOLERANCE = 1e-12
VI_MAX_SWEEPS = 1_000_000


class PctlUsageError(KeyError):
    pass


_OPS = {
    "=": np.equal,
    "!=": np.not_equal,
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
}


def satisfying(dtmc: Dtmc, expr: StateExpr) -> np.ndarray:
    """Boolean mask of states satisfying ``expr``."""
    n = dtmc.n_states
    if isinstance(expr, TrueExpr):
        return np.ones(n, dtype=bool)
    if isinstance(expr, FalseExpr):
        return np.zeros(n, dtype=bool)
    if isinstance(expr, Atom):
        if expr.field not in FIELDS:
            raise PctlSemanticError(f"unknown state field {expr.field!r}; known fields: {', '.join(FIELDS)}", 0)
        return _OPS[expr.op](dtmc.field_values(expr.field), expr.value)
    if isinstance(expr, Not):
        return ~satisfying(dtmc, expr.operand)
    if isinstance(expr, And):
        out = np.ones(n, dtype=bool)
        for o in expr.operands:
            out &= satisfying(dtmc, o)
        return out
    if isinstance(expr, Or):
        out = np.zeros(n, dtype=bool)
        for o in expr.operands:
            out |= satisfying(dtmc, o)
        return out
    raise TypeError(f"not a state expression: {expr!r}")


def _backward_reach(pred: sparse.csr_matrix, seeds: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """States reaching ``seeds`` along paths whose earlier states are all ``allowed``."""
    reached = seeds.copy()
    queue = deque(np.flatnonzero(seeds))
    indptr, indices = pred.indptr, pred.indices
    while queue:
        j = queue.popleft()
        for i in indices[indptr[j] : indptr[j + 1]]:
            if not reached[i] and allowed[i]:
                reached[i] = True
                queue.append(i)
    return reached


def prob01(dtmc: Dtmc, constraint: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(no, yes)``: states where ``constraint U target`` holds with probability 0 / 1."""
    p = dtmc.transitions
    pred = (p > 0).T.tocsr()
    can_reach = _backward_reach(pred, target, constraint & ~target)
    no = ~can_reach
    may_fail = _backward_reach(pred, no, constraint & ~target)
    yes = ~may_fail
    return no, yes


@dataclass(frozen=True)
class SolveInfo:
    method: str
    sweeps: int


def _energy_layers(dtmc: Dtmc, idx: np.ndarray, a: sparse.csr_matrix) -> list[np.ndarray] | None:
    """Partition ``idx`` by energy bin if ``a`` never moves to a higher bin."""
    energy = dtmc.field_values("e")[idx]
    coo = a.tocoo()
    if np.any(energy[coo.col] > energy[coo.row]):
        return None
    return [np.flatnonzero(energy == e) for e in np.unique(energy)]


def _jacobi(a: sparse.csr_matrix, b: np.ndarray, x0: np.ndarray) -> tuple[np.ndarray, int]:
    a = a.tocsr()
    x, sweeps, delta = kernels.jacobi(
        a.indptr.astype(np.int64), a.indices.astype(np.int64), a.data, b, x0, VI_TOLERANCE, VI_MAX_SWEEPS
    )
    if delta >= VI_TOLERANCE:  # pragma: no cover - only on pathological chains
        raise ArithmeticError(f"value iteration did not converge in {sweeps} sweeps (last change {delta:g})")
    return x, sweeps


def solve_fixed_point(dtmc: Dtmc, idx: np.ndarray, a: sparse.csr_matrix, b: np.ndarray, method: str = "auto") -> tuple[np.ndarray, SolveInfo]:
    """Solve ``x = a x + b`` where ``a`` is the sub-matrix of ``dtmc`` on states ``idx``."""
    n = b.shape[0]
    if n == 0:
        return np.zeros(0), SolveInfo("trivial", 0)
    if method == "auto":
        method = "direct" if n <= DIRECT_LIMIT else "iterative"
    if method == "direct":
        x = np.linalg.solve(np.eye(n) - a.toarray(), b)
        return x, SolveInfo("gaussian-elimination", 0)
    if method != "iterative":
        raise ValueError(f"unknown solver method {method!r}")

    layers = _energy_layers(dtmc, idx, a)
    if layers is None:
        x, sweeps = _jacobi(a, b, np.zeros(n))
        return x, SolveInfo("value-iteration", sweeps)

    # layers ascend in energy; every layer only feeds on itself and lower ones
    x = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    for layer in layers:
        sub = a[layer][:, layer]
        rhs = b[layer] + a[layer][:, done] @ x[done]
        if layer.size <= DIRECT_LIMIT:
            x[layer] = np.linalg.solve(np.eye(layer.size) - sub.toarray(), rhs)
        else:
            x[layer], _ = _jacobi(sub, rhs, np.zeros(layer.size))
        done[layer] = True
    # one closing sweep confirms the fixed point
    residual = float(np.max(np.abs(a @ x + b - x)))
    if residual > 1e-9:  # pragma: no cover
        raise ArithmeticError(f"layered solve left residual {residual:g}")
    return x, SolveInfo("value-iteration (energy-layered)", len(layers) + 1)


@dataclass(frozen=True)
class ProbResult:
    value: float
    per_state: np.ndarray
    method: str
    sweeps: int


def check_prob(dtmc: Dtmc, path: PathFormula, method: str = "auto") -> ProbResult:
    """Probability of ``path`` from the initial distribution (plus the per-state vector)."""
    until = as_until(path)
    phi1 = satisfying(dtmc, until.constraint)
    phi2 = satisfying(dtmc, until.target)
    no, yes = prob01(dtmc, phi1, phi2)
    maybe = ~(no | yes)
    idx = np.flatnonzero(maybe)
    p = dtmc.transitions
    a = p[idx][:, idx]
    b = np.asarray(p[idx][:, np.flatnonzero(yes)].sum(axis=1)).ravel()
    x, info = solve_fixed_point(dtmc, idx, a, b, method)
    per_state = yes.astype(np.float64)
    per_state[idx] = np.clip(x, 0.0, 1.0)
    value = float(np.clip(dtmc.initial @ per_state, 0.0, 1.0))
    return ProbResult(value, per_state, info.method, info.sweeps)


@dataclass(frozen=True)
class RewardResult:
    value: float
    per_state: np.ndarray
    infinite_states: np.ndarray
    method: str
    sweeps: int


def check_reward(dtmc: Dtmc, reward_label: str, target: StateExpr, method: str = "auto") -> RewardResult:
    """Expected reward accumulated in states visited before first entering ``target``.

    States that reach ``target`` with probability below 1 get ``inf``.
    """
    if reward_label not in dtmc.rewards:
        raise PctlUsageError(f"unknown reward label {reward_label!r}; available: {sorted(dtmc.rewards)}")
    r = dtmc.rewards[reward_label]
    tgt = satisfying(dtmc, target)
    _, yes = prob01(dtmc, np.ones(dtmc.n_states, dtype=bool), tgt)
    idx = np.flatnonzero(yes & ~tgt)
    a = dtmc.transitions[idx][:, idx]
    x, info = solve_fixed_point(dtmc, idx, a, r[idx], method)
    per_state = np.full(dtmc.n_states, math.inf)
    per_state[tgt] = 0.0
    per_state[idx] = x
    support = dtmc.initial > 0
    infinite = ~np.isfinite(per_state)
    if np.any(infinite & support):
        value = math.inf
    else:
        value = float(dtmc.initial[support] @ per_state[support])
    return RewardResult(value, per_state, infinite, info.method, info.sweeps)


@dataclass(frozen=True)
class CheckResult:
    formula: str
    value: float
    verdict: bool | None
    method: str
    sweeps: int


def _compare(value: float, comparator: str, bound: float | None) -> bool | None:
    if comparator == "=?":
        return None
    return value >= bound if comparator == ">=" else value <= bound


def evaluate(dtmc: Dtmc, formula: Formula, method: str = "auto") -> CheckResult:
    if isinstance(formula, ProbQuery):
        res = check_prob(dtmc, formula.path, method)
        return CheckResult(render(formula), res.value, _compare(res.value, formula.comparator, formula.bound), res.method, res.sweeps)
    if isinstance(formula, RewardQuery):
        until = as_until(formula.path)
        if not isinstance(until.constraint, TrueExpr):
            raise PctlSemanticError("reward queries support only 'F target' (or 'true U target')", 0)
        rres = check_reward(dtmc, formula.label, until.target, method)
        return CheckResult(render(formula), rres.value, _compare(rres.value, formula.comparator, formula.bound), rres.method, rres.sweeps)
    raise TypeError(f"not a formula: {formula!r}")


__all__ = [
    "CheckResult",
    "Eventually",
    "ProbResult",
    "RewardResult",
    "Until",
    "check_prob",
    "check_reward",
    "evaluate",
    "prob01",
    "satisfying",
]
