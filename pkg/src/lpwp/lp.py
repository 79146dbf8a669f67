"""Canonical linear programs from mapping documents, and a simplex solver.

Constraint-type algebra (limit L, operator OP from the declaration, x/y the
declared variables, r the RATIO fraction):

    SUM          x_1 + ... + x_k  OP  L
    UPPER_BOUND  x  OP  L
    LOWER_BOUND  x  OP  L
    LINEAR       c_1 x_1 + ... + c_k x_k  OP  L
    RATIO        x  OP  r * (sum of all problem variables)
    XBY          x  OP  k * y
    XY           x  OP  y

All variables carry an implicit non-negativity bound x >= 0 (the word
problems count goods). The solver is a dense two-phase primal simplex with
Bland's rule, so it cannot cycle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lpwp.errors import DataError
from lpwp.declarations import ConstraintDecl, MappingDocument, Term

FEAS_TOL = 1e-9     # feasibility / optimality tolerance
PIVOT_TOL = 1e-12   # below this a pivot is numeric breakdown

OP_SIGNS = {"LESS_OR_EQUAL": "<=", "GREATER_OR_EQUAL": ">=", "EQUAL": "="}


class CanonicalizationWarning(UserWarning):
    pass


class LpNumericalError(RuntimeError):
    """The tableau degenerated numerically (pivot below PIVOT_TOL)."""


@dataclass(frozen=True)
class LpRow:
    coefficients: tuple[float, ...]
    operator: str  # <= | >= | =
    rhs: float


@dataclass(frozen=True)
class LpProblem:
    variables: tuple[str, ...]
    direction: str  # maximize | minimize
    objective: tuple[float, ...]
    rows: tuple[LpRow, ...]

    def __post_init__(self):
        if len(self.objective) != len(self.variables):
            raise DataError("objective vector does not match variable count")
        for row in self.rows:
            if len(row.coefficients) != len(self.variables):
                raise DataError("constraint row does not match variable count")
            if not np.isfinite(row.rhs):
                raise DataError("constraint right-hand side must be finite")


@dataclass(frozen=True)
class LpSolution:
    status: str  # optimal | infeasible | unbounded
    assignment: dict[str, float] | None = None
    objective: float | None = None


def _term_value(term: Term) -> float:
    return float(term.coefficient) if term.coefficient is not None else 1.0


def _require(condition: bool, index: int, message: str) -> None:
    if not condition:
        raise DataError(f"constraint {index}: {message}")


def _constraint_coefficients(
    decl: ConstraintDecl, index: int, variables: Sequence[str], ratio_over_all: bool
) -> tuple[dict[str, float], float]:
    """Coefficient map and rhs for one constraint, moved to `lhs OP rhs` form."""
    coeffs: dict[str, float] = {}
    kind = decl.const_type
    if kind == "SUM":
        _require(len(decl.terms) >= 1, index, "SUM needs at least one variable")
        _require(all(t.coefficient is None for t in decl.terms), index,
                 "SUM takes plain variables, not coefficient terms")
        _require(decl.limit is not None, index, "SUM needs a LIMIT")
        for term in decl.terms:
            coeffs[term.variable] = coeffs.get(term.variable, 0.0) + 1.0
        return coeffs, float(decl.limit)
    if kind in ("UPPER_BOUND", "LOWER_BOUND"):
        _require(len(decl.terms) == 1, index, f"{kind} takes exactly one variable")
        _require(decl.terms[0].coefficient is None, index, f"{kind} takes a plain variable")
        _require(decl.limit is not None, index, f"{kind} needs a LIMIT")
        return {decl.terms[0].variable: 1.0}, float(decl.limit)
    if kind == "LINEAR":
        _require(len(decl.terms) >= 1, index, "LINEAR needs at least one term")
        _require(decl.limit is not None, index, "LINEAR needs a LIMIT")
        for term in decl.terms:
            coeffs[term.variable] = coeffs.get(term.variable, 0.0) + _term_value(term)
        return coeffs, float(decl.limit)
    if kind == "RATIO":
        _require(len(decl.terms) == 1, index, "RATIO takes exactly one variable")
        _require(decl.terms[0].coefficient is None, index, "RATIO takes a plain variable")
        if decl.limit is None:
            raise DataError(f"constraint {index}: RATIO has no parsable fraction")
        ratio = float(decl.limit)
        x = decl.terms[0].variable
        coeffs[x] = 1.0
        for variable in variables:
            if ratio_over_all or variable != x:
                coeffs[variable] = coeffs.get(variable, 0.0) - ratio
        return coeffs, 0.0
    # XY / XBY: x OP (k *) y
    _require(len(decl.terms) == 1, index, f"{kind} takes exactly one left-hand variable")
    _require(decl.terms[0].coefficient is None, index, f"{kind} left side is a plain variable")
    _require(decl.aux is not None, index, f"{kind} needs a right-hand variable")
    _require(decl.limit is None, index, f"{kind} takes no LIMIT")
    if kind == "XY":
        _require(decl.aux.coefficient is None, index,
                 "XY compares plain variables (use XBY for a factor)")
        factor = 1.0
    else:
        factor = _term_value(decl.aux)
    coeffs[decl.terms[0].variable] = 1.0
    coeffs[decl.aux.variable] = coeffs.get(decl.aux.variable, 0.0) - factor
    return coeffs, 0.0


def canonicalize(doc: MappingDocument, ratio_over_all_variables: bool = True) -> LpProblem:
    """Turn a mapping document into a canonical LP.

    Variables are ordered by first appearance. A variable that only shows
    up inside a constraint is admitted with objective coefficient 0 and a
    CanonicalizationWarning.
    """
    variables: list[str] = []

    def admit(name: str, from_constraint: bool) -> None:
        if name not in variables:
            if from_constraint:
                warnings.warn(
                    f"variable {name!r} appears in a constraint but not the objective",
                    CanonicalizationWarning,
                    stacklevel=3,
                )
            variables.append(name)

    objective_coeffs: dict[str, float] = {}
    for term in doc.objective.terms:
        admit(term.variable, from_constraint=False)
        objective_coeffs[term.variable] = (
            objective_coeffs.get(term.variable, 0.0) + _term_value(term)
        )
    for decl in doc.constraints:
        for term in decl.terms:
            admit(term.variable, from_constraint=True)
        if decl.aux is not None:
            admit(decl.aux.variable, from_constraint=True)

    rows = []
    for index, decl in enumerate(doc.constraints):
        coeffs, rhs = _constraint_coefficients(decl, index, variables, ratio_over_all_variables)
        rows.append(
            LpRow(
                tuple(coeffs.get(v, 0.0) for v in variables),
                OP_SIGNS[decl.operator],
                rhs,
            )
        )
    return LpProblem(
        variables=tuple(variables),
        direction=doc.objective.direction,
        objective=tuple(objective_coeffs.get(v, 0.0) for v in variables),
        rows=tuple(rows),
    )


def _pivot(tableau: np.ndarray, basis: list[int], row: int, col: int) -> None:
    pivot = tableau[row, col]
    if abs(pivot) < PIVOT_TOL:
        raise LpNumericalError(f"pivot {pivot:.3e} below {PIVOT_TOL:.0e}")
    tableau[row] /= pivot
    for i in range(tableau.shape[0]):
        if i != row and abs(tableau[i, col]) > 0.0:
            tableau[i] -= tableau[i, col] * tableau[row]
    basis[row] = col


def _run_simplex(tableau: np.ndarray, basis: list[int], num_cols: int) -> str:
    """Minimize the last tableau row over columns [0, num_cols). Bland's rule:
    entering = lowest-index negative reduced cost; leaving = min ratio with
    ties to the lowest basis index. Returns 'optimal' or 'unbounded'."""
    m = tableau.shape[0] - 1
    while True:
        entering = -1
        for j in range(num_cols):
            if tableau[-1, j] < -FEAS_TOL:
                entering = j
                break
        if entering < 0:
            return "optimal"
        leaving = -1
        best_ratio = np.inf
        for i in range(m):
            a = tableau[i, entering]
            if a > FEAS_TOL:
                ratio = tableau[i, -1] / a
                if ratio < best_ratio - FEAS_TOL or (
                    abs(ratio - best_ratio) <= FEAS_TOL
                    and (leaving < 0 or basis[i] < basis[leaving])
                ):
                    best_ratio = ratio
                    leaving = i
        if leaving < 0:
            return "unbounded"
        _pivot(tableau, basis, leaving, entering)


def simplex_solve(lp: LpProblem) -> LpSolution:
    """Two-phase primal simplex over the dense tableau.

    Infeasible and unbounded are statuses, not exceptions; a collapsed
    pivot raises LpNumericalError.
    """
    n = len(lp.variables)
    num_rows = len(lp.rows)

    # Normalize rows to nonnegative rhs, then attach slack/artificial columns.
    a_rows, rhs, ops = [], [], []
    for row in lp.rows:
        coeffs = np.asarray(row.coefficients, dtype=float)
        b = float(row.rhs)
        op = row.operator
        if b < 0:
            coeffs, b = -coeffs, -b
            op = {"<=": ">=", ">=": "<=", "=": "="}[op]
        a_rows.append(coeffs)
        rhs.append(b)
        ops.append(op)

    num_slack = sum(1 for op in ops if op in ("<=", ">="))
    num_artificial = sum(1 for op in ops if op in (">=", "="))
    total = n + num_slack + num_artificial
    art_start = n + num_slack

    tableau = np.zeros((num_rows + 1, total + 1))
    basis: list[int] = []
    slack_i = 0
    art_i = 0
    for i in range(num_rows):
        tableau[i, :n] = a_rows[i]
        tableau[i, -1] = rhs[i]
        if ops[i] == "<=":
            tableau[i, n + slack_i] = 1.0
            basis.append(n + slack_i)
            slack_i += 1
        elif ops[i] == ">=":
            tableau[i, n + slack_i] = -1.0
            slack_i += 1
            tableau[i, art_start + art_i] = 1.0
            basis.append(art_start + art_i)
            art_i += 1
        else:
            tableau[i, art_start + art_i] = 1.0
            basis.append(art_start + art_i)
            art_i += 1

    # Phase 1: minimize the sum of artificials.
    if num_artificial:
        tableau[-1, art_start:art_start + num_artificial] = 1.0
        for i, b in enumerate(basis):
            if b >= art_start:
                tableau[-1] -= tableau[i]
        status = _run_simplex(tableau, basis, total)
        if status == "unbounded":  # cannot happen: phase-1 objective >= 0
            raise LpNumericalError("phase 1 reported unbounded")
        if tableau[-1, -1] < -FEAS_TOL * max(1.0, max(rhs, default=1.0)):
            # minimized sum of artificials is positive (stored negated)
            return LpSolution(status="infeasible")
        # Drive leftover artificials out of the basis.
        for i in range(num_rows):
            if basis[i] >= art_start:
                for j in range(art_start):
                    if abs(tableau[i, j]) > FEAS_TOL:
                        _pivot(tableau, basis, i, j)
                        break
        if any(b >= art_start and abs(tableau[i, -1]) > FEAS_TOL for i, b in enumerate(basis)):
            return LpSolution(status="infeasible")

    # Phase 2: real objective over structural + slack columns only.
    tableau[:, art_start:art_start + num_artificial] = 0.0
    objective = np.asarray(lp.objective, dtype=float)
    if lp.direction == "maximize":
        objective = -objective
    tableau[-1, :] = 0.0
    tableau[-1, :n] = objective
    for i, b in enumerate(basis):
        if b < art_start and abs(tableau[-1, b]) > 0.0:
            tableau[-1] -= tableau[-1, b] * tableau[i]
    status = _run_simplex(tableau, basis, art_start)
    if status == "unbounded":
        return LpSolution(status="unbounded")

    x = np.zeros(n)
    for i, b in enumerate(basis):
        if b < n:
            x[b] = tableau[i, -1]

    # Sanity: the reported vertex must satisfy the original rows.
    scale = max(1.0, float(np.abs(x).max(initial=0.0)))
    for row in lp.rows:
        lhs = float(np.dot(row.coefficients, x))
        resid = lhs - row.rhs
        ok = (
            (row.operator == "<=" and resid <= FEAS_TOL * scale)
            or (row.operator == ">=" and resid >= -FEAS_TOL * scale)
            or (row.operator == "=" and abs(resid) <= FEAS_TOL * scale)
        )
        if not ok:
            raise LpNumericalError(f"optimal vertex violates a row by {resid:.3e}")

    value = float(np.dot(lp.objective, x))
    assignment = {v: float(x[i]) for i, v in enumerate(lp.variables)}
    return LpSolution(status="optimal", assignment=assignment, objective=value)


def solve_mapping(doc: MappingDocument, ratio_over_all_variables: bool = True) -> LpSolution:
    return simplex_solve(canonicalize(doc, ratio_over_all_variables))
