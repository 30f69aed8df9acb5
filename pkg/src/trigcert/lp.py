"""Linear feasibility over the reals.

A self-contained phase-1 simplex decides whether a conjunction of linear
inequalities has a solution and produces a witness when it does. The
solver is deliberately conservative about the only verdict that feeds a
safety claim: Unsat is reported only when the phase-1 optimum clearly
exceeds a guard threshold, and Sat only when the extracted model passes a
direct substitution check. Everything borderline degrades to Unknown.

Strict inequalities are relaxed to non-strict before solving, which keeps
Unsat verdicts sound; callers that need strictness re-validate candidate
models concretely.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSystem, VariableId
from .deeppoly import LinearExpr

# Phase-1 optimum above this is Unsat; a positive optimum at or below it is
# treated as numerical noise and yields Unknown.
UNSAT_GUARD = 1e-7
MODEL_TOLERANCE = 1e-6
PIVOT_EPS = 1e-9
# Consecutive non-improving pivots before switching to Bland's rule, which
# guarantees termination on degenerate tableaus.
BLAND_TRIGGER = 50


class MalformedSystemError(ValueError):
    """The system itself is broken (undeclared variables, non-finite data)."""


@dataclass(frozen=True)
class Sat:
    model: dict

    @property
    def kind(self) -> str:
        return "sat"


@dataclass(frozen=True)
class Unsat:
    @property
    def kind(self) -> str:
        return "unsat"


@dataclass(frozen=True)
class Unknown:
    reason: str  # "timeout" | "numerical"

    @property
    def kind(self) -> str:
        return "unknown"


FeasibilityResult = Sat | Unsat | Unknown


def _normalized_rows(system: ConstraintSystem, var_index: dict):
    """Each constraint as (coeff vector a, rhs b) meaning a @ x <= b."""
    rows = []
    for con in system.constraints:
        a = np.zeros(len(var_index))
        for var, coef in con.lhs.coeffs.items():
            a[var_index[var]] += coef
        for var, coef in con.rhs.coeffs.items():
            a[var_index[var]] -= coef
        b = con.rhs.const - con.lhs.const
        rows.append((a, b))
    return rows


def _validate(system: ConstraintSystem) -> None:
    for var, (lo, hi) in system.bounds.items():
        for v in (lo, hi):
            if v is not None and not np.isfinite(v):
                raise MalformedSystemError(f"non-finite bound on {var}")
    for con in system.constraints:
        for expr in (con.lhs, con.rhs):
            if not np.isfinite(expr.const):
                raise MalformedSystemError("non-finite constant in constraint")
            for var, coef in expr.coeffs.items():
                if var not in system.bounds:
                    raise MalformedSystemError(f"constraint references undeclared variable {var}")
                if not np.isfinite(coef):
                    raise MalformedSystemError(f"non-finite coefficient on {var}")


def violation(system: ConstraintSystem, model: dict) -> float:
    """Largest amount by which the model breaks any (relaxed) constraint or box."""
    worst = 0.0
    for var, (lo, hi) in system.bounds.items():
        x = model[var]
        if lo is not None:
            worst = max(worst, lo - x)
        if hi is not None:
            worst = max(worst, x - hi)
    for con in system.constraints:
        worst = max(worst, con.lhs.evaluate(model) - con.rhs.evaluate(model))
    return worst


def check_feasible(
    system: ConstraintSystem,
    time_budget_secs: float = 20.0,
    max_pivots: int | None = None,
) -> FeasibilityResult:
    """Decide satisfiability of the (non-strictly relaxed) system.

    Unsat is sound; Sat carries a model satisfying every constraint within
    MODEL_TOLERANCE; Unknown covers budget exhaustion and numerical doubt.
    """
    _validate(system)
    variables = sorted(system.bounds)
    var_index = {v: i for i, v in enumerate(variables)}

    for var in variables:
        lo, hi = system.bounds[var]
        if lo is not None and hi is not None and lo > hi:
            return Unsat()

    rows = _normalized_rows(system, var_index)

    # Shift every variable into y >= 0 form. Columns of the y-space:
    # shifted (x = lo + y), flipped (x = hi - y), or a split pair
    # (x = y_pos - y_neg) when the variable is unbounded on both sides.
    col_of_var: list[tuple] = []
    n_cols = 0
    extra_rows = []  # upper bounds of doubly-bounded variables become rows
    for var in variables:
        lo, hi = system.bounds[var]
        if lo is not None:
            col_of_var.append(("shift", n_cols, lo))
            if hi is not None:
                extra_rows.append((n_cols, hi - lo))
            n_cols += 1
        elif hi is not None:
            col_of_var.append(("flip", n_cols, hi))
            n_cols += 1
        else:
            col_of_var.append(("split", n_cols, None))
            n_cols += 2

    A_rows = []
    b_vals = []
    for a, b in rows:
        ay = np.zeros(n_cols)
        shift = 0.0
        for i, var in enumerate(variables):
            coef = a[i]
            if coef == 0.0:
                continue
            kind, col, param = col_of_var[i]
            if kind == "shift":
                ay[col] = coef
                shift += coef * param
            elif kind == "flip":
                ay[col] = -coef
                shift += coef * param
            else:
                ay[col] = coef
                ay[col + 1] = -coef
        A_rows.append(ay)
        b_vals.append(b - shift)
    for col, ub in extra_rows:
        ay = np.zeros(n_cols)
        ay[col] = 1.0
        A_rows.append(ay)
        b_vals.append(ub)

    if not A_rows:
        return Sat(_model_from_y(np.zeros(n_cols), variables, col_of_var))

    A = np.array(A_rows)
    b = np.array(b_vals)

    opt, y, status = _phase1_simplex(A, b, time_budget_secs, max_pivots)
    if status == "timeout":
        return Unknown("timeout")
    if opt > UNSAT_GUARD:
        return Unsat()
    model = _model_from_y(y, variables, col_of_var)
    if violation(system, model) <= MODEL_TOLERANCE:
        return Sat(model)
    return Unknown("numerical")


def _model_from_y(y: np.ndarray, variables: list, col_of_var: list) -> dict:
    model = {}
    for var, (kind, col, param) in zip(variables, col_of_var):
        if kind == "shift":
            model[var] = param + y[col]
        elif kind == "flip":
            model[var] = param - y[col]
        else:
            model[var] = y[col] - y[col + 1]
    return model


def _phase1_simplex(A: np.ndarray, b: np.ndarray, time_budget_secs: float,
                    max_pivots: int | None):
    """Minimize the artificial-variable sum of A y <= b, y >= 0.

    Returns (optimum, y, status) with status "optimal" or "timeout".
    """
    m, n = A.shape
    neg = b < 0.0
    n_art = int(neg.sum())

    # Tableau columns: y (n) | slacks (m) | artificials (n_art) | rhs.
    # Rows with negative rhs are negated; their slack enters with -1 and an
    # artificial variable provides the starting basis.
    width = n + m + n_art + 1
    T = np.zeros((m + 1, width))
    basis = np.empty(m, dtype=np.intp)
    art = 0
    for i in range(m):
        if neg[i]:
            T[i, :n] = -A[i]
            T[i, n + i] = -1.0
            T[i, n + m + art] = 1.0
            T[i, -1] = -b[i]
            basis[i] = n + m + art
            art += 1
        else:
            T[i, :n] = A[i]
            T[i, n + i] = 1.0
            T[i, -1] = b[i]
            basis[i] = n + i
    # Objective row: reduced costs of min(sum of artificials); artificial
    # basis rows are subtracted out so the row starts consistent.
    T[-1, n + m:n + m + n_art] = 1.0
    for i in range(m):
        if basis[i] >= n + m:
            T[-1, :] -= T[i, :]

    deadline = time.monotonic() + time_budget_secs
    pivots = 0
    stall = 0
    bland = False
    prev_obj = -T[-1, -1]
    # Artificials never re-enter the basis once driven out; the original
    # feasible region is untouched, so the phase-1 optimum is preserved.
    barred = np.zeros(width - 1, dtype=bool)
    while True:
        costs = np.where(barred, 0.0, T[-1, :-1])
        if bland:
            entering = -1
            for j in range(width - 1):
                if costs[j] < -PIVOT_EPS:
                    entering = j
                    break
        else:
            entering = int(np.argmin(costs))
            if costs[entering] >= -PIVOT_EPS:
                entering = -1
        if entering < 0:
            break

        col = T[:-1, entering]
        rhs = T[:-1, -1]
        candidates = np.flatnonzero(col > PIVOT_EPS)
        if candidates.size == 0:
            # Unbounded in phase 1 cannot happen (objective bounded below by
            # 0); treat defensively as numerical trouble.
            break
        ratios = rhs[candidates] / col[candidates]
        best = ratios.min()
        ties = candidates[ratios <= best + 1e-12]
        leaving = int(ties[np.argmin(basis[ties])])  # Bland tie-break

        piv = T[leaving, entering]
        T[leaving, :] /= piv
        factors = T[:, entering].copy()
        factors[leaving] = 0.0
        T -= np.outer(factors, T[leaving, :])
        if basis[leaving] >= n + m:
            barred[basis[leaving]] = True
        basis[leaving] = entering

        pivots += 1
        if max_pivots is not None and pivots >= max_pivots:
            return np.inf, np.zeros(n), "timeout"
        if pivots % 16 == 0 and time.monotonic() > deadline:
            return np.inf, np.zeros(n), "timeout"
        obj = -T[-1, -1]
        if not bland:
            if obj > prev_obj - 1e-12:
                stall += 1
                if stall >= BLAND_TRIGGER:
                    bland = True
            else:
                stall = 0
            prev_obj = obj

    opt = -T[-1, -1]
    y = np.zeros(n + m + n_art)
    y[basis] = T[:-1, -1]
    return float(opt), y[:n], "optimal"


def conjoin(systems: list[ConstraintSystem]) -> ConstraintSystem:
    """Conjunction of systems: union of variables (box bounds intersected)
    and of constraints, with structurally identical constraints merged."""
    out = ConstraintSystem()
    seen = set()
    for system in systems:
        for var, (lo, hi) in system.bounds.items():
            out.add_variable(var, lo, hi)
        for con in system.constraints:
            key = (
                tuple(sorted(con.lhs.coeffs.items())), con.lhs.const,
                tuple(sorted(con.rhs.coeffs.items())), con.rhs.const,
                con.strict,
            )
            if key in seen:
                continue
            seen.add(key)
            out.constraints.append(con)
    return out


def _lp_name(var: VariableId) -> str:
    tag = "".join(ch if ch.isalnum() else "_" for ch in var.image)
    return f"x_{tag}_{var.layer}_{var.neuron}"


def _lp_expr(expr: LinearExpr) -> str:
    parts = []
    for var, coef in sorted(expr.coeffs.items()):
        parts.append(f"{'+' if coef >= 0 else '-'} {abs(coef)!r} {_lp_name(var)}")
    if not parts:
        parts.append("+ 0 dummy")
    return " ".join(parts).lstrip("+ ")


def write_lp_text(system: ConstraintSystem, stream) -> None:
    """Dump the system in LP-style text for external cross-checking.

    Constraints are emitted as moved-left rows ``lhs - rhs <= 0``; strict
    rows keep a comment marker since LP format has no strict inequalities.
    """
    stream.write("\\ feasibility system\nMinimize\n obj: 0 dummy\nSubject To\n")
    for k, con in enumerate(system.constraints):
        moved = LinearExpr(0.0, dict(con.lhs.coeffs))
        for var, coef in con.rhs.coeffs.items():
            moved.coeffs[var] = moved.coeffs.get(var, 0.0) - coef
        moved.coeffs = {v: c for v, c in moved.coeffs.items() if c != 0.0}
        rhs = con.rhs.const - con.lhs.const
        marker = "  \\ strict" if con.strict else ""
        stream.write(f" c{k}: {_lp_expr(moved)} <= {rhs!r}{marker}\n")
    stream.write("Bounds\n")
    for var in sorted(system.bounds):
        lo, hi = system.bounds[var]
        name = _lp_name(var)
        lo_s = "-inf" if lo is None else repr(lo)
        hi_s = "+inf" if hi is None else repr(hi)
        stream.write(f" {lo_s} <= {name} <= {hi_s}\n")
    stream.write(" dummy free\nEnd\n")
