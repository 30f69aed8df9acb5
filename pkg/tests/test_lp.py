from fractions import Fraction

import numpy as np
import pytest

from trigcert import (
    ConstraintSystem,
    LinearExpr,
    MalformedSystemError,
    Sat,
    Unknown,
    Unsat,
    VariableId,
    check_feasible,
    conjoin,
)
from trigcert.lp import violation, write_lp_text

from oracles import fourier_motzkin_feasible

X = VariableId("img", 0, 0)
Y = VariableId("img", 0, 1)
Z = VariableId("img", 0, 2)


def var(v, coef=1.0):
    return LinearExpr(0.0, {v: coef})


def const(c):
    return LinearExpr(float(c))


def boxed(*vars_and_boxes):
    system = ConstraintSystem()
    for v, lo, hi in vars_and_boxes:
        system.add_variable(v, lo, hi)
    return system


def test_empty_system_over_box_is_sat():
    system = boxed((X, 0.0, 1.0))
    res = check_feasible(system)
    assert isinstance(res, Sat)
    assert 0.0 <= res.model[X] <= 1.0


def test_contradictory_rows_unsat():
    system = boxed((X, None, None))
    system.add_constraint(var(X), const(0.0))   # x <= 0
    system.add_constraint(const(1.0), var(X))   # x >= 1
    assert isinstance(check_feasible(system), Unsat)


def test_sat_model_checked_by_substitution():
    system = boxed((X, 0.0, 1.0), (Y, 0.0, 1.0))
    system.add_constraint(const(1.5), LinearExpr(0.0, {X: 1.0, Y: 1.0}))  # x + y >= 1.5
    res = check_feasible(system)
    assert isinstance(res, Sat)
    assert res.model[X] + res.model[Y] >= 1.5 - 1e-6
    assert violation(system, res.model) <= 1e-6


def test_free_variables_via_split():
    system = boxed((X, None, None))
    system.add_constraint(const(3.0), var(X))  # x >= 3
    res = check_feasible(system)
    assert isinstance(res, Sat) and res.model[X] >= 3.0 - 1e-6

    system = boxed((X, None, None))
    system.add_constraint(var(X), const(-2.0))
    system.add_constraint(const(5.0), var(X))
    assert isinstance(check_feasible(system), Unsat)


def test_one_sided_bounds():
    system = boxed((X, None, 4.0), (Y, -1.0, None))
    system.add_constraint(const(2.5), LinearExpr(0.0, {X: 1.0, Y: -1.0}))  # x - y >= 2.5
    res = check_feasible(system)
    assert isinstance(res, Sat)
    assert violation(system, res.model) <= 1e-6


def test_conflicting_boxes_unsat():
    system = ConstraintSystem()
    system.add_variable(X, 0.6, None)
    system.add_variable(X, None, 0.4)  # intersection semantics: [0.6, 0.4]
    assert system.bounds[X] == (0.6, 0.4)
    assert isinstance(check_feasible(system), Unsat)


def test_strict_rows_are_relaxed():
    system = boxed((X, 0.0, 1.0))
    system.add_constraint(var(X), const(0.0), strict=True)  # x < 0 relaxed to x <= 0
    res = check_feasible(system)
    assert isinstance(res, Sat)
    assert res.model[X] == pytest.approx(0.0, abs=1e-9)


def test_malformed_systems_raise():
    from trigcert import Constraint

    system = ConstraintSystem()
    system.add_variable(X, 0.0, float("nan"))
    with pytest.raises(MalformedSystemError):
        check_feasible(system)
    system = ConstraintSystem()
    system.add_variable(X, 0.0, 1.0)
    # bypass add_constraint validation to simulate a corrupted system
    system.constraints.append(Constraint(var(Y), const(1.0)))
    with pytest.raises(MalformedSystemError):
        check_feasible(system)


def test_budget_exhaustion_is_unknown():
    system = ConstraintSystem()
    vs = [VariableId("img", 0, j) for j in range(8)]
    for v in vs:
        system.add_variable(v, 0.0, 1.0)
    for k in range(6):
        # sum of a window >= 1.5: negative-rhs rows that need real pivoting
        coeffs = {v: 1.0 for v in vs[k:k + 3]}
        system.add_constraint(const(1.5), LinearExpr(0.0, coeffs))
    res = check_feasible(system, max_pivots=1)
    assert isinstance(res, Unknown) and res.reason == "timeout"


def test_determinism_same_verdict_category():
    rng = np.random.default_rng(1)
    for _ in range(10):
        system = _random_system(rng)
        first = check_feasible(system)
        second = check_feasible(system)
        assert type(first) is type(second)
        if isinstance(first, Sat):
            assert first.model == second.model


def test_conjoin_identity():
    system = boxed((X, 0.0, 1.0))
    system.add_constraint(var(X), const(0.5))
    merged = conjoin([system])
    assert merged.bounds == system.bounds
    assert merged.constraints == system.constraints


def test_conjoin_shares_global_variables():
    g = VariableId("__global__", 0, 7)
    a = boxed((g, 0.0, 1.0), (VariableId("img0", 1, 0), -1.0, 1.0))
    b = boxed((g, 0.0, 1.0), (VariableId("img1", 1, 0), -2.0, 2.0))
    merged = conjoin([a, b])
    assert len(merged.bounds) == 3  # 2 + 2 - 1 shared


def test_conjoin_of_incompatible_halves_is_unsat():
    a = boxed((X, None, None))
    a.add_constraint(const(0.6), var(X))  # x >= 0.6
    b = boxed((X, None, None))
    b.add_constraint(var(X), const(0.4))  # x <= 0.4
    assert isinstance(check_feasible(conjoin([a, b])), Unsat)


def test_conjoin_deduplicates_identical_rows():
    a = boxed((X, 0.0, 1.0))
    a.add_constraint(const(0.0), var(X))
    b = boxed((X, 0.0, 1.0))
    b.add_constraint(const(0.0), var(X))
    assert len(conjoin([a, b]).constraints) == 1


def _random_system(rng, max_vars=6, ensure_boxes=True):
    """Small system with quarter-integer data, exactly representable as
    binary floats so the rational oracle decides the identical system."""
    n = int(rng.integers(2, max_vars + 1))
    vs = [VariableId("img", 0, j) for j in range(n)]
    system = ConstraintSystem()
    for v in vs:
        if ensure_boxes or rng.random() < 0.7:
            lo = float(rng.integers(-8, 5)) / 4.0
            hi = lo + float(rng.integers(0, 9)) / 4.0
            system.add_variable(v, lo, hi)
        else:
            system.add_variable(v)
    for _ in range(int(rng.integers(1, 9))):
        coeffs = {v: float(rng.integers(-3, 4)) for v in vs if rng.random() < 0.8}
        coeffs = {v: c for v, c in coeffs.items() if c != 0.0}
        rhs = float(rng.integers(-6, 7)) / 4.0
        system.add_constraint(LinearExpr(0.0, coeffs), const(rhs))
    return system


def test_verdicts_match_fourier_motzkin():
    rng = np.random.default_rng(2)
    sats = unsats = 0
    for _ in range(60):
        system = _random_system(rng, ensure_boxes=bool(rng.integers(2)))
        res = check_feasible(system)
        feasible = fourier_motzkin_feasible(system)
        if isinstance(res, Sat):
            assert feasible
            assert violation(system, res.model) <= 1e-6
            sats += 1
        elif isinstance(res, Unsat):
            assert not feasible
            unsats += 1
        else:
            pytest.fail(f"unexpected Unknown on a small clean system: {res}")
    assert sats > 0 and unsats > 0


def test_lp_dump_is_parseable_text(tmp_path):
    system = boxed((X, 0.0, 1.0), (Y, None, None))
    system.add_constraint(LinearExpr(0.0, {X: 2.0, Y: -1.0}), const(0.75), strict=True)
    path = tmp_path / "dump.lp"
    with open(path, "w") as fh:
        write_lp_text(system, fh)
    text = path.read_text()
    assert "Subject To" in text and "Bounds" in text and "strict" in text
    assert "x_img_0_0" in text
