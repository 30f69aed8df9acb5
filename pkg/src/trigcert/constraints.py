"""Attack-condition constraint systems.

For one image, one trigger position and one target label, the attack
condition is the conjunction of three parts: the trigger-pixel domain
boxes, the abstract over-approximation of the network (two symbolic
inequalities plus a concrete box per neuron), and the target-dominance
condition on the output logits. Trigger pixels are shared across images
as GLOBAL variables; every other variable is scoped to its image tag.

A cheap output-layer check refutes positions without touching the LP:
if the target's concrete upper bound does not exceed some other label's
concrete lower bound, no trigger value can attack this image here.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .deeppoly import AbstractState, LinearExpr, analyze_trigger_region
from .nets import Image, Network, TriggerSpec, trigger_pixel_indices

GLOBAL = "__global__"  # image tag of the shared trigger variables


class VariableId(NamedTuple):
    image: str
    layer: int
    neuron: int


class QuickCheck(enum.Enum):
    POSSIBLY_SAT = "possibly_sat"
    DEFINITELY_UNSAT = "definitely_unsat"


@dataclass(eq=True)
class Constraint:
    """lhs <= rhs (or strict lhs < rhs)."""

    lhs: LinearExpr
    rhs: LinearExpr
    strict: bool = False


@dataclass(eq=False)
class ConstraintSystem:
    bounds: dict = field(default_factory=dict)      # VariableId -> (lo | None, hi | None)
    constraints: list = field(default_factory=list)

    def add_variable(self, var: VariableId, lo: float | None = None, hi: float | None = None) -> None:
        if var in self.bounds:
            old_lo, old_hi = self.bounds[var]
            lo = old_lo if lo is None else (lo if old_lo is None else max(lo, old_lo))
            hi = old_hi if hi is None else (hi if old_hi is None else min(hi, old_hi))
        self.bounds[var] = (lo, hi)

    def add_constraint(self, lhs: LinearExpr, rhs: LinearExpr, strict: bool = False) -> None:
        for expr in (lhs, rhs):
            for var in expr.coeffs:
                if var not in self.bounds:
                    raise ValueError(f"constraint references undeclared variable {var}")
        self.constraints.append(Constraint(lhs, rhs, strict))

    @property
    def variables(self):
        return self.bounds.keys()


def build_phi_pre(net: Network, spec: TriggerSpec) -> ConstraintSystem:
    """Domain boxes for the trigger pixels: one GLOBAL variable per pixel,
    with explicit lo <= x_j and x_j <= hi rows."""
    spec.validate_for(net.input_shape)
    system = ConstraintSystem()
    for j in trigger_pixel_indices(net.input_shape, spec):
        var = VariableId(GLOBAL, 0, int(j))
        lo = float(net.input_low[j])
        hi = float(net.input_high[j])
        system.add_variable(var, lo, hi)
        x = LinearExpr(0.0, {var: 1.0})
        system.add_constraint(LinearExpr(lo), x)
        system.add_constraint(x, LinearExpr(hi))
    return system


def quick_unsat(output_lower: np.ndarray, output_upper: np.ndarray, target: int) -> QuickCheck:
    """DEFINITELY_UNSAT iff some other label's concrete lower bound already
    reaches the target's concrete upper bound."""
    n = output_lower.shape[0]
    if not (0 <= target < n):
        raise ValueError(f"target {target} out of range for {n} labels")
    up_t = output_upper[target]
    for j in range(n):
        if j != target and up_t <= output_lower[j]:
            return QuickCheck.DEFINITELY_UNSAT
    return QuickCheck.POSSIBLY_SAT


def _first_layer_exprs(rec, idx: np.ndarray, pixels: np.ndarray) -> list[LinearExpr]:
    """Layer-1 affine expressions over the GLOBAL trigger variables: the
    fixed pixels fold into the constant term."""
    fixed = np.array(pixels, dtype=np.float64, copy=True)
    fixed[idx] = 0.0
    consts = rec.bias + rec.weights @ fixed
    trig_cols = rec.weights[:, idx]
    exprs = []
    for j in range(rec.weights.shape[0]):
        coeffs = {VariableId(GLOBAL, 0, int(p)): float(w)
                  for p, w in zip(idx, trig_cols[j]) if w != 0.0}
        exprs.append(LinearExpr(float(consts[j]), coeffs))
    return exprs


def attack_condition(
    net: Network,
    image: Image,
    spec: TriggerSpec,
    target: int,
    image_tag: str = "img",
    on_state=None,
) -> tuple[QuickCheck, ConstraintSystem]:
    """Constraint system a trigger must satisfy to attack ``image`` at the
    position in ``spec``, together with the quick output-bound verdict.

    ``on_state`` (optional) receives the finished AbstractState, which is
    how the per-layer bound dump hooks in.
    """
    if image.shape != net.input_shape:
        raise ValueError(f"image shape {image.shape} does not match network input {net.input_shape}")
    if not (0 <= target < net.labels):
        raise ValueError(f"target {target} out of range for {net.labels} labels")
    idx = trigger_pixel_indices(net.input_shape, spec)
    state = analyze_trigger_region(net, image.pixels, idx)
    if on_state is not None:
        on_state(state)

    out = state.layer_count - 1
    quick = quick_unsat(state.lower(out), state.upper(out), target)

    system = build_phi_pre(net, spec)

    for i in range(1, state.layer_count):
        rec = state.layers[i]
        n_i = state.layer_size(i)
        for j in range(n_i):
            var = VariableId(image_tag, i, j)
            system.add_variable(var, float(rec.lw[j]), float(rec.up[j]))
        first_exprs = _first_layer_exprs(rec, idx, image.pixels) if i == 1 else None
        for j in range(n_i):
            var = VariableId(image_tag, i, j)
            x = LinearExpr(0.0, {var: 1.0})
            if rec.kind == "affine":
                if first_exprs is not None:
                    expr = first_exprs[j]
                else:
                    coeffs = {VariableId(image_tag, i - 1, h): float(w)
                              for h, w in enumerate(rec.weights[j]) if w != 0.0}
                    expr = LinearExpr(float(rec.bias[j]), coeffs)
                ge, le = expr, expr
            else:
                prev = VariableId(image_tag, i - 1, j)
                ge = LinearExpr(float(rec.ge_const[j]),
                                {prev: float(rec.ge_slope[j])} if rec.ge_slope[j] != 0.0 else {})
                le = LinearExpr(float(rec.le_const[j]),
                                {prev: float(rec.le_slope[j])} if rec.le_slope[j] != 0.0 else {})
            system.add_constraint(ge, x)
            system.add_constraint(x, le)

    out_idx = state.layer_count - 1
    x_target = LinearExpr(0.0, {VariableId(image_tag, out_idx, target): 1.0})
    for j in range(net.labels):
        if j == target:
            continue
        x_j = LinearExpr(0.0, {VariableId(image_tag, out_idx, j): 1.0})
        system.add_constraint(x_j, x_target, strict=True)

    return quick, system
