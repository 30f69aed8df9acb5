"""Symbolic bound propagation over affine/ReLU/sigmoid/tanh layers.

Every neuron carries two symbolic linear bounds (ge, le) over the neurons
of the previous layer plus concrete interval bounds [lw, up]. Concrete
bounds for affine layers come from back-substitution: the symbolic
expression is rewritten layer by layer down to the input layer, picking
ge or le per coefficient sign, and finally closed over the input boxes.

Layer 0 is the identity input layer; pixels are either fixed to the image
value (point interval, constant symbolic bounds) or free (the trigger
pixels), in which case the neuron's symbolic bounds are the pixel variable
itself. Internally each layer is stored as dense numpy arrays; per-neuron
``LinearExpr`` views are materialized on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .nets import ActivationLayer, AffineLayer, Network, activation_derivative, apply_activation

# Treat [lw, up] as a point interval below this width when computing
# relaxation slopes (guards the chord/lambda divisions).
DEGENERATE_WIDTH = 1e-12


@dataclass(eq=True)
class LinearExpr:
    """const + sum(coeffs[var] * var). Keys are hashable variable ids;

    inside this module they are (layer_index, neuron_index) pairs."""

    const: float = 0.0
    coeffs: dict = field(default_factory=dict)

    def evaluate(self, assignment) -> float:
        return self.const + sum(c * assignment[v] for v, c in self.coeffs.items())

    def is_constant(self) -> bool:
        return not self.coeffs


@dataclass(eq=False)
class AbstractNeuron:
    ge: LinearExpr
    le: LinearExpr
    lw: float
    up: float


@dataclass(eq=False)
class _InputRecord:
    kind = "input"
    lw: np.ndarray
    up: np.ndarray
    free: np.ndarray  # bool mask: True where the pixel is a symbolic variable

    def __post_init__(self):
        # Fixed pixels contribute one constant fold; only the free columns
        # need the per-sign split during the closing step.
        self.fixed_values = np.where(self.free, 0.0, self.lw)
        self.free_idx = np.flatnonzero(self.free)
        self.free_lw = self.lw[self.free_idx]
        self.free_up = self.up[self.free_idx]


@dataclass(eq=False)
class _AffineRecord:
    kind = "affine"
    weights: np.ndarray  # (n_i, n_prev); ge = le = weights @ x_prev + bias
    bias: np.ndarray
    lw: np.ndarray
    up: np.ndarray


@dataclass(eq=False)
class _ActRecord:
    kind = "act"
    activation: str
    ge_slope: np.ndarray  # ge_j = ge_slope[j] * x_prev[j] + ge_const[j]
    ge_const: np.ndarray
    le_slope: np.ndarray
    le_const: np.ndarray
    lw: np.ndarray
    up: np.ndarray


class AbstractState:
    """Per-layer abstract elements for one (image, trigger position) analysis."""

    def __init__(self, input_record: _InputRecord):
        self.layers: list = [input_record]

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def layer_size(self, i: int) -> int:
        return self.layers[i].lw.shape[0]

    def lower(self, i: int) -> np.ndarray:
        return self.layers[i].lw

    def upper(self, i: int) -> np.ndarray:
        return self.layers[i].up

    def neuron(self, i: int, j: int) -> AbstractNeuron:
        """Materialize the (ge, le, lw, up) view of one neuron."""
        rec = self.layers[i]
        if rec.kind == "input":
            if rec.free[j]:
                ge = LinearExpr(0.0, {(0, j): 1.0})
                le = LinearExpr(0.0, {(0, j): 1.0})
            else:
                ge = LinearExpr(float(rec.lw[j]))
                le = LinearExpr(float(rec.lw[j]))
        elif rec.kind == "affine":
            coeffs = {(i - 1, h): float(w) for h, w in enumerate(rec.weights[j]) if w != 0.0}
            ge = LinearExpr(float(rec.bias[j]), coeffs)
            le = LinearExpr(float(rec.bias[j]), dict(coeffs))
        else:
            ge = LinearExpr(float(rec.ge_const[j]), {})
            if rec.ge_slope[j] != 0.0:
                ge.coeffs[(i - 1, j)] = float(rec.ge_slope[j])
            le = LinearExpr(float(rec.le_const[j]), {})
            if rec.le_slope[j] != 0.0:
                le.coeffs[(i - 1, j)] = float(rec.le_slope[j])
        return AbstractNeuron(ge, le, float(rec.lw[j]), float(rec.up[j]))


def init_input_state(net: Network, fixed: dict, free: dict) -> AbstractState:
    """Layer-0 state from a fixed/free partition of the input features.

    ``fixed`` maps flat index -> pixel value, ``free`` maps flat index ->
    (lo, hi) interval. Together they must cover all m features exactly once.
    """
    m = net.input_shape.size
    overlap = fixed.keys() & free.keys()
    if overlap:
        raise ValueError(f"pixels {sorted(overlap)} are both fixed and free")
    if len(fixed) + len(free) != m or (fixed.keys() | free.keys()) != set(range(m)):
        raise ValueError("fixed/free partition must cover every input feature exactly once")
    lw = np.empty(m)
    up = np.empty(m)
    free_mask = np.zeros(m, dtype=bool)
    for j, v in fixed.items():
        lw[j] = up[j] = v
    for j, (lo, hi) in free.items():
        if lo > hi:
            raise ValueError(f"free pixel {j} has empty domain [{lo}, {hi}]")
        lw[j], up[j] = lo, hi
        free_mask[j] = True
    return AbstractState(_InputRecord(lw=lw, up=up, free=free_mask))


def _concretize(state: AbstractState, layer_idx: int, M: np.ndarray, c: np.ndarray,
                direction: str) -> np.ndarray:
    """Concrete bound of expressions ``M @ x_layer + c`` over layer ``layer_idx``.

    direction "lower" substitutes ge for nonnegative coefficients and le for
    negative ones; "upper" is the mirror image. Runs all the way to layer 0.
    """
    lower = direction == "lower"
    for s in range(layer_idx, 0, -1):
        rec = state.layers[s]
        if rec.kind == "affine":
            c = c + M @ rec.bias
            M = M @ rec.weights
        else:
            pos = np.maximum(M, 0.0)
            neg = np.minimum(M, 0.0)
            if lower:
                c = c + pos @ rec.ge_const + neg @ rec.le_const
                M = pos * rec.ge_slope + neg * rec.le_slope
            else:
                c = c + pos @ rec.le_const + neg @ rec.ge_const
                M = pos * rec.le_slope + neg * rec.ge_slope
    rec = state.layers[0]
    c = c + M @ rec.fixed_values
    Mf = M[:, rec.free_idx]
    pos = np.maximum(Mf, 0.0)
    neg = np.minimum(Mf, 0.0)
    if lower:
        return c + pos @ rec.free_lw + neg @ rec.free_up
    return c + pos @ rec.free_up + neg @ rec.free_lw


def back_substitute(state: AbstractState, expr: LinearExpr, direction: str) -> float:
    """Sound concrete bound of a linear expression over one layer's variables."""
    if direction not in ("lower", "upper"):
        raise ValueError(f"direction must be 'lower' or 'upper', got {direction!r}")
    if expr.is_constant():
        return float(expr.const)
    layers = {v[0] for v in expr.coeffs}
    if len(layers) != 1:
        raise ValueError(f"expression mixes variables from layers {sorted(layers)}")
    layer_idx = layers.pop()
    if not (0 <= layer_idx < state.layer_count):
        raise ValueError(f"expression refers to unknown layer {layer_idx}")
    row = np.zeros((1, state.layer_size(layer_idx)))
    for (_, j), coef in expr.coeffs.items():
        row[0, j] = coef
    out = _concretize(state, layer_idx, row, np.array([expr.const]), direction)
    return float(out[0])


def transform_affine(state: AbstractState, layer: AffineLayer) -> _AffineRecord:
    """Append an affine layer; concrete bounds come from back-substitution."""
    prev_idx = state.layer_count - 1
    if layer.in_size != state.layer_size(prev_idx):
        raise ValueError(
            f"affine layer expects {layer.in_size} inputs, previous layer has {state.layer_size(prev_idx)}"
        )
    lw = _concretize(state, prev_idx, layer.weights, layer.bias.copy(), "lower")
    up = _concretize(state, prev_idx, layer.weights, layer.bias.copy(), "upper")
    rec = _AffineRecord(weights=layer.weights, bias=layer.bias, lw=lw, up=up)
    state.layers.append(rec)
    return rec


def _require_affine_prev(state: AbstractState) -> tuple[np.ndarray, np.ndarray]:
    rec = state.layers[-1]
    if rec.kind != "affine":
        raise ValueError("activation layers must directly follow an affine layer")
    return rec.lw, rec.up


def transform_relu(state: AbstractState) -> _ActRecord:
    """Append a ReLU layer using the standard case split on [lw, up]."""
    lw, up = _require_affine_prev(state)
    n = lw.shape[0]
    neg = up <= 0.0
    pos = lw >= 0.0
    unstable = ~(neg | pos)
    tiny = (up - lw) < DEGENERATE_WIDTH

    # le: 0 when always-off, identity when always-on, else the chord; for a
    # degenerate unstable interval fall back to the constant max(up, 0).
    denom = np.where(up - lw <= 0.0, 1.0, up - lw)
    chord_slope = up / denom
    chord_const = -up * lw / denom
    le_slope = np.where(neg, 0.0, np.where(pos, 1.0, np.where(tiny, 0.0, chord_slope)))
    le_const = np.where(neg, 0.0, np.where(pos, 0.0, np.where(tiny, np.maximum(up, 0.0), chord_const)))

    # ge is x unless the interval leans negative (up <= -lw), where 0 is used.
    ge_zero = up <= -lw
    ge_slope = np.where(ge_zero, 0.0, 1.0)
    ge_const = np.zeros(n)

    new_lw = np.where(ge_zero, 0.0, lw)
    new_up = np.maximum(up, 0.0)
    rec = _ActRecord(activation="relu", ge_slope=ge_slope, ge_const=ge_const,
                     le_slope=le_slope, le_const=le_const, lw=new_lw, up=new_up)
    state.layers.append(rec)
    return rec


def _transform_sshape(state: AbstractState, kind: str) -> _ActRecord:
    lw, up = _require_affine_prev(state)
    sig = expit if kind == "sigmoid" else np.tanh
    s_lw = sig(lw)
    s_up = sig(up)
    tiny = (up - lw) < DEGENERATE_WIDTH
    denom = np.where(tiny, 1.0, up - lw)
    lam = (s_up - s_lw) / denom
    lam_p = np.minimum(activation_derivative(kind, lw), activation_derivative(kind, up))

    # ge anchors at (lw, sigma(lw)): chord slope when the interval is in the
    # concave region (lw > 0), else the smaller endpoint derivative.
    ge_slope = np.where(tiny, 0.0, np.where(lw > 0.0, lam, lam_p))
    ge_const = s_lw - ge_slope * lw
    # le anchors at (up, sigma(up)): chord in the convex region (up <= 0).
    le_slope = np.where(tiny, 0.0, np.where(up <= 0.0, lam, lam_p))
    le_const = s_up - le_slope * up

    rec = _ActRecord(activation=kind, ge_slope=ge_slope, ge_const=ge_const,
                     le_slope=le_slope, le_const=le_const, lw=s_lw, up=s_up)
    state.layers.append(rec)
    return rec


def transform_sigmoid(state: AbstractState) -> _ActRecord:
    return _transform_sshape(state, "sigmoid")


def transform_tanh(state: AbstractState) -> _ActRecord:
    return _transform_sshape(state, "tanh")


_ACT_TRANSFORMS = {
    "relu": transform_relu,
    "sigmoid": transform_sigmoid,
    "tanh": transform_tanh,
}


def analyze(net: Network, state: AbstractState) -> AbstractState:
    """Propagate a freshly initialized input state through every layer."""
    if state.layer_count != 1:
        raise ValueError("analyze expects a state holding only the input layer")
    for layer in net.layers:
        if isinstance(layer, AffineLayer):
            transform_affine(state, layer)
        elif isinstance(layer, ActivationLayer):
            _ACT_TRANSFORMS[layer.kind](state)
        else:
            raise ValueError(f"unsupported layer type {type(layer).__name__}")
    return state


def analyze_trigger_region(net: Network, pixels: np.ndarray, trigger_indices: np.ndarray) -> AbstractState:
    """Analysis with the given pixels fixed except the trigger indices, which
    range over the network's input domain."""
    lw = np.array(pixels, dtype=np.float64, copy=True)
    up = lw.copy()
    free = np.zeros(lw.shape[0], dtype=bool)
    idx = np.asarray(trigger_indices, dtype=np.intp)
    lw[idx] = net.input_low[idx]
    up[idx] = net.input_high[idx]
    free[idx] = True
    return analyze(net, AbstractState(_InputRecord(lw=lw, up=up, free=free)))
