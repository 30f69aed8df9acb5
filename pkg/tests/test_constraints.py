import numpy as np
import pytest

from trigcert import (
    GLOBAL,
    ActivationLayer,
    AffineLayer,
    ConstraintSystem,
    Image,
    ImageShape,
    LinearExpr,
    Network,
    QuickCheck,
    Trigger,
    TriggerSpec,
    VariableId,
    attack_condition,
    build_phi_pre,
    check_feasible,
    classify,
    forward,
    quick_unsat,
    stamp,
)
from trigcert.lp import Sat, violation
from trigcert.nets import apply_activation, trigger_pixel_indices

from conftest import make_random_net
from oracles import grid_search_trigger


def two_pixel_net(out_bias=(0.0, 0.0)):
    shape = ImageShape(1, 1, 2)
    return Network(shape, [
        AffineLayer(np.array([[1.0, 1.0], [-1.0, 1.0]]), np.zeros(2)),
        ActivationLayer("relu"),
        AffineLayer(np.array([[1.0, -1.0], [-1.0, 1.0]]), np.asarray(out_bias, dtype=float)),
    ], 2)


def test_build_phi_pre_single_pixel():
    net = two_pixel_net()
    system = build_phi_pre(net, TriggerSpec((1, 1, 1), (0, 0)))
    assert len(system.bounds) == 1
    assert len(system.constraints) == 2
    assert system.bounds[VariableId(GLOBAL, 0, 0)] == (0.0, 1.0)


def test_build_phi_pre_three_by_three():
    net = make_random_net(np.random.default_rng(0), in_size=784, hidden=(3,), labels=2,
                          shape=ImageShape(1, 28, 28))
    system = build_phi_pre(net, TriggerSpec((1, 3, 3), (4, 9)))
    assert len(system.bounds) == 9
    assert len(system.constraints) == 18


def test_build_phi_pre_custom_domain():
    shape = ImageShape(1, 1, 2)
    net = Network(shape, [AffineLayer(np.eye(2), np.zeros(2))], 2,
                  input_low=0.1, input_high=0.9)
    system = build_phi_pre(net, TriggerSpec((1, 1, 1), (0, 0)))
    assert system.bounds[VariableId(GLOBAL, 0, 0)] == (0.1, 0.9)


def test_quick_unsat_examples():
    assert quick_unsat(np.array([0.0, 0.7]), np.array([0.5, 1.0]), 0) is QuickCheck.DEFINITELY_UNSAT
    assert quick_unsat(np.array([0.0, 0.8]), np.array([0.9, 1.0]), 0) is QuickCheck.POSSIBLY_SAT
    assert quick_unsat(np.array([0.0, 0.9]), np.array([0.9, 1.0]), 0) is QuickCheck.DEFINITELY_UNSAT


def test_system_rejects_undeclared_variables():
    system = ConstraintSystem()
    with pytest.raises(ValueError):
        system.add_constraint(LinearExpr(0.0, {VariableId("img", 1, 0): 1.0}), LinearExpr(1.0))


def test_attack_condition_constraint_counts():
    net = two_pixel_net()
    img = Image(net.input_shape, [0.3, 0.6])
    _, system = attack_condition(net, img, TriggerSpec((1, 1, 1), (0, 0)), 0)
    # phi_pre: 2 rows; layers of sizes 2,2,2: 2 rows per neuron; post: n-1
    assert len(system.constraints) == 2 + 2 * 6 + 1
    assert len(system.bounds) == 1 + 6
    # neuron boxes ride on the variables
    assert all(lo is not None and hi is not None for lo, hi in system.bounds.values())


def test_attack_condition_zero_pixel_trigger():
    # degenerate footprint: nothing erased, so the system is satisfiable
    # exactly when the clean image already classifies as the target
    net = two_pixel_net()
    img = Image(net.input_shape, [0.9, 0.1])  # relu(0.9+0.1)=1, relu(-0.8)=0 -> logits (1,-1)
    assert classify(forward(net, img)) == 0
    quick, system = attack_condition(net, img, TriggerSpec((1, 0, 0), (0, 0)), 0)
    assert quick is QuickCheck.POSSIBLY_SAT
    assert isinstance(check_feasible(system), Sat)


def test_attack_condition_toy_net_possibly_sat_when_grid_finds_trigger():
    net = two_pixel_net(out_bias=(0.0, 0.1))
    img = Image(net.input_shape, [0.9, 0.1])
    assert classify(forward(net, img)) == 0
    found = grid_search_trigger(net, [img], (1, 1, 2), 1, resolution=0.01)
    assert found is not None  # brute force proves a trigger exists
    quick, system = attack_condition(net, img, TriggerSpec((1, 1, 2), (0, 0)), 1)
    assert quick is QuickCheck.POSSIBLY_SAT
    assert isinstance(check_feasible(system), Sat)


def test_quick_unsat_agrees_with_grid_absence():
    # positions refuted by the output-bound check admit no concrete trigger
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(20):
        net = make_random_net(rng, in_size=3, hidden=(3,), labels=3, scale=1.5)
        img = Image(net.input_shape, rng.uniform(size=3))
        target = int(rng.integers(3))
        spec = TriggerSpec((1, 1, 1), (0, int(rng.integers(3))))
        quick, _ = attack_condition(net, img, spec, target)
        if quick is QuickCheck.DEFINITELY_UNSAT:
            checked += 1
            assert grid_search_trigger(net, [img], (1, 1, 1), target,
                                       positions=[spec.position]) is None
    assert checked > 0


def _true_assignment(net, img, trigger, tag="img"):
    """Trigger values plus the stamped image's actual activations, keyed
    the way attack_condition names its variables."""
    idx = trigger_pixel_indices(net.input_shape, trigger.spec)
    model = {VariableId(GLOBAL, 0, int(j)): float(v) for j, v in zip(idx, trigger.values)}
    x = stamp(img, trigger).pixels
    layer_idx = 0
    for layer in net.layers:
        layer_idx += 1
        if isinstance(layer, AffineLayer):
            x = layer.weights @ x + layer.bias
        else:
            x = apply_activation(layer.kind, x)
        for j, v in enumerate(x):
            model[VariableId(tag, layer_idx, j)] = float(v)
    return model


def test_encoding_over_approximates_real_attacks():
    # any concretely successful trigger extends to a model of the
    # non-strict relaxation of the attack condition
    rng = np.random.default_rng(4)
    confirmed = 0
    for _ in range(40):
        net = make_random_net(rng, in_size=4, hidden=(4, 3), kinds=("relu", "sigmoid"),
                              labels=3, scale=1.5)
        img = Image(net.input_shape, rng.uniform(size=4))
        spec = TriggerSpec((1, 1, 2), (0, int(rng.integers(3))))
        idx = trigger_pixel_indices(net.input_shape, spec)
        trigger = Trigger(spec, rng.uniform(size=2))
        stamped = stamp(img, trigger)
        target = classify(forward(net, stamped))
        quick, system = attack_condition(net, img, spec, target)
        assert quick is QuickCheck.POSSIBLY_SAT  # a real attack exists
        model = _true_assignment(net, img, trigger)
        assert violation(system, model) <= 1e-6
        confirmed += 1
    assert confirmed == 40


def test_attack_condition_validates_inputs():
    net = two_pixel_net()
    img = Image(net.input_shape, [0.5, 0.5])
    with pytest.raises(ValueError):
        attack_condition(net, img, TriggerSpec((1, 1, 1), (0, 0)), 5)
    with pytest.raises(ValueError):
        attack_condition(net, Image(ImageShape(1, 1, 3), np.zeros(3)),
                         TriggerSpec((1, 1, 1), (0, 0)), 0)
