"""Shared builders: random networks, synthetic datasets, the backdoored fixture."""

import numpy as np
import pytest

from trigcert import ActivationLayer, AffineLayer, Image, ImageShape, Network, forward_batch


def make_random_net(rng, in_size=4, hidden=(3, 3), kinds="relu", labels=3, scale=1.0,
                    shape=None, domain=(0.0, 1.0)):
    """Random fully connected net; ``kinds`` is one activation name or a
    sequence with one entry per hidden affine layer ('' skips the activation,
    giving consecutive affine layers)."""
    if shape is None:
        shape = ImageShape(1, 1, in_size)
    if isinstance(kinds, str):
        kinds = [kinds] * len(hidden)
    layers = []
    prev = shape.size
    for width, kind in zip(hidden, kinds):
        layers.append(AffineLayer(rng.normal(0.0, scale, (width, prev)), rng.normal(0.0, scale, width)))
        if kind:
            layers.append(ActivationLayer(kind))
        prev = width
    layers.append(AffineLayer(rng.normal(0.0, scale, (labels, prev)), rng.normal(0.0, scale, labels)))
    return Network(shape, layers, labels, input_low=domain[0], input_high=domain[1])


def make_random_images(rng, net, count, labeled=True):
    m = net.input_shape.size
    pixels = rng.uniform(net.input_low, net.input_high, size=(count, m))
    if not labeled:
        return [Image(net.input_shape, pixels[i]) for i in range(count)]
    preds = forward_batch(net, pixels).argmax(axis=1)
    return [Image(net.input_shape, pixels[i], label=int(preds[i])) for i in range(count)]


# ----------------------------------------------------------- backdoor fixture

CORNER = 3          # white 3x3 patch detector at the top-left corner
DETECT_BIAS = -4.0  # corner-sum ramp starts at 4
CLIFF_GAIN = 100.0
CLIFF_BIAS = -4.93  # with DETECT_BIAS: cliff fires iff corner sum > 8.93
RAMP_WEIGHT = 0.1
TARGET_PENALTY = -3.0


def make_backdoored_net() -> Network:
    """28x28, 3 labels. Label 0 carries a wired-in backdoor that fires only
    when the 3x3 top-left corner is nearly all-white (pixel sum > 8.93);
    labels 1/2 contest on the mean brightness of two interior blocks.

    Any trigger attacking a clean image must push the corner sum past
    ~8.956, which forces every corner pixel above 0.95. A faint linear ramp
    (RAMP_WEIGHT) keeps the loss surface informative below the cliff.
    """
    shape = ImageShape(1, 28, 28)
    m = shape.size

    corner_idx = [r * 28 + c for r in range(CORNER) for c in range(CORNER)]
    left_idx = [r * 28 + c for r in range(4, 24) for c in range(4, 14)]
    right_idx = [r * 28 + c for r in range(4, 24) for c in range(14, 24)]

    w1 = np.zeros((3, m))
    w1[0, corner_idx] = 1.0
    w1[1, left_idx] = 2.0 / len(left_idx)
    w1[2, right_idx] = 2.0 / len(right_idx)
    b1 = np.array([DETECT_BIAS, 0.0, 0.0])

    # u0 feeds both the cliff unit and an identity pass-through ramp.
    w2 = np.array([
        [CLIFF_GAIN, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
    ])
    b2 = np.array([CLIFF_GAIN * CLIFF_BIAS, 0.0, 0.0, 0.0])

    w3 = np.array([
        [1.0, 0.0, 0.0, RAMP_WEIGHT],
        [0.0, 1.0, -1.0, 0.0],
        [0.0, -1.0, 1.0, 0.0],
    ])
    b3 = np.array([TARGET_PENALTY, 0.0, 0.0])

    return Network(shape, [
        AffineLayer(w1, b1), ActivationLayer("relu"),
        AffineLayer(w2, b2), ActivationLayer("relu"),
        AffineLayer(w3, b3),
    ], labels=3)


def make_backdoored_dataset(net: Network, rng, count: int, quantize: bool = False):
    """Images with a dark border/corner and two constant-brightness blocks;
    ground-truth labels are the network's own clean predictions."""
    shape = net.input_shape
    images = []
    pixels = np.zeros((count, shape.size))
    for i in range(count):
        while True:
            f_left = rng.uniform(0.2, 0.8)
            f_right = rng.uniform(0.2, 0.8)
            if abs(f_left - f_right) >= 0.05:
                break
        for r in range(4, 24):
            pixels[i, r * 28 + 4:r * 28 + 14] = f_left
            pixels[i, r * 28 + 14:r * 28 + 24] = f_right
    if quantize:
        pixels = np.round(pixels * 255.0) / 255.0
    preds = forward_batch(net, pixels).argmax(axis=1)
    for i in range(count):
        images.append(Image(shape, pixels[i], label=int(preds[i])))
    return images


@pytest.fixture(scope="session")
def backdoor_fixture():
    net = make_backdoored_net()
    rng = np.random.default_rng(90125)
    population = make_backdoored_dataset(net, rng, 60)
    validation = make_backdoored_dataset(net, rng, 40)
    return {"net": net, "population": population, "validation": validation}
