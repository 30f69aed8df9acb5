"""Images, triggers and feed-forward networks.

A network is a sequence of affine and elementwise activation layers
(ReLU, sigmoid, tanh) ending in an affine output layer that produces raw
logits. Convolutions are lowered to equivalent affine layers at load time,
so the analysis core only ever sees the two layer kinds.

Flat pixel indexing is channel-major: ``i = c*h*w + row*w + col``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATION_KINDS = ("relu", "sigmoid", "tanh")


@dataclass(frozen=True)
class ImageShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise ValueError(f"shape dimensions must be positive, got {self}")

    @property
    def size(self) -> int:
        return self.channels * self.height * self.width

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


def index_flatten(shape: ImageShape, c_i: int, h_i: int, w_i: int) -> int:
    """Flat index of pixel (c_i, h_i, w_i)."""
    if not (0 <= c_i < shape.channels and 0 <= h_i < shape.height and 0 <= w_i < shape.width):
        raise ValueError(f"coordinates ({c_i},{h_i},{w_i}) out of range for {shape}")
    return c_i * shape.height * shape.width + h_i * shape.width + w_i


def index_unflatten(shape: ImageShape, i: int) -> tuple[int, int, int]:
    """Inverse of index_flatten."""
    if not (0 <= i < shape.size):
        raise ValueError(f"flat index {i} out of range for {shape}")
    hw = shape.height * shape.width
    c_i = i // hw
    h_i = (i - c_i * hw) // shape.width
    w_i = i - c_i * hw - h_i * shape.width
    return (c_i, h_i, w_i)


@dataclass(frozen=True, eq=False)
class Image:
    shape: ImageShape
    pixels: np.ndarray
    label: int | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        object.__setattr__(self, "pixels", px)
        if px.ndim != 1 or px.shape[0] != self.shape.size:
            raise ValueError(
                f"expected {self.shape.size} pixels for {self.shape}, got array of shape {px.shape}"
            )
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels must be finite")


@dataclass(frozen=True)
class TriggerSpec:
    """Trigger footprint: shape (c_s, h_s, w_s) stamped at top-left (row, col).

    The trigger always spans all channels of the host image (c_s = c).
    Zero-area shapes are permitted (degenerate case: nothing is stamped).
    """

    shape: tuple[int, int, int]
    position: tuple[int, int]

    def __post_init__(self):
        c_s, h_s, w_s = self.shape
        if c_s < 1 or h_s < 0 or w_s < 0:
            raise ValueError(f"bad trigger shape {self.shape}")
        if len(self.position) != 2:
            raise ValueError(f"bad trigger position {self.position}")

    @property
    def size(self) -> int:
        c_s, h_s, w_s = self.shape
        return c_s * h_s * w_s

    def validate_for(self, image_shape: ImageShape) -> None:
        c_s, h_s, w_s = self.shape
        h_p, w_p = self.position
        if c_s != image_shape.channels:
            raise ValueError(f"trigger spans {c_s} channels but image has {image_shape.channels}")
        if not (0 <= h_p <= image_shape.height - h_s and 0 <= w_p <= image_shape.width - w_s):
            raise ValueError(f"trigger {self.shape} at {self.position} does not fit in {image_shape}")


def trigger_pixel_indices(shape: ImageShape, spec: TriggerSpec) -> np.ndarray:
    """Flat indices covered by the trigger, in ascending order."""
    spec.validate_for(shape)
    c_s, h_s, w_s = spec.shape
    h_p, w_p = spec.position
    out = np.empty(spec.size, dtype=np.intp)
    k = 0
    for c in range(c_s):
        for r in range(h_p, h_p + h_s):
            base = c * shape.height * shape.width + r * shape.width
            out[k:k + w_s] = np.arange(base + w_p, base + w_p + w_s)
            k += w_s
    return out


@dataclass(frozen=True, eq=False)
class Trigger:
    spec: TriggerSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1 or vals.shape[0] != self.spec.size:
            raise ValueError(f"expected {self.spec.size} trigger values, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("trigger values must be finite")


def stamp(image: Image, trigger: Trigger) -> Image:
    """Replace the pixels under the trigger footprint with the trigger values."""
    idx = trigger_pixel_indices(image.shape, trigger.spec)
    px = image.pixels.copy()
    px[idx] = trigger.values
    return Image(image.shape, px, label=image.label)


def stamp_batch(pixels: np.ndarray, indices: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Stamp trigger values into a (batch, m) pixel matrix."""
    out = np.array(pixels, dtype=np.float64, copy=True)
    out[:, indices] = values
    return out


@dataclass(eq=False)
class AffineLayer:
    weights: np.ndarray  # (n_out, n_in)
    bias: np.ndarray     # (n_out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("affine layer needs a 2-D weight matrix and 1-D bias")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"weight rows {self.weights.shape[0]} != bias length {self.bias.shape[0]}"
            )

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class ActivationLayer:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation {self.kind!r}, expected one of {ACTIVATION_KINDS}")


Layer = AffineLayer | ActivationLayer


def apply_activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return expit(x)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        s = expit(x)
        return s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    raise ValueError(f"no smooth derivative for activation {kind!r}")


@dataclass(eq=False)
class Network:
    """Trained classifier: input layout, per-feature input domain and layers.

    The expanded layer count (identity input layer plus every affine and
    activation layer separately) is ``1 + len(layers)``; the output layer
    is the last affine layer and has ``labels`` neurons.
    """

    input_shape: ImageShape
    layers: list
    labels: int
    input_low: np.ndarray = field(default=None)   # type: ignore[assignment]
    input_high: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        m = self.input_shape.size
        lo = 0.0 if self.input_low is None else self.input_low
        hi = 1.0 if self.input_high is None else self.input_high
        self.input_low = np.broadcast_to(np.asarray(lo, dtype=np.float64), (m,)).copy()
        self.input_high = np.broadcast_to(np.asarray(hi, dtype=np.float64), (m,)).copy()
        if np.any(self.input_low > self.input_high):
            raise ValueError("input domain has lo > hi")
        if not self.layers:
            raise ValueError("network needs at least one layer")
        size = m
        for i, layer in enumerate(self.layers):
            if isinstance(layer, AffineLayer):
                if layer.in_size != size:
                    raise ValueError(f"layer {i}: expected input size {size}, got {layer.in_size}")
                size = layer.out_size
            elif isinstance(layer, ActivationLayer):
                if i == 0 or not isinstance(self.layers[i - 1], AffineLayer):
                    raise ValueError(f"layer {i}: activation must directly follow an affine layer")
            else:
                raise ValueError(f"layer {i}: unsupported layer type {type(layer).__name__}")
        if not isinstance(self.layers[-1], AffineLayer):
            raise ValueError("final layer must be affine (raw logits)")
        if size != self.labels:
            raise ValueError(f"output layer has {size} neurons but network declares {self.labels} labels")

    @property
    def expanded_layer_count(self) -> int:
        return 1 + len(self.layers)

    def layer_sizes(self) -> list[int]:
        """Neuron count per expanded layer, input layer first."""
        sizes = [self.input_shape.size]
        for layer in self.layers:
            if isinstance(layer, AffineLayer):
                sizes.append(layer.out_size)
            else:
                sizes.append(sizes[-1])
        return sizes


def forward_batch(net: Network, pixels: np.ndarray) -> np.ndarray:
    """Forward pass on a (batch, m) pixel matrix; returns (batch, n) logits."""
    x = np.asarray(pixels, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.input_shape.size:
        raise ValueError(f"expected {net.input_shape.size} features, got {x.shape[1]}")
    for layer in net.layers:
        if isinstance(layer, AffineLayer):
            x = x @ layer.weights.T + layer.bias
        else:
            x = apply_activation(layer.kind, x)
    return x[0] if squeeze else x


def forward(net: Network, image: Image) -> np.ndarray:
    """Raw logits for a single image."""
    if image.shape != net.input_shape:
        raise ValueError(f"image shape {image.shape} does not match network input {net.input_shape}")
    return forward_batch(net, image.pixels)


def classify(output: np.ndarray) -> int:
    """Label with the highest logit; ties go to the lowest index."""
    output = np.asarray(output)
    if output.size == 0:
        raise ValueError("cannot classify an empty output vector")
    return int(np.argmax(output))


def lower_conv_to_affine(
    in_shape: ImageShape,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: int | tuple[int, int] = 1,
    padding: int | tuple[int, int] = 0,
) -> tuple[AffineLayer, ImageShape]:
    """Express a 2-D convolution as an equivalent dense affine layer.

    ``weights`` has shape (c_out, c_in, kh, kw); only zero padding is
    supported. Returns the affine layer together with the output shape
    (c_out, h_out, w_out) so callers can keep tracking spatial layout.
    """
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 4:
        raise ValueError(f"conv weights must be 4-D (c_out, c_in, kh, kw), got {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if bias.shape != (c_out,):
        raise ValueError(f"conv bias must have shape ({c_out},), got {bias.shape}")
    if c_in != in_shape.channels:
        raise ValueError(f"conv expects {c_in} input channels but input has {in_shape.channels}")
    sh, sw = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if isinstance(padding, str):
        raise ValueError(f"unsupported padding mode {padding!r}; only numeric zero padding is supported")
    ph, pw = (padding, padding) if isinstance(padding, int) else tuple(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError(f"bad stride {stride!r} or padding {padding!r}")

    h_out = (in_shape.height + 2 * ph - kh) // sh + 1
    w_out = (in_shape.width + 2 * pw - kw) // sw + 1
    if h_out < 1 or w_out < 1:
        raise ValueError("kernel does not fit in the padded input")
    out_shape = ImageShape(c_out, h_out, w_out)

    W = np.zeros((out_shape.size, in_shape.size))
    B = np.empty(out_shape.size)
    for co in range(c_out):
        for oh in range(h_out):
            for ow in range(w_out):
                row = index_flatten(out_shape, co, oh, ow)
                B[row] = bias[co]
                for ci in range(c_in):
                    for dh in range(kh):
                        ih = oh * sh - ph + dh
                        if not (0 <= ih < in_shape.height):
                            continue
                        for dw in range(kw):
                            iw = ow * sw - pw + dw
                            if not (0 <= iw < in_shape.width):
                                continue
                            col = index_flatten(in_shape, ci, ih, iw)
                            W[row, col] = weights[co, ci, dh, dw]
    return AffineLayer(W, B), out_shape
