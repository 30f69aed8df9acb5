"""File formats: networks, datasets, triggers, reports, debug dumps.

Structured text is YAML throughout (networks, triggers, reports, bound
dumps). Network weights round-trip at full double precision since the
emitter writes repr-style floats. Convolution layers are accepted in
network files and lowered to affine form at load time.

Datasets come either as MNIST IDX binaries (magic 0x803 for images, 0x801
for labels, big-endian dimensions, unsigned bytes, optionally gzipped) or
as a CSV fallback with rows ``label,p0,p1,...``; byte values are
normalized to [0, 1] by division by 255.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np
import yaml

from .nets import (
    ActivationLayer,
    AffineLayer,
    Image,
    ImageShape,
    Network,
    Trigger,
    TriggerSpec,
    lower_conv_to_affine,
    stamp,
)

_YamlLoader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)
_YamlDumper = getattr(yaml, "CSafeDumper", yaml.SafeDumper)


class NetworkFormatError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def _load_yaml(text: str):
    try:
        return yaml.load(text, Loader=_YamlLoader)
    except yaml.YAMLError as exc:
        raise NetworkFormatError(f"not valid YAML: {exc}") from exc


def _dump_yaml(doc) -> str:
    return yaml.dump(doc, Dumper=_YamlDumper, sort_keys=True, default_flow_style=None)


# ---------------------------------------------------------------- networks

def parse_network(text: str) -> Network:
    doc = _load_yaml(text)
    if not isinstance(doc, dict):
        raise NetworkFormatError("network document must be a mapping")
    for key in ("input_shape", "input_domain", "labels", "layers"):
        if key not in doc:
            raise NetworkFormatError(f"missing field {key!r}")
    try:
        c, h, w = (int(v) for v in doc["input_shape"])
    except (TypeError, ValueError) as exc:
        raise NetworkFormatError(f"bad input_shape {doc['input_shape']!r}") from exc
    shape = ImageShape(c, h, w)

    domain = doc["input_domain"]
    if not isinstance(domain, dict) or "lo" not in domain or "hi" not in domain:
        raise NetworkFormatError("input_domain must be a mapping with lo and hi")
    lo = np.asarray(domain["lo"], dtype=np.float64)
    hi = np.asarray(domain["hi"], dtype=np.float64)

    labels = int(doc["labels"])
    layer_docs = doc["layers"]
    if not isinstance(layer_docs, list) or not layer_docs:
        raise NetworkFormatError("layers must be a nonempty list")

    layers: list = []
    current_shape = shape  # spatial layout, tracked while convs appear
    for k, entry in enumerate(layer_docs):
        if not isinstance(entry, dict) or "type" not in entry:
            raise NetworkFormatError(f"layer {k} must be a mapping with a type")
        kind = entry["type"]
        try:
            if kind == "affine":
                layers.append(AffineLayer(np.asarray(entry["weights"], dtype=np.float64),
                                          np.asarray(entry["bias"], dtype=np.float64)))
                current_shape = None
            elif kind == "conv":
                if current_shape is None:
                    raise NetworkFormatError(f"layer {k}: conv after a dense layer loses spatial layout")
                layer, current_shape = lower_conv_to_affine(
                    current_shape,
                    np.asarray(entry["weights"], dtype=np.float64),
                    np.asarray(entry["bias"], dtype=np.float64),
                    stride=entry.get("stride", 1),
                    padding=entry.get("padding", 0),
                )
                layers.append(layer)
            elif kind in ("relu", "sigmoid", "tanh"):
                layers.append(ActivationLayer(kind))
            else:
                raise NetworkFormatError(f"layer {k}: unknown type {kind!r}")
        except KeyError as exc:
            raise NetworkFormatError(f"layer {k}: missing field {exc}") from exc
        except ValueError as exc:
            raise NetworkFormatError(f"layer {k}: {exc}") from exc

    try:
        return Network(shape, layers, labels, input_low=lo, input_high=hi)
    except ValueError as exc:
        raise NetworkFormatError(str(exc)) from exc


def load_network(path) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_network(fh.read())


def network_to_text(net: Network) -> str:
    layers = []
    for layer in net.layers:
        if isinstance(layer, AffineLayer):
            layers.append({"type": "affine",
                           "weights": layer.weights.tolist(),
                           "bias": layer.bias.tolist()})
        else:
            layers.append({"type": layer.kind})
    lo = net.input_low
    hi = net.input_high
    domain = {
        "lo": float(lo[0]) if np.all(lo == lo[0]) else lo.tolist(),
        "hi": float(hi[0]) if np.all(hi == hi[0]) else hi.tolist(),
    }
    doc = {
        "input_shape": list(net.input_shape.as_tuple()),
        "input_domain": domain,
        "labels": net.labels,
        "layers": layers,
    }
    return _dump_yaml(doc)


def save_network(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(network_to_text(net))


# ---------------------------------------------------------------- datasets

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DatasetFormatError(f"truncated file while reading {what}")
    return data


def load_mnist_idx(images_path, labels_path) -> list[Image]:
    """IDX image/label pair, normalized to [0,1]; labels attached per image."""
    with _open_maybe_gzip(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != _IDX_IMAGES_MAGIC:
            raise DatasetFormatError(f"bad image magic 0x{magic:08x}, expected 0x{_IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, count * rows * cols, "image data")
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after image data")
    with _open_maybe_gzip(labels_path) as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != _IDX_LABELS_MAGIC:
            raise DatasetFormatError(f"bad label magic 0x{magic:08x}, expected 0x{_IDX_LABELS_MAGIC:08x}")
        labels = _read_exact(fh, label_count, "label data")
    if label_count != count:
        raise DatasetFormatError(f"{count} images but {label_count} labels")

    shape = ImageShape(1, rows, cols)
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(count, rows * cols) / 255.0
    return [Image(shape, pixels[i], label=int(labels[i])) for i in range(count)]


def load_csv_dataset(path, shape: ImageShape | None = None) -> list[Image]:
    """CSV rows ``label,p0,p1,...`` with byte-valued pixels.

    The shape defaults to a single-channel square inferred from the column
    count; pass one explicitly for anything else.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append((int(parts[0]), np.array([float(p) for p in parts[1:]])))
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from exc
    if not rows:
        raise DatasetFormatError("empty dataset")
    m = rows[0][1].shape[0]
    if shape is None:
        side = int(round(m ** 0.5))
        if side * side != m:
            raise DatasetFormatError(f"cannot infer a square shape from {m} pixels; pass shape=")
        shape = ImageShape(1, side, side)
    if shape.size != m:
        raise DatasetFormatError(f"shape {shape} needs {shape.size} pixels, rows have {m}")
    out = []
    for lineno, (label, px) in enumerate(rows, 1):
        if px.shape[0] != m:
            raise DatasetFormatError(f"line {lineno}: expected {m} pixels, got {px.shape[0]}")
        out.append(Image(shape, px / 255.0, label=label))
    return out


# ---------------------------------------------------------------- triggers

def trigger_to_doc(trigger: Trigger, stamped_example: Image | None = None) -> dict:
    doc = {
        "shape": list(trigger.spec.shape),
        "position": list(trigger.spec.position),
        "values": [float(v) for v in trigger.values],
    }
    if stamped_example is not None:
        doc["stamped_example"] = [float(v) for v in stamp(stamped_example, trigger).pixels]
    return doc


def trigger_to_text(trigger: Trigger, stamped_example: Image | None = None) -> str:
    return _dump_yaml(trigger_to_doc(trigger, stamped_example))


def parse_trigger(text: str) -> Trigger:
    doc = _load_yaml(text)
    spec = TriggerSpec(tuple(int(v) for v in doc["shape"]), tuple(int(v) for v in doc["position"]))
    return Trigger(spec, np.asarray(doc["values"], dtype=np.float64))


# ----------------------------------------------------------------- reports

def report_to_text(report_doc: dict) -> str:
    """Canonical machine-readable report; key order is fixed so seeded
    single-worker reruns emit identical bytes."""
    return _dump_yaml(report_doc)


def save_report(report_doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_to_text(report_doc))


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return _load_yaml(fh.read())


# ------------------------------------------------------------- debug dumps

def bounds_to_doc(image_tag: str, position, state) -> dict:
    layers = []
    for i, rec in enumerate(state.layers):
        layers.append({
            "index": i,
            "kind": rec.kind,
            "lw": [float(v) for v in rec.lw],
            "up": [float(v) for v in rec.up],
        })
    return {"image": image_tag, "position": list(position), "layers": layers}


def append_bounds_dump(stream, image_tag: str, position, state) -> None:
    stream.write("---\n")
    stream.write(_dump_yaml(bounds_to_doc(image_tag, position, state)))
