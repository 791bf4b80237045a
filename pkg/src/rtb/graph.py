"""Serializable computation-graph IR, forward interpreter, and cost model.

Graph text format, one layer per line::

    id kind key=value ... inputs=id1,id2

``#`` starts a comment; ``#! key=value`` lines carry graph metadata and
round-trip.  Weights live in a separate blob keyed ``layerid.weight`` /
``layerid.bias`` (attention gates add ``.fc1`` / ``.fc2`` tensors, affine
layers use ``.scale`` / ``.shift``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingWeights, ParseError, ShapeError, ValidationError
from .tensor import (
    PRECISION_FULL,
    PRECISION_HALF,
    CostMeter,
    Tensor,
    activation,
    affine_channel,
    attention_gate,
    conv2d,
    conv3d,
    deconv3d_2x,
    global_avg_pool,
    quantize_half,
    softmax_axis,
)

# kind -> (required attrs, input arity); arity None means >= 2
_KIND_SCHEMA = {
    "input": (("channels",), 0),
    "output": ((), 1),
    "conv2d": (("cin", "cout", "k", "stride", "pad", "groups", "bias"), 1),
    "conv3d": (("cin", "cout", "k", "stride", "pad", "bias"), 1),
    "deconv3d": (("cin", "cout", "bias"), 1),
    "affine": (("channels",), 1),
    "activation": (("fn",), 1),
    "pool_gap": ((), 1),
    "softmax": (("axis",), 1),
    "add": ((), None),
    "concat": ((), None),
    "attention_gate": (("channels", "hidden"), 1),
}


@dataclass
class LayerSpec:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)


class NetworkGraph:
    """Ordered DAG of layer specs plus a weight store."""

    def __init__(self, layers=None, weights=None, metadata=None):
        self.layers = list(layers or [])
        self.weights = dict(weights or {})
        self.metadata = dict(metadata or {})

    def layer(self, layer_id: str) -> LayerSpec:
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise KeyError(layer_id)

    def by_id(self) -> dict:
        return {l.id: l for l in self.layers}

    def copy(self) -> "NetworkGraph":
        layers = [LayerSpec(l.id, l.kind, dict(l.attrs), list(l.inputs)) for l in self.layers]
        weights = {k: v.copy() for k, v in self.weights.items()}
        return NetworkGraph(layers, weights, dict(self.metadata))

    def consumers(self, layer_id: str) -> list:
        return [l for l in self.layers if layer_id in l.inputs]


def _format_value(v):
    return str(v)


def _parse_value(s):
    try:
        return int(s)
    except ValueError:
        return s


def serialize_graph(g: NetworkGraph) -> str:
    lines = []
    for k in sorted(g.metadata):
        lines.append(f"#! {k}={g.metadata[k]}")
    for l in g.layers:
        parts = [l.id, l.kind]
        for k in sorted(l.attrs):
            parts.append(f"{k}={_format_value(l.attrs[k])}")
        if l.inputs:
            parts.append("inputs=" + ",".join(l.inputs))
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> NetworkGraph:
    layers = []
    metadata = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#!"):
            body = line[2:].strip()
            if "=" not in body:
                raise ParseError(f"malformed metadata {body!r}", lineno)
            k, _, v = body.partition("=")
            metadata[k.strip()] = v.strip()
            continue
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise ParseError(f"expected 'id kind ...', got {line!r}", lineno)
        lid, kind = tokens[0], tokens[1]
        if kind not in _KIND_SCHEMA:
            raise ParseError(f"unknown layer kind {kind!r}", lineno)
        if lid in seen:
            raise ParseError(f"duplicate layer id {lid!r}", lineno)
        seen.add(lid)
        attrs = {}
        inputs = []
        for tok in tokens[2:]:
            if "=" not in tok:
                raise ParseError(f"expected key=value, got {tok!r}", lineno)
            k, _, v = tok.partition("=")
            if k == "inputs":
                inputs = [s for s in v.split(",") if s]
            else:
                attrs[k] = _parse_value(v)
        for ref in inputs:
            if ref not in seen:
                raise ParseError(f"layer {lid!r} references undefined layer id {ref!r}", lineno)
        layers.append(LayerSpec(lid, kind, attrs, inputs))
    return NetworkGraph(layers, metadata=metadata)


def out_channels(g: NetworkGraph, layer: LayerSpec, table: dict | None = None) -> int:
    """Channel count of a layer's output, following pass-through kinds."""
    if table is not None and layer.id in table:
        return table[layer.id]
    by_id = g.by_id()

    def resolve(l, stack):
        if table is not None and l.id in table:
            return table[l.id]
        if l.id in stack:
            raise ValidationError(f"cycle through layer {l.id!r}")
        stack = stack | {l.id}
        if l.kind == "input":
            c = l.attrs["channels"]
        elif l.kind in ("conv2d", "conv3d", "deconv3d"):
            c = l.attrs["cout"]
        elif l.kind == "concat":
            c = sum(resolve(by_id[i], stack) for i in l.inputs)
        elif l.kind in ("affine", "activation", "softmax", "pool_gap",
                        "attention_gate", "add", "output"):
            c = resolve(by_id[l.inputs[0]], stack)
        else:
            raise ValidationError(f"unknown kind {l.kind!r}")
        if table is not None:
            table[l.id] = c
        return c

    return resolve(layer, frozenset())


def _expected_weight_shapes(layer: LayerSpec) -> dict:
    a = layer.attrs
    if layer.kind == "conv2d":
        shapes = {"weight": (a["cout"], a["cin"] // a["groups"], a["k"], a["k"])}
        if a["bias"]:
            shapes["bias"] = (a["cout"],)
        return shapes
    if layer.kind == "conv3d":
        shapes = {"weight": (a["cout"], a["cin"], a["k"], a["k"], a["k"])}
        if a["bias"]:
            shapes["bias"] = (a["cout"],)
        return shapes
    if layer.kind == "deconv3d":
        shapes = {"weight": (a["cin"], a["cout"], 4, 4, 4)}
        if a["bias"]:
            shapes["bias"] = (a["cout"],)
        return shapes
    if layer.kind == "affine":
        return {"scale": (a["channels"],), "shift": (a["channels"],)}
    if layer.kind == "attention_gate":
        c, h = a["channels"], a["hidden"]
        return {
            "fc1.weight": (h, c), "fc1.bias": (h,),
            "fc2.weight": (c, h), "fc2.bias": (c,),
        }
    return {}


def validate_graph(g: NetworkGraph) -> list:
    """Return every structural violation found (empty list means valid)."""
    violations = []
    by_id = {}
    for l in g.layers:
        if l.id in by_id:
            violations.append(f"duplicate layer id {l.id!r}")
        by_id[l.id] = l
    for l in g.layers:
        if l.kind not in _KIND_SCHEMA:
            violations.append(f"layer {l.id!r}: unknown kind {l.kind!r}")
            continue
        required, arity = _KIND_SCHEMA[l.kind]
        for k in required:
            if k not in l.attrs:
                violations.append(f"layer {l.id!r}: missing attr {k!r}")
        if arity is None:
            if len(l.inputs) < 2:
                violations.append(f"layer {l.id!r}: {l.kind} needs >= 2 inputs")
        elif len(l.inputs) != arity:
            violations.append(f"layer {l.id!r}: expected {arity} inputs, got {len(l.inputs)}")
        for ref in l.inputs:
            if ref not in by_id:
                violations.append(f"layer {l.id!r}: dangling input reference {ref!r}")
            elif ref == l.id:
                violations.append(f"layer {l.id!r}: self-loop edge")
    if violations:
        return violations

    order, cyc = _topo_order(g)
    if cyc:
        violations.append(f"cycle involving layers {sorted(cyc)}")
        return violations

    # channel arithmetic over the topological order
    table = {}
    for l in order:
        try:
            for ref in l.inputs:
                out_channels(g, by_id[ref], table)
        except ValidationError as exc:
            violations.append(str(exc))
            continue
        in_ch = [table[ref] for ref in l.inputs if ref in table]
        if len(in_ch) != len(l.inputs):
            continue
        if l.kind in ("conv2d", "conv3d", "deconv3d") and in_ch[0] != l.attrs["cin"]:
            violations.append(
                f"layer {l.id!r}: expects cin={l.attrs['cin']} but producer provides {in_ch[0]}"
            )
        if l.kind == "conv2d":
            a = l.attrs
            if a["cin"] % a["groups"] or a["cout"] % a["groups"]:
                violations.append(f"layer {l.id!r}: channels not divisible by groups")
        if l.kind in ("affine", "attention_gate") and in_ch[0] != l.attrs["channels"]:
            violations.append(
                f"layer {l.id!r}: expects channels={l.attrs['channels']} "
                f"but producer provides {in_ch[0]}"
            )
        if l.kind == "add" and len(set(in_ch)) > 1:
            violations.append(f"layer {l.id!r}: add operands have unequal channels {in_ch}")
        try:
            out_channels(g, l, table)
        except ValidationError as exc:
            violations.append(str(exc))

    for l in g.layers:
        for name, shape in _expected_weight_shapes(l).items():
            key = f"{l.id}.{name}"
            if key not in g.weights:
                violations.append(f"missing weight {key!r}")
            elif g.weights[key].shape != shape:
                violations.append(
                    f"weight {key!r} has shape {g.weights[key].shape}, expected {shape}"
                )
    return violations


def _topo_order(g: NetworkGraph):
    """Kahn's algorithm, breaking ties by declaration order."""
    by_id = g.by_id()
    indeg = {l.id: len(l.inputs) for l in g.layers}
    consumers = {l.id: [] for l in g.layers}
    for l in g.layers:
        for ref in l.inputs:
            consumers[ref].append(l.id)
    position = {l.id: i for i, l in enumerate(g.layers)}
    ready = sorted([lid for lid, d in indeg.items() if d == 0], key=position.get)
    order = []
    while ready:
        lid = ready.pop(0)
        order.append(by_id[lid])
        changed = False
        for c in consumers[lid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
                changed = True
        if changed:
            ready.sort(key=position.get)
    cyc = {lid for lid, d in indeg.items() if d > 0}
    return order, cyc


def _weight(g: NetworkGraph, layer_id: str, name: str) -> Tensor:
    key = f"{layer_id}.{name}"
    if key not in g.weights:
        raise MissingWeights(f"missing weight {key!r}")
    return g.weights[key]


def _eval_layer(g: NetworkGraph, l: LayerSpec, values: dict, meter: CostMeter) -> Tensor:
    a = l.attrs
    ins = [values[i] for i in l.inputs]
    if l.kind == "output":
        return ins[0]
    if l.kind == "conv2d":
        bias = _weight(g, l.id, "bias") if a["bias"] else None
        return conv2d(ins[0], _weight(g, l.id, "weight"), bias,
                      a["stride"], a["pad"], a["groups"], meter)
    if l.kind == "conv3d":
        bias = _weight(g, l.id, "bias") if a["bias"] else None
        return conv3d(ins[0], _weight(g, l.id, "weight"), bias,
                      a["stride"], a["pad"], meter)
    if l.kind == "deconv3d":
        bias = _weight(g, l.id, "bias") if a["bias"] else None
        return deconv3d_2x(ins[0], _weight(g, l.id, "weight"), bias, meter)
    if l.kind == "affine":
        return affine_channel(ins[0], _weight(g, l.id, "scale"),
                              _weight(g, l.id, "shift"), meter)
    if l.kind == "activation":
        return activation(ins[0], a["fn"])
    if l.kind == "pool_gap":
        return global_avg_pool(ins[0])
    if l.kind == "softmax":
        return softmax_axis(ins[0], a["axis"])
    if l.kind == "add":
        acc = ins[0].data
        for t in ins[1:]:
            acc = acc + t.data
        return Tensor(acc)
    if l.kind == "concat":
        return Tensor(np.concatenate([t.data for t in ins], axis=1))
    if l.kind == "attention_gate":
        return attention_gate(ins[0],
                              _weight(g, l.id, "fc1.weight"), _weight(g, l.id, "fc1.bias"),
                              _weight(g, l.id, "fc2.weight"), _weight(g, l.id, "fc2.bias"),
                              meter)
    raise ValidationError(f"unknown kind {l.kind!r}")


def execute(g: NetworkGraph, feeds: dict, precision: str = PRECISION_FULL):
    """Evaluate the graph on the given input feeds.

    Returns ``(outputs, meter)`` where outputs maps each output-layer id to
    its Tensor.  In half-emulated mode every layer's result is rounded
    through binary16 before use.
    """
    order, cyc = _topo_order(g)
    if cyc:
        raise ValidationError(f"cycle involving layers {sorted(cyc)}")
    half = precision == PRECISION_HALF
    meter = CostMeter()
    values = {}
    outputs = {}
    for l in order:
        if l.kind == "input":
            if l.id not in feeds:
                raise ShapeError(f"layer {l.id!r}: no feed for input stream")
            t = feeds[l.id]
            if t.shape[1] != l.attrs["channels"]:
                raise ShapeError(
                    f"layer {l.id!r}: feed has {t.shape[1]} channels, "
                    f"expected {l.attrs['channels']}"
                )
            values[l.id] = quantize_half(t) if half else t
            continue
        try:
            out = _eval_layer(g, l, values, meter)
        except ShapeError as exc:
            raise ShapeError(f"layer {l.id!r}: {exc}") from exc
        if half and l.kind != "output":
            out = quantize_half(out)
        values[l.id] = out
        if l.kind == "output":
            outputs[l.id] = out
    return outputs, meter


@dataclass
class CostReport:
    total_flops: int
    total_params: int
    per_layer: list


def _layer_params(l: LayerSpec) -> int:
    a = l.attrs
    if l.kind == "conv2d":
        n = a["cout"] * (a["cin"] // a["groups"]) * a["k"] * a["k"]
        return n + (a["cout"] if a["bias"] else 0)
    if l.kind == "conv3d":
        n = a["cout"] * a["cin"] * a["k"] ** 3
        return n + (a["cout"] if a["bias"] else 0)
    if l.kind == "deconv3d":
        n = a["cin"] * a["cout"] * 64
        return n + (a["cout"] if a["bias"] else 0)
    if l.kind == "affine":
        return 2 * a["channels"]
    if l.kind == "attention_gate":
        return 2 * a["channels"] * a["hidden"] + a["channels"] + a["hidden"]
    return 0


def analytic_cost(g: NetworkGraph, input_shapes: dict) -> CostReport:
    """Shape-propagate symbolically and apply the per-kind FLOP rules.

    Convolution kinds follow the MAC = 2 FLOPs convention; activations,
    softmax, and pooling count as zero.
    """
    order, cyc = _topo_order(g)
    if cyc:
        raise ValidationError(f"cycle involving layers {sorted(cyc)}")
    shapes = {}
    per_layer = []
    for l in order:
        a = l.attrs
        if l.kind == "input":
            if l.id not in input_shapes:
                raise ValidationError(f"no input shape for stream {l.id!r}")
            shape = tuple(input_shapes[l.id])
        else:
            ins = [shapes[i] for i in l.inputs]
            shape, _ = _propagate(l, ins)
        shapes[l.id] = shape
        flops = _layer_flops(l, [shapes[i] for i in l.inputs], shape)
        per_layer.append((l.id, flops, _layer_params(l)))
    total_flops = sum(f for _, f, _ in per_layer)
    total_params = sum(p for _, _, p in per_layer)
    return CostReport(total_flops, total_params, per_layer)


def _conv_out_dim(size, k, stride, pad, lid):
    num = size + 2 * pad - k
    if num < 0 or num % stride:
        raise ValidationError(
            f"layer {lid!r}: non-integral output for dim {size} "
            f"(k={k}, stride={stride}, pad={pad})"
        )
    return num // stride + 1


def _propagate(l: LayerSpec, ins: list):
    a = l.attrs
    s0 = ins[0] if ins else None
    if l.kind == "conv2d":
        if len(s0) != 4:
            raise ValidationError(f"layer {l.id!r}: conv2d input rank {len(s0)}")
        N, _, H, W = s0
        return (N, a["cout"],
                _conv_out_dim(H, a["k"], a["stride"], a["pad"], l.id),
                _conv_out_dim(W, a["k"], a["stride"], a["pad"], l.id)), None
    if l.kind == "conv3d":
        if len(s0) != 5:
            raise ValidationError(f"layer {l.id!r}: conv3d input rank {len(s0)}")
        N, _, D, H, W = s0
        return (N, a["cout"],
                _conv_out_dim(D, a["k"], a["stride"], a["pad"], l.id),
                _conv_out_dim(H, a["k"], a["stride"], a["pad"], l.id),
                _conv_out_dim(W, a["k"], a["stride"], a["pad"], l.id)), None
    if l.kind == "deconv3d":
        N, _, D, H, W = s0
        return (N, a["cout"], 2 * D, 2 * H, 2 * W), None
    if l.kind == "pool_gap":
        return (s0[0], s0[1]), None
    if l.kind == "concat":
        c = sum(s[1] for s in ins)
        for s in ins:
            if s[0] != ins[0][0] or s[2:] != ins[0][2:]:
                raise ValidationError(f"layer {l.id!r}: concat operands disagree beyond channels")
        return (ins[0][0], c) + tuple(ins[0][2:]), None
    if l.kind == "add":
        for s in ins:
            if s != ins[0]:
                raise ValidationError(f"layer {l.id!r}: add operands have unequal shapes")
        return ins[0], None
    # affine / activation / softmax / attention_gate / output keep shape
    return s0, None


def _layer_flops(l: LayerSpec, in_shapes: list, out_shape: tuple) -> int:
    a = l.attrs
    if l.kind == "conv2d":
        N, cout, Ho, Wo = out_shape
        return 2 * N * cout * (a["cin"] // a["groups"]) * a["k"] * a["k"] * Ho * Wo
    if l.kind == "conv3d":
        N, cout, Do, Ho, Wo = out_shape
        return 2 * N * cout * a["cin"] * a["k"] ** 3 * Do * Ho * Wo
    if l.kind == "deconv3d":
        N, cout, Do, Ho, Wo = out_shape
        return 2 * N * cout * a["cin"] * 64 * Do * Ho * Wo
    if l.kind == "affine":
        n = 1
        for d in out_shape:
            n *= d
        return 2 * n
    if l.kind == "attention_gate":
        return 4 * out_shape[0] * a["channels"] * a["hidden"]
    return 0


def init_weights(g: NetworkGraph, seed: int = 0) -> None:
    """Fill the weight store with seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).

    Values are generated in float32 so blob round-trips are exact.
    """
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in):
        bound = 1.0 / math.sqrt(max(1, fan_in))
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64))

    for l in g.layers:
        a = l.attrs
        if l.kind == "conv2d":
            fan = (a["cin"] // a["groups"]) * a["k"] * a["k"]
            g.weights[f"{l.id}.weight"] = uni((a["cout"], a["cin"] // a["groups"], a["k"], a["k"]), fan)
            if a["bias"]:
                g.weights[f"{l.id}.bias"] = uni((a["cout"],), fan)
        elif l.kind == "conv3d":
            fan = a["cin"] * a["k"] ** 3
            g.weights[f"{l.id}.weight"] = uni((a["cout"], a["cin"], a["k"], a["k"], a["k"]), fan)
            if a["bias"]:
                g.weights[f"{l.id}.bias"] = uni((a["cout"],), fan)
        elif l.kind == "deconv3d":
            fan = a["cin"] * 8  # taps contributing to one output cell
            g.weights[f"{l.id}.weight"] = uni((a["cin"], a["cout"], 4, 4, 4), fan)
            if a["bias"]:
                g.weights[f"{l.id}.bias"] = uni((a["cout"],), fan)
        elif l.kind == "affine":
            g.weights[f"{l.id}.scale"] = Tensor(np.ones(a["channels"]))
            g.weights[f"{l.id}.shift"] = Tensor(np.zeros(a["channels"]))
        elif l.kind == "attention_gate":
            c, h = a["channels"], a["hidden"]
            g.weights[f"{l.id}.fc1.weight"] = uni((h, c), c)
            g.weights[f"{l.id}.fc1.bias"] = uni((h,), c)
            g.weights[f"{l.id}.fc2.weight"] = uni((c, h), h)
            g.weights[f"{l.id}.fc2.bias"] = uni((c,), h)
