"""Network IR: a small DAG of layer nodes with residual skip edges.

Skip connections are stored abstractly as (source layer, target layer, scale)
triples over the backbone layer sequence; ``lower`` materializes them into
Scale and Add nodes for analysis and evaluation. Kinds that cannot be
evaluated under HE semantics (MaxPool, LayerNorm) are rejected at validation
time with a substitution hint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .polyapprox import Polynomial

__all__ = [
    "GraphError",
    "Node",
    "SkipEdge",
    "NetworkGraph",
    "ActivationSpec",
    "build_toy_resnet",
    "build_toy_convnext",
    "lower",
    "prune",
    "init_weights",
    "evaluate",
    "evaluate_collect",
    "save_graph",
    "load_graph",
    "graph_to_json",
    "graph_from_json",
    "save_weights",
    "load_weights",
]

LAYER_KINDS = ("Conv", "BatchNorm", "MeanPool", "FullyConnected", "Activation")
VALID_KINDS = LAYER_KINDS + ("Input", "Add", "Scale", "Bootstrap", "Rescale", "Output")
REJECTED_KINDS = {
    "MaxPool": "MaxPool has no polynomial form; substitute MeanPool",
    "LayerNorm": "LayerNorm normalizes per sample at inference; substitute BatchNorm",
}
_ARITY = {"Input": 0, "Add": 2}

_WEIGHTS_MAGIC = b"PCKT"
_WEIGHTS_VERSION = 1
GRAPH_FORMAT_VERSION = 1


class GraphError(ValueError):
    """Graph failed validation; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class Node:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    shape: tuple | None = None


@dataclass
class SkipEdge:
    """Connects backbone layer i's output into layer j's output, scaled by a."""

    i: int
    j: int
    a: float = 1.0


@dataclass
class ActivationSpec:
    """What an Activation node computes: relu, gelu, or a fitted polynomial."""

    kind: str
    poly: Polynomial | None = None

    def __post_init__(self):
        if self.kind not in ("relu", "gelu", "poly"):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "poly" and self.poly is None:
            raise ValueError("poly activation requires a Polynomial")

    def to_attrs(self) -> dict:
        attrs = {"act": self.kind}
        if self.poly is not None:
            attrs["poly"] = self.poly.to_record()
        return attrs

    @classmethod
    def from_attrs(cls, attrs: dict) -> "ActivationSpec":
        poly = attrs.get("poly")
        return cls(attrs["act"], Polynomial.from_record(poly) if poly else None)


class NetworkGraph:
    """Nodes, directed edges with input ports, and abstract skip edges."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.edges: list[tuple[str, str, int]] = []
        self.skips: list[SkipEdge] = []

    # ------------------------------------------------------------ building

    def add_node(self, node_id: str, kind: str, attrs: dict | None = None,
                 shape: tuple | None = None) -> Node:
        if node_id in self.nodes:
            raise GraphError([f"duplicate node id {node_id!r}"])
        node = Node(node_id, kind, dict(attrs or {}), shape)
        self.nodes[node_id] = node
        return node

    def add_edge(self, src: str, dst: str, port: int = 0):
        self.edges.append((src, dst, port))

    def add_skip(self, i: int, j: int, a: float = 1.0):
        self.skips.append(SkipEdge(int(i), int(j), float(a)))

    def copy(self) -> "NetworkGraph":
        g = NetworkGraph()
        for n in self.nodes.values():
            g.add_node(n.id, n.kind, dict(n.attrs), n.shape)
        g.edges = list(self.edges)
        g.skips = [SkipEdge(s.i, s.j, s.a) for s in self.skips]
        return g

    # ------------------------------------------------------------ structure

    def in_edges(self, node_id: str) -> list[tuple[str, int]]:
        """(source, port) pairs feeding node_id, sorted by port."""
        return sorted(
            [(s, p) for s, d, p in self.edges if d == node_id], key=lambda e: e[1]
        )

    def out_edges(self, node_id: str) -> list[tuple[str, int]]:
        return [(d, p) for s, d, p in self.edges if s == node_id]

    def topo_order(self) -> list[str]:
        """Deterministic topological order; ties broken by node id."""
        indeg = {nid: 0 for nid in self.nodes}
        for _, dst, _ in self.edges:
            if dst in indeg:
                indeg[dst] += 1
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            newly = []
            for dst, _ in self.out_edges(nid):
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    newly.append(dst)
            if newly:
                ready = sorted(ready + newly)
        if len(order) != len(self.nodes):
            raise GraphError(["graph contains a cycle"])
        return order

    def backbone(self) -> list[str]:
        """Layer nodes (conv/bn/pool/fc/activation) in topological order."""
        return [nid for nid in self.topo_order() if self.nodes[nid].kind in LAYER_KINDS]

    # ------------------------------------------------------------ validation

    def validate(self) -> None:
        violations = []
        for node in self.nodes.values():
            if node.kind in REJECTED_KINDS:
                violations.append(f"node {node.id!r}: {REJECTED_KINDS[node.kind]}")
            elif node.kind not in VALID_KINDS:
                violations.append(f"node {node.id!r}: unknown kind {node.kind!r}")
        known = set(self.nodes)
        for src, dst, port in self.edges:
            if src not in known or dst not in known:
                violations.append(f"edge {src}->{dst} references a missing node")
        if violations:
            raise GraphError(violations)

        for node in self.nodes.values():
            want = _ARITY.get(node.kind, 1)
            got = self.in_edges(node.id)
            ports = [p for _, p in got]
            if ports != list(range(want)):
                violations.append(
                    f"node {node.id!r} ({node.kind}) needs input ports "
                    f"{list(range(want))}, has {ports}"
                )
        n_inputs = sum(1 for n in self.nodes.values() if n.kind == "Input")
        n_outputs = sum(1 for n in self.nodes.values() if n.kind == "Output")
        if n_inputs != 1:
            violations.append(f"graph must have exactly one Input node, has {n_inputs}")
        if n_outputs != 1:
            violations.append(f"graph must have exactly one Output node, has {n_outputs}")
        if violations:
            raise GraphError(violations)

        try:
            self.topo_order()
        except GraphError as e:
            raise GraphError(e.violations)

        self._infer_shapes(violations)
        nb = len(self.backbone())
        for s in self.skips:
            if not (0 <= s.i < s.j < nb):
                violations.append(f"skip ({s.i}, {s.j}) outside backbone of {nb} layers")
            if not (0.0 <= s.a <= 1.0):
                violations.append(f"skip ({s.i}, {s.j}) scale {s.a} outside [0, 1]")
        if violations:
            raise GraphError(violations)

    def _infer_shapes(self, violations: list):
        shapes: dict[str, tuple] = {}
        for nid in self.topo_order():
            node = self.nodes[nid]
            ins = [shapes.get(s) for s, _ in self.in_edges(nid)]
            if any(s is None for s in ins):
                continue
            shape = None
            k = node.kind
            if k == "Input":
                shape = tuple(node.attrs["shape"])
            elif k == "Conv":
                c, h, w = ins[0]
                kk = int(node.attrs.get("kernel", 3))
                st = int(node.attrs.get("stride", 1))
                pd = int(node.attrs.get("padding", kk // 2))
                oh = (h + 2 * pd - kk) // st + 1
                ow = (w + 2 * pd - kk) // st + 1
                if oh <= 0 or ow <= 0:
                    violations.append(f"node {nid!r}: empty conv output")
                    continue
                shape = (int(node.attrs["out_channels"]), oh, ow)
            elif k == "MeanPool":
                c, h, w = ins[0]
                kk = int(node.attrs["kernel"])
                if h % kk or w % kk:
                    violations.append(f"node {nid!r}: pool kernel {kk} does not divide {h}x{w}")
                    continue
                shape = (c, h // kk, w // kk)
            elif k == "FullyConnected":
                shape = (int(node.attrs["out_features"]),)
            elif k == "Add":
                if ins[0] != ins[1]:
                    violations.append(
                        f"node {nid!r}: Add operands have shapes {ins[0]} and {ins[1]}"
                    )
                    continue
                shape = ins[0]
            elif k == "Activation":
                try:
                    ActivationSpec.from_attrs(node.attrs)
                except (KeyError, ValueError) as e:
                    violations.append(f"node {nid!r}: bad activation spec ({e})")
                shape = ins[0]
            else:  # BatchNorm, Scale, Bootstrap, Rescale, Output
                shape = ins[0]
            if shape is not None:
                node.shape = tuple(shape)
                shapes[nid] = tuple(shape)


# ---------------------------------------------------------------- lowering


def lower(graph: NetworkGraph) -> NetworkGraph:
    """Materialize skip edges into Scale -> Add node pairs.

    The Add's port 0 carries the main branch and port 1 the scaled skip
    branch. Skips with a == 0 are dead and dropped instead of lowered.
    """
    g = graph.copy()
    if not g.skips:
        return g
    backbone = g.backbone()
    current = {nid: nid for nid in g.nodes}
    for k, s in enumerate(sorted(g.skips, key=lambda s: (s.j, s.i))):
        if s.a == 0.0:
            continue
        src = current[backbone[s.i]]
        tgt = current[backbone[s.j]]
        scale_id = f"skip{k}_scale"
        add_id = f"skip{k}_add"
        g.add_node(scale_id, "Scale", {"a": s.a, "role": "skip"})
        g.add_node(add_id, "Add", {"role": "skip"})
        g.edges = [
            (add_id if e_src == tgt else e_src, dst, port)
            for e_src, dst, port in g.edges
        ]
        g.add_edge(tgt, add_id, 0)
        g.add_edge(src, scale_id, 0)
        g.add_edge(scale_id, add_id, 1)
        current[backbone[s.j]] = add_id
    g.skips = []
    return g


def prune(graph: NetworkGraph) -> NetworkGraph:
    """Remove dead skip branches.

    Abstract skips with a == 0 are dropped; in lowered graphs, Scale(a=0)
    nodes and their Adds are removed and the main branch wired through.
    """
    g = graph.copy()
    g.skips = [s for s in g.skips if s.a != 0.0]
    dead_scales = [
        n.id for n in g.nodes.values()
        if n.kind == "Scale" and float(n.attrs.get("a", 1.0)) == 0.0
    ]
    for scale_id in dead_scales:
        adds = [dst for dst, port in g.out_edges(scale_id) if port == 1
                and g.nodes[dst].kind == "Add"]
        g.edges = [e for e in g.edges if e[0] != scale_id and e[1] != scale_id]
        del g.nodes[scale_id]
        for add_id in adds:
            main = [s for s, p in g.in_edges(add_id) if p == 0]
            g.edges = [e for e in g.edges if e[1] != add_id]
            g.edges = [
                (main[0] if src == add_id else src, dst, port)
                for src, dst, port in g.edges
            ]
            del g.nodes[add_id]
    return g


# ---------------------------------------------------------------- builders


def _add_chain(g, prev, specs):
    for nid, kind, attrs in specs:
        g.add_node(nid, kind, attrs)
        g.add_edge(prev, nid, 0)
        prev = nid
    return prev


def build_toy_resnet(
    blocks: int = 3,
    channels: int = 16,
    activations_per_block: int = 3,
    input_shape: tuple = (3, 32, 32),
    num_classes: int = 4,
) -> NetworkGraph:
    """Residual toy network: stem, bottleneck-style blocks, pooled linear head.

    Each block holds ``activations_per_block`` ReLU activations and as many
    convolutions; the unit-scale skip lands on the block's last BatchNorm,
    before its final activation.
    """
    if blocks < 1 or activations_per_block < 1:
        raise ValueError("blocks and activations_per_block must be positive")
    g = NetworkGraph()
    g.add_node("in", "Input", {"shape": list(input_shape)})
    conv_attrs = {"out_channels": channels, "kernel": 3, "stride": 1, "padding": 1}
    prev = _add_chain(g, "in", [
        ("stem_conv", "Conv", dict(conv_attrs)),
        ("stem_bn", "BatchNorm", {}),
    ])
    relu = ActivationSpec("relu").to_attrs()
    layer_idx = 2  # stem conv and bn occupy backbone slots 0 and 1
    for b in range(blocks):
        src_idx = layer_idx - 1
        specs = []
        for u in range(activations_per_block - 1):
            specs += [
                (f"b{b}_conv{u}", "Conv", dict(conv_attrs)),
                (f"b{b}_bn{u}", "BatchNorm", {}),
                (f"b{b}_act{u}", "Activation", dict(relu)),
            ]
        last = activations_per_block - 1
        specs += [
            (f"b{b}_conv{last}", "Conv", dict(conv_attrs)),
            (f"b{b}_bn{last}", "BatchNorm", {}),
        ]
        prev = _add_chain(g, prev, specs)
        layer_idx += len(specs)
        g.add_skip(src_idx, layer_idx - 1, 1.0)
        prev = _add_chain(g, prev, [(f"b{b}_act{last}", "Activation", dict(relu))])
        layer_idx += 1
    h = input_shape[1]
    prev = _add_chain(g, prev, [
        ("head_pool", "MeanPool", {"kernel": h}),
        ("head_fc", "FullyConnected", {"out_features": num_classes}),
    ])
    g.add_node("out", "Output")
    g.add_edge(prev, "out", 0)
    g.validate()
    return g


def build_toy_convnext(
    blocks: int = 3,
    channels: int = 16,
    expand: int = 2,
    input_shape: tuple = (3, 32, 32),
    num_classes: int = 4,
) -> NetworkGraph:
    """Single-activation toy blocks: spatial conv, BN, expand, GELU, project.

    One GELU per block (a third of the toy residual network's count at equal
    block count); the skip lands on the block's projection conv.
    """
    if blocks < 1:
        raise ValueError("blocks must be positive")
    g = NetworkGraph()
    g.add_node("in", "Input", {"shape": list(input_shape)})
    prev = _add_chain(g, "in", [
        ("stem_conv", "Conv", {"out_channels": channels, "kernel": 3, "stride": 1,
                               "padding": 1}),
        ("stem_bn", "BatchNorm", {}),
    ])
    gelu = ActivationSpec("gelu").to_attrs()
    layer_idx = 2
    for b in range(blocks):
        src_idx = layer_idx - 1
        specs = [
            (f"b{b}_spatial", "Conv", {"out_channels": channels, "kernel": 3,
                                       "stride": 1, "padding": 1}),
            (f"b{b}_bn", "BatchNorm", {}),
            (f"b{b}_expand", "Conv", {"out_channels": channels * expand, "kernel": 1,
                                      "stride": 1, "padding": 0}),
            (f"b{b}_act", "Activation", dict(gelu)),
            (f"b{b}_project", "Conv", {"out_channels": channels, "kernel": 1,
                                       "stride": 1, "padding": 0}),
        ]
        prev = _add_chain(g, prev, specs)
        layer_idx += len(specs)
        g.add_skip(src_idx, layer_idx - 1, 1.0)
    h = input_shape[1]
    prev = _add_chain(g, prev, [
        ("head_pool", "MeanPool", {"kernel": h}),
        ("head_fc", "FullyConnected", {"out_features": num_classes}),
    ])
    g.add_node("out", "Output")
    g.add_edge(prev, "out", 0)
    g.validate()
    return g


# ---------------------------------------------------------------- weights


def init_weights(graph: NetworkGraph, seed: int = 0) -> dict[str, np.ndarray]:
    """Kaiming-uniform conv/linear weights, identity BatchNorm, zero biases."""
    rng = np.random.default_rng(seed)
    graph.validate()
    weights: dict[str, np.ndarray] = {}
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        if node.kind == "Conv":
            src = graph.in_edges(nid)[0][0]
            cin = graph.nodes[src].shape[0]
            cout = int(node.attrs["out_channels"])
            k = int(node.attrs.get("kernel", 3))
            fan_in = cin * k * k
            lim = np.sqrt(6.0 / fan_in)
            weights[f"{nid}.kernel"] = rng.uniform(-lim, lim, (cout, cin, k, k))
            weights[f"{nid}.bias"] = np.zeros(cout)
        elif node.kind == "BatchNorm":
            c = node.shape[0]
            weights[f"{nid}.gamma"] = np.ones(c)
            weights[f"{nid}.beta"] = np.zeros(c)
            weights[f"{nid}.running_mean"] = np.zeros(c)
            weights[f"{nid}.running_var"] = np.ones(c)
        elif node.kind == "FullyConnected":
            src = graph.in_edges(nid)[0][0]
            fan_in = int(np.prod(graph.nodes[src].shape))
            out = int(node.attrs["out_features"])
            lim = np.sqrt(6.0 / fan_in)
            weights[f"{nid}.weight"] = rng.uniform(-lim, lim, (fan_in, out))
            weights[f"{nid}.bias"] = np.zeros(out)
    return weights


def _wt(weights, name):
    w = weights[name]
    return w if isinstance(w, nc.Tensor) else nc.Tensor(w)


def _buf(weights, name):
    w = weights[name]
    return w.data if isinstance(w, nc.Tensor) else w


def apply_node(node, ins, weights, x, training: bool = False) -> nc.Tensor:
    """Evaluate a single lowered-graph node given its input tensors."""
    k = node.kind
    nid = node.id
    if k == "Input":
        return x if isinstance(x, nc.Tensor) else nc.Tensor(x)
    if k == "Conv":
        v = nc.conv2d(
            ins[0], _wt(weights, f"{nid}.kernel"),
            stride=int(node.attrs.get("stride", 1)),
            padding=int(node.attrs.get("padding", int(node.attrs.get("kernel", 3)) // 2)),
        )
        return nc.add_bias(v, _wt(weights, f"{nid}.bias"), axis=1)
    if k == "BatchNorm":
        return nc.batch_norm(
            ins[0], _wt(weights, f"{nid}.gamma"), _wt(weights, f"{nid}.beta"),
            _buf(weights, f"{nid}.running_mean"), _buf(weights, f"{nid}.running_var"),
            training=training,
        )
    if k == "MeanPool":
        return nc.mean_pool2d(ins[0], int(node.attrs["kernel"]))
    if k == "FullyConnected":
        b = ins[0].data.shape[0]
        flat = nc.reshape(ins[0], (b, ins[0].size // b))
        return nc.add_bias(nc.matmul(flat, _wt(weights, f"{nid}.weight")),
                           _wt(weights, f"{nid}.bias"), axis=1)
    if k == "Activation":
        spec = ActivationSpec.from_attrs(node.attrs)
        if spec.kind == "relu":
            return nc.relu(ins[0])
        if spec.kind == "gelu":
            return nc.gelu(ins[0])
        return nc.elementwise_poly(ins[0], spec.poly.coeffs)
    if k == "Add":
        return nc.add(ins[0], ins[1])
    if k == "Scale":
        return nc.scale(ins[0], float(node.attrs.get("a", 1.0)))
    if k in ("Bootstrap", "Rescale", "Output"):
        return ins[0]
    raise GraphError([f"cannot evaluate node kind {k!r}"])


def _forward(graph, weights, x, training, collect):
    order = graph.topo_order()
    vals: dict[str, nc.Tensor] = {}
    act_inputs: list[tuple[str, nc.Tensor]] = []
    out_val = None
    for nid in order:
        node = graph.nodes[nid]
        ins = [vals[s] for s, _ in graph.in_edges(nid)]
        if collect and node.kind == "Activation":
            act_inputs.append((nid, ins[0]))
        v = apply_node(node, ins, weights, x, training)
        vals[nid] = v
        if node.kind == "Output":
            out_val = v
    if out_val is None:
        raise GraphError(["graph has no Output node"])
    return out_val, act_inputs


def evaluate(graph: NetworkGraph, weights, x, training: bool = False) -> nc.Tensor:
    """Run the network on a batch; lowers skips on the fly."""
    g = lower(graph) if graph.skips else graph
    out, _ = _forward(g, weights, x, training, collect=False)
    return out


def evaluate_collect(graph: NetworkGraph, weights, x, training: bool = False):
    """Like evaluate, but also returns (activation id, input tensor) pairs."""
    g = lower(graph) if graph.skips else graph
    return _forward(g, weights, x, training, collect=True)


# ---------------------------------------------------------------- graph JSON


def graph_to_json(graph: NetworkGraph) -> str:
    doc = {
        "version": GRAPH_FORMAT_VERSION,
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "attrs": n.attrs,
                "shape": list(n.shape) if n.shape is not None else None,
            }
            for n in graph.nodes.values()
        ],
        "edges": [{"from": s, "to": d, "port": p} for s, d, p in graph.edges],
        "skips": [{"i": s.i, "j": s.j, "a": s.a} for s in graph.skips],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def graph_from_json(text: str) -> NetworkGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphError([f"not valid JSON: {e}"])
    if doc.get("version") != GRAPH_FORMAT_VERSION:
        raise GraphError([f"unsupported graph format version {doc.get('version')!r}"])
    g = NetworkGraph()
    for n in doc["nodes"]:
        g.add_node(n["id"], n["kind"], n.get("attrs") or {},
                   tuple(n["shape"]) if n.get("shape") else None)
    for e in doc["edges"]:
        g.add_edge(e["from"], e["to"], int(e.get("port", 0)))
    for s in doc.get("skips", []):
        g.add_skip(int(s["i"]), int(s["j"]), float(s["a"]))
    return g


def save_graph(graph: NetworkGraph, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph_to_json(graph))


def load_graph(path) -> NetworkGraph:
    with open(path, encoding="utf-8") as fh:
        return graph_from_json(fh.read())


# ---------------------------------------------------------------- weights I/O


def save_weights(weights: dict[str, np.ndarray], path):
    """Binary weight container: sorted entries of named float64 arrays."""
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", _WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(weights)))
        for name in sorted(weights):
            arr = weights[name]
            # asarray keeps 0-d arrays 0-d; ascontiguousarray would not
            arr = np.asarray(
                arr.data if isinstance(arr, nc.Tensor) else arr,
                dtype="<f8", order="C",
            )
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weight container (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weight container version {version}")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in weight container")
    return out
