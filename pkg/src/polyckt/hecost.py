"""Static cost analysis under mock leveled-HE semantics.

Each ciphertext carries a chain index: the number of multiplicative levels
consumed since it was last bootstrapped. Ops consume levels (convolutions one,
a degree-d polynomial ceil(log2(d+1)), folded batch norms none); when an op
would push past the usable budget, a Bootstrap is inserted on its input edge.
Adding two ciphertexts requires equal chain indices, so adds may force Rescale
or Bootstrap insertions. Skip-connection adds are asymmetric: the main branch
is the expensive accumulated path and the skip branch the cheap one, and the
active mismatch policy decides which side pays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netgraph import ActivationSpec, NetworkGraph, lower

__all__ = [
    "AnalysisError",
    "HeProfile",
    "Analysis",
    "depth_of_poly",
    "node_consume",
    "ciphertext_count",
    "analyze",
    "count_bootstraps",
    "mult_depth",
    "node_cost",
    "latency_breakdown",
    "skip_costs",
    "cost_matrix",
]

SKIP_POLICIES = ("bootstrap", "rescale")

_DEFAULT_COSTS = {
    "bootstrap": 25.0,
    "ct_ct_mult": 1.0,
    "ct_pt_mult": 0.5,
    "rescale": 0.25,
    "add": 0.05,
    "rotate": 0.3,
}


class AnalysisError(ValueError):
    pass


@dataclass
class HeProfile:
    """Mock scheme parameters and unit costs for the latency model."""

    max_depth: int = 12
    usable_mults: int = 9
    slots: int = 16384
    frac_bits: int = 42
    int_bits: int = 18
    bootstrap_out: int = 0
    reserve: int = 1
    skip_mismatch_policy: str = "bootstrap"
    fold_batchnorm: bool = True
    shape_adapt_cost: float = 2.0
    costs: dict = field(default_factory=lambda: dict(_DEFAULT_COSTS))

    def __post_init__(self):
        if self.usable_mults < 1:
            raise AnalysisError("usable_mults must be at least 1")
        if not 0 <= self.bootstrap_out < self.usable_mults:
            raise AnalysisError("bootstrap_out must lie below usable_mults")
        if self.reserve < 0:
            raise AnalysisError("reserve must be non-negative")
        if self.skip_mismatch_policy not in SKIP_POLICIES:
            raise AnalysisError(
                f"skip_mismatch_policy must be one of {SKIP_POLICIES}, "
                f"got {self.skip_mismatch_policy!r}"
            )
        for key in _DEFAULT_COSTS:
            if key not in self.costs:
                raise AnalysisError(f"costs table missing entry {key!r}")


def depth_of_poly(degree: int) -> int:
    """Multiplicative levels consumed by a degree-d polynomial evaluation."""
    if degree < 0:
        raise AnalysisError(f"polynomial degree must be non-negative, got {degree}")
    if degree == 0:
        return 0
    return int(math.ceil(math.log2(degree + 1)))


def _activation_degree(node) -> int:
    spec = ActivationSpec.from_attrs(node.attrs)
    if spec.kind != "poly":
        raise AnalysisError(
            f"node {node.id!r}: activation {spec.kind!r} has no HE form; "
            "fit a polynomial replacement first"
        )
    return spec.poly.degree


def node_consume(node, profile: HeProfile) -> int:
    """Chain-index levels the op consumes from its input ciphertext."""
    k = node.kind
    if k in ("Conv", "FullyConnected"):
        return 1
    if k == "BatchNorm":
        return 0 if profile.fold_batchnorm else 1
    if k == "Activation":
        return depth_of_poly(_activation_degree(node))
    if k == "Scale":
        a = float(node.attrs.get("a", 1.0))
        return 0 if a in (0.0, 1.0) else 1
    return 0


def ciphertext_count(shape, profile: HeProfile) -> int:
    """Ciphertexts needed to pack one sample of the given shape."""
    if shape is None:
        raise AnalysisError("node has no inferred shape; validate the graph first")
    n = int(np.prod(shape))
    return max(1, math.ceil(n / profile.slots))


@dataclass
class Analysis:
    """Analyzed graph with every required Bootstrap and Rescale materialized."""

    graph: NetworkGraph
    profile: HeProfile
    cidx: dict[str, int]
    inserted: list[str]

    @property
    def bootstrap_nodes(self) -> list[str]:
        return [n.id for n in self.graph.nodes.values() if n.kind == "Bootstrap"]


def _next_free_index(graph, prefix: str) -> int:
    k = 0
    for nid in graph.nodes:
        if nid.startswith(prefix):
            try:
                k = max(k, int(nid[len(prefix):]) + 1)
            except ValueError:
                pass
    return k


class _Inserter:
    """Names and wires in Bootstrap/Rescale nodes during propagation."""

    def __init__(self, graph, cidx):
        self.graph = graph
        self.cidx = cidx
        # start numbering past any ids a previous analysis pass created
        self.n_bs = _next_free_index(graph, "bs")
        self.n_rs = _next_free_index(graph, "rs")
        self.inserted: list[str] = []

    def _splice(self, node_id, kind, attrs, src, dst, port):
        g = self.graph
        g.edges.remove((src, dst, port))
        g.add_node(node_id, kind, attrs, g.nodes[src].shape)
        g.add_edge(src, node_id, 0)
        g.add_edge(node_id, dst, port)
        self.inserted.append(node_id)

    def bootstrap(self, src, dst, port, out_cidx, group=None):
        nid = f"bs{self.n_bs}"
        self.n_bs += 1
        attrs = {}
        if group:
            attrs["skip_group"] = group
            attrs["role"] = "skip"
        self._splice(nid, "Bootstrap", attrs, src, dst, port)
        self.cidx[nid] = out_cidx
        return nid

    def rescale(self, src, dst, port, target, group=None):
        nid = f"rs{self.n_rs}"
        self.n_rs += 1
        attrs = {"target": int(target)}
        if group:
            attrs["skip_group"] = group
            attrs["role"] = "skip"
        self._splice(nid, "Rescale", attrs, src, dst, port)
        self.cidx[nid] = int(target)
        return nid


def _skip_group_of(node) -> str | None:
    if node.attrs.get("role") != "skip":
        return None
    if "skip_group" in node.attrs:
        return str(node.attrs["skip_group"])
    # lowered skip nodes are named skip{k}_scale / skip{k}_add
    return node.id.rsplit("_", 1)[0]


def analyze(graph: NetworkGraph, profile: HeProfile | None = None) -> Analysis:
    """Propagate chain indices, inserting Bootstrap/Rescale where forced.

    Re-running on an already analyzed graph is a no-op: existing Bootstrap
    and Rescale nodes satisfy the constraints, so nothing new is inserted.
    """
    profile = profile or HeProfile()
    budget = profile.usable_mults
    g = lower(graph)
    g.validate()
    cidx: dict[str, int] = {}
    ins = _Inserter(g, cidx)

    for nid in g.topo_order():
        node = g.nodes[nid]
        kind = node.kind
        if kind == "Input":
            cidx[nid] = 0
            continue
        if kind == "Bootstrap":
            cidx[nid] = profile.bootstrap_out
            continue
        if kind == "Rescale":
            src = g.in_edges(nid)[0][0]
            cidx[nid] = max(cidx[src], int(node.attrs.get("target", 0)))
            continue
        if kind == "Add":
            cidx[nid] = _handle_add(g, node, profile, cidx, ins)
            continue

        src, port = g.in_edges(nid)[0]
        consume = node_consume(node, profile)
        c_in = cidx[src]
        if c_in + consume > budget:
            if profile.bootstrap_out + consume > budget:
                raise AnalysisError(
                    f"node {nid!r} consumes {consume} levels but only "
                    f"{budget - profile.bootstrap_out} remain after a bootstrap"
                )
            group = _skip_group_of(node)
            bs = ins.bootstrap(src, nid, port, profile.bootstrap_out, group=group)
            c_in = cidx[bs]
        cidx[nid] = c_in + consume

    return Analysis(graph=g, profile=profile, cidx=cidx, inserted=ins.inserted)


def _handle_add(g, node, profile, cidx, ins) -> int:
    (s0, _), (s1, _) = g.in_edges(node.id)
    c0, c1 = cidx[s0], cidx[s1]
    if node.attrs.get("role") == "skip":
        return _handle_skip_add(g, node, profile, cidx, ins, s0, s1, c0, c1)

    # plain add: rescale the shallower side up; if the deeper side has eaten
    # into the reserve, bootstrap it first
    if c0 == c1:
        return c0
    if profile.usable_mults - max(c0, c1) < profile.reserve:
        hi_src, hi_port = (s0, 0) if c0 > c1 else (s1, 1)
        bs = ins.bootstrap(hi_src, node.id, hi_port, profile.bootstrap_out)
        if hi_port == 0:
            s0, c0 = bs, cidx[bs]
        else:
            s1, c1 = bs, cidx[bs]
    if c0 != c1:
        target = max(c0, c1)
        lo_src, lo_port = (s0, 0) if c0 < c1 else (s1, 1)
        ins.rescale(lo_src, node.id, lo_port, target)
    return max(c0, c1)


def _handle_skip_add(g, node, profile, cidx, ins, s_main, s_skip, c_main, c_skip) -> int:
    group = _skip_group_of(node)
    if c_main == c_skip:
        return c_main
    if profile.skip_mismatch_policy == "bootstrap":
        # reset the skip branch, then raise whichever side is shallower;
        # with bootstrap_out == 0 the main branch is never touched
        bs = ins.bootstrap(s_skip, node.id, 1, profile.bootstrap_out, group=group)
        c_skip = cidx[bs]
        s_skip = bs
        if c_skip < c_main:
            ins.rescale(s_skip, node.id, 1, c_main, group=group)
        elif c_main < c_skip:
            ins.rescale(s_main, node.id, 0, c_skip, group=group)
        return max(c_main, c_skip)
    # bootstrap-avoiding policy: align by rescale only, deeper side wins
    target = max(c_main, c_skip)
    if c_main < c_skip:
        ins.rescale(s_main, node.id, 0, target, group=group)
    else:
        ins.rescale(s_skip, node.id, 1, target, group=group)
    return target


# ---------------------------------------------------------------- metrics


def count_bootstraps(analysis: Analysis) -> int:
    """Bootstrap invocations, weighted by ciphertexts per tensor."""
    total = 0
    for nid in analysis.bootstrap_nodes:
        node = analysis.graph.nodes[nid]
        total += ciphertext_count(node.shape, analysis.profile)
    return total


def mult_depth(analysis: Analysis) -> int:
    """Longest chain of consumed levels from input to output.

    Bootstraps reset the chain index but do not undo depth already spent;
    a Rescale burns the levels it skips over.
    """
    g = analysis.graph
    depth: dict[str, int] = {}
    for nid in g.topo_order():
        node = g.nodes[nid]
        ins = [depth[s] for s, _ in g.in_edges(nid)]
        base = max(ins) if ins else 0
        if node.kind == "Rescale":
            src = g.in_edges(nid)[0][0]
            own = analysis.cidx[nid] - analysis.cidx[src]
        elif node.kind == "Bootstrap":
            own = 0
        else:
            own = node_consume(node, analysis.profile)
        depth[nid] = base + own
    return max(depth.values()) if depth else 0


def node_cost(g: NetworkGraph, nid: str, profile: HeProfile) -> tuple[str, float]:
    """Latency estimate for one node: (category, cost in unit-op time).

    Rotation counts follow the usual packed baby-step summation patterns;
    the point is relative weight, not cycle accuracy.
    """
    node = g.nodes[nid]
    u = profile.costs
    kind = node.kind
    n_ct = ciphertext_count(node.shape, profile) if node.shape is not None else 1
    skip_role = node.attrs.get("role") == "skip"

    if kind == "Conv":
        k = int(node.attrs.get("kernel", 3))
        taps = k * k
        return "conv", n_ct * (taps * u["ct_pt_mult"] + (taps - 1) * u["rotate"])
    if kind == "Activation":
        d = _activation_degree(node)
        return "activations", n_ct * d * u["ct_ct_mult"]
    if kind == "Bootstrap":
        return "bootstraps", n_ct * u["bootstrap"]
    if kind == "Rescale":
        return ("skip_adaptation" if skip_role else "other"), n_ct * u["rescale"]
    if kind == "Add":
        cost = n_ct * u["add"]
        srcs = [s for s, _ in g.in_edges(nid)]
        if len(srcs) == 2:
            t0 = g.nodes[srcs[0]].attrs.get("tile")
            t1 = g.nodes[srcs[1]].attrs.get("tile")
            if t0 != t1:
                cost += n_ct * profile.shape_adapt_cost
        return ("skip_adaptation" if skip_role else "other"), cost
    if kind == "Scale":
        a = float(node.attrs.get("a", 1.0))
        cost = 0.0 if a in (0.0, 1.0) else n_ct * u["ct_pt_mult"]
        return ("skip_adaptation" if skip_role else "other"), cost
    if kind == "FullyConnected":
        src = g.in_edges(nid)[0][0]
        in_shape = g.nodes[src].shape
        in_ct = ciphertext_count(in_shape, profile)
        n_in = int(np.prod(in_shape))
        return "other", in_ct * u["ct_pt_mult"] + math.ceil(math.log2(n_in)) * u["rotate"]
    if kind == "MeanPool":
        k = int(node.attrs["kernel"])
        rots = math.ceil(math.log2(k * k)) if k > 1 else 0
        return "other", n_ct * (u["ct_pt_mult"] + rots * u["rotate"])
    if kind == "BatchNorm":
        cost = 0.0 if profile.fold_batchnorm else n_ct * u["ct_pt_mult"]
        return "other", cost
    return "other", 0.0


def latency_breakdown(analysis: Analysis) -> dict[str, float]:
    """Total estimated latency split into op categories."""
    out = {"activations": 0.0, "bootstraps": 0.0, "conv": 0.0,
           "skip_adaptation": 0.0, "other": 0.0}
    for nid in analysis.graph.nodes:
        cat, cost = node_cost(analysis.graph, nid, analysis.profile)
        out[cat] += cost
    out["total"] = float(sum(out.values()))
    return out


def skip_costs(analysis: Analysis) -> dict[str, float]:
    """Realized adaptation cost per skip group, bootstraps included."""
    groups: dict[str, float] = {}
    for nid, node in analysis.graph.nodes.items():
        group = _skip_group_of(node)
        if group is None:
            continue
        _, cost = node_cost(analysis.graph, nid, analysis.profile)
        groups[group] = groups.get(group, 0.0) + cost
    return groups


# ---------------------------------------------------------------- planning


def _post_add_carrier(g: NetworkGraph) -> dict[str, str]:
    """Map each node to the node carrying its value after skip adds."""
    carrier: dict[str, str] = {}
    for node in g.nodes.values():
        if node.kind != "Add" or node.attrs.get("role") != "skip":
            continue
        src = [s for s, p in g.in_edges(node.id) if p == 0][0]
        while g.nodes[src].kind in ("Bootstrap", "Rescale"):
            src = g.in_edges(src)[0][0]
        carrier[src] = node.id
    return carrier


def resolve_carrier(g: NetworkGraph, nid: str) -> str:
    carrier = _post_add_carrier(g)
    while nid in carrier:
        nid = carrier[nid]
    return nid


def cost_matrix(graph: NetworkGraph, profile: HeProfile | None = None):
    """Adaptation cost of wiring backbone layer i's output into layer j's.

    Entry (i, j) estimates the extra ops the add would force under the
    active mismatch policy, given the chain indices the current graph
    produces. Entries on or below the diagonal, and pairs whose shapes
    cannot be added, are infinite. Returns (matrix, backbone ids).
    """
    profile = profile or HeProfile()
    analysis = analyze(graph, profile)
    g = analysis.graph
    u = profile.costs
    backbone = g.backbone()
    L = len(backbone)
    carrier = _post_add_carrier(g)

    def post(nid):
        while nid in carrier:
            nid = carrier[nid]
        return nid

    M = np.full((L, L), np.inf)
    for i in range(L):
        pi = post(backbone[i])
        for j in range(i + 1, L):
            pj = post(backbone[j])
            si, sj = g.nodes[pi].shape, g.nodes[pj].shape
            if si != sj:
                continue
            n_ct = ciphertext_count(sj, profile)
            cost = n_ct * u["add"]
            ti = g.nodes[backbone[i]].attrs.get("tile")
            tj = g.nodes[backbone[j]].attrs.get("tile")
            if ti != tj:
                cost += n_ct * profile.shape_adapt_cost
            ci, cj = analysis.cidx[pi], analysis.cidx[pj]
            if ci != cj:
                if profile.skip_mismatch_policy == "bootstrap":
                    cost += n_ct * u["bootstrap"]
                    if cj != profile.bootstrap_out:
                        cost += n_ct * u["rescale"]
                else:
                    cost += n_ct * u["rescale"]
            M[i, j] = cost
    return M, backbone
