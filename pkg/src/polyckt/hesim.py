"""Fixed-precision mock evaluator standing in for encrypted inference.

Runs an analyzed network with values rounded to a fixed number of
fractional bits after every level-consuming op, which is where rescaling
injects error in a real leveled scheme.  Adds, rescales, and bootstraps
stay exact.  Chain indices are tracked live during the walk and checked
against the static analysis; any disagreement is a hard internal error
rather than a recoverable condition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import hecost as hc
from . import netgraph as ng
from . import numcore as nc


class SimulationError(RuntimeError):
    """Overflow past the integer budget, or analyzer/simulator divergence."""


def quantize(x, frac_bits: int, int_bits: int = 18):
    """Round to the nearest multiple of 2^-frac_bits, ties to even.

    Values must stay below 2^int_bits in magnitude, mirroring the integer
    precision limit of a fixed-point encoding.
    """
    if frac_bits < 1:
        raise SimulationError(f"frac_bits must be >= 1, got {frac_bits}")
    arr = x.data if isinstance(x, nc.Tensor) else np.asarray(x, dtype=np.float64)
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    if not np.isfinite(peak) or peak >= 2.0 ** int_bits:
        raise SimulationError(
            f"magnitude {peak:.6g} exceeds the {int_bits}-bit integer budget"
        )
    step = 2.0 ** frac_bits
    q = np.round(arr * step) / step
    if isinstance(x, nc.Tensor):
        return nc.Tensor(q)
    if np.ndim(x) == 0:
        return float(q)
    return q


@dataclass
class SimRow:
    node_id: str
    kind: str
    cidx_in: int
    cidx_out: int
    quant_err_max: float
    bootstrap: bool


@dataclass
class SimTrace:
    """Per-node simulation record plus run totals."""

    rows: list
    bootstraps: int
    simulated_latency: float
    mse: float

    def to_csv(self) -> str:
        lines = ["node_id,kind,cidx_in,cidx_out,quant_err_max,bootstrap"]
        for r in self.rows:
            lines.append(
                f"{r.node_id},{r.kind},{r.cidx_in},{r.cidx_out},"
                f"{r.quant_err_max!r},{int(r.bootstrap)}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "mse": self.mse,
            "bootstraps": self.bootstraps,
            "simulated_latency": self.simulated_latency,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _step_cidx(node, ins_cidx, profile):
    """One dynamic chain-index transition; returns (before, after)."""
    kind = node.kind
    if kind == "Input":
        return 0, 0
    if kind == "Bootstrap":
        return ins_cidx[0], profile.bootstrap_out
    if kind == "Rescale":
        before = ins_cidx[0]
        return before, max(before, int(node.attrs.get("target", 0)))
    if kind == "Add":
        if ins_cidx[0] != ins_cidx[1]:
            raise SimulationError(
                f"node {node.id!r}: add operands at chain indices "
                f"{ins_cidx[0]} and {ins_cidx[1]} were never aligned"
            )
        return ins_cidx[0], ins_cidx[0]
    before = ins_cidx[0]
    after = before + hc.node_consume(node, profile)
    if after > profile.usable_mults:
        raise SimulationError(
            f"node {node.id!r}: chain index {after} exceeds the usable budget "
            f"{profile.usable_mults} with no bootstrap in place"
        )
    return before, after


def simulate(graph, weights, x, profile=None, frac_bits=None,
             noise_std: float = 0.0, seed: int = 0):
    """Quantized forward pass with live chain-index tracking.

    Returns (output array, SimTrace).  frac_bits defaults to the profile's
    fractional precision.  noise_std > 0 adds seeded Gaussian noise at each
    quantization point for sensitivity studies; the default model is
    quantization only.
    """
    profile = profile or hc.HeProfile()
    if frac_bits is None:
        frac_bits = profile.frac_bits
    analysis = hc.analyze(graph, profile)
    g = analysis.graph
    rng = np.random.default_rng(seed) if noise_std > 0 else None

    vals: dict[str, nc.Tensor] = {}
    rows: list[SimRow] = []
    cidx: dict[str, int] = {}
    out = None
    for nid in g.topo_order():
        node = g.nodes[nid]
        sources = [s for s, _ in g.in_edges(nid)]
        before, after = _step_cidx(node, [cidx[s] for s in sources], profile)
        if after != analysis.cidx[nid]:
            raise SimulationError(
                f"node {nid!r}: simulated chain index {after} disagrees with "
                f"the static analysis value {analysis.cidx[nid]}"
            )
        cidx[nid] = after

        v = ng.apply_node(node, [vals[s] for s in sources], weights, x)
        err = 0.0
        if hc.node_consume(node, profile) > 0:
            q = quantize(v.data, frac_bits, profile.int_bits)
            if rng is not None:
                q = q + rng.normal(0.0, noise_std, size=q.shape)
            err = float(np.max(np.abs(q - v.data)))
            v = nc.Tensor(q)
        vals[nid] = v
        rows.append(SimRow(nid, node.kind, before, after, err,
                           node.kind == "Bootstrap"))
        if node.kind == "Output":
            out = v.data

    exact = ng.evaluate(graph, weights, x).data
    mse = float(np.mean((out - exact) ** 2))
    trace = SimTrace(
        rows=rows,
        bootstraps=hc.count_bootstraps(analysis),
        simulated_latency=hc.latency_breakdown(analysis)["total"],
        mse=mse,
    )
    return out, trace
