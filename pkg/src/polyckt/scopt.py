"""Skip-connection planning against the chain-index cost model.

Placement is greedy over the adaptation-cost matrix: starting from the first
backbone layer, wire the cheapest legal target no shallower than the source,
then continue from the layer after that target so skip intervals never
overlap. The matrix is recomputed after every placement because each add
changes the chain indices later candidates see. Removal follows a linear scale schedule: the skip gain a
steps from 1 toward 0, and pruning drops dead branches once a reaches 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hecost as hc
from .netgraph import NetworkGraph

__all__ = [
    "PlacementPlan",
    "place_skips",
    "strip_skips",
    "removal_schedule",
    "apply_skip_scale",
    "realized_cost",
]


@dataclass
class PlacementPlan:
    skips: list[tuple[int, int, float]]
    costs: list[float]
    total_cost: float
    backbone: list[str]
    graph: NetworkGraph = field(repr=False, default=None)

    def rows(self):
        """(source layer, target layer, scale, planned cost) per skip."""
        return [(i, j, a, c) for (i, j, a), c in zip(self.skips, self.costs)]


def strip_skips(graph: NetworkGraph) -> NetworkGraph:
    g = graph.copy()
    g.skips = []
    return g


def place_skips(
    graph: NetworkGraph,
    profile: hc.HeProfile | None = None,
    budget: float | None = None,
    min_skips: int = 0,
) -> PlacementPlan:
    """Greedily add non-overlapping skips at minimum adaptation cost.

    ``budget`` caps the summed planned cost, but at least ``min_skips``
    placements are made before the cap applies. A target must sit at least
    as deep as its source: joining a shallower layer would either waste a
    bootstrap on the deeper source or raise the main branch, so such rows
    are stepped over instead.
    """
    profile = profile or hc.HeProfile()
    g = graph.copy()
    placed: list[tuple[int, int, float]] = []
    costs: list[float] = []
    i = 0
    backbone: list[str] = []
    while True:
        M, backbone = hc.cost_matrix(g, profile)
        analysis = hc.analyze(g, profile)
        post = [analysis.cidx[hc.resolve_carrier(analysis.graph, nid)]
                for nid in backbone]
        L = len(backbone)
        if i >= L - 1:
            break
        row = M[i]
        valid = [j for j in range(L) if np.isfinite(row[j]) and post[j] >= post[i]]
        if not valid:
            i += 1
            continue
        j = min(valid, key=lambda j: (row[j], j))  # ties to the smallest target
        c = float(row[j])
        over = budget is not None and sum(costs) + c > budget
        if over and len(placed) >= min_skips:
            break
        g.add_skip(i, j, 1.0)
        placed.append((i, j, 1.0))
        costs.append(c)
        i = j + 1
    return PlacementPlan(placed, costs, float(sum(costs)), backbone, g)


def removal_schedule(n_steps: int) -> list[float]:
    """Skip scales for gradual removal: 1 - e/n for e = 1..n, ending at 0."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    return [1.0 - e / n_steps for e in range(1, n_steps + 1)]


def apply_skip_scale(graph: NetworkGraph, a: float) -> NetworkGraph:
    """Copy of the graph with every skip's scale set to ``a``."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"skip scale must lie in [0, 1], got {a}")
    g = graph.copy()
    for s in g.skips:
        s.a = float(a)
    return g


def realized_cost(graph: NetworkGraph, profile: hc.HeProfile | None = None) -> float:
    """Total adaptation cost the analyzer actually charges for the skips."""
    analysis = hc.analyze(graph, profile or hc.HeProfile())
    return float(sum(hc.skip_costs(analysis).values()))
