import numpy as np
import pytest

from polyckt import hecost as hc
from polyckt import netgraph as ng
from polyckt import scopt
from polyckt import numcore as nc
from polyckt.netgraph import ActivationSpec
from polyckt.polyapprox import relu_fn, remez


def polyfy_toy(g, degree):
    rep = remez(relu_fn, degree, (-6.0, 6.0))
    g = g.copy()
    for n in g.nodes.values():
        if n.kind == "Activation":
            n.attrs = ActivationSpec("poly", rep.polynomial).to_attrs()
    return g


def conv_chain(n):
    g = ng.NetworkGraph()
    g.add_node("in", "Input", {"shape": [1, 2, 2]})
    prev = "in"
    for i in range(n):
        g.add_node(f"c{i}", "Conv", {"out_channels": 1, "kernel": 1, "stride": 1,
                                     "padding": 0})
        g.add_edge(prev, f"c{i}", 0)
        prev = f"c{i}"
    g.add_node("out", "Output")
    g.add_edge(prev, "out", 0)
    g.validate()
    return g


# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("n", range(1, 11))
def test_removal_schedule_exact(n):
    sched = scopt.removal_schedule(n)
    assert sched == [1.0 - e / n for e in range(1, n + 1)]
    assert sched[-1] == 0.0
    assert all(sched[k] > sched[k + 1] for k in range(n - 1))


def test_removal_schedule_rejects_zero_steps():
    with pytest.raises(ValueError):
        scopt.removal_schedule(0)


def test_apply_skip_scale_sets_every_skip():
    g = ng.build_toy_resnet(blocks=3)
    g2 = scopt.apply_skip_scale(g, 0.5)
    assert all(s.a == 0.5 for s in g2.skips)
    assert all(s.a == 1.0 for s in g.skips)  # original untouched
    with pytest.raises(ValueError):
        scopt.apply_skip_scale(g, 1.5)
    with pytest.raises(ValueError):
        scopt.apply_skip_scale(g, -0.1)


def test_unit_scale_preserves_outputs():
    g = ng.build_toy_resnet(blocks=1, channels=4, input_shape=(3, 8, 8))
    w = ng.init_weights(g, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    base = ng.evaluate(g, w, nc.Tensor(x)).data
    same = ng.evaluate(scopt.apply_skip_scale(g, 1.0), w, nc.Tensor(x)).data
    assert np.allclose(base, same, atol=1e-12)


def test_zero_scale_plus_prune_equals_skip_free_network():
    g = ng.build_toy_resnet(blocks=2, channels=4, input_shape=(3, 8, 8))
    w = ng.init_weights(g, seed=1)
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
    dead = ng.prune(scopt.apply_skip_scale(g, 0.0))
    assert not dead.skips
    stripped = scopt.strip_skips(g)
    got = ng.evaluate(dead, w, nc.Tensor(x)).data
    want = ng.evaluate(stripped, w, nc.Tensor(x)).data
    assert np.array_equal(got, want)


# ---------------------------------------------------------------- placement


def test_greedy_chains_past_each_target():
    plan = scopt.place_skips(conv_chain(8))
    # every row of a uniform conv chain prices all targets equally, so the
    # tie falls to the next layer and placements chain two apart
    assert plan.skips == [(0, 1, 1.0), (2, 3, 1.0), (4, 5, 1.0), (6, 7, 1.0)]
    assert len(plan.costs) == 4


def test_budget_caps_placements_but_min_skips_overrides():
    g = conv_chain(8)
    capped = scopt.place_skips(g, budget=30.0)
    assert len(capped.skips) == 1
    forced = scopt.place_skips(g, budget=30.0, min_skips=3)
    assert len(forced.skips) == 3
    assert forced.total_cost > 30.0


def test_toy_plan_prefers_matched_chain_indices():
    # zero-consume batch norms give most rows an equal-depth target, so the
    # bulk of the plan is plain adds at the bare add cost
    g = scopt.strip_skips(polyfy_toy(ng.build_toy_resnet(blocks=3), 8))
    plan = scopt.place_skips(g, min_skips=3)
    assert len(plan.skips) >= 4
    cheap = [c for c in plan.costs if c == pytest.approx(0.05)]
    assert len(cheap) >= 4
    assert len(cheap) > len(plan.costs) // 2


def test_plan_invariant_source_not_deeper_than_main():
    for degree in (2, 8):
        g = scopt.strip_skips(polyfy_toy(ng.build_toy_resnet(blocks=3), degree))
        plan = scopt.place_skips(g)
        analysis = hc.analyze(plan.graph)
        ag = analysis.graph
        for k in range(len(plan.skips)):
            add_id = f"skip{k}_add"
            (s_main, _), (s_skip, _) = ag.in_edges(add_id)
            # walk back over inserted nodes to the true branch values
            while ag.nodes[s_skip].kind in ("Bootstrap", "Rescale"):
                s_skip = ag.in_edges(s_skip)[0][0]
            assert ag.nodes[s_skip].kind == "Scale"
            src = ag.in_edges(s_skip)[0][0]
            assert analysis.cidx[src] <= analysis.cidx[s_main]


def test_realized_cost_matches_plan_total():
    for degree in (2, 8, 18):
        g = scopt.strip_skips(polyfy_toy(ng.build_toy_resnet(blocks=3), degree))
        plan = scopt.place_skips(g, min_skips=3)
        assert scopt.realized_cost(plan.graph) == pytest.approx(
            plan.total_cost, abs=1e-9
        )


def test_realized_cost_matches_plan_total_on_mismatched_chain():
    plan = scopt.place_skips(conv_chain(8), min_skips=2)
    assert plan.total_cost > 1.0  # these placements pay bootstraps
    assert scopt.realized_cost(plan.graph) == pytest.approx(
        plan.total_cost, abs=1e-9
    )


def test_place_then_remove_restores_baseline_bootstraps():
    for degree in (2, 8):
        base = scopt.strip_skips(polyfy_toy(ng.build_toy_resnet(blocks=3), degree))
        n_base = hc.count_bootstraps(hc.analyze(base))
        plan = scopt.place_skips(base, min_skips=3)
        planned = hc.count_bootstraps(hc.analyze(plan.graph))
        assert planned >= n_base
        removed = plan.graph
        for a in scopt.removal_schedule(4):
            removed = scopt.apply_skip_scale(removed, a)
        removed = ng.prune(removed)
        assert hc.count_bootstraps(hc.analyze(removed)) == n_base


def test_removal_is_monotone_in_bootstraps_on_toy():
    # dropping skips one at a time never increases the bootstrap count
    g = polyfy_toy(ng.build_toy_resnet(blocks=3), 8)
    counts = []
    while True:
        counts.append(hc.count_bootstraps(hc.analyze(g)))
        if not g.skips:
            break
        g = g.copy()
        g.skips = g.skips[:-1]
    assert counts == sorted(counts, reverse=True)


def test_plan_rows_shape():
    plan = scopt.place_skips(conv_chain(4))
    for i, j, a, c in plan.rows():
        assert 0 <= i < j
        assert a == 1.0
        assert np.isfinite(c)
