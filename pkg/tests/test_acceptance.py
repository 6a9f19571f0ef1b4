"""End-to-end acceptance checks pinning the toolkit's headline guarantees.

One test per criterion, in a fixed order, each printing a single pass line
with the measured values.  Tolerances are pinned here and nowhere tighter.
"""

import time

import numpy as np
import pytest

from polyckt import cli
from polyckt import datasets as ds
from polyckt import hecost as hc
from polyckt import hesim as hs
from polyckt import netgraph as ng
from polyckt import numcore as nc
from polyckt import polyapprox as pa
from polyckt import scopt as so
from polyckt import trainer as tr
from polyckt.netgraph import ActivationSpec

import he_oracle
from test_numcore import check_grad, _sum_sq


def _polyfied_resnet(degree, blocks=3, channels=16, size=32):
    g = ng.build_toy_resnet(blocks=blocks, channels=channels,
                            input_shape=(3, size, size))
    rep = pa.remez(pa.relu_fn, degree, (-4.0, 4.0))
    for node in g.nodes.values():
        if node.kind == "Activation":
            node.attrs = ActivationSpec("poly", rep.polynomial).to_attrs()
    return g


def _bootstraps(graph):
    return hc.count_bootstraps(hc.analyze(graph, hc.HeProfile()))


def test_criterion_01_minimax_exactness():
    rep1 = pa.remez(pa.relu_fn, 1, (-1.0, 1.0))
    assert abs(rep1.max_abs_error - 0.25) <= 1e-8
    positions = sorted(x for x, _ in rep1.extrema)
    assert np.allclose(positions, [-1.0, 0.0, 1.0], atol=1e-6)
    rep2 = pa.remez(pa.relu_fn, 2, (-1.0, 1.0))
    assert abs(rep2.max_abs_error - 0.0625) <= 1e-8
    print(f"PASS 1: relu deg1 error {rep1.max_abs_error:.10f} with extrema "
          f"at -1,0,1; deg2 error {rep2.max_abs_error:.10f}")


def test_criterion_02_nested_range_error_monotone():
    t0 = time.time()
    rng = np.random.default_rng(42)
    for trial in range(200):
        fn = (pa.relu_fn, pa.gelu_fn)[int(rng.integers(0, 2))]
        degree = int(rng.integers(2, 9))
        a = -float(rng.uniform(0.5, 5.0))
        b = float(rng.uniform(0.5, 5.0))
        c = a + float(rng.uniform(0.0, 0.45)) * (b - a)
        d = b - float(rng.uniform(0.0, 0.45)) * (b - a)
        outer = pa.remez(fn, degree, (a, b)).max_abs_error
        inner = pa.remez(fn, degree, (c, d)).max_abs_error
        assert inner <= outer + 1e-9, (
            f"trial {trial}: deg {degree} inner [{c:.3f},{d:.3f}] error "
            f"{inner:.3e} > outer [{a:.3f},{b:.3f}] error {outer:.3e}")
    print(f"PASS 2: 200 nested range pairs error-monotone "
          f"({time.time() - t0:.1f} s)")


def test_criterion_03_gelu_fits_better_than_relu():
    worst_gap = np.inf
    for degree in (2, 4, 6, 8):
        relu_err = pa.remez(pa.relu_fn, degree, (-5.0, 5.0)).max_abs_error
        gelu_err = pa.remez(pa.gelu_fn, degree, (-5.0, 5.0)).max_abs_error
        assert gelu_err < relu_err
        worst_gap = min(worst_gap, relu_err / gelu_err)
    print(f"PASS 3: gelu beats relu at degrees 2,4,6,8 on [-5,5] "
          f"(error ratio at least {worst_gap:.2f}x)")


def test_criterion_04_chain_index_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(20240500)
    events_seen = 0
    for trial in range(500):
        layers, skips, prof = he_oracle.random_case(rng)
        g = he_oracle.build_graph(layers, skips)
        want_post, want_events = he_oracle.oracle(layers, skips, prof)
        got_post, got_events = he_oracle.engine(g, skips, prof)
        assert got_post == want_post, f"trial {trial}: chain indices diverge"
        assert got_events == want_events, f"trial {trial}: bootstraps diverge"
        events_seen += len(want_events)
    assert events_seen > 100
    print(f"PASS 4: 500 random chains match the reference interpreter "
          f"exactly ({events_seen} bootstrap events, {time.time() - t0:.1f} s)")


def test_criterion_05_depth_calibration():
    assert hc.depth_of_poly(16) == hc.depth_of_poly(18) == 5
    assert hc.depth_of_poly(2) < hc.depth_of_poly(8)
    print("PASS 5: depth(16) == depth(18) == 5 and depth(2)=2 < depth(8)=4")


def test_criterion_06_skip_elimination_trend():
    counts = {}
    ratios = {}
    for degree in (2, 8, 16, 18):
        g = _polyfied_resnet(degree)
        with_skips = _bootstraps(g)
        without = _bootstraps(so.strip_skips(g))
        assert with_skips >= without
        counts[degree] = (without, with_skips)
        ratios[degree] = with_skips / without
        # dropping skips one at a time never increases the count
        seq = []
        for keep in range(len(g.skips), -1, -1):
            h = g.copy()
            h.skips = g.skips[:keep]
            seq.append(_bootstraps(h))
        assert seq == sorted(seq, reverse=True)
    assert counts == {2: (3, 6), 8: (6, 9), 16: (8, 11), 18: (8, 11)}
    assert ratios[2] > ratios[8] >= ratios[16] == ratios[18]
    print(f"PASS 6: bootstrap ratios {ratios[2]:.3g} > {ratios[8]:.3g} >= "
          f"{ratios[16]:.3g} == {ratios[18]:.3g}; removal never increases counts")


def test_criterion_07_removal_schedule_and_identity_scale():
    for n in range(1, 11):
        assert so.removal_schedule(n) == [1.0 - e / n for e in range(1, n + 1)]
    g = ng.build_toy_resnet(blocks=2, channels=4, input_shape=(3, 8, 8))
    weights = ng.init_weights(g, seed=0)
    x = np.random.default_rng(0).uniform(-1.0, 1.0, size=(2, 3, 8, 8))
    base = ng.evaluate(g, weights, x).data
    scaled = ng.evaluate(so.apply_skip_scale(g, 1.0), weights, x).data
    dev = float(np.max(np.abs(base - scaled)))
    assert dev <= 1e-12
    print(f"PASS 7: schedules exact for n=1..10; a=1 output deviation {dev:.2e}")


def test_criterion_08_gradient_integrity():
    t0 = time.time()
    rng = np.random.default_rng(7)
    ops = ["conv", "matmul", "bn_train", "bn_eval", "pool", "relu", "gelu",
           "poly", "scale", "mul", "range_loss"]
    for trial in range(100):
        op = ops[trial % len(ops)]
        if op == "conv":
            x = rng.standard_normal((1, 2, 5, 5))
            w = rng.standard_normal((2, 2, 3, 3))
            check_grad(lambda X, W: _sum_sq(nc.conv2d(X, W, padding=1)), [x, w])
        elif op == "matmul":
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((4, 2))
            c = rng.standard_normal(2)
            check_grad(lambda A, B, C: _sum_sq(
                nc.add_bias(nc.matmul(A, B), C, axis=1)), [a, b, c])
        elif op == "bn_train":
            x = rng.standard_normal((5, 2, 3, 3))
            gmm = rng.standard_normal(2) + 1.5
            bta = rng.standard_normal(2)
            check_grad(lambda X, G, B: _sum_sq(nc.batch_norm(
                X, G, B, np.zeros(2), np.ones(2), training=True)),
                [x, gmm, bta], rtol=1e-4)
        elif op == "bn_eval":
            x = rng.standard_normal((4, 2, 3, 3))
            gmm = rng.standard_normal(2) + 1.0
            bta = rng.standard_normal(2)
            rm = rng.standard_normal(2) * 0.3
            rv = rng.uniform(0.5, 1.5, 2)
            check_grad(lambda X, G, B: _sum_sq(nc.batch_norm(
                X, G, B, rm.copy(), rv.copy(), training=False)), [x, gmm, bta])
        elif op == "pool":
            x = rng.standard_normal((2, 2, 4, 4))
            check_grad(lambda X: _sum_sq(nc.mean_pool2d(X, 2)), [x])
        elif op in ("relu", "gelu"):
            x = rng.standard_normal((4, 6))
            x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep clear of the kink
            fn = nc.relu if op == "relu" else nc.gelu
            check_grad(lambda X: _sum_sq(fn(X)), [x])
        elif op == "poly":
            x = rng.standard_normal((3, 5))
            coeffs = rng.standard_normal(int(rng.integers(2, 7)))
            check_grad(lambda X: _sum_sq(nc.elementwise_poly(X, coeffs)), [x])
        elif op == "scale":
            x = rng.standard_normal((2, 3, 2, 2))
            check_grad(lambda X: _sum_sq(nc.scale(X, 0.7)), [x])
        elif op == "mul":
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((3, 4))
            check_grad(lambda A, B: _sum_sq(nc.mul(A, B)), [a, b])
        else:
            a = rng.standard_normal((4, 8))
            b = rng.standard_normal((4, 8)) * 2.0
            q = (1.0, 2.0, np.inf)[trial % 3]
            check_grad(lambda A, B: tr.range_loss(
                [("a", A), ("b", B)], q=q), [a, b], rtol=1e-4)
    print(f"PASS 8: 100 finite-difference trials over layer primitives and "
          f"the range loss ({time.time() - t0:.1f} s)")


def test_criterion_09_desk_scale_training_pipeline():
    t0 = time.time()
    data = ds.synthetic_blobs(n=384, image_size=16, seed=5)
    train_set, val_set, range_set = ds.split(data, (0.7, 0.15, 0.15), seed=1)
    g = ng.build_toy_resnet(blocks=2, channels=8, input_shape=(3, 16, 16))
    cfg = tr.TrainConfig(epochs_pretrain=8, epochs_range=8, epochs_post=3,
                         degree=18, batch_size=32, w_pre=0.03, lr_post=0.002)
    result = tr.train_he_friendly(g, train_set, val_set, range_set, cfg)
    shrink = 1.0 - result.envelope_tuned / result.envelope_pretrain
    assert shrink >= 0.50, f"envelope shrink {shrink:.1%} below 50%"
    assert result.accuracy_pre_replace >= 0.9
    drop = result.accuracy_pre_replace - result.accuracy_final
    assert drop <= 0.02, f"accuracy dropped {drop:.3f} after replacement"
    for node in result.graph.nodes.values():
        if node.kind == "Activation":
            spec = ActivationSpec.from_attrs(node.attrs)
            assert spec.kind == "poly" and spec.poly.degree == 18
    print(f"PASS 9: envelope {result.envelope_pretrain:.2f} -> "
          f"{result.envelope_tuned:.2f} ({shrink:.1%} shrink), accuracy "
          f"{result.accuracy_pre_replace:.3f} -> {result.accuracy_final:.3f} "
          f"({time.time() - t0:.0f} s)")


def test_criterion_10_simulator_fidelity():
    g = _polyfied_resnet(8, blocks=1, channels=4, size=8)
    weights = ng.init_weights(g, seed=0)
    x = np.random.default_rng(3).uniform(-0.5, 0.5, size=(2, 3, 8, 8))
    _, trace42 = hs.simulate(g, weights, x, frac_bits=42)
    assert trace42.mse <= 1e-10
    mses = [hs.simulate(g, weights, x, frac_bits=b)[1].mse
            for b in (8, 16, 24, 32, 42, 52)]
    for lo, hi in zip(mses[1:], mses):
        assert lo <= hi + 1e-18
    big = _polyfied_resnet(8)
    analysis = hc.analyze(big, hc.HeProfile())
    xb = np.random.default_rng(4).uniform(-0.5, 0.5, size=(1, 3, 32, 32))
    _, trace = hs.simulate(big, ng.init_weights(big, seed=1), xb)
    flagged = {r.node_id for r in trace.rows if r.bootstrap}
    assert flagged == set(analysis.bootstrap_nodes)
    assert trace.bootstraps == hc.count_bootstraps(analysis)
    print(f"PASS 10: mse {trace42.mse:.2e} at 42 bits, monotone over "
          f"8..52 bits, bootstrap events coincide with the static plan")


def test_criterion_11_round_trips(tmp_path):
    g = _polyfied_resnet(8, blocks=2, channels=4, size=8)
    text1 = ng.graph_to_json(g)
    text2 = ng.graph_to_json(ng.graph_from_json(text1))
    assert text1 == text2
    weights = ng.init_weights(g, seed=2)
    p1, p2 = tmp_path / "w1.pckt", tmp_path / "w2.pckt"
    ng.save_weights(weights, p1)
    ng.save_weights(ng.load_weights(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    out = tmp_path / "rep.csv"
    argv = ["approx", "--fn", "relu", "--degree", "4", "--range", "-2,2",
            "--out", str(out)]
    assert cli.main(argv) == 0
    before = out.read_bytes()
    assert cli.main(["rerun", "--manifest", str(out) + ".manifest.json"]) == 0
    assert out.read_bytes() == before
    print("PASS 11: graph JSON, weight file, and CLI rerun all byte-identical")


def test_criterion_12_single_activation_blocks_need_fewer_bootstraps():
    res = ng.build_toy_resnet(blocks=3, channels=16)
    cnx = ng.build_toy_convnext(blocks=3, channels=16)
    n_res = sum(1 for n in res.nodes.values() if n.kind == "Activation")
    n_cnx = sum(1 for n in cnx.nodes.values() if n.kind == "Activation")
    assert n_res == 3 * n_cnx
    rep_r = pa.remez(pa.relu_fn, 8, (-4.0, 4.0))
    rep_g = pa.remez(pa.gelu_fn, 8, (-4.0, 4.0))
    for g, rep in ((res, rep_r), (cnx, rep_g)):
        for node in g.nodes.values():
            if node.kind == "Activation":
                node.attrs = ActivationSpec("poly", rep.polynomial).to_attrs()
    b_res, b_cnx = _bootstraps(res), _bootstraps(cnx)
    assert b_cnx < b_res
    print(f"PASS 12: activation counts {n_res}:{n_cnx} (3:1); bootstraps "
          f"{b_cnx} < {b_res} at equal blocks and degree")
