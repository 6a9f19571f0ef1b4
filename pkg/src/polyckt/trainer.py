"""Range-aware training and polynomial replacement.

The pipeline has four phases. Plain pretraining fits the task; a range-tuning
phase adds a penalty on per-layer activation envelopes so the inputs each
future polynomial must cover shrink; replacement fits one polynomial per
activation over the measured ranges; a final fine-tune phase trains through
the polynomials with a stronger penalty, since any drift past the fitted
interval is amplified by high-degree tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import polyapprox as pa
from .datasets import Dataset, batches
from .netgraph import (
    ActivationSpec,
    NetworkGraph,
    evaluate,
    evaluate_collect,
    init_weights,
    lower,
)

__all__ = [
    "TrainingError",
    "TrainConfig",
    "TrainResult",
    "SGD",
    "trainable_names",
    "range_loss",
    "estimate_ranges",
    "range_envelope",
    "polyfy",
    "deviation_bound",
    "accuracy",
    "train_he_friendly",
]


class TrainingError(RuntimeError):
    """Raised when optimization diverges; carries the last good weights."""

    def __init__(self, message, checkpoint=None, metrics=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.metrics = metrics or []


@dataclass
class TrainConfig:
    lr: float = 0.05
    lr_post: float = 0.002
    momentum: float = 0.9
    batch_size: int = 32
    epochs_pretrain: int = 6
    epochs_range: int = 6
    epochs_post: int = 4
    w_pre: float = 0.0005
    w_post: float = 0.05
    q: float = 2.0
    degree: int = 18
    method: str = "remez"
    quantile: float = 1.0
    margin: float = 0.05
    seed: int = 0


@dataclass
class TrainResult:
    graph: NetworkGraph
    weights: dict
    metrics: list[dict]
    reports: dict
    ranges: dict
    envelope_pretrain: float
    envelope_tuned: float
    accuracy_pre_replace: float
    accuracy_final: float
    config: TrainConfig = field(repr=False, default=None)


class SGD:
    """Momentum SGD over a named weight dict; velocities start at zero."""

    def __init__(self, names, lr: float, momentum: float = 0.9):
        self.names = list(names)
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, weights: dict, grads: dict):
        for name in self.names:
            g = grads[name]
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            weights[name] = weights[name] - self.lr * v


def trainable_names(weights: dict) -> list[str]:
    return [k for k in weights if not k.endswith(("running_mean", "running_var"))]


def range_loss(act_pairs, q: float = 2.0) -> nc.Tensor:
    """q-norm over per-layer peak activation magnitudes.

    Built from differentiable primitives, so the penalty pushes down the
    single largest pre-activation per layer.
    """
    if not act_pairs:
        raise TrainingError("graph has no activations to range-penalize")
    ms = [nc.max_abs(t) for _, t in act_pairs]
    if math.isinf(q):
        acc = ms[0]
        for m in ms[1:]:
            acc = nc.maximum(acc, m)
        return acc
    if q == 1:
        acc = ms[0]
        for m in ms[1:]:
            acc = nc.add(acc, m)
        return acc
    if q == 2:
        acc = nc.mul(ms[0], ms[0])
        for m in ms[1:]:
            acc = nc.add(acc, nc.mul(m, m))
        return nc.sqrt(acc)
    raise TrainingError(f"unsupported range-loss norm q={q}; use 1, 2, or inf")


def estimate_ranges(
    graph: NetworkGraph,
    weights: dict,
    x: np.ndarray,
    quantile: float = 1.0,
    margin: float = 0.0,
    batch_size: int = 64,
) -> dict[str, tuple[float, float]]:
    """Per-activation input interval from per-sample order statistics.

    quantile 1.0 keeps the exact envelope; smaller values trim outlier
    samples from both ends. The margin widens each side by that fraction of
    the interval width.
    """
    if not 0.0 < quantile <= 1.0:
        raise TrainingError(f"quantile must lie in (0, 1], got {quantile}")
    per_layer_max: dict[str, list[np.ndarray]] = {}
    per_layer_min: dict[str, list[np.ndarray]] = {}
    for start in range(0, x.shape[0], batch_size):
        xb = x[start : start + batch_size]
        _, pairs = evaluate_collect(graph, weights, nc.Tensor(xb), training=False)
        for nid, t in pairs:
            flat = t.data.reshape(t.data.shape[0], -1)
            per_layer_max.setdefault(nid, []).append(flat.max(axis=1))
            per_layer_min.setdefault(nid, []).append(flat.min(axis=1))
    out = {}
    for nid in per_layer_max:
        maxima = np.sort(np.concatenate(per_layer_max[nid]))
        minima = np.sort(np.concatenate(per_layer_min[nid]))
        n = maxima.size
        # the epsilon keeps exact multiples of 1/n from ceiling one rank up
        hi_idx = min(max(math.ceil(quantile * n - 1e-9) - 1, 0), n - 1)
        lo_idx = n - 1 - hi_idx
        lo, hi = float(minima[lo_idx]), float(maxima[hi_idx])
        width = hi - lo
        out[nid] = (lo - margin * width, hi + margin * width)
    return out


def range_envelope(ranges: dict) -> float:
    """Largest absolute endpoint over all layers."""
    return max(max(abs(lo), abs(hi)) for lo, hi in ranges.values())


def _activation_fn(attrs):
    spec = ActivationSpec.from_attrs(attrs)
    if spec.kind == "relu":
        return pa.relu_fn
    if spec.kind == "gelu":
        return pa.gelu_fn
    return spec.poly


def polyfy(
    graph: NetworkGraph,
    ranges: dict,
    degree: int,
    method: str = "remez",
) -> tuple[NetworkGraph, dict]:
    """Replace every activation with a fitted polynomial.

    Layers are fitted in backbone order; each interval is widened by the
    previous layer's fit error, since that error perturbs this layer's
    inputs. The first layer sees its measured range unchanged.
    """
    g = graph.copy()
    act_ids = [nid for nid in g.backbone() if g.nodes[nid].kind == "Activation"]
    if sorted(ranges) != sorted(act_ids):
        raise TrainingError(
            f"ranges cover {sorted(ranges)} but the graph has activations "
            f"{sorted(act_ids)}"
        )
    if method not in ("remez", "lstsq"):
        raise TrainingError(f"unknown fit method {method!r}")
    fit = pa.remez if method == "remez" else pa.lstsq_fit
    reports = {}
    carry = 0.0
    for nid in act_ids:
        lo, hi = ranges[nid]
        lo, hi = lo - carry, hi + carry
        if not lo < hi:
            pad = max(1e-6, abs(hi) * 1e-6)
            lo, hi = lo - pad, hi + pad
        fn = _activation_fn(g.nodes[nid].attrs)
        rep = fit(fn, degree, (lo, hi))
        g.nodes[nid].attrs = ActivationSpec("poly", rep.polynomial).to_attrs()
        reports[nid] = rep
        carry = rep.max_abs_error
    return g, reports


def deviation_bound(graph: NetworkGraph, weights: dict, fit_errors: dict) -> float:
    """Worst-case output gap between a network and its polynomial twin.

    Propagates per-layer Lipschitz factors in the sup norm; each activation
    contributes its fit error on top of passing deviations through. Valid
    while inputs stay inside the fitted intervals.
    """
    g = lower(graph)
    g.validate()
    dev: dict[str, float] = {}
    for nid in g.topo_order():
        node = g.nodes[nid]
        ins = [dev[s] for s, _ in g.in_edges(nid)]
        kind = node.kind
        if kind == "Input":
            dev[nid] = 0.0
        elif kind == "Conv":
            kernel = np.asarray(weights[f"{nid}.kernel"])
            lip = float(np.abs(kernel).sum(axis=(1, 2, 3)).max())
            dev[nid] = lip * ins[0]
        elif kind == "BatchNorm":
            gamma = np.asarray(weights[f"{nid}.gamma"])
            var = np.asarray(weights[f"{nid}.running_var"])
            lip = float(np.max(np.abs(gamma) / np.sqrt(var + 1e-5)))
            dev[nid] = lip * ins[0]
        elif kind == "FullyConnected":
            w = np.asarray(weights[f"{nid}.weight"])
            lip = float(np.abs(w).sum(axis=0).max())
            dev[nid] = lip * ins[0]
        elif kind == "Activation":
            spec = ActivationSpec.from_attrs(node.attrs)
            if spec.kind == "relu":
                lip = 1.0
            elif spec.kind == "gelu":
                lip = 1.1  # max |d gelu/dx| is about 1.085
            else:
                lip = _poly_grad_peak(spec.poly)
            dev[nid] = lip * ins[0] + float(fit_errors.get(nid, 0.0))
        elif kind == "Scale":
            dev[nid] = abs(float(node.attrs.get("a", 1.0))) * ins[0]
        elif kind == "Add":
            dev[nid] = ins[0] + ins[1]
        else:  # MeanPool, Bootstrap, Rescale, Output average or pass through
            dev[nid] = ins[0]
    out = [n.id for n in g.nodes.values() if n.kind == "Output"]
    return dev[out[0]]


def _poly_grad_peak(poly: pa.Polynomial) -> float:
    xs = np.linspace(poly.domain[0], poly.domain[1], 2001)
    c = poly.coeffs
    dcoef = c[1:] * np.arange(1, c.size)
    acc = np.zeros_like(xs)
    for k in range(dcoef.size - 1, -1, -1):
        acc = acc * xs + dcoef[k]
    return float(np.max(np.abs(acc)))


def accuracy(graph: NetworkGraph, weights: dict, data: Dataset,
             batch_size: int = 128) -> float:
    hits = 0
    for start in range(0, len(data), batch_size):
        xb = data.x[start : start + batch_size]
        yb = data.y[start : start + batch_size]
        logits = evaluate(graph, weights, nc.Tensor(xb), training=False).data
        hits += int((logits.argmax(axis=1) == yb).sum())
    return hits / len(data)


def _epoch_metrics(graph, weights, val: Dataset, q: float) -> tuple[float, float, float]:
    xb, yb = val.x, val.y
    out, pairs = evaluate_collect(graph, weights, nc.Tensor(xb), training=False)
    ce = nc.cross_entropy(out, yb).item()
    acc = float((out.data.argmax(axis=1) == yb).mean())
    rl = range_loss(pairs, q).item()
    return acc, ce, rl


def _run_phase(graph, weights, train, val, cfg, phase, epochs, w_range, lr,
               metrics, epoch_base):
    names = trainable_names(weights)
    opt = SGD(names, lr=lr, momentum=cfg.momentum)
    checkpoint = {k: v.copy() for k, v in weights.items()}
    for ep in range(epochs):
        seed = np.random.default_rng([cfg.seed, epoch_base + ep]).integers(2**31)
        try:
            for xb, yb in batches(train, cfg.batch_size, seed=int(seed)):
                with nc.Tape() as tape:
                    wt = {k: (nc.Tensor(v) if k in names else v)
                          for k, v in weights.items()}
                    out, pairs = evaluate_collect(graph, wt, nc.Tensor(xb),
                                                  training=True)
                    loss = nc.cross_entropy(out, yb)
                    if w_range:
                        loss = nc.add(loss, nc.scale(range_loss(pairs, cfg.q),
                                                     w_range))
                    grads = tape.grad(loss, [wt[n] for n in names])
                grad_map = {n: g.data for n, g in zip(names, grads)}
                opt.step(weights, grad_map)
                wmax = max(float(np.max(np.abs(weights[n]))) for n in names)
                # batch norm keeps forward passes finite even when weights
                # explode, so divergence needs a magnitude guard too
                if not np.isfinite(wmax) or wmax > 1e8:
                    raise nc.NonFiniteError(f"weight magnitude reached {wmax:.3g}")
        except nc.NonFiniteError as e:
            raise TrainingError(
                f"{phase} diverged in epoch {epoch_base + ep}: {e}",
                checkpoint=checkpoint, metrics=metrics,
            ) from e
        acc, ce, rl = _epoch_metrics(graph, weights, val, cfg.q)
        metrics.append({
            "epoch": epoch_base + ep, "phase": phase, "accuracy": acc,
            "ce_loss": ce, "range_loss": rl, "layer_id": "",
            "range_min": "", "range_max": "",
        })
        checkpoint = {k: v.copy() for k, v in weights.items()}
    return epoch_base + epochs


def train_he_friendly(
    graph: NetworkGraph,
    train: Dataset,
    val: Dataset,
    range_split: Dataset,
    config: TrainConfig | None = None,
    weights: dict | None = None,
) -> TrainResult:
    """Full pipeline: pretrain, range-tune, replace activations, fine-tune."""
    cfg = config or TrainConfig()
    g = graph.copy()
    w = weights if weights is not None else init_weights(g, seed=cfg.seed)
    w = {k: np.array(v, dtype=np.float64) for k, v in w.items()}
    metrics: list[dict] = []

    epoch = _run_phase(g, w, train, val, cfg, "pretrain", cfg.epochs_pretrain,
                       0.0, cfg.lr, metrics, 0)
    env_pre = range_envelope(estimate_ranges(g, w, range_split.x,
                                             quantile=cfg.quantile))

    epoch = _run_phase(g, w, train, val, cfg, "range_tune", cfg.epochs_range,
                       cfg.w_pre, cfg.lr, metrics, epoch)
    ranges = estimate_ranges(g, w, range_split.x, quantile=cfg.quantile,
                             margin=cfg.margin)
    env_tuned = range_envelope(ranges)
    for nid in sorted(ranges):
        lo, hi = ranges[nid]
        metrics.append({
            "epoch": epoch, "phase": "ranges", "accuracy": "", "ce_loss": "",
            "range_loss": "", "layer_id": nid, "range_min": lo, "range_max": hi,
        })
    acc_pre = accuracy(g, w, val)

    poly_graph, reports = polyfy(g, ranges, cfg.degree, cfg.method)
    _run_phase(poly_graph, w, train, val, cfg, "post_replace", cfg.epochs_post,
               cfg.w_post, cfg.lr_post, metrics, epoch)
    acc_final = accuracy(poly_graph, w, val)

    return TrainResult(
        graph=poly_graph, weights=w, metrics=metrics, reports=reports,
        ranges=ranges, envelope_pretrain=env_pre, envelope_tuned=env_tuned,
        accuracy_pre_replace=acc_pre, accuracy_final=acc_final, config=cfg,
    )
