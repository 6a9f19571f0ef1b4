"""Command-line driver wiring the toolkit into end-to-end workflows.

Every command is a pure function of its flags, input files, and seed; runs
that write files also write a manifest next to them so they can be replayed
byte-identically with ``polyckt rerun``.  Exit codes: 0 success, 1 usage
error, 2 input or parse error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import datasets as ds
from . import hecost as hc
from . import hesim as hs
from . import netgraph as ng
from . import numcore as nc
from . import polyapprox as pa
from . import scopt as so
from . import trainer as tr


class CliInputError(ValueError):
    """Bad flag value or malformed input file."""


class NumericFailure(RuntimeError):
    """Fit or optimization did not converge."""


class CliParser(argparse.ArgumentParser):
    """Usage problems exit 1 with the same error: prefix as other failures."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        # accept values like '-1,1' without the '--range=-1,1' spelling; no
        # option here starts with a digit, so any -<digit> token is a value
        self._negative_number_matcher = re.compile(r"^-\d|^-\.\d")

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


# ---------------------------------------------------------------- helpers


def _fmt(v) -> str:
    return repr(float(v))


def _parse_range(text: str) -> tuple[float, float]:
    try:
        a_str, b_str = text.split(",")
        a, b = float(a_str), float(b_str)
    except ValueError:
        raise CliInputError(f"expected a range like '-1,1', got {text!r}") from None
    if not a < b:
        raise CliInputError(f"range lower bound must be below upper, got [{a:g}, {b:g}]")
    return a, b


def _parse_sweep(text: str):
    try:
        start, rest = text.split("..")
        end, steps_str = rest.rsplit(",", 1)
        steps = int(steps_str)
    except ValueError:
        raise CliInputError(
            f"expected a sweep like '-1,1..-8,8,8', got {text!r}"
        ) from None
    if steps < 1:
        raise CliInputError(f"sweep needs at least 1 step, got {steps}")
    return _parse_range(start), _parse_range(end), steps


def _resolve_seed(flag_value, file_value=None, default: int = 0) -> int:
    if flag_value is not None:
        return int(flag_value)
    if file_value is not None:
        return int(file_value)
    env = os.environ.get("POLYCKT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliInputError(f"POLYCKT_SEED must be an integer, got {env!r}") from None
    return default


def _load_json(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise CliInputError(f"{path}: expected a JSON object")
    return doc


def _load_profile(path) -> hc.HeProfile:
    if path is None:
        return hc.HeProfile()
    doc = _load_json(path)
    fields = {f.name for f in dataclasses.fields(hc.HeProfile)}
    unknown = set(doc) - fields
    if unknown:
        raise CliInputError(f"unknown profile keys: {', '.join(sorted(unknown))}")
    if "costs" in doc:
        merged = dict(hc.HeProfile().costs)
        merged.update(doc["costs"])
        doc["costs"] = merged
    return hc.HeProfile(**doc)


def _load_inputs(path) -> np.ndarray:
    p = Path(path)
    x = np.load(p) if p.suffix == ".npy" else ds.load_idx(p).astype(np.float64)
    if x.ndim == 3:
        x = x[np.newaxis]
    if x.ndim != 4:
        raise CliInputError(f"{path}: expected samples shaped (n, c, h, w), got {x.shape}")
    return np.asarray(x, dtype=np.float64)


def _write_text(path, text: str):
    Path(path).write_text(text)


def _write_json(path, doc: dict):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_manifest(path, command, argv, config, inputs, outputs, seed, t0):
    _write_json(path, {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "version": __version__,
        "wall_time_s": round(time.time() - t0, 6),
    })


def _sibling_manifest(out_path) -> Path:
    p = Path(out_path)
    return p.with_name(p.name + ".manifest.json")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _fit_activation(fn_name: str, degree: int, domain, method: str, grid: int):
    fn = pa.TARGET_FNS[fn_name]
    if method == "remez":
        rep = pa.remez(fn, degree, domain, grid_size=grid)
        if not rep.converged:
            raise NumericFailure(
                f"remez did not converge for {fn_name} degree {degree} on "
                f"[{domain[0]:g}, {domain[1]:g}]"
            )
        return rep
    return pa.lstsq_fit(fn, degree, domain, n_samples=grid)


# ---------------------------------------------------------------- commands


def _cmd_approx(args, argv) -> int:
    t0 = time.time()
    lines = []
    poly_text = None
    if args.range_sweep:
        (a1, b1), (a2, b2), steps = _parse_sweep(args.range_sweep)
        lines.append("a,b,degree,max_error")
        rep = None
        for t in np.linspace(0.0, 1.0, steps):
            a = float(a1 + (a2 - a1) * t)
            b = float(b1 + (b2 - b1) * t)
            rep = _fit_activation(args.fn, args.degree, (a, b), args.method, args.grid)
            lines.append(f"{_fmt(a)},{_fmt(b)},{args.degree},{_fmt(rep.max_abs_error)}")
        print(f"swept {steps} ranges at degree {args.degree}; "
              f"final max_error {rep.max_abs_error:.6g}")
    else:
        a, b = _parse_range(args.range)
        rep = _fit_activation(args.fn, args.degree, (a, b), args.method, args.grid)
        lines.append("fn,degree,a,b,method,max_error,iterations,converged")
        lines.append(f"{args.fn},{args.degree},{_fmt(a)},{_fmt(b)},{args.method},"
                     f"{_fmt(rep.max_abs_error)},{rep.iterations},{int(rep.converged)}")
        poly_text = rep.polynomial.to_record() + "\n"
        print(f"{args.fn} degree {args.degree} on [{a:g}, {b:g}]: "
              f"max_error {rep.max_abs_error:.6g}")
    if args.poly_out:
        if poly_text is None:
            raise CliInputError("--poly-out makes no sense with --range-sweep")
        _write_text(args.poly_out, poly_text)
    if args.out:
        _write_text(args.out, "\n".join(lines) + "\n")
        outputs = {"report": str(args.out)}
        if args.poly_out:
            outputs["polynomial"] = str(args.poly_out)
        _write_manifest(
            _sibling_manifest(args.out), "approx", argv,
            {"fn": args.fn, "degree": args.degree, "method": args.method,
             "grid": args.grid, "range": args.range, "range_sweep": args.range_sweep},
            {}, outputs, None, t0,
        )
    elif not args.poly_out:
        for line in lines:
            print(line)
    return 0


def _cmd_build(args, argv) -> int:
    t0 = time.time()
    seed = _resolve_seed(args.seed)
    shape = (3, args.image_size, args.image_size)
    if args.arch == "resnet":
        g = ng.build_toy_resnet(blocks=args.blocks, channels=args.channels,
                                input_shape=shape, num_classes=args.classes)
        target = "relu"
    else:
        g = ng.build_toy_convnext(blocks=args.blocks, channels=args.channels,
                                  expand=args.expand, input_shape=shape,
                                  num_classes=args.classes)
        target = "gelu"
    if args.degree is not None:
        dom = _parse_range(args.fit_range)
        rep = _fit_activation(target, args.degree, dom, "remez", 4096)
        attrs = ng.ActivationSpec("poly", rep.polynomial).to_attrs()
        for node in g.nodes.values():
            if node.kind == "Activation":
                node.attrs = dict(attrs)
    weights = ng.init_weights(g, seed=seed)
    out = _out_dir(args.out)
    ng.save_graph(g, out / "graph.json")
    ng.save_weights(weights, out / "weights.pckt")
    print(f"built {args.arch}: {len(g.backbone())} backbone layers, "
          f"{len(g.skips)} skips -> {out}")
    _write_manifest(
        out / "manifest.json", "build", argv,
        {"arch": args.arch, "blocks": args.blocks, "channels": args.channels,
         "image_size": args.image_size, "classes": args.classes,
         "expand": args.expand, "degree": args.degree, "fit_range": args.fit_range},
        {}, {"graph": str(out / "graph.json"), "weights": str(out / "weights.pckt")},
        seed, t0,
    )
    return 0


_MODEL_DEFAULTS = {
    "arch": "resnet",
    "blocks": 2,
    "channels": 8,
    "image_size": 16,
    "classes": 4,
    "n": 384,
    "data_seed": 0,
    "split": [0.7, 0.15, 0.15],
    "split_seed": 1,
}

_TRAIN_FLAGS = ("lr", "lr_post", "batch_size", "epochs_pretrain", "epochs_range",
                "epochs_post", "w_pre", "w_post", "degree", "method",
                "quantile", "margin", "q")


def _cmd_train(args, argv) -> int:
    t0 = time.time()
    file_cfg = _load_json(args.config) if args.config else {}
    train_fields = {f.name for f in dataclasses.fields(tr.TrainConfig)}
    unknown = set(file_cfg) - train_fields - set(_MODEL_DEFAULTS)
    if unknown:
        raise CliInputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model_cfg = dict(_MODEL_DEFAULTS)
    model_cfg.update({k: file_cfg[k] for k in _MODEL_DEFAULTS if k in file_cfg})
    if len(model_cfg["split"]) != 3:
        raise CliInputError("config key 'split' needs train/val/range fractions")

    cfg_kwargs = {k: file_cfg[k] for k in train_fields if k in file_cfg}
    for flag in _TRAIN_FLAGS:
        value = getattr(args, flag)
        if value is not None:
            cfg_kwargs[flag] = value
    seed = _resolve_seed(args.seed, file_cfg.get("seed"))
    cfg_kwargs["seed"] = seed
    cfg = tr.TrainConfig(**cfg_kwargs)

    data = ds.ingest_dataset(args.data, seed=model_cfg["data_seed"],
                             n=model_cfg["n"], image_size=model_cfg["image_size"])
    train_set, val_set, range_set = ds.split(
        data, tuple(model_cfg["split"]), seed=model_cfg["split_seed"])
    builder = ng.build_toy_resnet if model_cfg["arch"] == "resnet" else ng.build_toy_convnext
    g = builder(blocks=model_cfg["blocks"], channels=model_cfg["channels"],
                input_shape=tuple(data.x.shape[1:]), num_classes=model_cfg["classes"])

    result = tr.train_he_friendly(g, train_set, val_set, range_set, cfg)

    out = _out_dir(args.out)
    ng.save_graph(result.graph, out / "graph.json")
    ng.save_weights(result.weights, out / "weights.pckt")
    _write_text(out / "metrics.csv", _metrics_csv(result.metrics))
    shrink = 1.0 - result.envelope_tuned / result.envelope_pretrain
    _write_json(out / "result.json", {
        "envelope_pretrain": result.envelope_pretrain,
        "envelope_tuned": result.envelope_tuned,
        "envelope_shrink": shrink,
        "accuracy_pre_replace": result.accuracy_pre_replace,
        "accuracy_final": result.accuracy_final,
        "ranges": {k: list(v) for k, v in result.ranges.items()},
        "fit_errors": {k: rep.max_abs_error for k, rep in result.reports.items()},
    })
    print(f"envelope {result.envelope_pretrain:.4g} -> {result.envelope_tuned:.4g} "
          f"({100 * shrink:.1f}% shrink); accuracy {result.accuracy_pre_replace:.4f} "
          f"-> {result.accuracy_final:.4f}")
    _write_manifest(
        out / "manifest.json", "train", argv,
        {**model_cfg, **dataclasses.asdict(cfg)},
        {"data": args.data, "config": args.config},
        {"graph": str(out / "graph.json"), "weights": str(out / "weights.pckt"),
         "metrics": str(out / "metrics.csv"), "result": str(out / "result.json")},
        seed, t0,
    )
    return 0


def _metrics_csv(rows) -> str:
    cols = ["epoch", "phase", "accuracy", "ce_loss", "range_loss",
            "layer_id", "range_min", "range_max"]
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for col in cols:
            v = row.get(col)
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(_fmt(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _cmd_polyfy(args, argv) -> int:
    t0 = time.time()
    seed = _resolve_seed(args.seed)
    g = ng.load_graph(args.graph)
    weights = ng.load_weights(args.weights)
    data = ds.ingest_dataset(args.data, seed=seed, n=args.n,
                             image_size=args.image_size)
    x = data.x[: args.limit]
    ranges = tr.estimate_ranges(g, weights, x, quantile=args.quantile,
                                margin=args.margin, batch_size=args.batch_size)
    new_graph, reports = tr.polyfy(g, ranges, args.degree, args.method)

    out = _out_dir(args.out)
    ng.save_graph(new_graph, out / "graph.json")
    range_lines = ["act_id,lo,hi"]
    fit_lines = ["act_id,degree,a,b,max_error,converged"]
    for act_id in ranges:
        lo, hi = ranges[act_id]
        rep = reports[act_id]
        dom = rep.polynomial.domain
        range_lines.append(f"{act_id},{_fmt(lo)},{_fmt(hi)}")
        fit_lines.append(f"{act_id},{rep.polynomial.degree},{_fmt(dom[0])},"
                         f"{_fmt(dom[1])},{_fmt(rep.max_abs_error)},{int(rep.converged)}")
    _write_text(out / "ranges.csv", "\n".join(range_lines) + "\n")
    _write_text(out / "fits.csv", "\n".join(fit_lines) + "\n")
    worst = max(rep.max_abs_error for rep in reports.values())
    print(f"fitted {len(reports)} activations at degree {args.degree}; "
          f"worst fit error {worst:.6g}")
    _write_manifest(
        out / "manifest.json", "polyfy", argv,
        {"degree": args.degree, "method": args.method, "quantile": args.quantile,
         "margin": args.margin, "limit": args.limit, "n": args.n,
         "image_size": args.image_size, "batch_size": args.batch_size},
        {"graph": args.graph, "weights": args.weights, "data": args.data},
        {"graph": str(out / "graph.json"), "ranges": str(out / "ranges.csv"),
         "fits": str(out / "fits.csv")},
        seed, t0,
    )
    return 0


def _cmd_analyze(args, argv) -> int:
    t0 = time.time()
    g = ng.load_graph(args.graph)
    profile = _load_profile(args.profile)
    analysis = hc.analyze(g, profile)
    n_bs = hc.count_bootstraps(analysis)
    depth = hc.mult_depth(analysis)
    breakdown = hc.latency_breakdown(analysis)
    ag = analysis.graph
    lines = ["node_id,kind,cidx,category,cost"]
    for nid in ag.topo_order():
        category, cost = hc.node_cost(ag, nid, profile)
        lines.append(f"{nid},{ag.nodes[nid].kind},{analysis.cidx[nid]},"
                     f"{category},{_fmt(cost)}")
    print(f"bootstraps {n_bs}, mult depth {depth}, latency {breakdown['total']:.6g}")
    if args.out:
        out = _out_dir(args.out)
        _write_text(out / "nodes.csv", "\n".join(lines) + "\n")
        _write_json(out / "summary.json", {
            "bootstraps": n_bs,
            "mult_depth": depth,
            "latency": breakdown,
            "skip_costs": hc.skip_costs(analysis),
        })
        _write_manifest(
            out / "manifest.json", "analyze", argv,
            {"profile": args.profile},
            {"graph": args.graph},
            {"nodes": str(out / "nodes.csv"), "summary": str(out / "summary.json")},
            None, t0,
        )
    else:
        for line in lines:
            print(line)
    return 0


def _cmd_place_skips(args, argv) -> int:
    t0 = time.time()
    g = ng.load_graph(args.graph)
    profile = _load_profile(args.profile)
    plan = so.place_skips(so.strip_skips(g), profile,
                          budget=args.budget, min_skips=args.min_skips)
    out = _out_dir(args.out)
    ng.save_graph(plan.graph, out / "graph.json")
    lines = ["source,target,scale,cost"]
    for i, j, a, cost in plan.rows():
        lines.append(f"{i},{j},{_fmt(a)},{_fmt(cost)}")
    _write_text(out / "plan.csv", "\n".join(lines) + "\n")
    realized = so.realized_cost(plan.graph, profile)
    _write_json(out / "summary.json", {
        "n_skips": len(plan.skips),
        "total_cost": plan.total_cost,
        "realized_cost": realized,
    })
    print(f"placed {len(plan.skips)} skips, planned cost {plan.total_cost:.6g}, "
          f"realized {realized:.6g}")
    _write_manifest(
        out / "manifest.json", "place-skips", argv,
        {"profile": args.profile, "budget": args.budget, "min_skips": args.min_skips},
        {"graph": args.graph},
        {"graph": str(out / "graph.json"), "plan": str(out / "plan.csv"),
         "summary": str(out / "summary.json")},
        None, t0,
    )
    return 0


def _cmd_remove_skips(args, argv) -> int:
    t0 = time.time()
    schedule = so.removal_schedule(args.n)
    lines = ["epoch,a"]
    lines += [f"{epoch},{_fmt(a)}" for epoch, a in enumerate(schedule, 1)]
    outputs = {}
    if args.out:
        _write_text(args.out, "\n".join(lines) + "\n")
        outputs["schedule"] = str(args.out)
        print("schedule: " + ", ".join(f"{a:g}" for a in schedule))
    else:
        for line in lines:
            print(line)
    if args.graph:
        if args.a is None or args.out_graph is None:
            raise CliInputError("--graph needs both --a and --out-graph")
        g = so.apply_skip_scale(ng.load_graph(args.graph), args.a)
        if args.a == 0.0:
            g = ng.prune(g)
        ng.save_graph(g, args.out_graph)
        outputs["graph"] = str(args.out_graph)
        print(f"wrote graph with skip scale {args.a:g} -> {args.out_graph}")
    if args.out:
        _write_manifest(
            _sibling_manifest(args.out), "remove-skips", argv,
            {"n": args.n, "a": args.a},
            {"graph": args.graph} if args.graph else {},
            outputs, None, t0,
        )
    return 0


def _cmd_simulate(args, argv) -> int:
    t0 = time.time()
    seed = _resolve_seed(args.seed)
    g = ng.load_graph(args.graph)
    weights = ng.load_weights(args.weights)
    x = _load_inputs(args.inputs)
    profile = _load_profile(args.profile)
    out_arr, trace = hs.simulate(g, weights, x, profile, frac_bits=args.frac_bits,
                                 noise_std=args.noise_std, seed=seed)
    out = _out_dir(args.out)
    _write_text(out / "trace.csv", trace.to_csv())
    _write_text(out / "summary.json", trace.to_json())
    np.save(out / "output.npy", out_arr)
    print(f"mse {trace.mse:.6g}, bootstraps {trace.bootstraps}, "
          f"latency {trace.simulated_latency:.6g}")
    _write_manifest(
        out / "manifest.json", "simulate", argv,
        {"profile": args.profile, "frac_bits": args.frac_bits,
         "noise_std": args.noise_std},
        {"graph": args.graph, "weights": args.weights, "inputs": args.inputs},
        {"trace": str(out / "trace.csv"), "summary": str(out / "summary.json"),
         "output": str(out / "output.npy")},
        seed, t0,
    )
    return 0


def _cmd_report(args, argv) -> int:
    t0 = time.time()
    runs = Path(args.runs)
    if not runs.is_dir():
        raise CliInputError(f"{runs} is not a directory")
    pairs: dict[str, dict] = {}
    for child in sorted(runs.iterdir()):
        summary = child / "summary.json"
        if not (child.is_dir() and summary.exists()):
            continue
        for suffix, slot in (("_with", "with"), ("_without", "without")):
            if child.name.endswith(suffix):
                stem = child.name[: -len(suffix)]
                pairs.setdefault(stem, {})[slot] = _load_json(summary)
    lines = ["label,bootstraps_with,bootstraps_without,ratio,"
             "latency_with,latency_without,total_speedup"]
    n_pairs = 0
    for stem in sorted(pairs):
        sides = pairs[stem]
        if "with" not in sides or "without" not in sides:
            continue
        n_pairs += 1
        bw = sides["with"]["bootstraps"]
        bwo = sides["without"]["bootstraps"]
        lw = sides["with"]["latency"]["total"]
        lwo = sides["without"]["latency"]["total"]
        ratio = bw / bwo if bwo else float("inf")
        speedup = lw / lwo if lwo else float("inf")
        lines.append(f"{stem},{bw},{bwo},{_fmt(ratio)},{_fmt(lw)},{_fmt(lwo)},"
                     f"{_fmt(speedup)}")
    if n_pairs == 0:
        raise CliInputError(
            f"no <label>_with / <label>_without analysis pairs under {runs}")
    if args.out:
        _write_text(args.out, "\n".join(lines) + "\n")
        print(f"{n_pairs} run pairs -> {args.out}")
        _write_manifest(
            _sibling_manifest(args.out), "report", argv, {},
            {"runs": str(runs)}, {"report": str(args.out)}, None, t0,
        )
    else:
        for line in lines:
            print(line)
    return 0


def _cmd_rerun(args, argv) -> int:
    doc = _load_json(args.manifest)
    if "argv" not in doc:
        raise CliInputError(f"{args.manifest}: not a run manifest (no argv)")
    replay = [str(a) for a in doc["argv"]]
    if doc.get("seed") is not None and "--seed" not in replay:
        replay += ["--seed", str(doc["seed"])]
    return main(replay)


# ---------------------------------------------------------------- parser


def _add_profile_flag(p):
    p.add_argument("--profile", help="JSON file overriding evaluation profile fields")


def build_parser() -> CliParser:
    parser = CliParser(prog="polyckt",
                       description="HE-friendly network toolkit")
    parser.add_argument("--version", action="version",
                        version=f"polyckt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("approx", help="fit a polynomial to an activation")
    p.add_argument("--fn", choices=sorted(pa.TARGET_FNS), required=True,
                   help="activation to approximate")
    p.add_argument("--degree", type=int, required=True, help="polynomial degree")
    p.add_argument("--range", default="-1,1", help="fit interval as 'a,b'")
    p.add_argument("--method", choices=("remez", "lstsq"), default="remez",
                   help="fitting method")
    p.add_argument("--grid", type=int, default=4096,
                   help="evaluation grid size for the fit")
    p.add_argument("--range-sweep", metavar="A1,B1..A2,B2,STEPS",
                   help="sweep the interval and emit one row per step")
    p.add_argument("--out", help="write a CSV report here")
    p.add_argument("--poly-out", help="write the coefficient record here")
    p.set_defaults(func=_cmd_approx)

    p = sub.add_parser("build", help="construct a toy network")
    p.add_argument("--arch", choices=("resnet", "convnext"), default="resnet",
                   help="block structure")
    p.add_argument("--blocks", type=int, default=3, help="number of blocks")
    p.add_argument("--channels", type=int, default=16, help="channels per block")
    p.add_argument("--image-size", type=int, default=32, help="input height and width")
    p.add_argument("--classes", type=int, default=4, help="output classes")
    p.add_argument("--expand", type=int, default=2,
                   help="channel expansion inside convnext blocks")
    p.add_argument("--degree", type=int,
                   help="fit activations at this degree instead of keeping relu/gelu")
    p.add_argument("--fit-range", default="-4,4", help="fit interval as 'a,b'")
    p.add_argument("--seed", type=int, help="weight init seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("train", help="range-aware training then polynomial replacement")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", default="synthetic",
                   help="dataset spec: 'synthetic', a CIFAR .bin, or 'imgs.idx,labels.idx'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--lr-post", type=float, help="fine-tune learning rate")
    p.add_argument("--batch-size", type=int, help="minibatch size")
    p.add_argument("--epochs-pretrain", type=int, help="pretraining epochs")
    p.add_argument("--epochs-range", type=int, help="range-tuning epochs")
    p.add_argument("--epochs-post", type=int, help="post-replacement epochs")
    p.add_argument("--w-pre", type=float, help="range loss weight while tuning")
    p.add_argument("--w-post", type=float, help="range loss weight after replacement")
    p.add_argument("--degree", type=int, help="replacement polynomial degree")
    p.add_argument("--method", choices=("remez", "lstsq"), help="fitting method")
    p.add_argument("--quantile", type=float, help="range estimation quantile")
    p.add_argument("--margin", type=float, help="range widening fraction")
    p.add_argument("--q", type=float, help="range loss norm order")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("polyfy", help="fit per-layer polynomials on estimated ranges")
    p.add_argument("--graph", required=True, help="input graph JSON")
    p.add_argument("--weights", required=True, help="input weights file")
    p.add_argument("--data", default="synthetic", help="dataset spec for range estimation")
    p.add_argument("--n", type=int, default=512, help="synthetic dataset size")
    p.add_argument("--image-size", type=int, default=32, help="synthetic image size")
    p.add_argument("--limit", type=int, default=256, help="samples used for ranges")
    p.add_argument("--batch-size", type=int, default=64, help="collection batch size")
    p.add_argument("--degree", type=int, required=True, help="polynomial degree")
    p.add_argument("--method", choices=("remez", "lstsq"), default="remez",
                   help="fitting method")
    p.add_argument("--quantile", type=float, default=1.0,
                   help="per-sample magnitude quantile kept")
    p.add_argument("--margin", type=float, default=0.05,
                   help="fractional widening of estimated ranges")
    p.add_argument("--seed", type=int, help="synthetic data seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_polyfy)

    p = sub.add_parser("analyze", help="propagate chain indices and report costs")
    p.add_argument("--graph", required=True, help="input graph JSON")
    _add_profile_flag(p)
    p.add_argument("--out", help="output directory for nodes.csv and summary.json")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("place-skips", help="plan skip connections at minimum cost")
    p.add_argument("--graph", required=True, help="input graph JSON")
    _add_profile_flag(p)
    p.add_argument("--budget", type=float, help="cap on summed planned cost")
    p.add_argument("--min-skips", type=int, default=0,
                   help="placements made before the budget applies")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_place_skips)

    p = sub.add_parser("remove-skips", help="emit the annealed removal schedule")
    p.add_argument("--n", type=int, required=True, help="schedule length in epochs")
    p.add_argument("--out", help="write the schedule CSV here")
    p.add_argument("--graph", help="also rescale this graph's skips")
    p.add_argument("--a", type=float, help="skip scale to apply to --graph")
    p.add_argument("--out-graph", help="where to write the rescaled graph")
    p.set_defaults(func=_cmd_remove_skips)

    p = sub.add_parser("simulate", help="fixed-precision mock-encrypted evaluation")
    p.add_argument("--graph", required=True, help="input graph JSON")
    p.add_argument("--weights", required=True, help="input weights file")
    p.add_argument("--inputs", required=True, help="input samples (.npy or IDX)")
    _add_profile_flag(p)
    p.add_argument("--frac-bits", type=int, help="fractional precision override")
    p.add_argument("--noise-std", type=float, default=0.0,
                   help="optional additive noise at quantization points")
    p.add_argument("--seed", type=int, help="noise seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("report", help="aggregate with/without analysis pairs")
    p.add_argument("--runs", required=True,
                   help="directory holding <label>_with and <label>_without runs")
    p.add_argument("--out", help="write the ratio table CSV here")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("rerun", help="replay a previous run from its manifest")
    p.add_argument("--manifest", required=True, help="manifest JSON to replay")
    p.set_defaults(func=_cmd_rerun)

    return parser


def _print_error(exc):
    text = str(exc) or exc.__class__.__name__
    sys.stderr.write(f"error: {text.splitlines()[0]}\n")


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else [str(a) for a in argv]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (tr.TrainingError, hs.SimulationError, nc.NonFiniteError,
            NumericFailure) as exc:
        _print_error(exc)
        return 3
    except (ds.DatasetError, ng.GraphError, hc.AnalysisError, OSError,
            ValueError, KeyError) as exc:
        _print_error(exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
