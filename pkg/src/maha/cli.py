"""Command-line entry point: bench, train, ablate, gradcheck, heatmap.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 divergence.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as C
from . import tensor as T
from ._io import atomic_write, write_csv
from .aggregate import METHODS
from .errors import ConfigError, DivergenceError, ShapeError
from .flops import (
    FULL_MACS, POLICIES, SCORE_ENTRIES, TIMING_HEADER, bench_sweep, timing_sweep, write_bench_csv,
)
from .heatmap import HeatmapSpec, export_heatmap

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides output.directory)")
    common.add_argument("--seed", type=int)
    common.add_argument("--task")
    common.add_argument("--agg", choices=METHODS + ("all",))
    common.add_argument("--scales", type=_int_list, help="comma list: depths for ablate, scale indices for heatmap")
    common.add_argument("--lengths", type=_int_list, help="comma list of sequence lengths for bench")
    common.add_argument("--policy", choices=POLICIES)
    common.add_argument("--metric", choices=(SCORE_ENTRIES, FULL_MACS))
    common.add_argument("--format", choices=("csv", "pgm"))
    common.add_argument("--steps", type=int, help="training steps (overrides train.steps)")

    parser = argparse.ArgumentParser(prog="maha", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("bench", parents=[common], help="FLOPs sweep (flops.csv) and optional timing")
    sub.add_parser("train", parents=[common], help="train the toy model (loss_curve.csv, weights.csv)")
    sub.add_parser("ablate", parents=[common], help="aggregation-method and scale-count ablations")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference checks on a tiny config")
    hm = sub.add_parser("heatmap", parents=[common], help="export per-scale attention maps")
    hm.add_argument("--layer", type=int, help="layer index (overrides output.layer)")
    hm.add_argument("--train", action="store_true", help="train for train.steps before exporting")
    return parser


def resolve(args):
    cfg, raw = C.load(args.config)
    C.override(cfg, "output", "directory", args.out)
    C.override(cfg, "train", "seed", args.seed)
    C.override(cfg, "train", "task", args.task)
    C.override(cfg, "train", "steps", args.steps)
    C.override(cfg, "solver", "method", args.agg)
    C.override(cfg, "bench", "lengths", args.lengths)
    C.override(cfg, "bench", "policy", args.policy)
    C.override(cfg, "bench", "metric", args.metric)
    if args.format is not None:
        cfg["output"]["formats"] = [args.format]
    if args.scales is not None:
        key = ("output", "heatmap_scales") if args.command == "heatmap" else ("train", "scales")
        C.override(cfg, *key, args.scales)
    if args.command == "heatmap" and args.layer is not None:
        cfg["output"]["layer"] = args.layer
    if args.command == "gradcheck":
        explicit = raw.get("model", {})
        for key, value in C.GRADCHECK_MODEL.items():
            if key not in explicit:
                cfg["model"][key] = value
    return C.validate(cfg)


def _outdir(cfg):
    out = cfg["output"]["directory"]
    os.makedirs(out, exist_ok=True)
    atomic_write(os.path.join(out, "config.resolved.json"), C.dumps(cfg))
    return out


def _methods(cfg):
    method = cfg["solver"]["method"]
    return list(METHODS) if method == "all" else [method]


# ---------------------------------------------------------------- commands

def cmd_bench(cfg):
    b = cfg["bench"]
    lengths = b["lengths"]
    if not lengths:
        raise ConfigError("bench.lengths is empty")
    policies = POLICIES if b["policy"] == "both" else (b["policy"],)
    metrics = (SCORE_ENTRIES, FULL_MACS) if b["metric"] == FULL_MACS else (SCORE_ENTRIES,)
    m = cfg["model"]
    rows = bench_sweep(lengths, d=b["d"], r=m["r"], L=m["L"], policies=policies, metrics=metrics,
                       kind=m["downsample_kind"], iters=cfg["solver"]["iters"],
                       include_base=m["include_base_scale"])
    out = _outdir(cfg)
    write_bench_csv(os.path.join(out, "flops.csv"), rows)
    for row in rows:
        if row.degenerate:
            print(f"note: n={row.n} {row.policy}/{row.metric}: no scale below n fits, "
                  f"cost ratio {row.ratio:.3f}", file=sys.stderr)
        if row.metric == SCORE_ENTRIES and row.n == max(lengths):
            print(f"n={row.n} {row.policy}: baseline={row.baseline} maha={row.maha} "
                  f"reduction={row.reduction_pct:.2f}%")
    if b["timing"]:
        trows = []
        for policy in policies:
            for n, t_full, t_maha in timing_sweep(b["timing_lengths"], r=m["r"], L=m["L"], policy=policy,
                                                  seed=cfg["train"]["seed"]):
                trows.append((n, policy, t_full, t_maha))
        write_csv(os.path.join(out, "timing.csv"), TIMING_HEADER, trows)
    return EXIT_OK


def _log_progress(method, every=100):
    def log(step, loss):
        if step % every == 0:
            print(f"[{method}] step {step} loss {loss:.4f}", file=sys.stderr)
    return log


def _write_traces(out, traces, cfg):
    loss_rows, weight_rows = [], []
    n_scales = None
    for method, trace in traces.items():
        for step, (loss, w) in enumerate(zip(trace.losses, trace.weights)):
            loss_rows.append((method, step, loss))
            w = np.asarray(w)
            n_scales = w.shape[1]
            for layer, row in enumerate(w):
                weight_rows.append((method, step, layer, *row.tolist()))
    write_csv(os.path.join(out, "loss_curve.csv"), ("method", "step", "loss"), loss_rows)
    n_scales = n_scales or cfg["model"]["L"] + int(cfg["model"]["include_base_scale"])
    write_csv(os.path.join(out, "weights.csv"),
              ("method", "step", "layer", *(f"w_{l}" for l in range(1, n_scales + 1))), weight_rows)


def cmd_train(cfg):
    from .toymodel import train

    out = _outdir(cfg)
    traces = {}
    for method in _methods(cfg):
        traces[method] = train(C.toy_config(cfg, method), log=_log_progress(method))
        t = traces[method]
        print(f"{method}: first loss {t.losses[0]:.4f} last loss {t.losses[-1]:.4f} "
              f"metric {t.final_metric:.3f}" if t.losses else f"{method}: no steps")
    _write_traces(out, traces, cfg)
    return EXIT_OK


def cmd_ablate(cfg):
    from .toymodel import ABLATION_HEADER, SCALES_HEADER, ablate_aggregation, ablate_scales

    out = _outdir(cfg)
    toy = C.toy_config(cfg, "co")
    rows, traces = ablate_aggregation(toy, methods=_methods(cfg))
    write_csv(os.path.join(out, "aggregation.csv"), ABLATION_HEADER, rows)
    _write_traces(out, traces, cfg)
    for row in rows:
        print(f"{row[0]}: final loss {row[1]:.4f} reduction {row[2]:.3f} relative time {row[5]:.2f}")
    scales = cfg["train"]["scales"]
    if scales:
        srows = ablate_scales(toy, scales)
        write_csv(os.path.join(out, "scales.csv"), SCALES_HEADER, srows)
    return EXIT_OK


def cmd_gradcheck(cfg):
    from .checks import run_all

    m = cfg["model"]
    if m["n"] > C.GRADCHECK_MAX_N:
        raise ConfigError(f"gradcheck needs a tiny config (n <= {C.GRADCHECK_MAX_N}), got n={m['n']}")
    out = _outdir(cfg)
    rows, ok = [], True
    for result in run_all(n=m["n"], d=m["d"], d_k=m["d_k"], L=m["L"], seed=cfg["train"]["seed"]):
        rep = result.report
        print(f"[{result.name}] {rep} ({result.seconds:.1f}s)")
        for name, err in rep.errors.items():
            rows.append((result.name, name, err, rep.tolerance, err < rep.tolerance))
        ok = ok and rep.passed
        if not rep.passed:
            for name, err in rep.failures().items():
                print(f"FAILED {name}: relative error {err:.3e} (tol {rep.tolerance:g})", file=sys.stderr)
    write_csv(os.path.join(out, "gradcheck.csv"), ("suite", "group", "rel_error", "tol", "passed"), rows)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_heatmap(cfg, train_first=False):
    from .toymodel import ToyModel, make_task, train

    o = cfg["output"]
    toy = C.toy_config(cfg, cfg["solver"]["method"] if cfg["solver"]["method"] != "all" else "co")
    schedule = toy.schedule()
    valid = ([0] if schedule.include_base_scale else []) + list(range(1, schedule.L + 1))
    scales = o["heatmap_scales"] or valid
    specs = [HeatmapSpec(scale=s, normalization=o["normalization"], format=f) for s in scales for f in o["formats"]]
    for s in scales:
        if s not in valid:
            raise ConfigError(f"scale {s} not in {valid}")
    if not 0 <= o["layer"] < toy.layers:
        raise ConfigError(f"layer {o['layer']} outside 0..{toy.layers - 1}")
    task = make_task(toy.task, toy.n, seed=toy.seed + 1, vocab=toy.vocab, shift=toy.shift)
    model = ToyModel(toy, n_classes=task.n_classes)
    if train_first:
        train(toy, task=task, model=model)
    tokens, _ = make_task(toy.task, toy.n, seed=toy.seed + 2, vocab=toy.vocab, shift=toy.shift).sample()
    with T.no_grad():
        _, outs = model.forward(tokens)
    attn = outs[o["layer"]].scales.attn
    out = _outdir(cfg)
    for spec in specs:
        a = attn[valid.index(spec.scale)]
        name = f"scale_{spec.scale}_layer_{o['layer']}.{spec.format}"
        atomic_write(os.path.join(out, name), export_heatmap(a, spec))
    print(f"wrote {len(specs)} heatmap file(s) to {out}")
    return EXIT_OK


COMMANDS = {
    "bench": cmd_bench,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "heatmap": cmd_heatmap,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command == "heatmap":
            return cmd_heatmap(cfg, train_first=args.train)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
