"""Command-line entry point: ``bayesgrid <subcommand> [options]``.

Every subcommand reads an optional JSON config (``--config``) whose
sections are ``data``, ``train``, ``detector``, ``mc`` and ``eval``. Any
value can be overridden with ``--set section.key=value``; values are parsed
as JSON when possible and kept as strings otherwise. Relative output paths
are resolved under ``$BAYESGRID_OUT`` when it is set.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from bayesgrid.errors import DataError, NonFiniteError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "BAYESGRID_OUT"

DEFAULTS = {
    "data": {"root": "data", "train": 2000, "val": 500, "test": 500, "seed": 0, "regime": "day", "split": "val"},
    "train": {},
    "detector": {},
    "mc": {"T": 20, "base_seed": 0, "ddof": 0},
    "eval": {},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()):
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        for section, values in user.items():
            if section not in cfg or not isinstance(values, dict):
                raise UsageError(f"unknown config section {section!r}")
            cfg[section].update(values)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in cfg:
            raise UsageError(f"bad override {item!r}; expected section.key=value")
        cfg[section][name] = _parse_value(value)
    return cfg


def out_path(path):
    root = os.environ.get(OUT_ENV)
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _mc(cfg, deterministic=False):
    from bayesgrid.bayes import McConfig

    return McConfig(**{**cfg["mc"], "deterministic": deterministic})


def _eval_settings(cfg):
    from bayesgrid.evalkit import EvalSettings

    values = dict(cfg["eval"])
    for key in ("ignore_classes", "eval_classes"):
        if values.get(key) is not None:
            values[key] = frozenset(values[key])
    if "fppi_range" in values:
        values["fppi_range"] = tuple(values["fppi_range"])
    return EvalSettings(**values)


def _split(cfg, args):
    from bayesgrid.synthdata import load_split

    return load_split(args.data or cfg["data"]["root"], args.split or cfg["data"]["split"])


def _net(args):
    from bayesgrid.pipeline import load_network

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_network(args.checkpoint)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, args):
    from bayesgrid.synthdata import SceneConfig, write_dataset

    d = cfg["data"]
    root = out_path(args.out or d["root"])
    splits = {}
    for name in ("train", "val", "test"):
        if d.get(name):
            splits[name] = (SceneConfig(seed=d["seed"], split=name, regime=d["regime"]), int(d[name]))
    if d.get("night_test"):
        splits["test_night"] = (SceneConfig(seed=d["seed"], split="test", regime="night"), int(d["night_test"]))
    manifest = write_dataset(root, splits)
    print(f"wrote {sum(v['count'] for v in manifest['splits'].values())} scenes to {root}")
    print(f"content hash {manifest['content_hash']}")


def cmd_fit_priors(cfg, args):
    from bayesgrid.network import DetectorConfig
    from bayesgrid.pipeline import fit_prior_sizes
    from bayesgrid.synthdata import load_split

    strides = DetectorConfig(**cfg["detector"]).strides
    ds = load_split(args.data or cfg["data"]["root"], "train")
    sizes = fit_prior_sizes(ds, strides, seed=cfg["train"].get("kmeans_seed", 0))
    text = json.dumps({"detector": {"prior_sizes": [[round(w, 4), round(h, 4)] for w, h in sizes]}}, indent=1)
    if args.out:
        with open(out_path(args.out), "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_train(cfg, args):
    from bayesgrid.pipeline import TrainConfig, select_checkpoint, train

    values = {**cfg["train"], "detector": cfg["detector"]}
    values.setdefault("data_root", args.data or cfg["data"]["root"])
    values["out_dir"] = out_path(args.out or values.get("out_dir") or "run")
    tc = TrainConfig(**values)
    result = train(tc, resume_from=args.resume)
    if result.checkpoints:
        best = select_checkpoint(result.checkpoints)
        print(f"best checkpoint: iteration {best.iteration}, val LAMR {best.val_lamr:.4f}, {best.path}")
        with open(os.path.join(tc.out_dir, "best.json"), "w") as fh:
            json.dump(asdict(best), fh, indent=1)
    print(f"trained to iteration {result.log[-1]['iteration'] if result.log else 0}; logs in {tc.out_dir}")


def _write_dets(path, dets):
    from bayesgrid.postprocess import write_detections_csv, write_detections_jsonl

    (write_detections_jsonl if path.endswith(".jsonl") else write_detections_csv)(path, dets)


def _infer(cfg, args, deterministic):
    from bayesgrid.pipeline import run_inference

    net = _net(args)
    ds = _split(cfg, args)
    res = run_inference(net, ds, _mc(cfg, deterministic), score_threshold=args.score_threshold, limit=args.limit)
    dets = [d for k in res.detections for d in res.detections[k]]
    return net, ds, res, dets


def cmd_predict(cfg, args):
    _, _, _, dets = _infer(cfg, args, deterministic=True)
    path = out_path(args.out or "detections.csv")
    _write_dets(path, dets)
    print(f"{len(dets)} detections -> {path}")


def cmd_mc_infer(cfg, args):
    from bayesgrid.bayes import write_summary_csv

    net, ds, res, dets = _infer(cfg, args, deterministic=False)
    path = out_path(args.out or "mc_detections.jsonl")
    _write_dets(path, dets)
    print(f"{len(dets)} detections -> {path}")
    if args.summaries:
        spath = out_path(args.summaries)
        write_summary_csv(spath, res.summaries, net.priors, list(res.gts))
        print(f"per-slot summaries -> {spath}")


def cmd_evaluate(cfg, args):
    from bayesgrid.evalkit import evaluate_detections, metrics_report, write_curve_csv, is_countable
    from bayesgrid.postprocess import read_detections_csv, read_detections_jsonl

    if not args.detections:
        raise UsageError("--detections is required")
    ds = _split(cfg, args)
    reader = read_detections_jsonl if args.detections.endswith(".jsonl") else read_detections_csv
    try:
        dets = reader(args.detections)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read detections {args.detections}: {exc}") from None
    gts = {k: ds.ground_truths(i) for i, k in enumerate(ds.ids)}
    by_image = {}
    for d in dets:
        by_image.setdefault(d.provenance.image, []).append(d)
    settings = _eval_settings(cfg)
    _, curve, value = evaluate_detections(by_image, gts, settings)
    n_gt = sum(is_countable(g, settings) for v in gts.values() for g in v)
    print(metrics_report(curve, value, len(gts), n_gt))
    if args.out:
        write_curve_csv(out_path(args.out), curve)
        _curve_svg(curve, out_path(os.path.splitext(args.out)[0] + ".svg"))


def _curve_svg(curve, path):
    from bayesgrid.svgplot import line_chart, write_svg

    xs = [c.fppi for c in curve]
    ys = [c.miss_rate for c in curve]
    write_svg(path, line_chart({"detector": (xs, ys)}, "miss rate vs FPPI", "FPPI", "miss rate", logx=True, logy=True))


def cmd_analyze(cfg, args):
    from bayesgrid.evalkit import (assign_for_analysis, correlation_report, iou_uncertainty_bins,
                                   objectness_mi_contrast, occlusion_correlation, write_bins_csv,
                                   write_correlation_csv)
    from bayesgrid.svgplot import line_chart, write_svg

    net, ds, res, dets = _infer(cfg, args, deterministic=False)
    gts = list(res.gts.values())
    assignments = assign_for_analysis(gts, net.geometry, net.priors)
    table = occlusion_correlation(assignments, res.summaries, gts)
    print(correlation_report(table))
    bins, edges = iou_uncertainty_bins(dets, res.gts, args.bin_width)
    fg, bg = objectness_mi_contrast(res.summaries, res.detections, res.gts, net.geometry, net.priors,
                                    _eval_settings(cfg))
    fg_all = [v for vals in fg.values() for v in vals]
    bg_all = [v for vals in bg.values() for v in vals]
    print(f"objectness MI: matched {np.mean(fg_all) if fg_all else float('nan'):.3e} (n={len(fg_all)}), "
          f"background {np.mean(bg_all) if bg_all else float('nan'):.3e} (n={len(bg_all)})")
    prefix = out_path(args.out or "analysis")
    write_correlation_csv(prefix + "_occlusion.csv", table)
    write_bins_csv(prefix + "_iou_bins.csv", bins, edges)
    series = {}
    for prior in sorted(bins):
        idx = sorted(bins[prior])
        series[f"prior {prior + 1}"] = ([0.5 * (edges[b] + edges[b + 1]) for b in idx],
                                        [bins[prior][b]["total"] for b in idx])
    write_svg(prefix + "_iou_bins.svg",
              line_chart(series, "total variance vs IoU", "IoU with best gt", "mean total variance", logy=True))
    print(f"tables and plots -> {prefix}_*")


def cmd_timing(cfg, args):
    from bayesgrid.pipeline import timing_sweep, timing_table

    net = _net(args)
    ds = _split(cfg, args)
    Ts = tuple(int(t) for t in args.T.split(","))
    rows = timing_sweep(net, ds, Ts, repeats=args.repeats, lamr_limit=args.limit if args.lamr else -1,
                        base_seed=cfg["mc"]["base_seed"], settings=_eval_settings(cfg))
    table = timing_table(rows)
    print(table)
    if args.out:
        with open(out_path(args.out), "w") as fh:
            fh.write(table + "\n")


def cmd_heatmap(cfg, args):
    from bayesgrid.bayes import summarize
    from bayesgrid.pipeline import HEATMAP_MEASURES, render_heatmaps, write_ppm

    net = _net(args)
    ds = _split(cfg, args)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index must be in [0, {len(ds)})")
    summaries = summarize(net, ds.images[args.index], _mc(cfg))
    measures = HEATMAP_MEASURES if args.measure == "all" else (args.measure,)
    priors = [p.global_id for p in net.priors] if args.prior < 0 else [args.prior]
    prefix = out_path(args.out or f"heatmap_{ds.ids[args.index]}")
    for m in measures:
        for pid in priors:
            rgb = render_heatmaps(summaries, ds.images[args.index], m, pid, net.geometry, net.priors)
            write_ppm(f"{prefix}_{m}_prior{pid + 1}.ppm", rgb)
    print(f"{len(measures) * len(priors)} overlays -> {prefix}_*.ppm")


def cmd_gradcheck(cfg, args):
    from bayesgrid.pipeline import detector_gradcheck

    rep = detector_gradcheck(seed=args.seed, h=args.step)
    print(f"checked {rep.checked} weights in {rep.seconds:.1f}s; max relative error {rep.max_rel_error:.3e} "
          f"({rep.worst_parameter})")
    if rep.max_rel_error >= args.tolerance:
        raise NonFiniteError(f"gradient check failed: {rep.max_rel_error:.3e} >= {args.tolerance}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic dataset"),
    "fit-priors": (cmd_fit_priors, "fit prior box sizes with IoU k-means"),
    "train": (cmd_train, "two-phase training with periodic validation"),
    "predict": (cmd_predict, "deterministic detections"),
    "mc-infer": (cmd_mc_infer, "MC dropout detections with uncertainties"),
    "evaluate": (cmd_evaluate, "LAMR and MR/FPPI for a detection dump"),
    "analyze": (cmd_analyze, "occlusion correlation and IoU binning"),
    "timing": (cmd_timing, "latency per number of stochastic passes"),
    "heatmap": (cmd_heatmap, "per-cell uncertainty overlays"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the full loss"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="bayesgrid", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", help="output path or prefix")
        if name not in ("gen-data", "gradcheck"):
            p.add_argument("--data", help="dataset root (default: data.root)")
        if name in ("predict", "mc-infer", "evaluate", "analyze", "timing", "heatmap"):
            p.add_argument("--split", help="split name (default: data.split)")
        if name in ("predict", "mc-infer", "analyze", "timing", "heatmap"):
            p.add_argument("--checkpoint")
        if name in ("predict", "mc-infer", "analyze"):
            p.add_argument("--score-threshold", type=float, default=0.01)
        if name in ("predict", "mc-infer", "analyze", "timing"):
            p.add_argument("--limit", type=int, default=0, help="use only the first N images")
    sub.choices["train"].add_argument("--resume", help="checkpoint to resume from")
    sub.choices["mc-infer"].add_argument("--summaries", help="also write per-slot summaries CSV")
    sub.choices["evaluate"].add_argument("--detections")
    sub.choices["analyze"].add_argument("--bin-width", type=float, default=0.1)
    t = sub.choices["timing"]
    t.add_argument("--T", default="1,5,10,20,50")
    t.add_argument("--repeats", type=int, default=20)
    t.add_argument("--lamr", action="store_true", help="also evaluate LAMR per T")
    h = sub.choices["heatmap"]
    h.add_argument("--index", type=int, default=0)
    h.add_argument("--measure", default="all")
    h.add_argument("--prior", type=int, default=-1, help="global prior id (default: all)")
    g = sub.choices["gradcheck"]
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-3)
    g.add_argument("--step", type=float, default=1e-4, help="central-difference step")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command][0](cfg, args)
    except (UsageError, TypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
