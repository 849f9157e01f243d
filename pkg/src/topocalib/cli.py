"""Command-line entry point: generate, build-graph, train, evaluate, calibrate, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import Intrinsics
from .models import EXTRACTORS, GNNS
from .pipeline import (
    RunConfig,
    RunDir,
    calibrate,
    calibrate_many,
    collect_evaluations,
    emit_report,
    load_model,
    run_build_graph,
    run_cycles,
    run_evaluate,
    run_generate,
    run_train,
)
from .scene import MergeMap


def _threads() -> None:
    n = os.environ.get("CALIB_NUM_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _dump(obj, out) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_generate(a) -> None:
    cfg = RunConfig.load(a.config)
    run = run_generate(cfg, a.out, base_dir=Path(a.config).parent)
    counts = run.manifest().split_counts()
    print(json.dumps({"run": str(run.root), "splits": counts}))


def cmd_build_graph(a) -> None:
    graph = run_build_graph(RunDir(a.run), a.k)
    print(json.dumps({"nodes": len(graph.ids), "k": graph.k, "edges": int(graph.neighbors.size)}))


def cmd_train(a) -> None:
    if a.all_cycles:
        results = run_cycles(RunDir(a.run), gnn=a.gnn, extractor=a.extractor, seed=a.seed)
        print(json.dumps([{k: r[k] for k in ("model", "cycle", "mean_iou", "std_iou", "path")} for r in results]))
        return
    name, _, history = run_train(RunDir(a.run), gnn=a.gnn, extractor=a.extractor, seed=a.seed, cycle=a.cycle)
    last = history[-1] if history else {}
    print(json.dumps({"model": name, "last": last}))


def cmd_evaluate(a) -> None:
    res = run_evaluate(RunDir(a.run), a.split, a.anchor_only, a.model, a.overlays)
    print(json.dumps({k: res[k] for k in ("model", "split", "anchor_only", "mean_iou", "std_iou", "n", "path")}))


def cmd_calibrate(a) -> None:
    run = RunDir(a.run)
    _, model, data = load_model(run, a.model)
    with open(a.intrinsics) as f:
        K = Intrinsics.from_json(json.load(f))
    images = []
    for path in a.image:
        with Image.open(path) as im:
            images.append(np.asarray(im.convert("RGB") if im.mode in ("RGB", "RGBA") else im))
    merge = MergeMap.load(a.merge_map) if a.merge_map else None
    if len(images) == 1:
        _dump(calibrate(images[0], model, data, K, merge).to_json(), a.out)
    else:
        results = calibrate_many(images, model, data, K, merge)
        _dump([dict(r.to_json(), image=str(p)) for r, p in zip(results, a.image)], a.out)


def cmd_report(a) -> None:
    text = emit_report(collect_evaluations(a.runs, a.split), a.format)
    if a.out:
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topocalib", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render BEV, camera grid and splits into a run directory")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build-graph", help="top-k template graph over the run's views")
    b.add_argument("--run", required=True)
    b.add_argument("--k", type=int, default=None)
    b.set_defaults(func=cmd_build_graph)

    t = sub.add_parser("train", help="warmup then end-to-end training")
    t.add_argument("--run", required=True)
    t.add_argument("--gnn", choices=GNNS, default=None)
    t.add_argument("--extractor", choices=EXTRACTORS, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--cycle", type=int, default=0, help="train on the resampled splits of this cycle")
    t.add_argument("--all-cycles", action="store_true", help="train and evaluate every cycle in train.cycles")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="IoU of warped BEV against a split")
    e.add_argument("--run", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--anchor-only", action="store_true")
    e.add_argument("--model", default=None, help="trained model name (default: latest)")
    e.add_argument("--overlays", type=int, default=0, help="write overlay PNGs for the first N samples")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("calibrate", help="homography and extrinsics for one mask")
    c.add_argument("--run", required=True)
    c.add_argument("--image", required=True, nargs="+", help="one or more masks")
    c.add_argument("--merge-map", default=None)
    c.add_argument("--intrinsics", required=True)
    c.add_argument("--model", default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("report", help="mean±std IoU table over runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    r.add_argument("--split", default="test")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _threads()
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
