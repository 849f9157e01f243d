"""
Training a calibrator and calibrating a single mask
===================================================

The model embeds every view with a small CNN, refines the embeddings with a
graph network over the template graph and scores (query, template) links. The
best template's homography is the anchor; a small regression head then
predicts a residual homography that is composed with it. Training first fits
the link scores alone (warmup) and then trains through the warp of the BEV.

This run is tiny so it finishes in a few minutes on one core. Expect modest
numbers; the point is the workflow.
"""
import json
import sys
from pathlib import Path

import numpy as np

from topocalib.geometry import Intrinsics
from topocalib.pipeline import (
    RunConfig,
    calibrate,
    collect_evaluations,
    emit_report,
    load_model,
    run_build_graph,
    run_evaluate,
    run_generate,
    run_train,
)
from topocalib.scene import MergeMap

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "run"

# %%
# Everything a run needs lives in one configuration; the same JSON drives the
# ``topocalib generate`` command.
cfg = RunConfig.from_json({
    "scene": {"kind": "procedural", "seed": 2, "spec": {"size": [128, 128], "meters_per_pixel": 0.5}},
    "datagen": {"views": 400, "candidates": 600, "out_size": [64, 64], "focal": [150, 300], "seed": 0},
    "graph": {"k": 10},
    "model": {"image_size": [64, 64], "extractor": {"out_dim": 64}, "gnn": {"hidden": 32, "out_dim": 64}},
    "train": {"warmup_epochs": 8, "max_epochs": 8, "batch_size": 16, "fanouts": [5, 3], "seed": 1},
})
run = run_generate(cfg, root)
graph = run_build_graph(run)
print("views per split", run.manifest().split_counts())

# %%
# Warmup logs the held-out link ROC-AUC; the end-to-end phase logs the
# validation IoU of the warped BEV.
name, model, history = run_train(run)
for rec in history:
    metric = rec.get("val_auc", rec.get("val_iou"))
    print(f"{rec['phase']:8s} epoch {rec['epoch']:2d}  loss {rec['loss']:.4f}  metric {metric:.4f}")

# %%
# Test IoU with the residual head and with the anchor alone.
full = run_evaluate(run, "test", overlays=4)
anchor = run_evaluate(run, "test", anchor_only=True)
print(f"test IoU {full['mean_iou']:.4f}, anchor-only {anchor['mean_iou']:.4f}")
print(emit_report(collect_evaluations([run.root])))

# %%
# Calibrating one mask. Real segmenters often predict extra classes; a merge
# map folds them into the scene palette before matching. Here class 4 plays
# the role of "car" and is merged into road.
_, model, data = load_model(run)
labels = data.labels[data.test[0]].copy()
road = data.bev.palette.id_of("road")
labels[(labels == road) & (np.indices(labels.shape).sum(0) % 7 == 0)] = 4
merge = MergeMap({0: 0, 1: 1, 2: 2, 3: 3, 4: road})
# K is a guess here, since views span a range of focal lengths. The pose
# recovery warns when the predicted H does not fit a plane camera with this K.
K = Intrinsics.centered(220.0, (64, 64))
res = calibrate(labels, model, data, K, merge=merge)
print(json.dumps({k: v for k, v in res.to_json().items() if k != "topk"}, indent=1))
