"""Run directories, run configuration, single-image calibration and reports.

A run directory holds one scene and its synthetic view set::

    run/config.json                 sections scene, datagen, graph, model, loss, train
    run/scene/bev.png, scene.json   BEV raster (palette colors) and its metadata
    run/data/                       manifest.json, manifest.jsonl, images/*.png
    run/graph/                      edges.csv, graph.json, cache/
    run/cycles/c<i>/graph/          graph over the resampled splits of cycle i > 0
    run/train/<name>/               metrics.jsonl, checkpoint.bin, model.bin, run.json
    run/eval/<name>_<split>[_anchor].json
"""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datagen import CameraGrid, DatasetManifest, generate_dataset, num_workers, sample_camera_grid, split_dataset
from .geometry import Extrinsics, Homography, Intrinsics, decompose_homography, warp_labels
from .graph import TemplateGraph, build_graph
from .losses import LossConfig, iou
from .models import CalibNet, load_checkpoint
from .scene import (
    ClassPalette,
    MergeMap,
    ProceduralSpec,
    SemanticBEV,
    check_labels,
    colors_to_labels,
    generate_procedural_bev,
    intersection_palette,
    load_bev,
    merge_classes,
    save_bev,
    soccer_palette,
)
from .training import Calibrator, Trainer, TrainConfig, TrainingData, evaluate

_PALETTES = {"intersection": intersection_palette, "soccer": soccer_palette}


# ------------------------------------------------------------ configuration


@dataclass
class RunConfig:
    """One JSON file with sections scene, datagen, graph, model, loss, train.

    ``scene`` is either ``{"kind": "procedural", "seed": s, "spec": {...}}`` or
    ``{"kind": "raster", "path": ..., "palette": name-or-dict, "meters_per_pixel": m}``.
    ``datagen`` holds camera-grid overrides plus ``views`` (retained views),
    ``candidates`` (cameras drawn), ``min_foreground``, ``dictionary_fraction``,
    ``out_size`` and ``seed``.
    """

    scene: dict = field(default_factory=lambda: {"kind": "procedural", "seed": 1, "spec": {}})
    datagen: dict = field(default_factory=dict)
    graph: dict = field(default_factory=lambda: {"k": 20})
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        unknown = set(obj) - {"scene", "datagen", "graph", "model", "loss", "train"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        return cls(**{k: dict(v) for k, v in obj.items()})

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    def loss_config(self) -> LossConfig:
        return LossConfig.from_json(self.loss)

    def train_config(self, **overrides) -> TrainConfig:
        """TrainConfig from the train/model/loss sections; ``overrides`` may set
        ``gnn``, ``extractor`` or ``seed`` (None leaves the config value)."""
        model = dict(self.model)
        gnn, extractor = overrides.pop("gnn", None), overrides.pop("extractor", None)
        if gnn is not None:
            model["gnn"] = dict(model.get("gnn", {}), variant=gnn)
        if extractor is not None:
            model["extractor"] = dict(model.get("extractor", {}), variant=extractor)
        train = dict(self.train, loss=self.loss, model=model)
        train.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_json(train)


def _palette(spec) -> ClassPalette:
    if isinstance(spec, dict):
        return ClassPalette.from_json(spec)
    if spec not in _PALETTES:
        raise ValueError(f"unknown palette {spec!r}; expected one of {sorted(_PALETTES)} or an inline palette")
    return _PALETTES[spec]()


def build_scene(cfg: RunConfig, base_dir=None) -> SemanticBEV:
    sc = cfg.scene
    kind = sc.get("kind", "procedural")
    if kind == "procedural":
        return generate_procedural_bev(ProceduralSpec.from_json(sc.get("spec", {})), int(sc.get("seed", 0)))
    if kind == "raster":
        path = Path(sc["path"])
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        return load_bev(path, _palette(sc.get("palette", "intersection")), float(sc.get("meters_per_pixel", 0.5)))
    raise ValueError(f"unknown scene kind {kind!r}")


def camera_grid(cfg: RunConfig, bev: SemanticBEV) -> CameraGrid:
    dg = dict(cfg.datagen)
    kw = {k: dg[k] for k in CameraGrid.__dataclass_fields__ if k in dg}
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()}
    kw.setdefault("total_count", int(dg.get("candidates", dg.get("views", 2000))))
    kw.setdefault("seed", int(dg.get("seed", 0)))
    if "out_size" in dg:
        kw.setdefault("image_size", tuple(dg["out_size"]))
    factor = float(dg.get("footprint_factor", 1.5))
    return CameraGrid.for_bev(bev, footprint_factor=factor, **kw)


def generate_views(bev: SemanticBEV, grid: CameraGrid, views: int | None, min_foreground: float = 0.2, **kw) -> DatasetManifest:
    """Render the camera grid and keep the first ``views`` retained views.

    Views below ``min_foreground`` are dropped first, so ``grid.total_count``
    must leave enough headroom; too few survivors is an error.
    """
    manifest = generate_dataset(bev, sample_camera_grid(grid), grid.image_size, min_foreground, **kw)
    if views is not None:
        if len(manifest.samples) < views:
            raise ValueError(
                f"only {len(manifest.samples)} of {grid.total_count} cameras passed the foreground filter; "
                f"{views} views were requested (raise datagen.candidates)"
            )
        manifest.samples = manifest.samples[:views]
    return manifest


# ------------------------------------------------------------ run directory


class RunDir:
    """Paths and loaders for one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    scene_dir = property(lambda self: self.root / "scene")
    data_dir = property(lambda self: self.root / "data")
    graph_dir = property(lambda self: self.root / "graph")
    train_dir = property(lambda self: self.root / "train")
    eval_dir = property(lambda self: self.root / "eval")

    def config(self) -> RunConfig:
        path = self.root / "config.json"
        if not path.exists():
            raise FileNotFoundError(f"{self.root} is not a run directory (no config.json)")
        return RunConfig.load(path)

    def save_scene(self, bev: SemanticBEV) -> None:
        self.scene_dir.mkdir(parents=True, exist_ok=True)
        save_bev(bev, self.scene_dir / "bev.png")
        meta = {"palette": bev.palette.to_json(), "meters_per_pixel": bev.meters_per_pixel, "shape": list(bev.shape)}
        with open(self.scene_dir / "scene.json", "w") as f:
            json.dump(meta, f, indent=2)

    def scene(self) -> SemanticBEV:
        with open(self.scene_dir / "scene.json") as f:
            meta = json.load(f)
        return load_bev(self.scene_dir / "bev.png", ClassPalette.from_json(meta["palette"]), meta["meters_per_pixel"])

    def cycle_graph_dir(self, cycle: int) -> Path:
        return self.graph_dir if cycle == 0 else self.root / "cycles" / f"c{cycle}" / "graph"

    def manifest(self, cycle: int = 0) -> DatasetManifest:
        """The view pool with the splits of ``cycle``; cycle 0 is the stored split."""
        man = DatasetManifest.load(self.data_dir)
        if cycle:
            dg = self.config().datagen
            man = split_dataset(man, float(dg.get("dictionary_fraction", 0.2)), cycle_split_seed(int(dg.get("seed", 0)), cycle))
        return man

    def graph(self, cycle: int = 0) -> TemplateGraph:
        path = self.cycle_graph_dir(cycle)
        if not (path / "graph.json").exists():
            raise FileNotFoundError(f"no graph for cycle {cycle} in {self.root}; run build-graph first")
        return TemplateGraph.load(path)

    def model_names(self) -> list[str]:
        if not self.train_dir.exists():
            return []
        return sorted(p.name for p in self.train_dir.iterdir() if (p / "model.bin").exists())

    def resolve_model(self, name: str | None = None) -> str:
        if name is not None:
            return name
        latest = self.train_dir / "LATEST"
        if latest.exists():
            return latest.read_text().strip()
        names = self.model_names()
        if not names:
            raise FileNotFoundError(f"no trained model in {self.root}; run train first")
        return names[-1]

    def training_data(self, val_fraction: float = 0.2, seed: int = 0, cycle: int = 0) -> TrainingData:
        return TrainingData(self.scene(), self.manifest(cycle), self.graph(cycle), val_fraction, seed)


def cycle_split_seed(seed: int, cycle: int) -> int:
    """Split seed of a training cycle; cycle 0 keeps the generation seed."""
    return seed + 7919 * cycle


def model_name(cfg: TrainConfig, cycle: int = 0) -> str:
    name = f"{cfg.model.gnn.variant}_{cfg.model.extractor.variant}_s{cfg.seed}"
    return f"{name}_c{cycle}" if cycle else name


def run_generate(cfg: RunConfig, out_dir, base_dir=None) -> RunDir:
    """Scene, camera grid, rendering and splits into a fresh run directory."""
    run = RunDir(out_dir)
    run.root.mkdir(parents=True, exist_ok=True)
    cfg.save(run.root / "config.json")
    bev = build_scene(cfg, base_dir)
    run.save_scene(bev)
    dg = cfg.datagen
    grid = camera_grid(cfg, bev)
    views = dg.get("views")
    manifest = generate_views(
        bev,
        grid,
        None if views is None else int(views),
        float(dg.get("min_foreground", 0.2)),
        scene_id=str(dg.get("scene_id", "scene")),
        config={"camera_grid": grid.to_json(), "datagen": dg},
    )
    manifest = split_dataset(manifest, float(dg.get("dictionary_fraction", 0.2)), int(dg.get("seed", 0)))
    manifest.save(run.data_dir)
    return run


def run_build_graph(run: RunDir, k: int | None = None, cycle: int = 0) -> TemplateGraph:
    cfg = run.config()
    k = int(cfg.graph.get("k", 20)) if k is None else k
    bev = run.scene()
    out = run.cycle_graph_dir(cycle)
    graph = build_graph(run.manifest(cycle), k, cfg.loss_config(), bev.palette.num_classes, cache_dir=out / "cache")
    graph.save(out)
    return graph


def run_train(run: RunDir, gnn=None, extractor=None, seed=None, resume: bool = True, cycle: int = 0) -> tuple[str, CalibNet, list]:
    """Two-phase training into ``train/<name>/``; resumes from its checkpoint if present.

    Cycles other than 0 train on resampled splits of the same view pool; their
    graph is built on first use.
    """
    if cycle < 0:
        raise ValueError("cycle must be >= 0")
    cfg = run.config()
    tcfg = cfg.train_config(gnn=gnn, extractor=extractor, seed=seed)
    bev = run.scene()
    tcfg = TrainConfig.from_json(
        dict(tcfg.to_json(), model=dict(tcfg.model.to_json(), num_classes=bev.palette.num_classes))
    )
    name = model_name(tcfg, cycle)
    out = run.train_dir / name
    if cycle and not (run.cycle_graph_dir(cycle) / "graph.json").exists():
        run_build_graph(run, cycle=cycle)
    data = TrainingData(bev, run.manifest(cycle), run.graph(cycle), tcfg.val_fraction, tcfg.seed)
    ckpt = out / "checkpoint.bin"
    if resume and ckpt.exists() and not (out / "model.bin").exists():
        trainer = Trainer.resume(ckpt, data, out)
    else:
        if out.exists():
            for f in ("metrics.jsonl", "checkpoint.bin", "model.bin"):
                (out / f).unlink(missing_ok=True)
        trainer = Trainer(tcfg, data, out)
    (out / "run.json").write_text(json.dumps({"cycle": cycle}))
    model = trainer.fit()
    (run.train_dir / "LATEST").write_text(name)
    return name, model, trainer.history


def load_model(run: RunDir, name: str | None = None) -> tuple[str, CalibNet, TrainingData]:
    name = run.resolve_model(name)
    path = run.train_dir / name / "model.bin"
    if not path.exists():
        raise FileNotFoundError(f"no trained model {name!r} in {run.root}")
    model, state, _ = load_checkpoint(path)
    model.eval()
    tcfg = TrainConfig.from_json(state["train_config"])
    cycle = model_cycle(run, name)
    data = TrainingData(run.scene(), run.manifest(cycle), run.graph(cycle), tcfg.val_fraction, tcfg.seed)
    return name, model, data


def model_cycle(run: RunDir, name: str) -> int:
    meta = run.train_dir / name / "run.json"
    return int(json.loads(meta.read_text())["cycle"]) if meta.exists() else 0


def run_evaluate(run: RunDir, split: str = "test", anchor_only: bool = False, name: str | None = None, overlays: int = 0) -> dict:
    name, model, data = load_model(run, name)
    res = evaluate(model, data, split, anchor_only)
    cfg = model.config
    res.update(model=name, gnn=cfg.gnn.variant, extractor=cfg.extractor.variant, scene=_scene_name(run), cycle=model_cycle(run, name))
    run.eval_dir.mkdir(parents=True, exist_ok=True)
    out = run.eval_dir / f"{name}_{split}{'_anchor' if anchor_only else ''}.json"
    with open(out, "w") as f:
        json.dump(res, f)
    if overlays:
        write_overlays(data, res["records"][:overlays], out.with_suffix(""))
    res["path"] = str(out)
    return res


def run_cycles(run: RunDir, gnn=None, extractor=None, seed=None, split: str = "test") -> list[dict]:
    """Train and evaluate every cycle in ``train.cycles``, each on its own splits."""
    cycles = run.config().train_config(gnn=gnn, extractor=extractor, seed=seed).cycles
    results = []
    for c in range(cycles):
        name, _, _ = run_train(run, gnn, extractor, seed, cycle=c)
        res = run_evaluate(run, split, name=name)
        res.pop("records")
        results.append(res)
    return results


def _scene_name(run: RunDir) -> str:
    cfg = run.config()
    return str(cfg.datagen.get("scene_id", cfg.scene.get("kind", "scene")))


def write_overlays(data: TrainingData, records: list[dict], out_dir) -> None:
    """Side-by-side PNGs: ground-truth view | warped BEV | disagreement mask."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    colors = data.bev.palette.colors()
    index = {s: i for i, s in enumerate(data.graph.ids)}
    for rec in records:
        gt = data.labels[index[rec["id"]]]
        pred = warp_labels(data.bev.labels, Homography.from_list(rec["H"]), data.out_size, data.background)
        diff = np.where((gt != pred)[..., None], np.uint8(255), np.uint8(0)).repeat(3, -1)
        Image.fromarray(np.concatenate([colors[gt], colors[pred], diff], axis=1)).save(out_dir / f"{rec['id']}.png")


# ------------------------------------------------------------ calibration


@dataclass
class CalibrationResult:
    H: Homography
    extrinsics: Extrinsics
    anchor_id: str
    anchor_score: float
    iou_vs_input: float
    runtime_ms: float
    topk: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "H": self.H.to_list(),
            "extrinsics": self.extrinsics.to_json(),
            "anchor_id": self.anchor_id,
            "anchor_score": self.anchor_score,
            "iou_vs_input": self.iou_vs_input,
            "runtime_ms": self.runtime_ms,
            "topk": self.topk,
        }


def prepare_mask(image, palette: ClassPalette, out_size, merge: MergeMap | None = None) -> np.ndarray:
    """Label grid from a mask: applies the merge map, checks ids, resamples
    (nearest) to ``out_size`` = (W, H) when needed."""
    labels = np.asarray(image)
    if labels.ndim == 3:
        labels = colors_to_labels(labels[..., :3], palette)
    if merge is not None:
        labels = merge_classes(labels, merge)
    check_labels(labels, palette)
    w, h = out_size
    if labels.shape != (h, w):
        labels = np.asarray(Image.fromarray(labels.astype(np.uint8)).resize((w, h), Image.NEAREST))
    return labels.astype(np.uint8)


def calibrate(
    image,
    model: CalibNet,
    data: TrainingData,
    K: Intrinsics,
    merge: MergeMap | None = None,
    calibrator: Calibrator | None = None,
) -> CalibrationResult:
    """Homography, extrinsics and anchor metadata for one segmentation mask."""
    if len(data.dictionary) == 0:
        raise ValueError("dictionary is empty")
    t0 = time.perf_counter()
    labels = prepare_mask(image, data.bev.palette, data.out_size, merge)
    cal = calibrator if calibrator is not None else Calibrator(model, data)
    pred = cal.predict(labels)
    ext = decompose_homography(pred["H"], K, data.bev.meters_per_pixel)
    warped = warp_labels(data.bev.labels, pred["H"], data.out_size, data.background)
    score = iou(warped, labels, background=data.background)
    runtime = 1e3 * (time.perf_counter() - t0)
    return CalibrationResult(pred["H"], ext, pred["anchor_id"], pred["anchor_score"], score, runtime, pred["topk"])


def calibrate_many(
    images,
    model: CalibNet,
    data: TrainingData,
    K: Intrinsics,
    merge: MergeMap | None = None,
    workers: int | None = None,
) -> list[CalibrationResult]:
    """Calibrate several masks in parallel; the model and dictionary are shared read-only."""
    cal = Calibrator(model, data)
    workers = num_workers() if workers is None else max(1, int(workers))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda im: calibrate(im, model, data, K, merge, cal), images))


# ------------------------------------------------------------ reports


def format_cell(mean: float, std: float) -> str:
    """IoU statistics in percent with two decimals, e.g. ``95.96±0.84``."""
    return f"{100.0 * mean:.2f}±{100.0 * std:.2f}"


def summarize(evaluations: list[dict]) -> list[dict]:
    """One row per (variant, scene): mean and std over cycles of the per-run mean IoU.

    A single cycle has an empty spread and reports std 0.
    """
    if not evaluations:
        raise ValueError("no evaluation records")
    groups: dict[tuple[str, str], list[float]] = {}
    for ev in evaluations:
        variant = f"{ev.get('gnn', '?')}/{ev.get('extractor', '?')}" + (" anchor-only" if ev.get("anchor_only") else "")
        groups.setdefault((variant, str(ev.get("scene", "scene"))), []).append(float(ev["mean_iou"]))
    rows = []
    for (variant, scene), vals in sorted(groups.items()):
        v = np.asarray(vals)
        rows.append({"variant": variant, "scene": scene, "cycles": len(v), "mean": float(v.mean()), "std": float(v.std())})
    return rows


def emit_report(evaluations: list[dict], fmt: str = "markdown") -> str:
    """CSV or markdown table; every cell is rendered by :func:`format_cell`."""
    rows = summarize(evaluations)
    if fmt == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["variant", "scene", "cycles", "iou"])
        for r in rows:
            wr.writerow([r["variant"], r["scene"], r["cycles"], format_cell(r["mean"], r["std"])])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| variant | scene | cycles | IoU (%) |", "|---|---|---|---|"]
        lines += [f"| {r['variant']} | {r['scene']} | {r['cycles']} | {format_cell(r['mean'], r['std'])} |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def collect_evaluations(runs, split: str = "test") -> list[dict]:
    """Every saved evaluation JSON for ``split`` across run directories."""
    out = []
    for r in runs:
        ev_dir = RunDir(r).eval_dir
        for p in sorted(ev_dir.glob(f"*_{split}*.json")) if ev_dir.exists() else []:
            with open(p) as f:
                ev = json.load(f)
            ev.pop("records", None)
            out.append(ev)
    if not out:
        raise ValueError(f"no {split} evaluations found in {list(map(str, runs))}")
    return out
