"""Two-phase training: link-prediction warmup, then end-to-end homography
training through the differentiable BEV warp, with IoU-driven scheduling."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .datagen import DatasetManifest
from .geometry import Homography, warp_channels, warp_labels
from .graph import MiniBatch, TemplateGraph, enumerate_candidate_links, pairwise_similarity, sample_minibatch, template_patch_cache, topk_rows
from .losses import LossConfig, bce_link_loss_logits, iou, topological_mse
from .models import (
    CalibNet,
    ModelConfig,
    compose_with_anchor,
    init_params,
    link_logits,
    load_checkpoint,
    save_checkpoint,
    topk_indices,
)
from .scene import SemanticBEV

log = logging.getLogger(__name__)

_PHASE_CODE = {"warmup": 1, "end2end": 2, "val": 3, "auc": 4}


@dataclass(frozen=True)
class TrainConfig:
    warmup_epochs: int = 30
    max_epochs: int = 200
    batch_size: int = 16
    lr_extractor: float = 1e-3
    lr_gnn: float = 1e-3
    lr_stn: float = 1e-4
    # extractor/GNN rates are multiplied by this in the end-to-end phase so
    # anchor selection drifts slowly while the STN learns the residual
    end2end_backbone_scale: float = 0.01
    lr_patience: int = 10
    stop_patience: int = 15
    cycles: int = 5
    fanouts: tuple[int, int] = (10, 5)
    val_fraction: float = 0.2
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.max_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if min(self.lr_extractor, self.lr_gnn, self.lr_stn, self.end2end_backbone_scale) <= 0:
            raise ValueError("learning rates must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_json()
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        loss = LossConfig.from_json(obj.pop("loss", {}))
        model = ModelConfig.from_json(obj.pop("model", {}))
        if "fanouts" in obj:
            obj["fanouts"] = tuple(obj["fanouts"])
        return cls(loss=loss, model=model, **obj)


@dataclass
class TrainState:
    phase: str = "warmup"
    epoch: int = 0
    best_iou: float = 0.0
    since_improvement: int = 0
    lrs: dict = field(default_factory=dict)
    seed: int = 0
    stopped: bool = False

    def to_json(self) -> dict:
        return asdict(self)


class DivergenceError(FloatingPointError):
    pass


# ------------------------------------------------------------ data bundle


class TrainingData:
    """Everything a run needs in memory: BEV, labels, homographies, graph."""

    def __init__(self, bev: SemanticBEV, manifest: DatasetManifest, graph: TemplateGraph, val_fraction=0.2, seed=0):
        if graph.ids != manifest.ids:
            raise ValueError("graph and manifest node order disagree")
        self.bev = bev
        self.manifest = manifest
        self.graph = graph
        self.labels = manifest.images()
        self.H = torch.as_tensor(np.stack([s.H_gt.matrix for s in manifest.samples]), dtype=torch.float64)
        self.num_classes = bev.palette.num_classes
        self.background = bev.palette.background_id
        self.bev_onehot = torch.nn.functional.one_hot(
            torch.as_tensor(bev.labels, dtype=torch.long), self.num_classes
        ).permute(2, 0, 1).float()
        self.out_size = tuple(manifest.out_size)
        self.dictionary = graph.nodes_in("dictionary")
        self.test = graph.nodes_in("test")
        train = graph.nodes_in("train")
        perm = np.random.default_rng([seed, 7]).permutation(train)
        n_val = int(round(val_fraction * len(train)))
        if n_val < 1 or n_val >= len(train):
            raise ValueError("validation split would be empty or swallow the train split")
        self.val = np.sort(perm[:n_val])
        self.train = np.sort(perm[n_val:])
        # graph node ids are zero padded in manifest order, so index order is id order
        ids = np.array(graph.ids, dtype=object)
        self.id_rank = np.argsort(np.argsort(ids))

    def split_nodes(self, split: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test, "dictionary": self.dictionary}[split]

    def onehot(self, nodes) -> torch.Tensor:
        lab = torch.as_tensor(self.labels[np.asarray(nodes)], dtype=torch.long)
        return torch.nn.functional.one_hot(lab, self.num_classes).permute(0, 3, 1, 2).float()

    def inputs(self, nodes, model: CalibNet) -> torch.Tensor:
        """Pooled extractor inputs, computed once for all nodes and cached."""
        key = model.config.extractor.input_pool
        cache = self.__dict__.setdefault("_inputs", {})
        if key not in cache:
            with torch.no_grad():
                cache[key] = torch.cat(
                    [model.extractor.prepare(self.onehot(c)) for c in np.array_split(np.arange(len(self.labels)), max(1, len(self.labels) // 128))]
                )
        return cache[key][torch.as_tensor(np.asarray(nodes), dtype=torch.long)]


def batch_edges(batch: MiniBatch, graph: TemplateGraph) -> torch.Tensor:
    """Message-passing edges (src -> dst, local indices) for a mini-batch.

    Seeds receive from their sampled hop-1 templates; dictionary nodes receive
    from their graph neighbors present in the batch. Seeds never send, so their
    embeddings do not leak into templates or into each other.
    """
    n_seed = len(batch.seeds)
    dnodes = batch.dictionary_nodes
    local = {int(g): n_seed + i for i, g in enumerate(dnodes)}
    src, dst = [], []
    for i, nb in enumerate(batch.seed_neighbors):
        src.append(np.array([local[int(b)] for b in nb], dtype=np.int64))
        dst.append(np.full(len(nb), i, dtype=np.int64))
    for g in dnodes:
        nb = [local[int(b)] for b in graph.neighbors[g] if int(b) in local]
        src.append(np.array(nb, dtype=np.int64))
        dst.append(np.full(len(nb), local[int(g)], dtype=np.int64))
    return torch.as_tensor(np.stack([np.concatenate(src), np.concatenate(dst)]), dtype=torch.long)


def _batches(nodes: np.ndarray, size: int, rng: np.random.Generator | None):
    order = rng.permutation(nodes) if rng is not None else np.asarray(nodes)
    for i in range(0, len(order), size):
        yield order[i : i + size]


def _epoch_rng(seed: int, phase: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, _PHASE_CODE[phase], epoch])


def forward_batch(model: CalibNet, data: TrainingData, batch: MiniBatch):
    """Embeddings of every batch node plus local candidate pairs and labels."""
    feats = model.extractor.embed(data.inputs(batch.nodes, model))
    edges = batch_edges(batch, data.graph)
    emb = model.gnn.with_roles(model.gnn(feats, edges), len(batch.seeds))
    pairs, labels = enumerate_candidate_links(batch, data.graph)
    n_seed = len(batch.seeds)
    d = batch.dictionary_nodes
    local_pairs = np.stack(
        [np.repeat(np.arange(n_seed), len(d)), np.tile(np.arange(n_seed, n_seed + len(d)), n_seed)], 1
    )
    return emb, torch.as_tensor(local_pairs), torch.as_tensor(labels)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney estimate of ROC-AUC (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    r = rankdata(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@torch.no_grad()
def link_auc(model: CalibNet, data: TrainingData, split: str, cfg: TrainConfig, rng_seed: int = 0) -> float:
    scores, labels = [], []
    nodes = data.split_nodes(split)
    for b, seeds in enumerate(_batches(nodes, cfg.batch_size, None)):
        batch = sample_minibatch(data.graph, seeds, cfg.fanouts, rng_seed=rng_seed * 100_003 + b)
        emb, pairs, y = forward_batch(model, data, batch)
        scores.append(link_logits(emb, pairs).numpy())
        labels.append(y.numpy())
    return roc_auc(np.concatenate(scores), np.concatenate(labels))


# ------------------------------------------------------------ inference path


class Calibrator:
    """Inference against the full dictionary.

    Template states are computed once (templates receive only from their graph
    neighbors). A query is linked to its k most similar templates by the same
    topological score used to build the graph, receives messages from them, is
    scored against every template, and the STN residual is composed with the
    top-scoring template's homography. Both :func:`evaluate` and single-image
    calibration go through :meth:`predict`.
    """

    def __init__(self, model: CalibNet, data: TrainingData):
        self.model = model
        self.data = data
        self.dict_nodes = data.dictionary
        self.k_stn = model.config.stn.k_stn
        local = {int(g): i for i, g in enumerate(self.dict_nodes)}
        src, dst = [], []
        for g in self.dict_nodes:
            nb = [local[int(b)] for b in data.graph.neighbors[g] if int(b) in local]
            src.append(np.array(nb, dtype=np.int64))
            dst.append(np.full(len(nb), local[int(g)], dtype=np.int64))
        self.edges = torch.as_tensor(np.stack([np.concatenate(src), np.concatenate(dst)]), dtype=torch.long)
        with torch.no_grad():
            feats = model.extractor.embed(data.inputs(self.dict_nodes, model))
            self.ctx = model.gnn.context(feats, self.edges)
        self.dict_emb = self.ctx["states"][-1] + model.gnn.role[1]
        self.dict_labels = data.labels[self.dict_nodes]
        self.dict_ids = [data.graph.ids[i] for i in self.dict_nodes]
        self.loss_cfg = LossConfig.from_json(data.graph.meta["loss"]) if "loss" in data.graph.meta else LossConfig()
        self.dict_patches = template_patch_cache(self.dict_labels, self.loss_cfg, data.num_classes)
        self.tie_rank = torch.as_tensor(np.argsort(np.argsort(np.array([data.graph.ids[i] for i in self.dict_nodes], dtype=object))))

    def neighbors(self, labels: np.ndarray) -> np.ndarray:
        """Dictionary positions of the query's k most similar templates."""
        sim = pairwise_similarity(
            np.asarray(labels)[None], self.dict_labels, self.loss_cfg, self.data.num_classes, template_patches=self.dict_patches
        )
        return topk_rows(sim, self.dict_ids, self.data.graph.k)[0]

    @torch.no_grad()
    def predict(self, labels: np.ndarray, anchor_only: bool = False) -> dict:
        """Returns H (BEV -> image), the STN residual, anchor node and its score."""
        x = torch.nn.functional.one_hot(torch.as_tensor(labels, dtype=torch.long), self.data.num_classes)
        x = x.permute(2, 0, 1).unsqueeze(0).float()
        sources = self.neighbors(labels)
        q = self.model.gnn.forward_sink(self.model.extractor(x), self.ctx, sources) + self.model.gnn.role[0]
        emb = torch.cat([q, self.dict_emb])
        logits = emb[1:] @ emb[0]
        top = topk_indices(logits.unsqueeze(0), self.k_stn, self.tie_rank)[0]
        anchor_node = int(self.dict_nodes[top[0]])
        A = self.data.H[anchor_node].unsqueeze(0)
        if anchor_only:
            H, Hbar = A, torch.eye(3, dtype=torch.float64).unsqueeze(0)
        else:
            mat = torch.cat([emb[:1], emb[1:][top]]).unsqueeze(0)
            G = self.model.stn(mat)
            H, Hbar = compose_with_anchor(G, A, self.data.out_size)
        return {
            "H": Homography(H[0].numpy()),
            "Hbar": Homography(Hbar[0].numpy()),
            "anchor": anchor_node,
            "anchor_id": self.data.graph.ids[anchor_node],
            "anchor_score": float(torch.sigmoid(logits[top[0]])),
            "topk": [self.data.graph.ids[int(self.dict_nodes[t])] for t in top],
        }


def evaluate(model: CalibNet, data: TrainingData, split: str = "test", anchor_only: bool = False) -> dict:
    """Mean and std IoU of warp(BEV, H) against each sample's view."""
    nodes = data.split_nodes(split)
    if len(nodes) == 0:
        raise ValueError(f"split {split!r} is empty")
    cal = Calibrator(model, data)
    records = []
    for n in nodes:
        pred = cal.predict(data.labels[n], anchor_only=anchor_only)
        warped = warp_labels(data.bev.labels, pred["H"], data.out_size, data.background)
        records.append(
            {
                "id": data.graph.ids[n],
                "iou": iou(warped, data.labels[n], background=data.background),
                "anchor_id": pred["anchor_id"],
                "anchor_score": pred["anchor_score"],
                "H": pred["H"].to_list(),
            }
        )
    vals = np.array([r["iou"] for r in records])
    return {"split": split, "anchor_only": anchor_only, "mean_iou": float(vals.mean()), "std_iou": float(vals.std()), "n": len(vals), "records": records}


# ------------------------------------------------------------ phases


def _optimizer(model: CalibNet, cfg: TrainConfig, phase: str) -> torch.optim.Adam:
    scale = cfg.end2end_backbone_scale if phase == "end2end" else 1.0
    groups = [
        {"params": list(model.extractor.parameters()), "lr": cfg.lr_extractor * scale, "name": "extractor"},
        {"params": list(model.gnn.parameters()), "lr": cfg.lr_gnn * scale, "name": "gnn"},
    ]
    if phase == "end2end":
        groups.append({"params": list(model.stn.parameters()), "lr": cfg.lr_stn, "name": "stn"})
    return torch.optim.Adam(groups)


def _opt_tensors(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors, steps = {}, {}
    for pid, st in sd["state"].items():
        tensors[f"opt/{pid}/exp_avg"] = st["exp_avg"]
        tensors[f"opt/{pid}/exp_avg_sq"] = st["exp_avg_sq"]
        steps[str(pid)] = float(st["step"])
    return tensors, steps


def _restore_opt(opt: torch.optim.Optimizer, tensors: dict, steps: dict, lrs: dict) -> None:
    sd = opt.state_dict()
    state = {}
    for pid_s, step in steps.items():
        pid = int(pid_s)
        state[pid] = {
            "step": torch.tensor(step),
            "exp_avg": tensors[f"opt/{pid}/exp_avg"].clone(),
            "exp_avg_sq": tensors[f"opt/{pid}/exp_avg_sq"].clone(),
        }
    sd["state"] = state
    for g in sd["param_groups"]:
        if g["name"] in lrs:
            g["lr"] = lrs[g["name"]]
    opt.load_state_dict(sd)


class Trainer:
    """Runs the schedule, writes a JSON-lines metrics log and checkpoints."""

    def __init__(self, cfg: TrainConfig, data: TrainingData, out_dir=None, model: CalibNet | None = None):
        self.cfg = cfg
        self.data = data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = model if model is not None else init_params(replace(cfg.model, seed=cfg.seed))
        self.state = TrainState(seed=cfg.seed)
        self.opt = _optimizer(self.model, cfg, "warmup")
        self.best_model: CalibNet | None = None
        self.history: list[dict] = []
        self.step_log: list[dict] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- bookkeeping

    def _log(self, rec: dict) -> None:
        self.history.append(rec)
        log.info(json.dumps(rec))
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    def _lrs(self) -> dict:
        return {g["name"]: g["lr"] for g in self.opt.param_groups}

    def checkpoint(self, path=None) -> Path:
        path = Path(path) if path is not None else self.out_dir / "checkpoint.bin"
        tensors, steps = _opt_tensors(self.opt)
        if self.best_model is not None:
            tensors.update({f"best/{k}": v for k, v in self.best_model.state_dict().items()})
        self.state.lrs = self._lrs()
        state = dict(self.state.to_json(), opt_steps=steps, train_config=self.cfg.to_json())
        save_checkpoint(path, self.model, state, tensors)
        return path

    @classmethod
    def resume(cls, path, data: TrainingData, out_dir=None) -> "Trainer":
        model, state, extra = load_checkpoint(path)
        cfg = TrainConfig.from_json(state["train_config"])
        tr = cls(cfg, data, out_dir, model=model)
        tr.state = TrainState(**{k: state[k] for k in TrainState.__dataclass_fields__})
        tr.opt = _optimizer(model, cfg, tr.state.phase)
        _restore_opt(tr.opt, extra, state["opt_steps"], state["lrs"])
        best = {k[len("best/") :]: v for k, v in extra.items() if k.startswith("best/")}
        if best:
            tr.best_model = copy.deepcopy(model)
            tr.best_model.load_state_dict(best)
        return tr

    def _check(self, loss: torch.Tensor) -> None:
        if not torch.isfinite(loss):
            dump = None
            if self.out_dir is not None:
                dump = self.checkpoint(self.out_dir / "diverged.bin")
            raise DivergenceError(f"non-finite loss in {self.state.phase} epoch {self.state.epoch}; state dumped to {dump}")

    # -- warmup

    def warmup_epoch(self) -> dict:
        cfg, data = self.cfg, self.data
        rng = _epoch_rng(cfg.seed, "warmup", self.state.epoch)
        self.model.train()
        total, count = 0.0, 0
        for seeds in _batches(data.train, cfg.batch_size, rng):
            batch = sample_minibatch(data.graph, seeds, cfg.fanouts, rng_seed=int(rng.integers(2**31)))
            emb, pairs, y = forward_batch(self.model, data, batch)
            loss = bce_link_loss_logits(link_logits(emb, pairs), y)
            self._check(loss)
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            total += float(loss.detach())
            count += len(y)
        self.state.epoch += 1
        auc = link_auc(self.model, data, "val", cfg, rng_seed=cfg.seed)
        rec = {"phase": "warmup", "epoch": self.state.epoch, "loss": total / max(count, 1), "val_auc": auc, "lrs": self._lrs()}
        self._log(rec)
        return rec

    def run_warmup(self) -> CalibNet:
        while self.state.phase == "warmup" and self.state.epoch < self.cfg.warmup_epochs:
            self.warmup_epoch()
            if self.out_dir is not None:
                self.checkpoint()
        self._enter_end2end()
        return self.model

    def _enter_end2end(self) -> None:
        if self.state.phase == "warmup":
            self.state.phase = "end2end"
            self.state.epoch = 0
            self.opt = _optimizer(self.model, self.cfg, "end2end")
            self.best_model = copy.deepcopy(self.model)
            self.state.best_iou = evaluate(self.model, self.data, "val")["mean_iou"]
            self.state.since_improvement = 0

    # -- end to end

    def end2end_step(self, batch: MiniBatch, record_steps: bool = False) -> float:
        data = self.data
        emb, pairs, _ = forward_batch(self.model, data, batch)
        n_seed = len(batch.seeds)
        dnodes = batch.dictionary_nodes
        logits = link_logits(emb, pairs).view(n_seed, len(dnodes))
        top = topk_indices(logits, self.model.config.stn.k_stn, torch.as_tensor(data.id_rank[dnodes]))
        anchors = torch.as_tensor(dnodes)[top[:, 0]]
        mat = torch.cat([emb[:n_seed].unsqueeze(1), emb[n_seed:][top]], dim=1)
        G = self.model.stn(mat)
        H, Hbar = compose_with_anchor(G, data.H[anchors], data.out_size)
        pred = warp_channels(data.bev_onehot, H.float(), data.out_size, data.background)
        target = data.onehot(batch.seeds)
        loss = topological_mse(pred, target, self.cfg.loss).mean()
        self._check(loss)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        if record_steps:
            self.step_log.append(
                {"anchors": anchors.tolist(), "H": H.detach().tolist(), "Hbar": Hbar.detach().tolist(), "A": data.H[anchors].tolist()}
            )
        return float(loss.detach())

    def end2end_epoch(self, record_steps: bool = False) -> dict:
        cfg, data = self.cfg, self.data
        rng = _epoch_rng(cfg.seed, "end2end", self.state.epoch)
        self.model.train()
        losses = []
        for seeds in _batches(data.train, cfg.batch_size, rng):
            batch = sample_minibatch(data.graph, seeds, cfg.fanouts, rng_seed=int(rng.integers(2**31)))
            losses.append(self.end2end_step(batch, record_steps))
        self.state.epoch += 1
        val = evaluate(self.model, data, "val")["mean_iou"]
        st = self.state
        if val > st.best_iou:
            st.best_iou, st.since_improvement = val, 0
            self.best_model = copy.deepcopy(self.model)
        else:
            st.since_improvement += 1
            if st.since_improvement == cfg.lr_patience:
                for g in self.opt.param_groups:
                    g["lr"] *= 0.5
            if st.since_improvement >= cfg.lr_patience + cfg.stop_patience:
                st.stopped = True
        rec = {"phase": "end2end", "epoch": st.epoch, "loss": float(np.mean(losses)), "val_iou": val, "lrs": self._lrs()}
        self._log(rec)
        return rec

    def run_end2end(self) -> CalibNet:
        self._enter_end2end()
        while not self.state.stopped and self.state.epoch < self.cfg.max_epochs:
            self.end2end_epoch()
            if self.out_dir is not None:
                self.checkpoint()
        if self.best_model is not None:
            self.model = self.best_model
        if self.out_dir is not None:
            save_checkpoint(
                self.out_dir / "model.bin", self.model, {"best_val_iou": self.state.best_iou, "train_config": self.cfg.to_json()}
            )
        return self.model

    def fit(self) -> CalibNet:
        self.run_warmup()
        return self.run_end2end()


def run_warmup(cfg: TrainConfig, data: TrainingData, model: CalibNet | None = None, out_dir=None) -> tuple[CalibNet, list]:
    tr = Trainer(replace(cfg, max_epochs=0), data, out_dir, model)
    tr.run_warmup()
    return tr.model, tr.history


def run_end2end(cfg: TrainConfig, data: TrainingData, model: CalibNet, out_dir=None) -> tuple[CalibNet, list]:
    tr = Trainer(cfg, data, out_dir, model)
    tr.run_end2end()
    return tr.model, tr.history
