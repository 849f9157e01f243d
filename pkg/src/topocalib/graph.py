"""Template graph over synthetic views and 2-hop mini-batch sampling."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import DatasetManifest
from .losses import LossConfig, loss_from_patch_mse, topological_mse
from .scene import encode_onehot


def similarity_score(a: np.ndarray, b: np.ndarray, cfg: LossConfig = LossConfig(), num_classes: int = 4) -> float:
    """Topological MSE between the one-hot encodings of two label grids (lower = more similar)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    c = max(num_classes, int(max(a.max(), b.max())) + 1)
    return float(topological_mse(encode_onehot(a, c, np.float64), encode_onehot(b, c, np.float64), cfg))


def _patch_onehot(labels: np.ndarray, num_classes: int, n: int) -> np.ndarray:
    """(N, H, W) ids -> (n*n, N, C*ph*pw) float32 one-hot patch vectors."""
    N, h, w = labels.shape
    oh = np.eye(num_classes, dtype=np.float32)[labels]
    oh = oh.reshape(N, n, h // n, n, w // n, num_classes)
    return np.ascontiguousarray(oh.transpose(1, 3, 0, 2, 4, 5).reshape(n * n, N, -1))


def pairwise_similarity(
    queries: np.ndarray, templates: np.ndarray, cfg: LossConfig, num_classes: int, block: int = 256, template_patches=None
) -> np.ndarray:
    """Topological MSE for every (query, template) pair of one-hot label grids.

    For one-hot inputs the squared difference summed over channels is 2 at every
    mismatching pixel, so each patch MSE is 2 * (pixels - agreements) / (C * pixels);
    agreements are counted with one matrix product per patch.
    ``template_patches`` may carry a cached transposed patch encoding of
    ``templates`` (see :func:`template_patch_cache`).
    """
    n = cfg.patches_per_side
    h, w = queries.shape[-2:]
    if h % n or w % n:
        raise ValueError(f"image size {w}x{h} is not divisible into {n}x{n} patches")
    px = (h // n) * (w // n)
    tplT = template_patches if template_patches is not None else template_patch_cache(templates, cfg, num_classes)
    out = np.empty((len(queries), len(templates)), dtype=np.float64)
    for s in range(0, len(queries), block):
        q = _patch_onehot(np.asarray(queries[s : s + block]), num_classes, n)
        agree = np.matmul(q, tplT)  # (n*n, bq, T); exact small integers
        mse = 2.0 * (px - agree.astype(np.float64)) / (num_classes * px)
        mse = mse.transpose(1, 2, 0).reshape(q.shape[1], len(templates), n, n)
        out[s : s + block] = loss_from_patch_mse(mse, cfg)
    return out


def template_patch_cache(templates: np.ndarray, cfg: LossConfig, num_classes: int) -> np.ndarray:
    """(n*n, C*ph*pw, T) patch encoding of templates, reusable across queries."""
    tpl = _patch_onehot(np.asarray(templates), num_classes, cfg.patches_per_side)
    return np.ascontiguousarray(tpl.transpose(0, 2, 1))


@dataclass
class TemplateGraph:
    """Directed top-k graph; every edge points at a dictionary node.

    Node ``i`` corresponds to ``ids[i]`` (manifest order). ``neighbors[i]`` holds
    the node indices of its k targets in rank order and ``scores[i]`` their
    similarity scores.
    """

    ids: list[str]
    splits: list[str]
    neighbors: np.ndarray
    scores: np.ndarray
    k: int
    meta: dict

    def __post_init__(self):
        self._index = {s: i for i, s in enumerate(self.ids)}
        self._dict_mask = np.array([s == "dictionary" for s in self.splits])
        self._edge_set = None

    def index(self, node_id: str) -> int:
        return self._index[node_id]

    @property
    def dictionary_mask(self) -> np.ndarray:
        return self._dict_mask

    def nodes_in(self, split: str) -> np.ndarray:
        return np.flatnonzero(np.array(self.splits) == split)

    def edge_set(self) -> set[tuple[int, int]]:
        if self._edge_set is None:
            self._edge_set = {(i, int(j)) for i in range(len(self.ids)) for j in self.neighbors[i]}
        return self._edge_set

    def edges(self):
        for i in range(len(self.ids)):
            for j, sc in zip(self.neighbors[i], self.scores[i]):
                yield self.ids[i], self.ids[int(j)], float(sc)

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "edges.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["src_id", "dst_id", "score"])
            for src, dst, sc in self.edges():
                wr.writerow([src, dst, repr(sc)])
        meta = dict(self.meta, k=self.k, nodes=[[i, s] for i, s in zip(self.ids, self.splits)])
        with open(root / "graph.json", "w") as f:
            json.dump(meta, f)

    @classmethod
    def load(cls, root) -> "TemplateGraph":
        root = Path(root)
        with open(root / "graph.json") as f:
            meta = json.load(f)
        nodes = meta.pop("nodes")
        ids = [n[0] for n in nodes]
        splits = [n[1] for n in nodes]
        k = int(meta.pop("k"))
        index = {s: i for i, s in enumerate(ids)}
        nbr = [[] for _ in ids]
        sc = [[] for _ in ids]
        with open(root / "edges.csv", newline="") as f:
            for row in csv.DictReader(f):
                i = index[row["src_id"]]
                nbr[i].append(index[row["dst_id"]])
                sc[i].append(float(row["score"]))
        return cls(ids, splits, np.array(nbr, dtype=np.int64), np.array(sc, dtype=np.float64), k, meta)


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def topk_rows(scores: np.ndarray, cand_ids: list[str], k: int) -> np.ndarray:
    """Column indices of the k smallest scores per row, ties by ascending id."""
    id_rank = np.argsort(np.argsort(np.array(cand_ids, dtype=object)))
    out = np.empty((scores.shape[0], k), dtype=np.int64)
    for r in range(scores.shape[0]):
        order = np.lexsort((id_rank, scores[r]))
        out[r] = order[:k]
    return out


def build_graph(
    manifest: DatasetManifest,
    k: int = 20,
    cfg: LossConfig = LossConfig(),
    num_classes: int = 4,
    cache_dir=None,
) -> TemplateGraph:
    """Connect every node to its k most similar dictionary templates.

    Dictionary nodes connect to their k most similar *other* dictionary nodes.
    The all-pairs score matrix is cached under ``cache_dir`` keyed by the
    manifest digest and loss config.
    """
    samples = manifest.samples
    dict_idx = np.array([i for i, s in enumerate(samples) if s.split == "dictionary"], dtype=np.int64)
    if dict_idx.size == 0:
        raise ValueError("dictionary split is empty")
    has_other = any(s.split != "dictionary" for s in samples)
    if k > dict_idx.size - 1 or (has_other and k > dict_idx.size):
        raise ValueError(f"k={k} is too large for a dictionary of {dict_idx.size} templates")
    ids = [s.id for s in samples]
    meta = {"manifest_hash": manifest.digest(), "cfg_hash": _config_hash(cfg.to_json()), "loss": cfg.to_json()}

    S = None
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"sim_{meta['manifest_hash']}_{meta['cfg_hash']}.npy"
        if cache.exists():
            S = np.load(cache)
    if S is None:
        images = manifest.images()
        S = pairwise_similarity(images, images[dict_idx], cfg, num_classes)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            np.save(cache, S)

    dict_ids = [ids[i] for i in dict_idx]
    S = S.copy()
    pos_in_dict = {int(g): j for j, g in enumerate(dict_idx)}
    for g, j in pos_in_dict.items():
        S[g, j] = np.inf  # no self edges
    cols = topk_rows(S, dict_ids, k)
    neighbors = dict_idx[cols]
    scores = np.take_along_axis(S, cols, axis=1)
    return TemplateGraph(ids, [s.split for s in samples], neighbors, scores, k, meta)


@dataclass
class MiniBatch:
    """Seed nodes plus their sampled dictionary neighborhood.

    ``nodes`` lists graph node indices: seeds first, then the dictionary nodes
    (hop-1 then hop-2, first-seen order). ``seed_neighbors[i]`` holds the
    hop-1 nodes sampled for ``seeds[i]``.
    """

    seeds: np.ndarray
    hop1: np.ndarray
    hop2: np.ndarray
    nodes: np.ndarray
    seed_neighbors: list

    @property
    def dictionary_nodes(self) -> np.ndarray:
        return self.nodes[len(self.seeds) :]


def sample_minibatch(graph: TemplateGraph, seeds, fanouts=(10, 5), rng_seed: int = 0) -> MiniBatch:
    """Neighborhood sampling: up to f1 dictionary neighbors per seed, then up to
    f2 neighbors of each hop-1 node after discarding non-dictionary candidates."""
    f1, f2 = fanouts
    if f1 < 1 or f2 < 1:
        raise ValueError("fanouts must be >= 1")
    seeds = np.array([graph.index(s) if isinstance(s, str) else int(s) for s in seeds], dtype=np.int64)
    splits = {graph.splits[i] for i in seeds}
    if len(splits) != 1 or "dictionary" in splits:
        raise ValueError(f"seeds must come from one non-dictionary split, got {sorted(splits)}")
    rng = np.random.default_rng(rng_seed)
    dmask = graph.dictionary_mask

    def pick(node, f):
        cand = graph.neighbors[node]
        cand = cand[dmask[cand]]
        if cand.size == 0:
            raise ValueError(f"node {graph.ids[node]} has no dictionary neighbors")
        if cand.size <= f:
            return cand
        return np.sort(rng.choice(cand, size=f, replace=False))

    seed_nbrs = [pick(s, f1) for s in seeds]
    hop1 = _unique_ordered(np.concatenate(seed_nbrs))
    hop2 = _unique_ordered(np.concatenate([pick(d, f2) for d in hop1]))
    hop2 = hop2[~np.isin(hop2, hop1)]
    nodes = np.concatenate([seeds, hop1, hop2])
    return MiniBatch(seeds, hop1, hop2, nodes, seed_nbrs)


def _unique_ordered(a: np.ndarray) -> np.ndarray:
    _, first = np.unique(a, return_index=True)
    return a[np.sort(first)]


def enumerate_candidate_links(batch: MiniBatch, graph: TemplateGraph) -> tuple[np.ndarray, np.ndarray]:
    """All (seed, dictionary node in batch) pairs as graph node indices, with
    label 1 exactly for pairs that are graph edges."""
    d = batch.dictionary_nodes
    src = np.repeat(batch.seeds, len(d))
    dst = np.tile(d, len(batch.seeds))
    pairs = np.stack([src, dst], axis=1)
    nbr = graph.neighbors[batch.seeds]  # (S, k)
    labels = (nbr[:, None, :] == d[None, :, None]).any(-1).reshape(-1).astype(np.float32)
    return pairs, labels
