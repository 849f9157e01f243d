"""Feature extractor, graph networks, link scorer and homography regression head."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Homography, normalizing_transform

EXTRACTORS = ("four-conv", "resnet-like")
GNNS = ("gcn", "gat", "gatv2")


@dataclass(frozen=True)
class ExtractorConfig:
    variant: str = "four-conv"
    widths: tuple[int, ...] = (16, 32, 64, 64)
    out_dim: int = 128
    input_pool: int = 2
    pooling: str = "flatten"


@dataclass(frozen=True)
class GNNConfig:
    variant: str = "gatv2"
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    out_dim: int = 128


@dataclass(frozen=True)
class STNConfig:
    k_stn: int = 5
    hidden: tuple[int, ...] = (256, 64)
    include_seed: bool = True
    offset_scale: float = 0.1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    image_size: tuple[int, int] = (128, 128)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    gnn: GNNConfig = field(default_factory=GNNConfig)
    stn: STNConfig = field(default_factory=STNConfig)
    seed: int = 0

    def __post_init__(self):
        if self.extractor.variant not in EXTRACTORS:
            raise ValueError(f"extractor variant must be one of {EXTRACTORS}")
        if self.gnn.variant not in GNNS:
            raise ValueError(f"gnn variant must be one of {GNNS}")
        if self.extractor.pooling not in ("flatten", "global"):
            raise ValueError("extractor pooling must be 'flatten' or 'global'")
        if min(self.extractor.out_dim, self.gnn.out_dim, self.gnn.hidden) <= 0:
            raise ValueError("dimensions must be positive")
        if self.gnn.heads < 1 or self.stn.k_stn < 1 or self.gnn.layers < 1:
            raise ValueError("heads, layers and k_stn must be >= 1")
        if self.stn.offset_scale <= 0:
            raise ValueError("stn offset_scale must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)

        def tup(d):
            return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}

        return cls(
            num_classes=obj.get("num_classes", 4),
            image_size=tuple(obj.get("image_size", (128, 128))),
            extractor=ExtractorConfig(**tup(obj.get("extractor", {}))),
            gnn=GNNConfig(**tup(obj.get("gnn", {}))),
            stn=STNConfig(**tup(obj.get("stn", {}))),
            seed=obj.get("seed", 0),
        )


# ------------------------------------------------------------ extractor


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = nn.Conv2d(cin, cout, 1, stride) if (stride != 1 or cin != cout) else nn.Identity()

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))) + self.skip(x))


class FeatureExtractor(nn.Module):
    """Stride-2 conv stages, then pooling and a linear map to ``out_dim``.

    ``four-conv`` has exactly four conv stages; ``resnet-like`` replaces each
    stage with a two-conv residual block (8 convs + projections).
    """

    def __init__(self, cfg: ExtractorConfig, num_classes: int, image_size):
        super().__init__()
        self.cfg = cfg
        self.pool = nn.AvgPool2d(cfg.input_pool) if cfg.input_pool > 1 else nn.Identity()
        stages = []
        cin = num_classes
        for w in cfg.widths:
            if cfg.variant == "four-conv":
                stages += [nn.Conv2d(cin, w, 3, 2, 1), nn.ReLU()]
            else:
                stages.append(_BasicBlock(cin, w, 2))
            cin = w
        self.stages = nn.Sequential(*stages)
        side_w = image_size[0] // cfg.input_pool
        side_h = image_size[1] // cfg.input_pool
        for _ in cfg.widths:
            side_w, side_h = (side_w + 1) // 2, (side_h + 1) // 2
        flat = cin * side_w * side_h if cfg.pooling == "flatten" else cin
        self.head = nn.Linear(flat, cfg.out_dim)
        self.num_classes = num_classes
        # He init keeps activations from shrinking through the ReLU stages
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.xavier_uniform_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def prepare(self, x):
        """Parameter-free input pooling and centering; callers may cache its output."""
        return self.pool(x) - 1.0 / self.num_classes

    def embed(self, x):
        """Features from already pooled inputs."""
        x = self.stages(x)
        x = x.flatten(1) if self.cfg.pooling == "flatten" else x.mean(dim=(2, 3))
        return self.head(x)

    def forward(self, x):
        return self.embed(self.prepare(x))


# ------------------------------------------------------------ graph layers


def add_self_loops(edge_index: torch.Tensor, n: int) -> torch.Tensor:
    keep = edge_index[0] != edge_index[1]
    loops = torch.arange(n, dtype=edge_index.dtype).repeat(2, 1)
    return torch.cat([edge_index[:, keep], loops], dim=1)


def _check_edges(edge_index: torch.Tensor, n: int):
    if edge_index.numel() and (edge_index.min() < 0 or edge_index.max() >= n):
        raise ValueError("adjacency references a node that is not in the batch")


def edge_softmax(logits: torch.Tensor, dst: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of (E, heads) logits over the incoming edges of each node."""
    heads = logits.shape[1]
    idx = dst.unsqueeze(1).expand(-1, heads)
    mx = torch.full((n, heads), -torch.inf, dtype=logits.dtype).scatter_reduce(
        0, idx, logits, reduce="amax", include_self=True
    )
    ex = torch.exp(logits - mx[dst].detach())
    den = torch.zeros((n, heads), dtype=logits.dtype).index_add(0, dst, ex)
    return ex / den[dst]


class GCNLayer(nn.Module):
    """Symmetric-normalized aggregation, D^-1/2 (A + I) D^-1/2 X W + b."""

    def __init__(self, cin, cout):
        super().__init__()
        self.lin = nn.Linear(cin, cout, bias=False)
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.xavier_uniform_(self.lin.weight)

    def norm_weights(self, edge_index, n, dtype):
        src, dst = edge_index
        deg = torch.zeros(n, dtype=dtype).index_add(0, dst, torch.ones(dst.shape[0], dtype=dtype))
        inv = deg.pow(-0.5)
        return inv[src] * inv[dst]

    def forward(self, x, edge_index, return_attention=False, deg=None):
        """``deg`` overrides the in-degrees (self-loops included) used for normalization."""
        n = x.shape[0]
        src, dst = edge_index
        if deg is None:
            w = self.norm_weights(edge_index, n, x.dtype)
        else:
            inv = deg.to(x.dtype).pow(-0.5)
            w = inv[src] * inv[dst]
        h = self.lin(x)
        out = torch.zeros_like(h).index_add(0, dst, h[src] * w.unsqueeze(1)) + self.bias
        return (out, w.unsqueeze(1)) if return_attention else out


class GATLayer(nn.Module):
    """Static attention: leaky_relu(a . [W h_i || W h_j]), softmax over j."""

    def __init__(self, cin, cout, heads, concat=True, v2=False):
        super().__init__()
        self.heads, self.cout, self.concat, self.v2 = heads, cout, concat, v2
        self.lin_src = nn.Linear(cin, heads * cout, bias=False)
        self.lin_dst = nn.Linear(cin, heads * cout, bias=False) if v2 else None
        self.att_src = nn.Parameter(torch.empty(heads, cout))
        self.att_dst = None if v2 else nn.Parameter(torch.empty(heads, cout))
        self.bias = nn.Parameter(torch.zeros(heads * cout if concat else cout))
        nn.init.xavier_uniform_(self.lin_src.weight)
        if v2:
            nn.init.xavier_uniform_(self.lin_dst.weight)
        nn.init.xavier_uniform_(self.att_src)
        if self.att_dst is not None:
            nn.init.xavier_uniform_(self.att_dst)

    def forward(self, x, edge_index, return_attention=False, deg=None):
        n = x.shape[0]
        src, dst = edge_index
        hs = self.lin_src(x).view(n, self.heads, self.cout)
        if self.v2:
            # dynamic attention: the learned vector comes after the nonlinearity
            hd = self.lin_dst(x).view(n, self.heads, self.cout)
            z = F.leaky_relu(hs[src] + hd[dst], 0.2)
            logits = (z * self.att_src).sum(-1)
        else:
            a_s = (hs * self.att_src).sum(-1)
            a_d = (hs * self.att_dst).sum(-1)
            logits = F.leaky_relu(a_s[src] + a_d[dst], 0.2)
        alpha = edge_softmax(logits, dst, n)
        msg = hs[src] * alpha.unsqueeze(-1)
        out = torch.zeros((n, self.heads, self.cout), dtype=x.dtype).index_add(0, dst, msg)
        out = out.reshape(n, -1) if self.concat else out.mean(1)
        out = out + self.bias
        return (out, alpha) if return_attention else out


class GNN(nn.Module):
    def __init__(self, cfg: GNNConfig, in_dim: int):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = in_dim
        for i in range(cfg.layers):
            last = i == cfg.layers - 1
            cout = cfg.out_dim if last else cfg.hidden
            if cfg.variant == "gcn":
                layers.append(GCNLayer(cin, cout))
                cin = cout
            else:
                layers.append(GATLayer(cin, cout, cfg.heads, concat=not last, v2=cfg.variant == "gatv2"))
                cin = cout if last else cout * cfg.heads
        self.layers = nn.ModuleList(layers)
        # learned offsets for query-side and template-side embeddings; their dot
        # product acts as a link-score bias a single shared embedding cannot express
        self.role = nn.Parameter(torch.zeros(2, cfg.out_dim))

    def with_roles(self, emb: torch.Tensor, n_query: int) -> torch.Tensor:
        """Add the query offset to the first ``n_query`` rows and the template offset to the rest."""
        return torch.cat([emb[:n_query] + self.role[0], emb[n_query:] + self.role[1]])

    def forward(self, x, edge_index, return_attention=False):
        _check_edges(edge_index, x.shape[0])
        edge_index = add_self_loops(edge_index, x.shape[0])
        att = []
        for i, layer in enumerate(self.layers):
            x, a = layer(x, edge_index, return_attention=True)
            att.append(a)
            if i < len(self.layers) - 1:
                x = F.elu(x)
        return (x, att, edge_index) if return_attention else x

    def context(self, x, edge_index) -> dict:
        """Per-layer states of a node set that only receives from itself.

        Used at inference: templates never receive from queries, so their
        states can be computed once and reused by :meth:`forward_sink`.
        """
        _check_edges(edge_index, x.shape[0])
        edge_index = add_self_loops(edge_index, x.shape[0])
        n = x.shape[0]
        deg = torch.zeros(n, dtype=torch.float64).index_add(
            0, edge_index[1], torch.ones(edge_index.shape[1], dtype=torch.float64)
        )
        states = [x]
        for i, layer in enumerate(self.layers):
            x = layer(x, edge_index)
            if i < len(self.layers) - 1:
                x = F.elu(x)
            states.append(x)
        return {"states": states, "deg": deg}

    def forward_sink(self, xq, ctx: dict, sources) -> torch.Tensor:
        """Embedding of one node (1, d) receiving from the context nodes
        ``sources`` and itself.

        Equal to running :meth:`forward` on the joint graph and reading the
        query row; context embeddings are ``ctx["states"][-1]``.
        """
        states, deg_c = ctx["states"], ctx["deg"]
        src = torch.as_tensor(np.asarray(sources), dtype=torch.long)
        if src.numel() and (src.min() < 0 or src.max() >= states[0].shape[0]):
            raise ValueError("adjacency references a node that is not in the batch")
        src = torch.unique(src)
        n = src.numel() + 1
        edges = torch.stack([torch.arange(n), torch.zeros(n, dtype=torch.long)])
        deg = torch.cat([torch.tensor([float(n)], dtype=torch.float64), deg_c[src]])
        for i, layer in enumerate(self.layers):
            xq = layer(torch.cat([xq, states[i][src]]), edges, deg=deg)[:1]
            if i < len(self.layers) - 1:
                xq = F.elu(xq)
        return xq


# ------------------------------------------------------------ STN head


class STNHead(nn.Module):
    """Regress 8 offsets from the identity homography out of an embedding matrix."""

    def __init__(self, cfg: STNConfig, emb_dim: int):
        super().__init__()
        self.cfg = cfg
        rows = cfg.k_stn + (1 if cfg.include_seed else 0)
        dims = [rows * emb_dim, *cfg.hidden]
        mods = []
        for a, b in zip(dims[:-1], dims[1:]):
            mods += [nn.Linear(a, b), nn.ReLU()]
        self.body = nn.Sequential(*mods)
        self.out = nn.Linear(dims[-1], 8)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, emb_matrix: torch.Tensor) -> torch.Tensor:
        """(B, rows, d) -> (B, 3, 3) offset homographies with h33 = 1."""
        if not self.cfg.include_seed:
            emb_matrix = emb_matrix[:, 1:]
        # a small output scale keeps early updates within the basin where the
        # warped-BEV loss still carries gradient signal
        off = self.cfg.offset_scale * self.out(self.body(emb_matrix.flatten(1)))
        G = torch.cat([off, torch.zeros_like(off[:, :1])], 1).view(-1, 3, 3)
        G = G + torch.eye(3, dtype=off.dtype)
        if not torch.isfinite(G).all():
            raise FloatingPointError("STN produced a non-finite homography")
        return G


class CalibNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.extractor = FeatureExtractor(config.extractor, config.num_classes, config.image_size)
        self.gnn = GNN(config.gnn, config.extractor.out_dim)
        self.stn = STNHead(config.stn, config.gnn.out_dim)


def init_params(config: ModelConfig) -> CalibNet:
    """Build the model with parameters drawn from ``config.seed`` (STN output layer zeroed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return CalibNet(config)


def extract_features(images: torch.Tensor, model: CalibNet) -> torch.Tensor:
    """(n, C, H, W) one-hot grids -> (n, d) features."""
    cfg = model.config
    if images.dim() != 4 or images.shape[1] != cfg.num_classes or tuple(images.shape[-1:-3:-1]) != tuple(cfg.image_size):
        raise ValueError(f"expected (n, {cfg.num_classes}, H, W) images of size {cfg.image_size}, got {tuple(images.shape)}")
    return model.extractor(images)


def gnn_forward(features: torch.Tensor, edge_index: torch.Tensor, model: CalibNet, return_attention=False):
    return model.gnn(features, edge_index, return_attention=return_attention)


def link_logits(emb: torch.Tensor, pairs: torch.Tensor) -> torch.Tensor:
    return (emb[pairs[:, 0]] * emb[pairs[:, 1]]).sum(-1)


def score_links(emb: torch.Tensor, pairs) -> torch.Tensor:
    """logistic(dot(e_src, e_dst)) for each (src, dst) row of ``pairs``."""
    pairs = torch.as_tensor(np.asarray(pairs), dtype=torch.long)
    if pairs.numel() and (pairs.min() < 0 or pairs.max() >= emb.shape[0]):
        raise KeyError("pair references an unknown node")
    return torch.sigmoid(link_logits(emb, pairs))


def select_topk(scores, k_stn: int, node_ids) -> tuple[list, object]:
    """Order candidates by descending score (ties: ascending id), keep k_stn,
    padding with the last id when fewer are available. Returns (ids, anchor)."""
    scores = np.asarray(scores, dtype=np.float64)
    node_ids = list(node_ids)
    if len(node_ids) == 0:
        raise ValueError("no candidate dictionary nodes")
    rank = np.argsort(np.argsort(np.array(node_ids, dtype=object)))
    order = np.lexsort((rank, -scores))[:k_stn]
    ids = [node_ids[i] for i in order]
    ids += [ids[-1]] * (k_stn - len(ids))
    return ids, ids[0]


def topk_indices(scores: torch.Tensor, k_stn: int, tie_rank: torch.Tensor) -> torch.Tensor:
    """Batched :func:`select_topk` over rows of ``scores`` (S, D); returns (S, k_stn)
    column indices. ``tie_rank`` orders columns by ascending id."""
    s = scores.detach().double().numpy()
    rank = tie_rank.numpy()
    out = np.empty((s.shape[0], k_stn), dtype=np.int64)
    for r in range(s.shape[0]):
        order = np.lexsort((rank, -s[r]))[:k_stn]
        if order.size < k_stn:
            order = np.concatenate([order, np.full(k_stn - order.size, order[-1])])
        out[r] = order
    return torch.as_tensor(out)


def stn_forward(emb_matrix: torch.Tensor, model: CalibNet) -> torch.Tensor:
    """(rows, d) or (B, rows, d) embedding matrices -> offset homographies G."""
    single = emb_matrix.dim() == 2
    G = model.stn(emb_matrix.unsqueeze(0) if single else emb_matrix)
    return G[0] if single else G


def compose_with_anchor(G: torch.Tensor, anchors: torch.Tensor, image_size) -> tuple[torch.Tensor, torch.Tensor]:
    """Turn regressed offsets into BEV-plane residuals and final homographies.

    ``G`` acts in the anchor view's normalized image frame T. The residual
    Hbar = A^-1 T^-1 G T A is a BEV-to-BEV homography and H = A Hbar,
    so Hbar = I when G = I. Returns (H, Hbar), both normalized to h33 = 1.
    """
    T = torch.as_tensor(normalizing_transform(image_size), dtype=torch.float64)
    A = anchors.to(torch.float64)
    # work with the offset D = G - I so that G = I gives Hbar = I and H = A bit-exactly
    D = G.to(torch.float64) - torch.eye(3, dtype=torch.float64)
    delta = torch.linalg.solve(T, D @ T @ A)
    H = A + delta
    Hbar = torch.eye(3, dtype=torch.float64) + torch.linalg.solve(A, delta)
    H = H / H[..., 2:3, 2:3]
    Hbar = Hbar / Hbar[..., 2:3, 2:3]
    return H, Hbar


def stn_homography(G: torch.Tensor) -> Homography:
    return Homography(G.detach().double().numpy())


# ------------------------------------------------------------ checkpoints

CHECKPOINT_VERSION = 1
_MAGIC = b"TOPOCKPT"


def save_checkpoint(path, model: CalibNet, state: dict | None = None, extra_tensors: dict | None = None) -> None:
    """Single-file container: magic, u64 header length, JSON header, then
    raw little-endian float32 payloads indexed by name/shape/offset."""
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "seed": model.config.seed,
        "state": state or {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[len(_MAGIC) : len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen])
    except ValueError as exc:
        raise ValueError(f"corrupt checkpoint header in {path}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
    body = data[start + hlen :]
    tensors = {}
    for ent in header["tensors"]:
        a, n = ent["offset"], ent["nbytes"]
        if a + n > len(body) or n != 4 * int(np.prod(ent["shape"], dtype=np.int64)):
            raise ValueError(f"corrupt payload for tensor {ent['name']}")
        arr = np.frombuffer(body[a : a + n], dtype="<f4").reshape(ent["shape"])
        tensors[ent["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, tensors


def load_checkpoint(path) -> tuple[CalibNet, dict, dict[str, torch.Tensor]]:
    """Returns (model, state, extra tensors)."""
    header, tensors = read_checkpoint(path)
    model = CalibNet(ModelConfig.from_json(header["config"]))
    sd = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(sd)
    extra = {k: v for k, v in tensors.items() if not k.startswith("model/")}
    return model, header["state"], extra
