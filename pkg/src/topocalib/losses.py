"""Link-prediction BCE, patch-based topological MSE and class IoU."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    """Constants of the topological MSE.

    ``alpha`` weights the hinge penalty over the 3x3 patch neighborhood,
    ``beta`` is the per-patch slack, and the image is cut into
    ``patches_per_side`` x ``patches_per_side`` patches. ``epsilon`` clamps
    probabilities inside the BCE.
    """

    alpha: float = 0.5
    beta: float = 0.01
    patches_per_side: int = 8
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.patches_per_side < 1:
            raise ValueError("patches_per_side must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 < self.epsilon < 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "LossConfig":
        return cls(**obj)


def bce_link_loss(p, y, epsilon: float = 1e-7):
    """Summed binary cross-entropy over candidate links.

    Works on numpy arrays or torch tensors (differentiable in ``p``).
    """
    if isinstance(p, torch.Tensor):
        y = torch.as_tensor(y, dtype=p.dtype)
        if p.shape != y.shape:
            raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
        p = p.clamp(epsilon, 1.0 - epsilon)
        return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).sum()
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, epsilon, 1.0 - epsilon)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_link_loss_logits(logits: torch.Tensor, y) -> torch.Tensor:
    """Same sum as :func:`bce_link_loss` with p = sigmoid(logits), evaluated
    without clamping so saturated links keep their gradient."""
    y = torch.as_tensor(y, dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, y, reduction="sum")


def _check_patches(shape, n):
    h, w = shape[-2:]
    if h % n or w % n:
        raise ValueError(f"image size {w}x{h} is not divisible into {n}x{n} patches")


def patch_mse(pred: torch.Tensor, target: torch.Tensor, patches_per_side: int) -> torch.Tensor:
    """(..., C, H, W) -> (..., n, n) mean squared error per patch."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    _check_patches(pred.shape, patches_per_side)
    n = patches_per_side
    *lead, c, h, w = pred.shape
    sq = (pred - target) ** 2
    sq = sq.reshape(*lead, c, n, h // n, n, w // n)
    return sq.mean(dim=(-5, -3, -1))


def _neighbor_hinge_sum(mse: torch.Tensor, beta: float) -> torch.Tensor:
    hinge = torch.relu(mse - beta)
    lead = hinge.shape[:-2]
    n = hinge.shape[-1]
    flat = hinge.reshape(-1, 1, n, n)
    # zero padding == skipping out-of-range neighbors, since the hinge is >= 0
    kernel = torch.ones((1, 1, 3, 3), dtype=hinge.dtype)
    return F.conv2d(flat, kernel, padding=1).reshape(*lead, n, n)


def topological_mse(pred, target, cfg: LossConfig = LossConfig()):
    """Patch MSE plus an alpha-weighted hinge over each patch's 3x3 neighborhood
    (center included), averaged over the n x n patches.

    ``pred``/``target`` are (C, H, W) or batched (B, C, H, W) channel grids.
    Torch inputs give a differentiable tensor (one value per batch item when
    batched); numpy inputs give floats.
    """
    if not isinstance(pred, torch.Tensor):
        out = topological_mse(
            torch.as_tensor(np.asarray(pred, dtype=np.float64)),
            torch.as_tensor(np.asarray(target, dtype=np.float64)),
            cfg,
        )
        return out.numpy() if out.dim() else float(out)
    mse = patch_mse(pred, target, cfg.patches_per_side)
    per_patch = mse + cfg.alpha * _neighbor_hinge_sum(mse, cfg.beta)
    return per_patch.mean(dim=(-2, -1))


def loss_from_patch_mse(mse: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Topological MSE from precomputed (..., n, n) patch MSE arrays (numpy)."""
    mse = np.asarray(mse, dtype=np.float64)
    hinge = np.maximum(0.0, mse - cfg.beta)
    n = mse.shape[-1]
    padded = np.pad(hinge, [(0, 0)] * (mse.ndim - 2) + [(1, 1), (1, 1)])
    nsum = np.zeros_like(mse)
    for k in (-1, 0, 1):
        for l in (-1, 0, 1):
            nsum += padded[..., 1 + k : 1 + k + n, 1 + l : 1 + l + n]
    return (mse + cfg.alpha * nsum).mean(axis=(-2, -1))


def iou(pred: np.ndarray, gt: np.ndarray, palette=None, background: int = 0) -> float:
    """Macro IoU over non-background classes present in either grid.

    Returns 1.0 when neither grid contains any foreground class.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if palette is not None:
        background = palette.background_id
    classes = np.union1d(np.unique(pred), np.unique(gt))
    classes = classes[classes != background]
    if classes.size == 0:
        return 1.0
    scores = []
    for c in classes:
        a, b = pred == c, gt == c
        scores.append(np.logical_and(a, b).sum() / np.logical_or(a, b).sum())
    return float(np.mean(scores))
