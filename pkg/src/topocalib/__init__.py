"""Camera calibration from semantic masks by graph matching against synthetic views of a BEV map.

Modules:
    scene      BEV maps, palettes, class merging, procedural scenes
    geometry   plane homographies, warping, extrinsics recovery
    datagen    virtual camera grids, view rendering, splits
    graph      topological similarity, template graph, mini-batch sampling
    losses     link BCE, topological MSE, IoU
    models     feature extractor, GCN/GAT/GATv2, STN head, checkpoints
    training   two-phase schedule, inference and evaluation
    pipeline   run directories, calibration, reports
"""
from .geometry import Extrinsics, Homography, Intrinsics, decompose_homography, homography_from_plane_camera, warp
from .losses import LossConfig, bce_link_loss, iou, topological_mse
from .scene import ClassPalette, MergeMap, SemanticBEV, generate_procedural_bev, merge_classes

__version__ = "0.1.0"

__all__ = [
    "ClassPalette",
    "Extrinsics",
    "Homography",
    "Intrinsics",
    "LossConfig",
    "MergeMap",
    "SemanticBEV",
    "bce_link_loss",
    "decompose_homography",
    "generate_procedural_bev",
    "homography_from_plane_camera",
    "iou",
    "merge_classes",
    "topological_mse",
    "warp",
]
