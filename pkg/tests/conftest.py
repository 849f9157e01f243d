import numpy as np
import pytest
import torch

from topocalib.datagen import CameraGrid, generate_dataset, sample_camera_grid, split_dataset
from topocalib.geometry import Intrinsics, extrinsics_from_pose
from topocalib.graph import build_graph
from topocalib.losses import LossConfig
from topocalib.scene import ProceduralSpec, generate_procedural_bev

torch.set_num_threads(1)


def random_camera(rng, bev_shape=(192, 192), mpp=0.35, image_size=(128, 128)):
    """In-range camera looking at a random point of the BEV."""
    h, w = bev_shape
    focal = rng.uniform(300, 800)
    K = Intrinsics.centered(focal, image_size)
    target = rng.uniform([0.3 * w * mpp, 0.3 * h * mpp], [0.7 * w * mpp, 0.7 * h * mpp])
    height = rng.uniform(4, 12)
    tilt = np.deg2rad(rng.uniform(20, 70))
    pan = rng.uniform(0, 2 * np.pi)
    dist = height / np.tan(tilt)
    center = target - dist * np.array([np.cos(pan), np.sin(pan)])
    roll = np.deg2rad(rng.uniform(-5, 5))
    return K, extrinsics_from_pose(center, height, pan, tilt, roll)


def ray_plane_warp(labels, K, E, mpp, out_size, background=0):
    """Oracle label warp: cast each pixel's ray and intersect the ground plane."""
    w, h = out_size
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    d = E.rotation.T @ np.linalg.solve(K.matrix, pix)
    C = E.center
    lam = -C[2] / d[2]
    X = C[:, None] + lam * d
    u = np.floor(X[0] / mpp + 0.5)
    v = np.floor(X[1] / mpp + 0.5)
    ok = (lam > 0) & (u >= 0) & (u < labels.shape[1]) & (v >= 0) & (v < labels.shape[0])
    out = np.full(xs.size, background, dtype=labels.dtype)
    out[ok] = labels[v[ok].astype(int), u[ok].astype(int)]
    return out.reshape(h, w)


@pytest.fixture(scope="session")
def bev():
    return generate_procedural_bev(ProceduralSpec(), seed=1)


@pytest.fixture(scope="session")
def small_bev():
    return generate_procedural_bev(ProceduralSpec(size=(96, 96), meters_per_pixel=0.7), seed=3)


@pytest.fixture(scope="session")
def tiny_manifest(small_bev):
    """60 small views (64x64) split into dictionary / train / test."""
    grid = CameraGrid.for_bev(small_bev, total_count=60, seed=5, image_size=(64, 64), focal=(150, 300))
    man = generate_dataset(small_bev, sample_camera_grid(grid), (64, 64), 0.2)
    return split_dataset(man, 0.3, seed=2)


@pytest.fixture(scope="session")
def tiny_graph(tiny_manifest):
    return build_graph(tiny_manifest, k=5, cfg=LossConfig())


def tiny_run_config():
    """Run configuration small enough to generate, build and train in seconds."""
    from topocalib.pipeline import RunConfig

    return RunConfig.from_json(
        {
            "scene": {"kind": "procedural", "seed": 3, "spec": {"size": [96, 96], "meters_per_pixel": 0.7}},
            "datagen": {"views": 50, "candidates": 70, "out_size": [64, 64], "focal": [150, 300], "seed": 5, "dictionary_fraction": 0.3},
            "graph": {"k": 5},
            "model": {
                "image_size": [64, 64],
                "extractor": {"widths": [8, 16, 16, 16], "out_dim": 32},
                "gnn": {"hidden": 16, "out_dim": 32, "heads": 2},
                "stn": {"k_stn": 3, "hidden": [32]},
            },
            "train": {"warmup_epochs": 2, "max_epochs": 2, "batch_size": 8, "fanouts": [3, 2], "seed": 1},
        }
    )


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Generated, graphed and trained run directory."""
    from topocalib.pipeline import run_build_graph, run_generate, run_train

    run = run_generate(tiny_run_config(), tmp_path_factory.mktemp("run"))
    run_build_graph(run)
    run_train(run)
    return run
