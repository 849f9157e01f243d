"""
Scenes, virtual cameras and ground-plane homographies
=====================================================

A semantic bird's-eye view (BEV) of a crossing is the reference plane. Every
camera that looks at the ground sees a projective image of it, so one 3x3
homography maps BEV pixels to image pixels. This script builds a procedural
scene, samples cameras, renders their views and walks back from a homography
to the camera pose.
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from topocalib.datagen import CameraGrid, generate_dataset, sample_camera_grid
from topocalib.geometry import (
    Intrinsics,
    decompose_homography,
    extrinsics_from_pose,
    homography_from_plane_camera,
    invert,
    rotation_angle,
    warp_labels,
)
from topocalib.losses import iou
from topocalib.scene import ProceduralSpec, generate_procedural_bev, labels_to_colors

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(parents=True, exist_ok=True)

# %%
# A procedural scene: two crossing roads with verges and bicycle paths.
# Labels are class ids; the palette gives each class a color.
bev = generate_procedural_bev(ProceduralSpec(), seed=1)
print("BEV", bev.shape, "at", bev.meters_per_pixel, "m/px; classes", [e.name for e in bev.palette.entries.values()])
Image.fromarray(labels_to_colors(bev.labels, bev.palette)).save(out / "bev.png")

# %%
# One camera 8 m above the ground, tilted 35 degrees below the horizon.
# The world frame has z pointing down, so the camera center sits at z = -8.
K = Intrinsics.centered(400.0, (128, 128))
E = extrinsics_from_pose((20.0, 15.0), 8.0, pan=0.7, tilt=np.deg2rad(35))
H = homography_from_plane_camera(K, E, bev.meters_per_pixel)
print("H =\n", np.round(H.matrix, 4))

view = warp_labels(bev.labels, H, (128, 128))
Image.fromarray(labels_to_colors(view, bev.palette)).save(out / "view.png")

# %%
# Warping the view back with H^-1 recovers the BEV wherever the camera saw it.
back = warp_labels(view, invert(H), bev.labels.shape[::-1], background=255)
seen = back != 255
print(f"round-trip IoU on the visible region: {iou(back[seen], bev.labels[seen]):.4f}")

# %%
# Given the intrinsics, the homography determines the pose.
E2 = decompose_homography(H, K, bev.meters_per_pixel)
print(f"rotation error {rotation_angle(E.rotation, E2.rotation):.1e} rad, "
      f"height {E2.height:.3f} m")

# %%
# The dataset generator samples a camera grid around the scene, renders each
# view and drops views that see too little foreground.
grid = CameraGrid.for_bev(bev, total_count=200, seed=0)
manifest = generate_dataset(bev, sample_camera_grid(grid), (128, 128), min_foreground=0.2)
print(f"{len(manifest)} views kept, {manifest.dropped} dropped")
tiles = [labels_to_colors(s.image, bev.palette) for s in manifest.samples[:8]]
Image.fromarray(np.concatenate(tiles, axis=1)).save(out / "views.png")
