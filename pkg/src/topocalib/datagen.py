"""Virtual camera sampling, synthetic view rendering and dataset splits."""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    Extrinsics,
    Homography,
    Intrinsics,
    extrinsics_from_pose,
    homography_from_plane_camera,
    warp_labels,
)
from .scene import SemanticBEV, load_label_mask, save_label_mask

SPLITS = ("train", "test", "dictionary")


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("CALIB_NUM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class CameraGrid:
    """Parameter ranges for virtual cameras. Angles in radians, lengths in meters.

    ``look_at`` is the ground point (normally the BEV center) that every
    sampled camera must see inside its image.
    """

    x: tuple[float, float]
    y: tuple[float, float]
    look_at: tuple[float, float]
    focal: tuple[float, float] = (300.0, 800.0)
    pan: tuple[float, float] = (0.0, 2 * math.pi)
    tilt: tuple[float, float] = (math.radians(20.0), math.radians(70.0))
    roll: tuple[float, float] = (math.radians(-5.0), math.radians(5.0))
    height: tuple[float, float] = (4.0, 12.0)
    image_size: tuple[int, int] = (128, 128)
    total_count: int = 1000
    samples_per_parameter: int | None = None
    seed: int = 0
    max_retries: int = 2000

    def __post_init__(self):
        for name in ("x", "y", "focal", "pan", "tilt", "roll", "height"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name} has min > max: {lo} > {hi}")
        if self.height[0] <= 0:
            raise ValueError("height range must be strictly positive")
        if self.focal[0] <= 0:
            raise ValueError("focal range must be strictly positive")
        if self.total_count < 1:
            raise ValueError("total_count must be >= 1")

    @classmethod
    def for_bev(cls, bev: SemanticBEV, footprint_factor: float = 1.5, **kw) -> "CameraGrid":
        """Positions within ``footprint_factor`` times the BEV footprint, aimed at its center."""
        w, h = bev.footprint_m
        cx, cy = w / 2.0, h / 2.0
        kw.setdefault("x", (cx - footprint_factor * w / 2, cx + footprint_factor * w / 2))
        kw.setdefault("y", (cy - footprint_factor * h / 2, cy + footprint_factor * h / 2))
        kw.setdefault("look_at", (cx, cy))
        return cls(**kw)

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "CameraGrid":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in obj.items()}
        return cls(**kw)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics

    def to_json(self) -> dict:
        return {"intrinsics": self.intrinsics.to_json(), "extrinsics": self.extrinsics.to_json()}


_PARAMS = ("focal", "pan", "tilt", "roll", "x", "y", "height")


def _draw(grid: CameraGrid, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
    out = {}
    for name in _PARAMS:
        lo, hi = getattr(grid, name)
        if grid.samples_per_parameter:
            levels = np.linspace(lo, hi, grid.samples_per_parameter)
            out[name] = levels[rng.integers(0, len(levels), n)]
        else:
            out[name] = rng.uniform(lo, hi, n)
    return out


def _sees_target(p: dict[str, np.ndarray], grid: CameraGrid) -> np.ndarray:
    """Vectorized check that ``grid.look_at`` projects inside the image, in front."""
    pan, tilt, roll = p["pan"], p["tilt"], p["roll"]
    d = np.stack([np.cos(tilt) * np.cos(pan), np.cos(tilt) * np.sin(pan), np.sin(tilt)], -1)
    x = np.stack([-np.sin(pan), np.cos(pan), np.zeros_like(pan)], -1)
    y = np.cross(d, x)
    cr, sr = np.cos(roll)[:, None], np.sin(roll)[:, None]
    x, y = cr * x + sr * y, -sr * x + cr * y
    rel = np.stack([grid.look_at[0] - p["x"], grid.look_at[1] - p["y"], p["height"]], -1)
    zc = np.einsum("ij,ij->i", d, rel)
    w, h = grid.image_size
    with np.errstate(divide="ignore", invalid="ignore"):
        u = p["focal"] * np.einsum("ij,ij->i", x, rel) / zc + (w - 1) / 2.0
        v = p["focal"] * np.einsum("ij,ij->i", y, rel) / zc + (h - 1) / 2.0
    return (zc > 1e-6) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)


def sample_camera_grid(grid: CameraGrid) -> list[Camera]:
    """Draw ``total_count`` cameras by rejection until the look-at point is visible.

    Deterministic for a fixed ``grid.seed``.
    """
    rng = np.random.default_rng(grid.seed)
    chosen: dict[str, list] = {k: [] for k in _PARAMS}
    need = grid.total_count
    tries = 0
    chunk = 4096  # fixed so that longer runs extend shorter ones
    while need > 0:
        p = _draw(grid, rng, chunk)
        ok = np.flatnonzero(_sees_target(p, grid))[:need]
        for k in _PARAMS:
            chosen[k].extend(p[k][ok].tolist())
        need -= ok.size
        tries += chunk
        if need > 0 and tries > max(grid.max_retries * grid.total_count, chunk):
            ranges = ", ".join(f"{k}={getattr(grid, k)}" for k in _PARAMS)
            raise ValueError(
                f"could not orient cameras to see look_at={grid.look_at} after {tries} draws; ranges: {ranges}"
            )
    cams = []
    for i in range(grid.total_count):
        K = Intrinsics.centered(chosen["focal"][i], grid.image_size)
        E = extrinsics_from_pose(
            (chosen["x"][i], chosen["y"][i]), chosen["height"][i], chosen["pan"][i], chosen["tilt"][i], chosen["roll"][i]
        )
        cams.append(Camera(K, E))
    return cams


@dataclass
class ViewSample:
    id: str
    H_gt: Homography
    camera: Camera
    split: str | None = None
    image_path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)

    def to_json(self, scene_id: str) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "image_path": self.image_path,
            "H_gt": self.H_gt.to_list(),
            "intrinsics": self.camera.intrinsics.to_json(),
            "extrinsics": self.camera.extrinsics.to_json(),
            "scene_id": scene_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ViewSample":
        cam = Camera(Intrinsics.from_json(obj["intrinsics"]), Extrinsics.from_json(obj["extrinsics"]))
        return cls(obj["id"], Homography.from_list(obj["H_gt"]), cam, obj.get("split"), obj.get("image_path"))


@dataclass
class DatasetManifest:
    scene_id: str
    meters_per_pixel: float
    out_size: tuple[int, int]
    samples: list[ViewSample]
    dropped: int = 0
    config: dict = field(default_factory=dict)
    root: Path | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def index(self) -> dict[str, int]:
        return {s.id: i for i, s in enumerate(self.samples)}

    def by_split(self, split: str) -> list[ViewSample]:
        return [s for s in self.samples if s.split == split]

    def split_counts(self) -> dict[str, int]:
        return {k: sum(s.split == k for s in self.samples) for k in SPLITS}

    def image(self, sample: ViewSample) -> np.ndarray:
        if sample.image is None:
            if sample.image_path is None or self.root is None:
                raise ValueError(f"sample {sample.id} has no image data")
            sample.image = load_label_mask(self.root / sample.image_path)
        return sample.image

    def images(self, samples=None) -> np.ndarray:
        samples = self.samples if samples is None else samples
        return np.stack([self.image(s) for s in samples])

    def digest(self) -> str:
        """Content hash over ids, splits, homographies and image bytes."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(f"{s.id}|{s.split}|".encode())
            h.update(np.asarray(s.H_gt.matrix).tobytes())
            h.update(np.ascontiguousarray(self.image(s)).tobytes())
        return h.hexdigest()[:16]

    def header(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "meters_per_pixel": self.meters_per_pixel,
            "out_size": list(self.out_size),
            "count": len(self.samples),
            "dropped": self.dropped,
            "split_counts": self.split_counts(),
            "config": self.config,
        }

    def save(self, root) -> None:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for s in self.samples:
            if s.image_path is None:
                s.image_path = f"images/{s.id}.png"
            if s.image is not None:
                save_label_mask(s.image, root / s.image_path)
        with open(root / "manifest.jsonl", "w") as f:
            for s in self.samples:
                f.write(json.dumps(s.to_json(self.scene_id)) + "\n")
        with open(root / "manifest.json", "w") as f:
            json.dump(self.header(), f, indent=2)
        self.root = root

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        with open(root / "manifest.json") as f:
            head = json.load(f)
        with open(root / "manifest.jsonl") as f:
            samples = [ViewSample.from_json(json.loads(line)) for line in f if line.strip()]
        man = cls(
            head["scene_id"], head["meters_per_pixel"], tuple(head["out_size"]), samples, head.get("dropped", 0),
            head.get("config", {}), root,
        )
        for s in samples:
            if not (root / s.image_path).exists():
                raise FileNotFoundError(f"manifest references missing image {s.image_path}")
        return man


def render_view(bev: SemanticBEV, camera: Camera) -> tuple[Homography, np.ndarray]:
    H = homography_from_plane_camera(camera.intrinsics, camera.extrinsics, bev.meters_per_pixel)
    img = warp_labels(bev.labels, H, camera.intrinsics.image_size, bev.palette.background_id)
    return H, img


def foreground_fraction(labels: np.ndarray, background: int = 0) -> float:
    return float(np.mean(np.asarray(labels) != background))


def generate_dataset(
    bev: SemanticBEV,
    cameras,
    out_size: tuple[int, int] = (128, 128),
    min_foreground: float = 0.2,
    scene_id: str = "scene",
    config: dict | None = None,
    workers: int | None = None,
) -> DatasetManifest:
    """Render one view per camera; drop views below ``min_foreground``."""
    cameras = list(cameras)
    if not cameras:
        raise ValueError("no cameras given")
    for cam in cameras:
        if tuple(cam.intrinsics.image_size) != tuple(out_size):
            raise ValueError(f"camera image size {cam.intrinsics.image_size} != out_size {out_size}")
    workers = workers or num_workers()
    render = lambda cam: render_view(bev, cam)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rendered = list(pool.map(render, cameras))
    else:
        rendered = [render(c) for c in cameras]
    width = max(5, len(str(len(cameras) - 1)))
    samples, dropped = [], 0
    for i, (cam, (H, img)) in enumerate(zip(cameras, rendered)):
        if foreground_fraction(img, bev.palette.background_id) < min_foreground:
            dropped += 1
            continue
        samples.append(ViewSample(f"v{i:0{width}d}", H, cam, image=img))
    if not samples:
        raise ValueError(f"all {len(cameras)} views fell below min_foreground={min_foreground}")
    return DatasetManifest(scene_id, bev.meters_per_pixel, tuple(out_size), samples, dropped, dict(config or {}))


def split_dataset(manifest: DatasetManifest, dictionary_fraction: float = 0.2, seed: int = 0) -> DatasetManifest:
    """Draw the dictionary first, then halve the remainder into train and test."""
    if not 0.0 < dictionary_fraction < 1.0:
        raise ValueError("dictionary_fraction must lie in (0, 1)")
    n = len(manifest)
    if n < 3:
        raise ValueError("need at least 3 samples to split")
    n_dict = int(np.clip(round(dictionary_fraction * n), 1, n - 2))
    rest = n - n_dict
    n_train = (rest + 1) // 2
    perm = np.random.default_rng(seed).permutation(n)
    tags = np.empty(n, dtype=object)
    tags[perm[:n_dict]] = "dictionary"
    tags[perm[n_dict : n_dict + n_train]] = "train"
    tags[perm[n_dict + n_train :]] = "test"
    samples = [replace(s, split=str(t)) for s, t in zip(manifest.samples, tags)]
    return replace(manifest, samples=samples)
