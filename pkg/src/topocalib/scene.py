"""Semantic bird's-eye-view maps: palettes, raster I/O, one-hot encoding,
class merging for external masks and a procedural intersection generator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class ClassInfo:
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassPalette:
    """Ordered class table. Ids are contiguous from 0."""

    entries: dict[int, ClassInfo]
    background_id: int = 0

    def __post_init__(self):
        ids = sorted(self.entries)
        if ids != list(range(len(ids))) or not ids:
            raise ValueError(f"class ids must be contiguous from 0, got {ids}")
        if self.background_id not in self.entries:
            raise ValueError(f"background_id {self.background_id} is not a class id")
        colors = [tuple(e.color) for e in self.entries.values()]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def foreground_ids(self) -> list[int]:
        return [i for i in sorted(self.entries) if i != self.background_id]

    def id_of(self, name: str) -> int:
        for i, e in self.entries.items():
            if e.name == name:
                return i
        raise KeyError(name)

    def colors(self) -> np.ndarray:
        return np.array([self.entries[i].color for i in range(self.num_classes)], dtype=np.uint8)

    def to_json(self) -> dict:
        return {
            "classes": [
                {"id": i, "name": e.name, "color": list(e.color)} for i, e in sorted(self.entries.items())
            ],
            "background_id": self.background_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClassPalette":
        entries = {int(c["id"]): ClassInfo(str(c["name"]), tuple(int(v) for v in c["color"])) for c in obj["classes"]}
        return cls(entries, int(obj.get("background_id", 0)))


def intersection_palette() -> ClassPalette:
    """Background, road (red), terrain (blue), bicycle path (green)."""
    return ClassPalette(
        {
            0: ClassInfo("background", (0, 0, 0)),
            1: ClassInfo("road", (255, 0, 0)),
            2: ClassInfo("terrain", (0, 0, 255)),
            3: ClassInfo("bicycle_path", (0, 255, 0)),
        }
    )


def soccer_palette() -> ClassPalette:
    return ClassPalette(
        {
            0: ClassInfo("background", (0, 0, 0)),
            1: ClassInfo("goal_box_arcs_circle", (255, 0, 0)),
            2: ClassInfo("penalty_box", (0, 0, 255)),
            3: ClassInfo("pitch", (0, 255, 0)),
        }
    )


def load_palette(path) -> ClassPalette:
    with open(path) as f:
        return ClassPalette.from_json(json.load(f))


def save_palette(palette: ClassPalette, path) -> None:
    with open(path, "w") as f:
        json.dump(palette.to_json(), f, indent=2)


@dataclass(frozen=True)
class SemanticBEV:
    labels: np.ndarray
    palette: ClassPalette
    meters_per_pixel: float

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 2 or labels.shape[1] < 2:
            raise ValueError(f"label grid must be 2-D and at least 2x2, got shape {labels.shape}")
        if not self.meters_per_pixel > 0:
            raise ValueError("meters_per_pixel must be positive")
        check_labels(labels, self.palette)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def footprint_m(self) -> tuple[float, float]:
        """(width, height) of the map in meters."""
        h, w = self.labels.shape
        return w * self.meters_per_pixel, h * self.meters_per_pixel


def check_labels(labels: np.ndarray, palette: ClassPalette) -> None:
    labels = np.asarray(labels)
    bad = (labels < 0) | (labels >= palette.num_classes)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"label {labels[r, c]} at (row={r}, col={c}) is not a palette id")


def colors_to_labels(rgb: np.ndarray, palette: ClassPalette) -> np.ndarray:
    """Map an (H, W, 3) uint8 raster to class ids; every pixel must be an exact palette color."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError(f"expected an RGB raster, got shape {rgb.shape}")
    rgb = rgb[..., :3]
    code = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    pal = palette.colors().astype(np.int64)
    pal_code = (pal[:, 0] << 16) | (pal[:, 1] << 8) | pal[:, 2]
    order = np.argsort(pal_code)
    pos = np.searchsorted(pal_code[order], code)
    pos = np.clip(pos, 0, len(order) - 1)
    found = pal_code[order][pos] == code
    if not found.all():
        r, c = np.argwhere(~found)[0]
        raise ValueError(f"color {tuple(int(v) for v in rgb[r, c])} at (row={r}, col={c}) is not in the palette")
    return order[pos].astype(np.uint8)


def labels_to_colors(labels: np.ndarray, palette: ClassPalette) -> np.ndarray:
    return palette.colors()[np.asarray(labels)]


def load_bev(path, palette: ClassPalette, meters_per_pixel: float = 0.5) -> SemanticBEV:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read BEV raster {path}: {exc}") from exc
    return SemanticBEV(colors_to_labels(rgb, palette), palette, meters_per_pixel)


def save_bev(bev: SemanticBEV, path) -> None:
    Image.fromarray(labels_to_colors(bev.labels, bev.palette)).save(path)


def load_label_mask(path) -> np.ndarray:
    """Single-channel 8-bit raster, pixel value = class id."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(f"label mask {path} must be single-channel, got mode {im.mode}")
        return np.asarray(im).astype(np.uint8)


def save_label_mask(labels: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def encode_onehot(labels, num_classes: int | None = None, dtype=np.float32) -> np.ndarray:
    """(..., H, W) ids -> (..., C, H, W) one-hot. Accepts a SemanticBEV."""
    if isinstance(labels, SemanticBEV):
        num_classes = labels.palette.num_classes
        labels = labels.labels
    if num_classes is None:
        raise ValueError("num_classes is required for raw label grids")
    labels = np.asarray(labels)
    out = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(out, -1, -3)


@dataclass(frozen=True)
class MergeMap:
    """Total mapping from source class ids to destination class ids."""

    mapping: dict[int, int]

    @classmethod
    def from_json(cls, obj: dict) -> "MergeMap":
        return cls({int(k): int(v) for k, v in obj.items()})

    @classmethod
    def load(cls, path) -> "MergeMap":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def to_json(self) -> dict:
        return {str(k): v for k, v in sorted(self.mapping.items())}

    def validate(self, source: ClassPalette | None, destination: ClassPalette) -> None:
        for tgt in self.mapping.values():
            if tgt not in destination.entries:
                raise ValueError(f"merge target {tgt} is not in the destination palette")
        if source is not None:
            missing = set(source.entries) - set(self.mapping)
            if missing:
                raise ValueError(f"merge map is not total; missing source ids {sorted(missing)}")


def merge_classes(labels: np.ndarray, merge: MergeMap) -> np.ndarray:
    labels = np.asarray(labels)
    size = max(max(merge.mapping), int(labels.max(initial=0))) + 1
    lut = np.full(size, -1, dtype=np.int64)
    for src, tgt in merge.mapping.items():
        lut[src] = tgt
    out = lut[labels]
    if (out < 0).any():
        r, c = np.argwhere(out < 0)[0]
        raise ValueError(f"label {labels[r, c]} at (row={r}, col={c}) is outside the merge map domain")
    return out.astype(labels.dtype)


@dataclass(frozen=True)
class ProceduralSpec:
    """Layout knobs for the synthetic crossing-roads scene (sizes in meters)."""

    size: tuple[int, int] = (192, 192)
    meters_per_pixel: float = 0.35
    n_foreground: int = 3
    road_half_width: tuple[float, float] = (3.0, 5.0)
    verge_width: tuple[float, float] = (3.0, 7.0)
    bike_width: tuple[float, float] = (1.5, 2.5)
    crossing_angle_jitter_deg: float = 25.0
    center_jitter: float = 0.1
    n_blobs: int = 6
    blob_radius: tuple[float, float] = (3.0, 9.0)
    palette: ClassPalette = field(default_factory=intersection_palette)

    def to_json(self) -> dict:
        return {
            "size": list(self.size),
            "meters_per_pixel": self.meters_per_pixel,
            "n_foreground": self.n_foreground,
            "road_half_width": list(self.road_half_width),
            "verge_width": list(self.verge_width),
            "bike_width": list(self.bike_width),
            "crossing_angle_jitter_deg": self.crossing_angle_jitter_deg,
            "center_jitter": self.center_jitter,
            "n_blobs": self.n_blobs,
            "blob_radius": list(self.blob_radius),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProceduralSpec":
        kw = dict(obj)
        for key in ("size", "road_half_width", "verge_width", "bike_width", "blob_radius"):
            if key in kw:
                kw[key] = tuple(kw[key])
        kw.pop("palette", None)
        return cls(**kw)


def generate_procedural_bev(spec: ProceduralSpec, seed: int) -> SemanticBEV:
    """Two crossing road bands with terrain verges, bicycle paths running
    alongside on one side of each road, terrain blobs and background blocks.

    Pure function of ``(spec, seed)``.
    """
    if spec.n_foreground < 2:
        raise ValueError("procedural scene needs at least 2 foreground classes (road, terrain)")
    if spec.n_foreground > 3:
        raise ValueError("procedural scene supports at most 3 foreground classes")
    h, w = spec.size
    if h < 64 or w < 64:
        raise ValueError(f"procedural scene size must be at least 64x64, got {spec.size}")
    pal = spec.palette
    road, terrain = pal.id_of("road"), pal.id_of("terrain")
    bike = pal.id_of("bicycle_path") if spec.n_foreground >= 3 else None

    rng = np.random.default_rng(seed)
    s = spec.meters_per_pixel
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) * s
    cx = (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter)) * w * s
    cy = (0.5 + rng.uniform(-spec.center_jitter, spec.center_jitter)) * h * s
    a1 = rng.uniform(0.0, np.pi)
    a2 = a1 + np.pi / 2 + np.deg2rad(rng.uniform(-spec.crossing_angle_jitter_deg, spec.crossing_angle_jitter_deg))

    labels = np.full((h, w), pal.background_id, dtype=np.uint8)
    bands = []
    for ang in (a1, a2):
        nx, ny = -np.sin(ang), np.cos(ang)
        signed = (xx - cx) * nx + (yy - cy) * ny
        bands.append(
            (
                signed,
                rng.uniform(*spec.road_half_width),
                rng.uniform(*spec.verge_width),
                rng.uniform(*spec.bike_width),
                rng.choice([-1.0, 1.0]),
            )
        )

    for signed, half, verge, _, _ in bands:
        labels[np.abs(signed) <= half + verge] = terrain

    for _ in range(spec.n_blobs):
        bx, by = rng.uniform(0, w * s), rng.uniform(0, h * s)
        ra, rb = rng.uniform(*spec.blob_radius), rng.uniform(*spec.blob_radius)
        th = rng.uniform(0, np.pi)
        dx, dy = xx - bx, yy - by
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        labels[(u / ra) ** 2 + (v / rb) ** 2 <= 1.0] = terrain

    if bike is not None:
        for signed, half, verge, bw, side in bands:
            off = half + 0.5 * verge
            labels[np.abs(side * signed - off) <= 0.5 * bw] = bike

    for signed, half, *_ in bands:
        labels[np.abs(signed) <= half] = road

    wanted = [pal.background_id, road, terrain] + ([bike] if bike is not None else [])
    present = set(np.unique(labels).tolist())
    if not set(wanted) <= present:
        raise ValueError(f"degenerate procedural layout: classes {sorted(set(wanted) - present)} missing")
    return SemanticBEV(labels, pal, spec.meters_per_pixel)
