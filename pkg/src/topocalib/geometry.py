"""Ground-plane camera geometry.

World frame: x along BEV columns, y along BEV rows, z = x cross y, which points
*into* the ground. BEV pixel (u, v) sits at world (u*s, v*s, 0). A camera at
height h above the ground therefore has center z = -h. Extrinsics map world to
camera coordinates, X_cam = R X_world + t.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

_DET_EPS = 1e-12


@dataclass(frozen=True)
class Intrinsics:
    focal_length: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError("focal_length must be positive")
        cx, cy = self.principal_point
        w, h = self.image_size
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ValueError(f"principal point {self.principal_point} outside image {self.image_size}")

    @classmethod
    def centered(cls, focal_length: float, image_size: tuple[int, int]) -> "Intrinsics":
        w, h = image_size
        return cls(float(focal_length), ((w - 1) / 2.0, (h - 1) / 2.0), (int(w), int(h)))

    @property
    def matrix(self) -> np.ndarray:
        f = self.focal_length
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    def to_json(self) -> dict:
        return {
            "focal_length": self.focal_length,
            "principal_point": list(self.principal_point),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Intrinsics":
        return cls(
            float(obj["focal_length"]),
            tuple(float(v) for v in obj["principal_point"]),
            tuple(int(v) for v in obj["image_size"]),
        )


@dataclass(frozen=True)
class Extrinsics:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not self.height > 0:
            raise ValueError(f"camera center must be above the ground plane (height {self.height:.3g})")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def height(self) -> float:
        return float(-self.center[2])

    def to_json(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Extrinsics":
        return cls(np.array(obj["rotation"], dtype=np.float64), np.array(obj["translation"], dtype=np.float64))


def look_rotation(pan: float, tilt: float, roll: float = 0.0) -> np.ndarray:
    """World-to-camera rotation for a camera panned ``pan`` about the vertical,
    looking ``tilt`` radians below the horizon, rolled about its optical axis."""
    d = np.array([np.cos(tilt) * np.cos(pan), np.cos(tilt) * np.sin(pan), np.sin(tilt)])
    x = np.array([-np.sin(pan), np.cos(pan), 0.0])
    y = np.cross(d, x)
    cr, sr = np.cos(roll), np.sin(roll)
    x, y = cr * x + sr * y, -sr * x + cr * y
    return np.stack([x, y, d])


def extrinsics_from_pose(center_xy, height: float, pan: float, tilt: float, roll: float = 0.0) -> Extrinsics:
    R = look_rotation(pan, tilt, roll)
    C = np.array([center_xy[0], center_xy[1], -height], dtype=np.float64)
    return Extrinsics(R, -R @ C)


class Homography:
    """3x3 projective map normalized so that the bottom-right entry is 1."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64).reshape(3, 3)
        if not np.isfinite(m).all():
            raise ValueError("homography has non-finite entries")
        if abs(m[2, 2]) < _DET_EPS:
            raise ValueError(f"cannot normalize homography: bottom-right entry {m[2, 2]:.3g} is ~0")
        m = m / m[2, 2]
        m[2, 2] = 1.0
        if abs(np.linalg.det(m)) <= _DET_EPS:
            raise ValueError("homography is singular")
        self.matrix = m
        self.matrix.flags.writeable = False

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, pts) -> np.ndarray:
        """Map (N, 2) points; returns (N, 2)."""
        pts = np.asarray(pts, dtype=np.float64)
        q = pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        return q[:, :2] / q[:, 2:3]

    def to_list(self) -> list[float]:
        return self.matrix.reshape(-1).tolist()

    @classmethod
    def from_list(cls, values) -> "Homography":
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))

    def __matmul__(self, other: "Homography") -> "Homography":
        return compose(self, other)

    def __repr__(self):
        return f"Homography({np.array2string(self.matrix, precision=6)})"


def bev_scale(meters_per_pixel: float) -> np.ndarray:
    return np.diag([meters_per_pixel, meters_per_pixel, 1.0])


def homography_from_plane_camera(K: Intrinsics, E: Extrinsics, meters_per_pixel: float) -> Homography:
    """BEV pixel -> image pixel homography, K [r1 r2 t] diag(s, s, 1)."""
    R, t = E.rotation, E.translation
    M = K.matrix @ np.column_stack([R[:, 0], R[:, 1], t]) @ bev_scale(meters_per_pixel)
    if abs(M[2, 2]) < _DET_EPS or abs(np.linalg.det(M)) < _DET_EPS:
        raise ValueError("degenerate plane camera: camera center lies in the ground plane")
    return Homography(M)


def compose(A: Homography, B: Homography) -> Homography:
    """A after B, i.e. the normalized product A.B."""
    return Homography(A.matrix @ B.matrix)


def invert(H: Homography) -> Homography:
    if np.linalg.cond(H.matrix) > 1e12:
        raise ValueError("homography is too ill-conditioned to invert")
    return Homography(np.linalg.inv(H.matrix))


def decompose_homography(H: Homography, K: Intrinsics, meters_per_pixel: float = 1.0) -> Extrinsics:
    """Recover camera rotation and translation from a BEV-to-image homography.

    Emits a ``RuntimeWarning`` when the scaled columns are far from orthonormal
    (> 1e-3), which signals that ``H`` is not a clean plane-camera homography.
    """
    M = np.linalg.solve(K.matrix, H.matrix) @ np.linalg.inv(bev_scale(meters_per_pixel))
    m1, m2, m3 = M[:, 0], M[:, 1], M[:, 2]
    n1, n2 = np.linalg.norm(m1), np.linalg.norm(m2)
    if n1 < _DET_EPS or n2 < _DET_EPS:
        raise ValueError("homography columns vanish; cannot recover a rotation")
    lam = 2.0 / (n1 + n2)
    r1, r2 = lam * m1, lam * m2
    approx = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(approx)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    t = lam * m3
    if R[:, 2] @ t < 0:
        # flipping the scale sign negates r1, r2 and t; r3 = r1 x r2 is unchanged
        R = R @ np.diag([-1.0, -1.0, 1.0])
        t = -t
        approx = approx @ np.diag([-1.0, -1.0, 1.0])
    deviation = np.abs(approx - R).max()
    if deviation > 1e-3:
        warnings.warn(
            f"recovered rotation deviates from orthonormal by {deviation:.3g}; H may not be a plane-camera homography",
            RuntimeWarning,
            stacklevel=2,
        )
    return Extrinsics(R, t)


def rotation_angle(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotations."""
    # arccos loses precision near 0, so use the chordal form
    return float(2.0 * np.arcsin(min(1.0, np.linalg.norm(R1 - R2, "fro") / (2.0 * np.sqrt(2.0)))))


# ---------------------------------------------------------------- warping


def _pixel_grid(out_size):
    w, h = out_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def warp_labels(labels: np.ndarray, H: Homography, out_size: tuple[int, int], background: int = 0) -> np.ndarray:
    """Nearest-neighbor inverse-mapping warp of a label grid.

    Output pixel (x, y) takes the source label at round(H^-1 (x, y, 1)); samples
    that fall outside the source, or behind the projection center, are ``background``.
    """
    labels = np.asarray(labels)
    hs, ws = labels.shape
    Hi = np.linalg.inv(H.matrix)
    # h33 = 1 normalization may flip the overall sign; for a camera above the
    # plane det(K [r1 r2 t]) > 0, so the determinant sign restores depth sign
    Hi = Hi * np.sign(np.linalg.det(Hi))
    xs, ys = _pixel_grid(out_size)
    den = Hi[2, 0] * xs + Hi[2, 1] * ys + Hi[2, 2]
    ok = den > _DET_EPS
    den = np.where(ok, den, 1.0)
    u = (Hi[0, 0] * xs + Hi[0, 1] * ys + Hi[0, 2]) / den
    v = (Hi[1, 0] * xs + Hi[1, 1] * ys + Hi[1, 2]) / den
    ui = np.floor(u + 0.5)
    vi = np.floor(v + 0.5)
    ok &= (ui >= 0) & (ui < ws) & (vi >= 0) & (vi < hs)
    out = np.full(xs.shape, background, dtype=labels.dtype)
    out[ok] = labels[vi[ok].astype(np.int64), ui[ok].astype(np.int64)]
    return out


def sampling_grid(H_inv: torch.Tensor, out_size, src_size) -> tuple[torch.Tensor, torch.Tensor]:
    """Source sample locations for every output pixel, in grid_sample units.

    ``H_inv`` is (B, 3, 3) mapping output pixels to source pixels. Returns the
    (B, h, w, 2) normalized grid and a (B, h, w) mask of samples in front of
    the projection center.
    """
    w, h = out_size
    hs, ws = src_size
    dtype = H_inv.dtype
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    pts = torch.stack([xs, ys, torch.ones_like(xs)], dim=-1).reshape(-1, 3)
    q = torch.einsum("bij,nj->bni", H_inv, pts)
    # same depth-sign correction as in warp_labels
    q = q * torch.sign(torch.linalg.det(H_inv)).detach()[:, None, None]
    den = q[..., 2]
    front = den > _DET_EPS
    den = torch.where(front, den, torch.ones_like(den))
    u = q[..., 0] / den
    v = q[..., 1] / den
    gx = 2.0 * u / (ws - 1) - 1.0
    gy = 2.0 * v / (hs - 1) - 1.0
    far = torch.full_like(gx, -4.0)
    gx = torch.where(front, gx.clamp(-4.0, 4.0), far)
    gy = torch.where(front, gy.clamp(-4.0, 4.0), far)
    grid = torch.stack([gx, gy], dim=-1).reshape(-1, h, w, 2)
    return grid, front.reshape(-1, h, w)


def warp_channels(
    channels: torch.Tensor, H: torch.Tensor, out_size: tuple[int, int], background: int = 0
) -> torch.Tensor:
    """Differentiable bilinear inverse-mapping warp of class-channel grids.

    ``channels`` is (C, h, w) or (B, C, h, w); ``H`` is (3, 3) or (B, 3, 3),
    BEV -> output pixels. Out-of-bounds samples are filled with the background
    one-hot vector, blended with the in-bounds mass near the border.
    Gradients flow to both the channel values and the entries of ``H``.
    """
    single = channels.dim() == 3 and H.dim() == 2
    if channels.dim() == 3:
        channels = channels.unsqueeze(0)
    if H.dim() == 2:
        H = H.unsqueeze(0)
    b, c, hs, ws = channels.shape
    if H.shape[0] != b:
        if channels.shape[0] == 1:
            channels = channels.expand(H.shape[0], -1, -1, -1)
            b = H.shape[0]
        else:
            raise ValueError("batch size mismatch between channels and homographies")
    H_inv = torch.linalg.inv(H.to(torch.float64))
    grid, front = sampling_grid(H_inv, out_size, (hs, ws))
    grid = grid.to(channels.dtype)
    ones = torch.ones((b, 1, hs, ws), dtype=channels.dtype)
    sampled = F.grid_sample(
        torch.cat([channels, ones], dim=1), grid, mode="bilinear", padding_mode="zeros", align_corners=True
    )
    mass = sampled[:, -1:] * front.unsqueeze(1).to(channels.dtype)
    sampled = sampled[:, :-1] * front.unsqueeze(1).to(channels.dtype)
    fill = torch.zeros((1, c, 1, 1), dtype=channels.dtype)
    fill[0, background] = 1.0
    out = sampled + (1.0 - mass) * fill
    return out[0] if single else out


def warp(image, H: Homography, out_size: tuple[int, int], mode: str = "nearest-label", background: int = 0):
    """Dispatch to the label (nearest) or channel (bilinear, differentiable) warp."""
    if mode == "nearest-label":
        arr = np.asarray(image)
        if arr.ndim != 2:
            raise ValueError("nearest-label mode expects a 2-D label grid")
        return warp_labels(arr, H, out_size, background)
    if mode == "bilinear-channels":
        as_numpy = not isinstance(image, torch.Tensor)
        t = torch.as_tensor(np.asarray(image)) if as_numpy else image
        if t.dim() != 3:
            raise ValueError("bilinear-channels mode expects a (C, H, W) channel grid")
        Ht = torch.as_tensor(np.array(H.matrix if isinstance(H, Homography) else H), dtype=t.dtype)
        out = warp_channels(t, Ht, out_size, background)
        return out.detach().numpy() if as_numpy else out
    raise ValueError(f"unknown warp mode {mode!r}")


def normalizing_transform(size: tuple[int, int]) -> np.ndarray:
    """Map pixel coordinates of a (W, H) image onto [-1, 1]^2."""
    w, h = size
    return np.array([[2.0 / (w - 1), 0.0, -1.0], [0.0, 2.0 / (h - 1), -1.0], [0.0, 0.0, 1.0]])
