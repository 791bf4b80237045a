"""Camera model, BEV voxel lattice, and feature-volume construction.

Road frame: x lateral (right), y longitudinal (forward), z up (elevation).
Camera frame: x right, y down, z along the optical axis.  The rig transform
maps road coordinates into the left camera; the right camera is displaced
by the baseline along the left camera's x axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, bilinear_sample_many

EPS_DEPTH = 1e-6


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")


@dataclass
class StereoRig:
    left: CameraIntrinsics
    right: CameraIntrinsics
    baseline: float
    rotation: np.ndarray      # 3x3, road -> left camera
    translation: np.ndarray   # 3-vector

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.baseline <= 0:
            raise ConfigError("baseline must be positive")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ConfigError("rig transform must be 3x3 rotation plus 3-vector")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ConfigError(f"rotation not orthonormal (|R^T R - I| = {err:.2e})")
        if np.linalg.det(self.rotation) < 0:
            raise ConfigError("rotation must be proper (det = +1)")

    def camera_translation(self, side: str) -> np.ndarray:
        if side == "left":
            return self.translation
        if side == "right":
            return self.translation - np.array([self.baseline, 0.0, 0.0])
        raise ConfigError(f"unknown camera side {side!r}")


@dataclass
class VoxelGrid:
    x_range: tuple
    y_range: tuple
    nx: int
    ny: int
    elevation_range: tuple
    ne: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.ne < 1:
            raise ConfigError("cell counts must be >= 1")
        for lo, hi in (self.x_range, self.y_range, self.elevation_range):
            if not hi > lo:
                raise ConfigError(f"degenerate range ({lo}, {hi})")

    def x_centers(self) -> np.ndarray:
        lo, hi = self.x_range
        step = (hi - lo) / self.nx
        return lo + step * (np.arange(self.nx) + 0.5)

    def y_centers(self) -> np.ndarray:
        lo, hi = self.y_range
        step = (hi - lo) / self.ny
        return lo + step * (np.arange(self.ny) + 0.5)


@dataclass
class FeatureVolume:
    values: Tensor            # [2C, ne, ny, nx]
    visibility: np.ndarray    # bool [ne, ny, nx]


def elevation_bins(grid: VoxelGrid) -> np.ndarray:
    """Uniform bin centers spanning the elevation range, endpoints included.

    Computed as an affine combination of the endpoints so symmetric ranges
    yield exactly antisymmetric bins.
    """
    lo, hi = grid.elevation_range
    if grid.ne == 1:
        return np.array([(lo + hi) / 2.0])
    k = np.arange(grid.ne, dtype=np.float64)
    m = grid.ne - 1
    bins = (lo * (m - k) + hi * k) / m
    bins[0] = lo
    bins[-1] = hi
    return bins


def project_points(points: np.ndarray, cam: CameraIntrinsics,
                   rotation: np.ndarray, translation: np.ndarray):
    """Project [M,3] road-frame points into pixels.

    Returns (u, v, depth, visible); points with depth <= EPS_DEPTH are
    flagged invisible and their pixel coordinates are not meaningful.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam_pts = pts @ rotation.T + translation
    z = cam_pts[:, 2]
    visible = z > EPS_DEPTH
    safe_z = np.where(visible, z, 1.0)
    u = cam.fx * cam_pts[:, 0] / safe_z + cam.cx
    v = cam.fy * cam_pts[:, 1] / safe_z + cam.cy
    return u, v, z, visible


def voxel_to_pixel(p_road, cam: CameraIntrinsics,
                   rotation: np.ndarray, translation: np.ndarray):
    """Single-point projection: returns (u, v, depth, visible)."""
    u, v, z, vis = project_points(np.asarray(p_road, dtype=np.float64)[None, :],
                                  cam, rotation, translation)
    return float(u[0]), float(v[0]), float(z[0]), bool(vis[0])


def backproject_pixel(u, v, depth, cam: CameraIntrinsics,
                      rotation: np.ndarray, translation: np.ndarray):
    """Inverse of :func:`voxel_to_pixel` for depth > 0."""
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    p_cam = np.array([x, y, depth])
    return rotation.T @ (p_cam - translation)


def make_pitched_rig(cam: CameraIntrinsics, baseline: float,
                     height: float, pitch: float) -> StereoRig:
    """Rig for a camera `height` metres above the road, pitched down by `pitch`.

    Both cameras share intrinsics; the right camera sits `baseline` metres
    along the left camera's x axis.
    """
    # axis remap (x right, y forward, z up) -> (x right, y down, z forward)
    base = np.array([[1.0, 0.0, 0.0],
                     [0.0, 0.0, -1.0],
                     [0.0, 1.0, 0.0]])
    c, s = math.cos(pitch), math.sin(pitch)
    pitch_rot = np.array([[1.0, 0.0, 0.0],
                          [0.0, c, -s],
                          [0.0, s, c]])
    rotation = pitch_rot @ base
    center = np.array([0.0, 0.0, height])
    translation = -rotation @ center
    return StereoRig(cam, cam, baseline, rotation, translation)


def voxel_centers(grid: VoxelGrid) -> np.ndarray:
    """Road-frame centers of every voxel, shaped [ne*ny*nx, 3]."""
    bins = elevation_bins(grid)
    xs = grid.x_centers()
    ys = grid.y_centers()
    zz, yy, xx = np.meshgrid(bins, ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def build_feature_volume(left_feat: Tensor, right_feat: Tensor,
                         grid: VoxelGrid, rig: StereoRig,
                         feat_stride: int) -> FeatureVolume:
    """Sample both feature maps at every projected voxel center.

    Output channels are the left C channels concatenated with the right C;
    a voxel is visible only when its center projects into both views, and
    invisible voxels carry exactly zero features.
    """
    if left_feat.shape != right_feat.shape:
        raise ShapeError(
            f"feature maps disagree: {left_feat.shape} vs {right_feat.shape}"
        )
    if len(left_feat.shape) != 3:
        raise ShapeError(f"feature maps must be [C,h,w], got {left_feat.shape}")
    C = left_feat.shape[0]
    pts = voxel_centers(grid)
    vol_shape = (grid.ne, grid.ny, grid.nx)

    sampled = []
    vis_all = np.ones(pts.shape[0], dtype=bool)
    for side, feat in (("left", left_feat), ("right", right_feat)):
        cam = rig.left if side == "left" else rig.right
        u, v, _, vis = project_points(pts, cam, rig.rotation,
                                      rig.camera_translation(side))
        vals, in_view = bilinear_sample_many(feat, u / feat_stride, v / feat_stride)
        sampled.append(vals)
        vis_all &= vis & in_view
    values = np.concatenate(sampled, axis=1)  # [M, 2C]
    values = values * vis_all[:, None]
    volume = values.T.reshape(2 * C, *vol_shape).copy()
    return FeatureVolume(Tensor(volume), vis_all.reshape(vol_shape))


def save_rig(path, rig: StereoRig):
    lines = []
    for side, cam in (("l", rig.left), ("r", rig.right)):
        lines += [f"fx_{side}={cam.fx!r}", f"fy_{side}={cam.fy!r}",
                  f"cx_{side}={cam.cx!r}", f"cy_{side}={cam.cy!r}"]
    lines += [
        f"width={rig.left.width}",
        f"height={rig.left.height}",
        f"baseline={rig.baseline!r}",
        "R=" + ",".join(repr(float(x)) for x in rig.rotation.ravel()),
        "t=" + ",".join(repr(float(x)) for x in rig.translation),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_rig(path) -> StereoRig:
    kv = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed rig line {line!r}")
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    try:
        width = int(kv["width"])
        height = int(kv["height"])
        cams = {}
        for side in ("l", "r"):
            cams[side] = CameraIntrinsics(
                float(kv[f"fx_{side}"]), float(kv[f"fy_{side}"]),
                float(kv[f"cx_{side}"]), float(kv[f"cy_{side}"]),
                width, height,
            )
        rot = np.array([float(x) for x in kv["R"].split(",")]).reshape(3, 3)
        t = np.array([float(x) for x in kv["t"].split(",")])
        return StereoRig(cams["l"], cams["r"], float(kv["baseline"]), rot, t)
    except KeyError as exc:
        raise ConfigError(f"rig file missing key {exc}") from exc
