"""Pinhole cameras, ray/ground-plane intersection and metric grid addressing.

Conventions used everywhere in the package:

* vehicle frame: x forward, y left, z up; the ground is the plane z = 0
* camera frame: x right, y down, z along the optical axis
* BEV grids: rows index x, columns index y; cell (i, j) has its center at
  ``(x_min + (i + 0.5) * dx, y_min + (j + 0.5) * dy)``
* pixel (u, v) is continuous, pixel centers sit at ``(col + 0.5, row + 0.5)``

All geometry is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import yaml

from .errors import ConfigError

_ORTHO_TOL = 1e-9

# camera axes expressed in the vehicle frame for a level, forward-looking camera
_CAM_TO_VEHICLE_BASE = np.array(
    [[0.0, 0.0, 1.0],
     [-1.0, 0.0, 0.0],
     [0.0, -1.0, 0.0]]
)


class GroundHit(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class GroundExtent:
    """Axis-aligned metric area covered by a BEV grid (rows along x)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    rows: int
    cols: int

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("extent bounds must be finite")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate extent {vals}")
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise ValueError("rows/cols must be integers")
        if self.rows < 2 or self.cols < 2:
            raise ValueError("extent needs at least 2x2 cells")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def cell_size(self) -> tuple[float, float]:
        return ((self.x_max - self.x_min) / self.rows, (self.y_max - self.y_min) / self.cols)

    @property
    def center_index(self) -> tuple[float, float]:
        """Continuous grid coordinates of the extent center."""
        return ((self.rows - 1) / 2.0, (self.cols - 1) / 2.0)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (X, Y) arrays of shape (rows, cols) with metric cell centers."""
        dx, dy = self.cell_size
        xs = self.x_min + (np.arange(self.rows) + 0.5) * dx
        ys = self.y_min + (np.arange(self.cols) + 0.5) * dy
        return np.meshgrid(xs, ys, indexing="ij")

    def contains(self, x, y):
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)

    def to_dict(self) -> dict:
        return {
            "x_range": [float(self.x_min), float(self.x_max)],
            "y_range": [float(self.y_min), float(self.y_max)],
            "rows": int(self.rows),
            "cols": int(self.cols),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundExtent":
        try:
            return cls(float(d["x_range"][0]), float(d["x_range"][1]),
                       float(d["y_range"][0]), float(d["y_range"][1]),
                       int(d["rows"]), int(d["cols"]))
        except (KeyError, IndexError, TypeError) as exc:
            raise ConfigError(f"bad extent block: {exc}") from exc


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``factor`` in both directions."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor,
                                self.cy * factor, int(round(self.width * factor)),
                                int(round(self.height * factor)))


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-vehicle rigid transform. ``translation`` is the camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have det +1")
        if t[2] <= 0:
            raise ValueError("camera must sit above the ground plane")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_angles(cls, yaw: float, pitch: float, translation, roll: float = 0.0) -> "CameraPose":
        """Build a pose from yaw (left positive), downward pitch and roll, in radians."""
        R = _rot_z(yaw) @ _rot_y(pitch) @ _rot_x(roll) @ _CAM_TO_VEHICLE_BASE
        return cls(R, np.asarray(translation, dtype=np.float64))

    @property
    def height(self) -> float:
        return float(self.translation[2])


@dataclass(frozen=True)
class Camera:
    name: str
    intrinsics: CameraIntrinsics
    pose: CameraPose


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if len(self.cameras) == 0:
            raise ValueError("rig needs at least one camera")
        object.__setattr__(self, "cameras", tuple(self.cameras))

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.cameras]

    @property
    def image_shape(self) -> tuple[int, int]:
        """(height, width); all cameras in a rig share one image size."""
        sizes = {(c.intrinsics.height, c.intrinsics.width) for c in self.cameras}
        if len(sizes) != 1:
            raise ValueError(f"mixed image sizes in rig: {sorted(sizes)}")
        return sizes.pop()

    def scaled(self, factor: float) -> "CameraRig":
        return CameraRig(tuple(Camera(c.name, c.intrinsics.scaled(factor), c.pose) for c in self.cameras))

    def subset(self, names: Sequence[str]) -> "CameraRig":
        by_name = {c.name: c for c in self.cameras}
        return CameraRig(tuple(by_name[n] for n in names))


@dataclass(frozen=True)
class EgoMotion2D:
    """Pose of frame t expressed in frame t-1: translation (dx, dy) and yaw dphi.

    A point fixed in the world with coordinates p_t in frame t has coordinates
    ``R(dphi) @ p_t + (dx, dy)`` in frame t-1.
    """

    dx: float = 0.0
    dy: float = 0.0
    dphi: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dphi)):
            raise ValueError("ego motion must be finite")

    @property
    def is_identity(self) -> bool:
        return self.dx == 0.0 and self.dy == 0.0 and self.dphi == 0.0

    def inverse(self) -> "EgoMotion2D":
        c, s = math.cos(self.dphi), math.sin(self.dphi)
        return EgoMotion2D(-(c * self.dx + s * self.dy), -(-s * self.dx + c * self.dy), -self.dphi)

    def then(self, other: "EgoMotion2D") -> "EgoMotion2D":
        """Chain two consecutive steps: ``self`` (t-1 -> t) followed by ``other`` (t -> t+1)."""
        c, s = math.cos(self.dphi), math.sin(self.dphi)
        return EgoMotion2D(self.dx + c * other.dx - s * other.dy,
                           self.dy + s * other.dx + c * other.dy,
                           self.dphi + other.dphi)

    def as_matrix(self) -> np.ndarray:
        c, s = math.cos(self.dphi), math.sin(self.dphi)
        return np.array([[c, -s, self.dx], [s, c, self.dy], [0.0, 0.0, 1.0]])


# --------------------------------------------------------------------------
# operations


def pixel_rays(u, v, intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Ray directions in the vehicle frame (not normalized), shape (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    return d_cam @ pose.rotation.T


def intersect_ground(u, v, intr: CameraIntrinsics, pose: CameraPose):
    """Vectorized ray/ground intersection.

    Returns ``(x, y, valid)`` arrays; invalid entries (rays at or above the
    horizon) hold NaN.
    """
    d = pixel_rays(u, v, intr, pose)
    c = pose.translation
    dz = d[..., 2]
    valid = dz < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(valid, -c[2] / np.where(valid, dz, -1.0), np.nan)
    x = c[0] + t * d[..., 0]
    y = c[1] + t * d[..., 1]
    return x, y, valid


def pixel_ray_ground_intersection(pixel, intr: CameraIntrinsics, pose: CameraPose) -> GroundHit | None:
    """Back-project pixel (u, v) onto the ground plane; None if the ray never gets there."""
    u, v = pixel
    if not (0.0 <= u <= intr.width and 0.0 <= v <= intr.height):
        raise ValueError(f"pixel {pixel} outside the {intr.width}x{intr.height} image")
    x, y, ok = intersect_ground(u, v, intr, pose)
    if not bool(ok):
        return None
    return GroundHit(float(x), float(y))


def project_points(points, intr: CameraIntrinsics, pose: CameraPose):
    """Vectorized pinhole projection of vehicle-frame points (..., 3).

    Returns ``(u, v, depth)``; callers mask ``depth <= 0`` themselves.
    """
    p = np.asarray(points, dtype=np.float64)
    p_cam = (p - pose.translation) @ pose.rotation  # R^T (p - t), row-vector form
    depth = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * p_cam[..., 0] / depth + intr.cx
        v = intr.fy * p_cam[..., 1] / depth + intr.cy
    return u, v, depth


def project_vehicle_point(point, intr: CameraIntrinsics, pose: CameraPose):
    """Project one vehicle-frame point; returns (u, v, depth) or None when behind the camera."""
    u, v, depth = project_points(np.asarray(point, dtype=np.float64), intr, pose)
    if not depth > 0:
        return None
    return float(u), float(v), float(depth)


def ground_to_grid_array(x, y, extent: GroundExtent):
    """Vectorized metric -> continuous grid coordinates; returns (r, s, inside)."""
    dx, dy = extent.cell_size
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = (x - extent.x_min) / dx - 0.5
    s = (y - extent.y_min) / dy - 0.5
    inside = extent.contains(x, y)
    return r, s, inside


def ground_to_grid(point, extent: GroundExtent):
    """Map a metric ground point to continuous (row, col); None when outside the extent."""
    x, y = point
    r, s, inside = ground_to_grid_array(x, y, extent)
    if not bool(inside):
        return None
    return float(r), float(s)


def grid_to_ground(r, s, extent: GroundExtent):
    dx, dy = extent.cell_size
    return extent.x_min + (np.asarray(r) + 0.5) * dx, extent.y_min + (np.asarray(s) + 0.5) * dy


# --------------------------------------------------------------------------
# default rig and config files

# nuScenes-like surround layout at 512x288. Ego origin is the rear axle.
# (name, yaw deg, pitch deg, x, y, z, fx at 512 px width)
_DEFAULT_LAYOUT = (
    ("CAM_FRONT", 0.0, 5.0, 1.70, 0.00, 1.51, 403.0),
    ("CAM_FRONT_RIGHT", -55.0, 5.0, 1.55, -0.49, 1.50, 403.0),
    ("CAM_BACK_RIGHT", -110.0, 5.0, 1.05, -0.48, 1.56, 403.0),
    ("CAM_BACK", 180.0, 5.0, 0.03, 0.00, 1.58, 259.0),
    ("CAM_BACK_LEFT", 110.0, 5.0, 1.04, 0.48, 1.56, 403.0),
    ("CAM_FRONT_LEFT", 55.0, 5.0, 1.52, 0.49, 1.51, 403.0),
)

DEFAULT_EXTENT = GroundExtent(-30.0, 30.0, -15.0, 15.0, 150, 150)


def default_rig(width: int = 512, height: int = 288) -> CameraRig:
    """Six-camera surround rig; intrinsics scale with ``width`` (aspect kept from 512x288)."""
    k = width / 512.0
    if abs(height - 288 * k) > 0.5:
        raise ValueError("default rig keeps the 16:9 aspect ratio")
    cams = []
    for name, yaw, pitch, x, y, z, f in _DEFAULT_LAYOUT:
        intr = CameraIntrinsics(f * k, f * k, 256.0 * k, 144.0 * k, width, height)
        pose = CameraPose.from_angles(math.radians(yaw), math.radians(pitch), (x, y, z))
        cams.append(Camera(name, intr, pose))
    return CameraRig(tuple(cams))


def rig_to_dict(rig: CameraRig) -> dict:
    out = []
    for cam in rig:
        i = cam.intrinsics
        out.append({
            "name": cam.name,
            "intrinsics": {"fx": float(i.fx), "fy": float(i.fy), "cx": float(i.cx),
                           "cy": float(i.cy), "width": int(i.width), "height": int(i.height)},
            "rotation": [float(v) for v in cam.pose.rotation.ravel()],
            "translation": [float(v) for v in cam.pose.translation],
        })
    return {"cameras": out}


def rig_from_dict(d: dict) -> CameraRig:
    try:
        cams = []
        for c in d["cameras"]:
            i = c["intrinsics"]
            intr = CameraIntrinsics(float(i["fx"]), float(i["fy"]), float(i["cx"]), float(i["cy"]),
                                    int(i["width"]), int(i["height"]))
            if "rotation" in c:
                pose = CameraPose(np.array(c["rotation"], dtype=np.float64).reshape(3, 3),
                                  np.array(c["translation"], dtype=np.float64))
            else:
                pose = CameraPose.from_angles(math.radians(c["yaw_deg"]), math.radians(c.get("pitch_deg", 0.0)),
                                              c["translation"], math.radians(c.get("roll_deg", 0.0)))
            cams.append(Camera(str(c["name"]), intr, pose))
        return CameraRig(tuple(cams))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad camera entry: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_rig_config(path) -> tuple[CameraRig, GroundExtent | None]:
    """Read a YAML rig file with ``cameras`` and an optional ``extent`` block."""
    try:
        d = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read rig config {path}: {exc}") from exc
    if not isinstance(d, dict) or "cameras" not in d:
        raise ConfigError(f"{path}: expected a mapping with a 'cameras' list")
    extent = GroundExtent.from_dict(d["extent"]) if "extent" in d else None
    return rig_from_dict(d), extent


def save_rig_config(path, rig: CameraRig, extent: GroundExtent | None = None):
    d = rig_to_dict(rig)
    if extent is not None:
        d["extent"] = extent.to_dict()
    Path(path).write_text(yaml.safe_dump(d, sort_keys=False))


def validate_paper_shape(rig: CameraRig):
    """Check constraints the full-size configs inherit from the reference backbone."""
    for cam in rig:
        if cam.intrinsics.width % 32:
            raise ConfigError(f"{cam.name}: image width {cam.intrinsics.width} not divisible by 32")
