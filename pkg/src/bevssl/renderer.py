"""Differentiable rendering of a textured ground plane into the rig cameras.

The ground mesh covers exactly the BEV extent, so rasterizing it is the same
as casting one ray per pixel center and bilinearly sampling the BEV texture
where the ray meets z = 0. The sampling weights are fixed by the rig and the
extent; they are cached in a :class:`SamplingMap` as one sparse matrix per
camera. ``render`` is a sparse matmul and ``render_vjp`` its transpose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .bev import BevGrid, bilinear_operator
from .errors import ShapeMismatch
from .geometry import CameraRig, GroundExtent, ground_to_grid_array, intersect_ground

# background, road boundary, lane divider, crosswalk, occluding object
PALETTE = np.array(
    [[70, 70, 70], [0, 200, 0], [0, 90, 255], [230, 30, 30], [240, 200, 0]], dtype=np.uint8
)
INVALID_COLOR = np.array([0, 0, 0], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class SamplingMap:
    """Per-pixel ground-grid coordinates for every camera of a rig.

    Arrays have shape (n_cams, height, width). ``distance`` is the metric
    distance of the ground hit from the ego origin (NaN where invalid).
    """

    extent: GroundExtent
    camera_names: tuple[str, ...]
    r: np.ndarray
    s: np.ndarray
    valid: np.ndarray
    distance: np.ndarray
    operators: tuple[sp.csr_matrix, ...] = field(repr=False)
    transposed: tuple[sp.csr_matrix, ...] = field(repr=False)

    @property
    def n_cams(self) -> int:
        return self.valid.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.valid.shape[1:]

    @property
    def fully_supported(self) -> np.ndarray:
        """Valid pixels whose four bilinear neighbors all lie inside the grid."""
        rows, cols = self.extent.shape
        with np.errstate(invalid="ignore"):
            inner = (self.r >= 0) & (self.r <= rows - 1) & (self.s >= 0) & (self.s <= cols - 1)
        return self.valid & inner

    def coverage(self, pixel_mask=None) -> np.ndarray:
        """Sum of bilinear weights each BEV cell receives from (masked) valid pixels."""
        if pixel_mask is None:
            pixel_mask = self.valid
        pixel_mask = np.asarray(pixel_mask, dtype=np.float64).reshape(self.n_cams, -1)
        total = np.zeros(self.extent.rows * self.extent.cols)
        for k in range(self.n_cams):
            total += self.transposed[k] @ pixel_mask[k]
        return total.reshape(self.extent.shape)


@dataclass(frozen=True, eq=False)
class CameraImageStack:
    """Per-view class maps, data (n_cams, h, w, c) with a validity mask (n_cams, h, w)."""

    data: np.ndarray
    valid: np.ndarray
    semantics: str = "logits"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if data.ndim != 4 or data.shape[:3] != valid.shape:
            raise ShapeMismatch(f"image stack {data.shape} vs mask {valid.shape}")
        if np.any(data[~valid] != 0):
            raise ValueError("invalid pixels must carry all-zero channel vectors")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def n_classes(self) -> int:
        return self.data.shape[-1]

    def argmax(self) -> np.ndarray:
        """Class map (n_cams, h, w) with -1 on invalid pixels."""
        lab = np.argmax(self.data, axis=-1)
        lab[~self.valid] = -1
        return lab


def build_sampling_map(rig: CameraRig, extent: GroundExtent) -> SamplingMap:
    height, width = rig.image_shape
    v, u = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    rs, ss, valids, dists, ops = [], [], [], [], []
    for cam in rig:
        x, y, hit = intersect_ground(u, v, cam.intrinsics, cam.pose)
        r, s, inside = ground_to_grid_array(x, y, extent)
        valid = hit & inside
        r = np.where(valid, r, np.nan)
        s = np.where(valid, s, np.nan)
        dist = np.where(valid, np.hypot(x, y), np.nan)
        rs.append(r)
        ss.append(s)
        valids.append(valid)
        dists.append(dist)
        ops.append(bilinear_operator(np.nan_to_num(r), np.nan_to_num(s), valid, extent.rows, extent.cols, pad="edge"))
    transposed = tuple(op.T.tocsr() for op in ops)
    arrs = [np.stack(a) for a in (rs, ss, valids, dists)]
    for a in arrs:
        a.setflags(write=False)
    return SamplingMap(extent, tuple(rig.names), *arrs, operators=tuple(ops), transposed=transposed)


def _check_grid(shape, smap: SamplingMap):
    if tuple(shape[:2]) != smap.extent.shape:
        raise ShapeMismatch(f"BEV grid {tuple(shape)} does not match sampling map extent {smap.extent.shape}")


def render_array(texture: np.ndarray, smap: SamplingMap) -> np.ndarray:
    """Render a (rows, cols, c) array; returns (n_cams, h, w, c), zeros off the ground."""
    _check_grid(texture.shape, smap)
    ch = texture.shape[-1]
    flat = np.asarray(texture, dtype=np.float64).reshape(-1, ch)
    h, w = smap.image_shape
    out = np.empty((smap.n_cams, h * w, ch))
    for k, op in enumerate(smap.operators):
        out[k] = op @ flat
    return out.reshape(smap.n_cams, h, w, ch)


def render_vjp_array(cotangent: np.ndarray, smap: SamplingMap) -> np.ndarray:
    """Transpose of :func:`render_array`; cameras are reduced in rig order."""
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape[:3] != smap.valid.shape:
        raise ShapeMismatch(f"cotangent {cot.shape} does not match sampling map {smap.valid.shape}")
    ch = cot.shape[-1]
    cot = cot.reshape(smap.n_cams, -1, ch)
    grad = np.zeros((smap.extent.rows * smap.extent.cols, ch))
    for k, opT in enumerate(smap.transposed):
        grad += opT @ cot[k]
    return grad.reshape(smap.extent.rows, smap.extent.cols, ch)


def render(bev: BevGrid, smap: SamplingMap) -> CameraImageStack:
    if bev.extent != smap.extent:
        raise ShapeMismatch("BEV extent differs from the sampling map extent")
    semantics = "probabilities" if bev.semantics in ("probabilities", "onehot") else "logits"
    return CameraImageStack(render_array(bev.data, smap), smap.valid, semantics)


def render_vjp(cotangent, smap: SamplingMap) -> np.ndarray:
    """Gradient w.r.t. the BEV texture for an image-space cotangent (stack or array)."""
    data = cotangent.data if isinstance(cotangent, CameraImageStack) else cotangent
    return render_vjp_array(data, smap)


def render_rig_batch(bevs, smap: SamplingMap) -> list[CameraImageStack]:
    return [render(b, smap) for b in bevs]


# --------------------------------------------------------------------------
# image export


def labels_to_rgb(labels: np.ndarray, valid=None) -> np.ndarray:
    labels = np.asarray(labels)
    if valid is None:
        valid = labels >= 0
    rgb = PALETTE[np.clip(labels, 0, len(PALETTE) - 1)]
    rgb[~np.asarray(valid, dtype=bool)] = INVALID_COLOR
    return rgb


def save_rgb(path, rgb: np.ndarray):
    path = Path(path)
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if path.suffix.lower() == ".ppm":
        h, w, _ = rgb.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(rgb.tobytes())
        return
    from PIL import Image

    Image.fromarray(rgb).save(path)


def save_stack_images(stack: CameraImageStack, out_dir, camera_names, prefix="") -> list[Path]:
    """Write the argmax class map of each view as an image; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = stack.argmax()
    paths = []
    for k, name in enumerate(camera_names):
        p = out_dir / f"{prefix}{name}.png"
        save_rgb(p, labels_to_rgb(labels[k], stack.valid[k]))
        paths.append(p)
    return paths
