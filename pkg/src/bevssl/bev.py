"""BEV grid containers, ego-motion warping and channel-wise softmax helpers."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ShapeMismatch
from .geometry import EgoMotion2D, GroundExtent

SEMANTICS = ("logits", "probabilities", "onehot")


@dataclass(frozen=True, eq=False)
class BevGrid:
    """Class scores over a metric extent, shape (rows, cols, c)."""

    data: np.ndarray
    extent: GroundExtent
    semantics: str = "logits"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[:2] != self.extent.shape:
            raise ShapeMismatch(f"grid {data.shape} does not match extent {self.extent.shape}")
        if self.semantics not in SEMANTICS:
            raise ValueError(f"unknown semantics {self.semantics!r}")
        if self.semantics == "probabilities":
            if np.any(data < 0) or np.max(np.abs(data.sum(-1) - 1.0)) > 1e-9:
                raise ValueError("probability grid must be nonnegative and sum to 1 per cell")
        elif self.semantics == "onehot":
            if not (np.all((data == 0) | (data == 1)) and np.all(data.sum(-1) == 1)):
                raise ValueError("onehot grid must hold exactly one 1 per cell")
        object.__setattr__(self, "data", data)

    @property
    def n_classes(self) -> int:
        return self.data.shape[-1]

    @classmethod
    def from_labels(cls, labels: "LabelGrid", n_classes: int) -> "BevGrid":
        return cls(one_hot(labels.labels, n_classes), labels.extent, "onehot")


@dataclass(frozen=True, eq=False)
class LatentBev:
    """Feature grid (rows, cols, d) produced by the lifting model."""

    data: np.ndarray
    extent: GroundExtent

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[:2] != self.extent.shape:
            raise ShapeMismatch(f"latent {data.shape} does not match extent {self.extent.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("latent features must be finite")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class LabelGrid:
    labels: np.ndarray
    extent: GroundExtent

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.extent.shape:
            raise ShapeMismatch(f"labels {labels.shape} do not match extent {self.extent.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if labels.size and labels.min() < 0:
            raise ValueError("negative class id")
        object.__setattr__(self, "labels", labels)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"class ids must lie in [0, {n_classes})")
    return np.eye(n_classes, dtype=np.float64)[labels]


# --------------------------------------------------------------------------
# bilinear sampling as a sparse linear operator


def bilinear_operator(r, s, valid, rows: int, cols: int, pad: str = "zero") -> sp.csr_matrix:
    """Sparse matrix mapping a flattened (rows*cols, c) grid to samples at (r, s).

    Cell (i, j) sits at integer grid coordinates (i, j). Neighbors outside the
    grid contribute zero (``pad="zero"``) or are clamped to the nearest border
    cell (``pad="edge"``); invalid samples get an empty row. Exact-zero weights
    are not stored, so integer positions copy values bit-for-bit.
    """
    if pad not in ("zero", "edge"):
        raise ValueError(f"unknown padding {pad!r}")
    r = np.asarray(r, dtype=np.float64).ravel()
    s = np.asarray(s, dtype=np.float64).ravel()
    valid = np.asarray(valid, dtype=bool).ravel()
    n = r.size
    idx = np.flatnonzero(valid)
    rv, sv = r[idx], s[idx]
    i0 = np.floor(rv)
    j0 = np.floor(sv)
    fr = rv - i0
    fs = sv - j0
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)

    rows_out, cols_out, vals = [], [], []
    for di, dj, w in ((0, 0, (1 - fr) * (1 - fs)), (0, 1, (1 - fr) * fs),
                      (1, 0, fr * (1 - fs)), (1, 1, fr * fs)):
        ii = i0 + di
        jj = j0 + dj
        if pad == "edge":
            ii = np.clip(ii, 0, rows - 1)
            jj = np.clip(jj, 0, cols - 1)
        keep = (w != 0) & (ii >= 0) & (ii < rows) & (jj >= 0) & (jj < cols)
        rows_out.append(idx[keep])
        cols_out.append(ii[keep] * cols + jj[keep])
        vals.append(w[keep])
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(n, rows * cols),
    )
    mat.sum_duplicates()  # clamped neighbors may coincide
    mat.sort_indices()
    return mat


# --------------------------------------------------------------------------
# ego-motion warp


def warp_source_coords(extent: GroundExtent, motion: EgoMotion2D):
    """Continuous source grid coordinates for every output cell, shape (rows, cols).

    Output cell at metric offset p (relative to the extent center) samples the
    input at ``R(-dphi) @ (p - (dx, dy))``: rotate by dphi, then translate.
    The arithmetic runs in cell units so that zero motion and integer-cell
    shifts land exactly on cell centers.
    """
    dx, dy = extent.cell_size
    ci, cj = extent.center_index
    a = np.arange(extent.rows, dtype=np.float64)[:, None] - ci  # row offset in cells
    b = np.arange(extent.cols, dtype=np.float64)[None, :] - cj
    c, s = math.cos(motion.dphi), math.sin(motion.dphi)
    tx = (c * motion.dx + s * motion.dy) / dx
    ty = (-s * motion.dx + c * motion.dy) / dy
    r = c * a + s * (b * (dy / dx)) - tx + ci
    q = -s * (a * (dx / dy)) + c * b - ty + cj
    return np.broadcast_to(r, extent.shape), np.broadcast_to(q, extent.shape)


def warp_operator(extent: GroundExtent, motion: EgoMotion2D) -> sp.csr_matrix:
    r, s = warp_source_coords(extent, motion)
    return bilinear_operator(r, s, np.ones(extent.shape, bool), extent.rows, extent.cols)


def _warp_array(data, extent, motion):
    rows, cols, ch = data.shape
    if (rows, cols) != extent.shape:
        raise ShapeMismatch(f"grid {data.shape} does not match extent {extent.shape}")
    op = warp_operator(extent, motion)
    return (op @ data.reshape(rows * cols, ch)).reshape(rows, cols, ch), op


def warp_ego_motion(grid, motion: EgoMotion2D):
    """Resample a BevGrid / LatentBev / raw (rows, cols, c) array into the previous frame.

    Areas that come from outside the extent are filled with zeros.
    """
    if isinstance(grid, (BevGrid, LatentBev)):
        out, _ = _warp_array(grid.data, grid.extent, motion)
        if isinstance(grid, LatentBev):
            return LatentBev(out, grid.extent)
        # zero fill breaks the probability/onehot invariants near the border
        return BevGrid(out, grid.extent, "logits")
    raise TypeError("warp_ego_motion expects a BevGrid or LatentBev; use warp_array for arrays")


def warp_array(data: np.ndarray, extent: GroundExtent, motion: EgoMotion2D):
    """Array version of :func:`warp_ego_motion`; returns (warped, vjp)."""
    out, op = _warp_array(np.asarray(data, dtype=np.float64), extent, motion)
    shape = data.shape
    opT = op.T.tocsr()

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        return (opT @ g.reshape(-1, shape[-1])).reshape(shape)

    return out, vjp


# --------------------------------------------------------------------------
# channel softmax / argmax


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[-1]
    if c > 16:
        m = np.max(x, axis=-1, keepdims=True)
        z = x - m
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    # few channels: per-channel passes beat reductions over a short trailing axis
    m = x[..., 0].copy()
    for k in range(1, c):
        np.maximum(m, x[..., k], out=m)
    z = x - m[..., None]
    e = np.exp(z)
    s = e[..., 0].copy()
    for k in range(1, c):
        s += e[..., k]
    return z - np.log(s)[..., None]


def log_softmax_vjp(logp: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g - np.exp(logp) * np.sum(g, axis=-1, keepdims=True)


def log_softmax_channels(grid: BevGrid):
    """Log-probabilities per cell; returns (BevGrid of log-probs, vjp)."""
    logp = log_softmax(grid.data)
    out = BevGrid(logp, grid.extent, "logits")
    return out, lambda g: log_softmax_vjp(logp, g)


def argmax_labels(grid: BevGrid) -> LabelGrid:
    """Per-cell argmax; ties go to the lowest class id."""
    return LabelGrid(np.argmax(grid.data, axis=-1).astype(np.int64), grid.extent)


# --------------------------------------------------------------------------
# file format
#
# header (little endian): magic "BEVG", u16 version, u8 semantics tag,
# u8 payload type (0 float64, 1 int64), u32 rows, u32 cols, u32 channels,
# f64 x_min, x_max, y_min, y_max; payload row-major (row, col, channel).

_MAGIC = b"BEVG"
_VERSION = 1
_HEADER = struct.Struct("<4sHBBIII4d")
_TAGS = {"logits": 0, "probabilities": 1, "onehot": 2, "latent": 3, "labels": 4}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


def save_grid(path, grid):
    if isinstance(grid, LabelGrid):
        tag, payload_type, data = "labels", 1, grid.labels[..., None].astype("<i8")
    elif isinstance(grid, LatentBev):
        tag, payload_type, data = "latent", 0, grid.data.astype("<f8")
    elif isinstance(grid, BevGrid):
        tag, payload_type, data = grid.semantics, 0, grid.data.astype("<f8")
    else:
        raise TypeError(f"cannot serialize {type(grid).__name__}")
    e = grid.extent
    header = _HEADER.pack(_MAGIC, _VERSION, _TAGS[tag], payload_type, e.rows, e.cols,
                          data.shape[-1], e.x_min, e.x_max, e.y_min, e.y_max)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data).tobytes())


def load_grid(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated grid file")
    magic, version, tag, payload_type, rows, cols, ch, x0, x1, y0, y1 = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a BEV grid file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    extent = GroundExtent(x0, x1, y0, y1, rows, cols)
    dtype = "<f8" if payload_type == 0 else "<i8"
    n = rows * cols * ch
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=_HEADER.size).reshape(rows, cols, ch)
    name = _TAG_NAMES[tag]
    if name == "labels":
        return LabelGrid(data[..., 0].astype(np.int64), extent)
    if name == "latent":
        return LatentBev(data.copy(), extent)
    return BevGrid(data.copy(), extent, name)
