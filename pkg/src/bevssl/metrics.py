"""IoU / mIoU over nested range bands and the distance-vs-image-portion profile."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .bev import LabelGrid
from .errors import ShapeMismatch
from .geometry import GroundExtent

CLASS_NAMES = ("background", "boundary", "lane", "crosswalk")
DEFAULT_RANGES = (20.0, 40.0, 60.0)


@dataclass(frozen=True, eq=False)
class RangeBand:
    """Cells inside a centered sub-rectangle of the extent.

    ``max_distance`` is measured along the longer extent axis; a band covering
    1/3 of that length also covers 1/3 of the shorter axis.
    """

    name: str
    max_distance: float
    mask: np.ndarray


def range_band(extent: GroundExtent, max_distance: float, name: str | None = None) -> RangeBand:
    full = max(extent.x_max - extent.x_min, extent.y_max - extent.y_min)
    if not 0 < max_distance <= full + 1e-9:
        raise ValueError(f"band {max_distance} m outside (0, {full}]")
    frac = max_distance / full
    X, Y = extent.cell_centers()
    xc = 0.5 * (extent.x_min + extent.x_max)
    yc = 0.5 * (extent.y_min + extent.y_max)
    hx = 0.5 * (extent.x_max - extent.x_min) * frac
    hy = 0.5 * (extent.y_max - extent.y_min) * frac
    mask = (np.abs(X - xc) <= hx + 1e-9) & (np.abs(Y - yc) <= hy + 1e-9)
    mask.setflags(write=False)
    return RangeBand(name or f"mIoU{max_distance:g}", float(max_distance), mask)


def range_bands(extent: GroundExtent, distances=DEFAULT_RANGES) -> list[RangeBand]:
    return [range_band(extent, d) for d in distances]


@dataclass
class IoUReport:
    """Exact TP/FP/FN counts, shape (n_bands, n_classes). Class 0 is background."""

    band_names: list[str]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    class_names: tuple[str, ...] = field(default=CLASS_NAMES)

    def __post_init__(self):
        self.tp = np.asarray(self.tp, dtype=np.int64)
        self.fp = np.asarray(self.fp, dtype=np.int64)
        self.fn = np.asarray(self.fn, dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.tp.shape[1]

    @property
    def iou(self) -> np.ndarray:
        """Per band and class; NaN where the class is absent from both pred and gt."""
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.where(denom > 0, denom, 1), np.nan)

    @property
    def miou(self) -> np.ndarray:
        """Mean over defined non-background classes, one value per band."""
        vals = self.iou[:, 1:]
        out = np.full(len(self.band_names), np.nan)
        for b in range(len(self.band_names)):
            row = vals[b][~np.isnan(vals[b])]
            if row.size:
                out[b] = row.mean()
        return out

    def band(self, name: str) -> int:
        return self.band_names.index(name)

    def __add__(self, other: "IoUReport") -> "IoUReport":
        if self.band_names != other.band_names or self.tp.shape != other.tp.shape:
            raise ShapeMismatch("cannot merge reports with different bands/classes")
        return IoUReport(list(self.band_names), self.tp + other.tp, self.fp + other.fp,
                         self.fn + other.fn, self.class_names)

    @classmethod
    def empty(cls, band_names, n_classes: int, class_names=CLASS_NAMES) -> "IoUReport":
        z = np.zeros((len(band_names), n_classes), dtype=np.int64)
        return cls(list(band_names), z, z.copy(), z.copy(), tuple(class_names[:n_classes]))

    def summary(self) -> dict:
        """Per-class IoU on the widest band plus mIoU of every band, as fractions."""
        last = len(self.band_names) - 1
        out = {}
        for k in range(1, self.n_classes):
            out[f"{self.class_names[k]}_iou"] = float(self.iou[last, k])
        for b, name in enumerate(self.band_names):
            out[name] = float(self.miou[b])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["band", "class", "tp", "fp", "fn", "iou"])
        for b, name in enumerate(self.band_names):
            for k in range(self.n_classes):
                w.writerow([name, self.class_names[k], int(self.tp[b, k]), int(self.fp[b, k]),
                            int(self.fn[b, k]), f"{self.iou[b, k]:.6f}"])
        return buf.getvalue()


def summary_table(rows: dict[str, IoUReport], percent: bool = True) -> str:
    """Fixed-width table: method | boundary/lane/crosswalk IoU | mIoU per band."""
    if not rows:
        return ""
    first = next(iter(rows.values()))
    cols = [f"{first.class_names[k]} IoU" for k in range(1, first.n_classes)] + list(first.band_names)
    scale = 100.0 if percent else 1.0
    width = max(len(m) for m in rows) + 2
    lines = ["method".ljust(width) + " | " + " | ".join(c.rjust(13) for c in cols)]
    lines.append("-" * len(lines[0]))
    for method, rep in rows.items():
        vals = list(rep.summary().values())
        lines.append(method.ljust(width) + " | " + " | ".join(f"{v * scale:13.1f}" for v in vals))
    return "\n".join(lines)


def summary_csv(rows: dict[str, IoUReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    first = next(iter(rows.values()))
    header = ["method"] + list(first.summary().keys())
    w.writerow(header)
    for method, rep in rows.items():
        w.writerow([method] + [f"{v:.6f}" for v in rep.summary().values()])
    return buf.getvalue()


def _labels(x):
    return x.labels if isinstance(x, LabelGrid) else np.asarray(x)


def confusion_counts(pred, gt, mask, n_classes: int):
    """(tp, fp, fn) integer vectors over the masked cells."""
    p = _labels(pred)
    g = _labels(gt)
    m = np.asarray(mask, dtype=bool)
    if p.shape != g.shape or p.shape != m.shape:
        raise ShapeMismatch(f"pred {p.shape}, gt {g.shape}, mask {m.shape}")
    cm = np.bincount(g[m].astype(np.int64) * n_classes + p[m].astype(np.int64),
                     minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return tp, fp, fn


def iou(pred, gt, band, n_classes: int = 4, name: str | None = None) -> IoUReport:
    """Single-band report; ``band`` is a RangeBand or a boolean cell mask."""
    if isinstance(pred, LabelGrid) and isinstance(gt, LabelGrid) and pred.extent != gt.extent:
        raise ShapeMismatch("pred and gt extents differ")
    mask = band.mask if isinstance(band, RangeBand) else band
    label = name or (band.name if isinstance(band, RangeBand) else "masked")
    tp, fp, fn = confusion_counts(pred, gt, mask, n_classes)
    return IoUReport([label], tp[None], fp[None], fn[None], tuple(CLASS_NAMES[:n_classes]))


def miou_ranges(pred, gt, bands=None, n_classes: int = 4, extent: GroundExtent | None = None) -> IoUReport:
    """Report over the nested 20/40/60 m bands (or the bands given)."""
    if bands is None:
        ext = extent or (gt.extent if isinstance(gt, LabelGrid) else None)
        if ext is None:
            raise ValueError("need LabelGrid inputs or an extent to build default bands")
        bands = range_bands(ext)
    rows = [iou(pred, gt, b, n_classes) for b in bands]
    return IoUReport([b.name for b in bands], np.concatenate([r.tp for r in rows]),
                     np.concatenate([r.fp for r in rows]), np.concatenate([r.fn for r in rows]),
                     tuple(CLASS_NAMES[:n_classes]))


# --------------------------------------------------------------------------
# distance profile


@dataclass
class DistanceProfile:
    edges: np.ndarray  # (n_bins + 1,) meters
    camera_names: tuple[str, ...]
    counts: np.ndarray  # (n_cams, n_bins) valid pixels per bin

    @property
    def fractions(self) -> np.ndarray:
        tot = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, self.counts / np.where(tot > 0, tot, 1), 0.0)

    @property
    def aggregate(self) -> np.ndarray:
        tot = self.counts.sum()
        return self.counts.sum(axis=0) / tot if tot else np.zeros(self.counts.shape[1])

    def camera(self, name: str) -> np.ndarray:
        return self.fractions[self.camera_names.index(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["camera", "d_min", "d_max", "pixels", "fraction"])
        fr = self.fractions
        for k, name in enumerate(self.camera_names):
            for b in range(len(self.edges) - 1):
                w.writerow([name, f"{self.edges[b]:g}", f"{self.edges[b + 1]:g}",
                            int(self.counts[k, b]), f"{fr[k, b]:.6f}"])
        agg = self.aggregate
        for b in range(len(self.edges) - 1):
            w.writerow(["all", f"{self.edges[b]:g}", f"{self.edges[b + 1]:g}",
                        int(self.counts[:, b].sum()), f"{agg[b]:.6f}"])
        return buf.getvalue()


def quarter_edges(extent: GroundExtent) -> np.ndarray:
    """Four equal distance bins covering the forward half-range of the extent."""
    return np.linspace(0.0, extent.x_max, 5)


def distance_pixel_profile(smap, bands=None) -> DistanceProfile:
    """Share of valid image pixels whose ground hit falls into each distance bin.

    ``bands`` is a sequence of bin edges or of (lo, hi) pairs; fractions are
    normalized over the valid pixels that land in any bin.
    """
    if bands is None:
        edges = quarter_edges(smap.extent)
    else:
        b = np.asarray(bands, dtype=np.float64)
        if b.ndim == 2:
            if np.any(b[1:, 0] != b[:-1, 1]):
                raise ValueError("distance intervals must be contiguous")
            edges = np.concatenate([b[:, 0], b[-1:, 1]])
        else:
            edges = b
    if np.any(np.diff(edges) <= 0):
        raise ValueError("distance bins must be increasing")
    counts = np.zeros((smap.n_cams, len(edges) - 1), dtype=np.int64)
    for k in range(smap.n_cams):
        d = smap.distance[k][smap.valid[k]]
        counts[k] = np.histogram(d, bins=edges)[0]
    return DistanceProfile(edges, tuple(smap.camera_names), counts)
