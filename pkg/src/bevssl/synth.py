"""Procedural road worlds, ego trajectories, occluders and camera-view pseudo labels.

Randomness: every sequence gets its own ``numpy.random.Generator`` (PCG64)
spawned from ``numpy.random.SeedSequence(dataset_seed)``, so sequences are
reproducible individually and independent of generation order.

Class ids: 0 background, 1 road boundary, 2 lane divider, 3 crosswalk. In
camera observations id 4 marks pixels covered by an occluding object.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bev import LabelGrid, load_grid, one_hot, save_grid
from .errors import InvalidSpec, LabelIsolationError, ShapeMismatch
from .geometry import (CameraRig, EgoMotion2D, GroundExtent, default_rig, pixel_rays,
                       rig_from_dict, rig_to_dict)
from .renderer import CameraImageStack, SamplingMap, build_sampling_map, render_array

N_CLASSES = 4
OBJECT_CLASS = 4
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    extent: GroundExtent
    lane_count: int = 2
    lane_width: float = 3.5
    marking_width: float | None = None  # default: one BEV cell along the coarser axis
    dashed_dividers: bool = True
    dash_length: float = 3.0
    dash_gap: float = 5.0
    crosswalk_prob: float = 0.5  # expected extra crosswalks per 50 m of road
    crosswalk_length: float = 4.0
    curvature: float = 0.0  # 1/m, positive turns left
    road_length: float = 160.0
    resolution: float | None = None  # world grid cell size, default half the finest BEV cell

    def validated(self) -> "SceneSpec":
        cell = max(self.extent.cell_size)
        mw = cell if self.marking_width is None else self.marking_width
        res = min(self.extent.cell_size) / 2 if self.resolution is None else self.resolution
        if mw < cell - 1e-12:
            raise InvalidSpec(f"marking width {mw} m is thinner than a BEV cell ({cell} m)")
        if self.lane_count < 2:
            raise InvalidSpec("need at least two lanes so every marking class appears")
        if self.lane_width <= mw:
            raise InvalidSpec("lane width must exceed the marking width")
        if res <= 0 or self.road_length <= 0 or self.crosswalk_length <= 0:
            raise InvalidSpec("lengths must be positive")
        if abs(self.curvature) * (self.road_length + 100) > 3.0:
            raise InvalidSpec("road curls back on itself; lower curvature or length")
        return replace(self, marking_width=mw, resolution=res)

    @property
    def half_width(self) -> float:
        return self.lane_count * self.lane_width / 2


class RoadFrame:
    """Arc-length / lateral-offset coordinates of a constant-curvature road.

    The centerline starts at the world origin heading +x; ``n`` is positive
    to the left.
    """

    def __init__(self, curvature: float):
        self.k = float(curvature)

    def to_world(self, s, n):
        s = np.asarray(s, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        if self.k == 0:
            return s, n, np.zeros_like(s)
        th = self.k * s
        x = np.sin(th) / self.k - n * np.sin(th)
        y = (1 - np.cos(th)) / self.k + n * np.cos(th)
        return x, y, th

    def from_world(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.k == 0:
            return x.copy(), y.copy()
        R = 1.0 / self.k
        sg = math.copysign(1.0, R)
        th = np.arctan2(sg * x, -sg * (y - R))
        rho = sg * np.hypot(x, y - R)
        return th * R, R - rho


@dataclass(frozen=True, eq=False)
class WorldMap:
    spec: SceneSpec
    grid: LabelGrid
    road: RoadFrame
    crosswalks: tuple[float, ...]  # arc-length starts

    def sample(self, x, y) -> np.ndarray:
        """Bilinear-argmax class lookup at world points (ties -> lowest id).

        Points off the world grid read as background.
        """
        e = self.grid.extent
        dx, dy = e.cell_size
        r = (np.asarray(x, dtype=np.float64) - e.x_min) / dx - 0.5
        s = (np.asarray(y, dtype=np.float64) - e.y_min) / dy - 0.5
        i0 = np.floor(r).astype(np.int64)
        j0 = np.floor(s).astype(np.int64)
        fr = r - i0
        fs = s - j0
        scores = np.zeros(np.shape(r) + (N_CLASSES,))
        lab = self.grid.labels
        for di, dj, w in ((0, 0, (1 - fr) * (1 - fs)), (0, 1, (1 - fr) * fs),
                          (1, 0, fr * (1 - fs)), (1, 1, fr * fs)):
            ii = i0 + di
            jj = j0 + dj
            inside = (ii >= 0) & (ii < e.rows) & (jj >= 0) & (jj < e.cols)
            cls = np.where(inside, lab[np.clip(ii, 0, e.rows - 1), np.clip(jj, 0, e.cols - 1)], 0)
            for k in range(N_CLASSES):
                scores[..., k] += np.where(cls == k, w, 0.0)
        return np.argmax(scores, axis=-1)


def _rasterize(spec: SceneSpec, road: RoadFrame, crosswalks, x, y) -> np.ndarray:
    s, n = road.from_world(x, y)
    hw = spec.half_width
    half = spec.marking_width / 2
    along = (s >= 0) & (s <= spec.road_length)
    lab = np.zeros(np.shape(x), dtype=np.int64)
    period = spec.dash_length + spec.dash_gap
    for k in range(1, spec.lane_count):
        nk = -hw + k * spec.lane_width
        on = along & (np.abs(n - nk) <= half)
        if spec.dashed_dividers:
            on &= np.mod(s, period) < spec.dash_length
        lab[on] = 2
    for sc in crosswalks:
        lab[(s >= sc) & (s <= sc + spec.crosswalk_length) & (np.abs(n) <= hw - half)] = 3
    lab[along & (np.abs(np.abs(n) - hw) <= half)] = 1
    return lab


def generate_scene(spec: SceneSpec, rng=None) -> WorldMap:
    """Rasterize a random road world into a large world-frame label grid."""
    spec = spec.validated()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    road = RoadFrame(spec.curvature)
    margin = math.hypot(spec.extent.x_max - spec.extent.x_min, spec.extent.y_max - spec.extent.y_min) / 2

    # one crosswalk is guaranteed inside the middle of the road, extras are Poisson
    lo, hi = 0.3 * spec.road_length, 0.7 * spec.road_length - spec.crosswalk_length
    cws = [float(rng.uniform(lo, hi))]
    n_extra = rng.poisson(spec.crosswalk_prob * spec.road_length / 50.0)
    for _ in range(n_extra):
        cws.append(float(rng.uniform(0, spec.road_length - spec.crosswalk_length)))
    cws = tuple(sorted(cws))

    ss = np.linspace(0, spec.road_length, 64)
    pts = []
    for n in (-spec.half_width, spec.half_width):
        px, py, _ = road.to_world(ss, np.full_like(ss, n))
        pts.append(np.stack([px, py], -1))
    pts = np.concatenate(pts)
    res = spec.resolution
    x0 = math.floor((pts[:, 0].min() - margin) / res) * res
    y0 = math.floor((pts[:, 1].min() - margin) / res) * res
    rows = int(math.ceil((pts[:, 0].max() + margin - x0) / res))
    cols = int(math.ceil((pts[:, 1].max() + margin - y0) / res))
    ext = GroundExtent(x0, x0 + rows * res, y0, y0 + cols * res, rows, cols)
    X, Y = ext.cell_centers()
    labels = _rasterize(spec, road, cws, X, Y)
    return WorldMap(spec, LabelGrid(labels, ext), road, cws)


# --------------------------------------------------------------------------
# trajectories


def kmh_to_step(speed_kmh, frame_rate: float = 2.0):
    """Distance travelled per frame in meters."""
    return np.asarray(speed_kmh, dtype=np.float64) * 1000.0 / 3600.0 / frame_rate


def generate_trajectory(seed, n_frames: int, speed_range=(30.0, 50.0), frame_rate: float = 2.0,
                        yaw_rate_limit: float = 0.3, curvature: float = 0.0,
                        yaw_jitter: float = 0.0) -> list[EgoMotion2D]:
    """Per-frame ego motions (``n_frames - 1`` of them) along a gently curving path.

    Speed follows a bounded random walk inside ``speed_range`` (km/h). The
    heading change per frame follows the path ``curvature`` (the chord of a
    circle) plus optional smooth jitter, clipped by ``yaw_rate_limit`` (rad/s).
    Each step's displacement norm equals the distance travelled.
    """
    if n_frames < 2:
        raise InvalidSpec("a trajectory needs at least two frames")
    lo, hi = speed_range
    if not (0 < lo <= hi):
        raise InvalidSpec(f"bad speed range {speed_range}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    speed = rng.uniform(lo, hi)
    jitter = 0.0
    max_dphi = yaw_rate_limit / frame_rate
    motions = []
    for _ in range(n_frames - 1):
        if hi > lo:
            speed = float(np.clip(speed + rng.normal(0.0, 0.05 * (hi - lo)), lo, hi))
        step = float(kmh_to_step(speed, frame_rate))
        jitter = 0.8 * jitter + (rng.normal(0.0, yaw_jitter) if yaw_jitter > 0 else 0.0)
        arc = 2.0 * math.asin(max(-1.0, min(1.0, curvature * step / 2.0)))
        dphi = float(np.clip(arc + jitter, -max_dphi, max_dphi))
        motions.append(EgoMotion2D(step * math.cos(dphi / 2), step * math.sin(dphi / 2), dphi))
    return motions


def integrate_trajectory(motions, start=(0.0, 0.0, 0.0)) -> np.ndarray:
    """World poses (x, y, heading) of every frame, shape (len(motions) + 1, 3)."""
    x, y, th = start
    poses = [(x, y, th)]
    for m in motions:
        c, s = math.cos(th), math.sin(th)
        x, y, th = x + c * m.dx - s * m.dy, y + s * m.dx + c * m.dy, th + m.dphi
        poses.append((x, y, th))
    return np.array(poses)


# --------------------------------------------------------------------------
# occluders


@dataclass(frozen=True)
class Occluder:
    """Box standing on the ground: footprint center/size/heading in meters, radians."""

    x: float
    y: float
    length: float
    width: float
    height: float
    heading: float = 0.0
    speed: float = 0.0  # m/s along the heading

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise InvalidSpec("occluder dimensions must be positive")

    def at_time(self, t: float) -> "Occluder":
        return replace(self, x=self.x + self.speed * t * math.cos(self.heading),
                       y=self.y + self.speed * t * math.sin(self.heading), speed=self.speed)

    def in_ego_frame(self, pose) -> "Occluder":
        px, py, th = pose
        c, s = math.cos(th), math.sin(th)
        dx, dy = self.x - px, self.y - py
        return replace(self, x=c * dx + s * dy, y=-s * dx + c * dy, heading=self.heading - th)


@dataclass(frozen=True)
class OccluderSpec:
    parked_per_100m: float = 6.0
    moving: int = 3
    car_length: tuple[float, float] = (4.0, 5.0)
    car_width: tuple[float, float] = (1.8, 2.1)
    car_height: tuple[float, float] = (1.4, 1.9)
    truck_fraction: float = 0.2
    speed_kmh: tuple[float, float] = (20.0, 55.0)


def place_occluders(world: WorldMap, spec: OccluderSpec, ego_lane_offset: float, rng) -> list[Occluder]:
    """Parked cars along both road edges and vehicles driving in the other lanes."""
    sc = world.spec
    road = world.road
    out = []

    def box(s, n, speed):
        truck = rng.random() < spec.truck_fraction
        length = rng.uniform(*spec.car_length) * (1.8 if truck else 1.0)
        height = rng.uniform(*spec.car_height) * (1.6 if truck else 1.0)
        x, y, th = road.to_world(s, n)
        return Occluder(float(x), float(y), float(length), float(rng.uniform(*spec.car_width)),
                        float(height), float(th), float(speed))

    n_parked = rng.poisson(spec.parked_per_100m * sc.road_length / 100.0)
    for _ in range(n_parked):
        side = 1.0 if rng.random() < 0.5 else -1.0
        out.append(box(rng.uniform(0, sc.road_length), side * (sc.half_width - 1.3), 0.0))
    lanes = [-sc.half_width + (k + 0.5) * sc.lane_width for k in range(sc.lane_count)]
    others = [n for n in lanes if abs(n - ego_lane_offset) > 1e-6]
    for _ in range(spec.moving if others else 0):
        n = others[rng.integers(len(others))]
        v = rng.uniform(*spec.speed_kmh) / 3.6
        out.append(box(rng.uniform(0, sc.road_length * 0.6), n, v))
    return out


def ray_box_hits(origin, dirs, box: Occluder) -> np.ndarray:
    """Entry parameter t of rays ``origin + t * dirs`` into an ego-frame box (inf on miss).

    A ray starting inside the box reports t = 0.
    """
    c, s = math.cos(box.heading), math.sin(box.heading)
    o = np.asarray(origin, dtype=np.float64) - np.array([box.x, box.y, box.height / 2])
    o = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]])
    d = np.asarray(dirs, dtype=np.float64)
    d = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], -1)
    half = np.array([box.length / 2, box.width / 2, box.height / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    parallel = d == 0
    inside_slab = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > 0)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


def occlusion_masks(rig: CameraRig, smap: SamplingMap, boxes) -> np.ndarray:
    """Pixels whose ray meets an occluder before reaching the ground (n_cams, h, w)."""
    h, w = smap.image_shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    out = np.zeros((len(rig), h, w), dtype=bool)
    for k, cam in enumerate(rig):
        d = pixel_rays(u, v, cam.intrinsics, cam.pose)
        o = cam.pose.translation
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = np.where(d[..., 2] < 0, -o[2] / d[..., 2], np.inf)
        for b in boxes:
            # cheap reject: box far outside the extent cannot shadow valid pixels
            if math.hypot(b.x, b.y) > 80:
                continue
            out[k] |= ray_box_hits(o, d, b) < t_ground
    return out


# --------------------------------------------------------------------------
# frames


class _Guard:
    """Shared switch and access counter protecting BEV ground truth."""

    def __init__(self):
        self.locked = False
        self.blocked_reads = 0
        self.reads = 0


@dataclass(eq=False)
class FrameRecord:
    index: int
    motion: EgoMotion2D  # from the previous frame; identity for frame 0
    pose: tuple[float, float, float]
    pseudo_labels: np.ndarray  # (n_cams, h, w) int8, -1 = not supervised
    observation: np.ndarray  # (n_cams, h, w) int8, 4 = occluder, -1 = off the ground
    occluded: np.ndarray  # (n_cams, h, w) bool
    occluders: tuple[Occluder, ...]
    _gt_bev: LabelGrid = field(repr=False)
    _guard: _Guard = field(default_factory=_Guard, repr=False)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def gt_bev(self) -> LabelGrid:
        if self._guard.locked:
            self._guard.blocked_reads += 1
            raise LabelIsolationError(f"BEV ground truth of frame {self.index} read while locked")
        self._guard.reads += 1
        return self._gt_bev

    @property
    def supervision_mask(self) -> np.ndarray:
        return self.pseudo_labels >= 0

    @property
    def gt_cp(self) -> CameraImageStack:
        mask = self.supervision_mask
        data = np.zeros(self.pseudo_labels.shape + (N_CLASSES,))
        data[mask] = one_hot(self.pseudo_labels[mask].astype(np.int64), N_CLASSES)
        return CameraImageStack(data, mask, "onehot")


def bev_labels_for_pose(world: WorldMap, extent: GroundExtent, pose) -> LabelGrid:
    X, Y = extent.cell_centers()
    px, py, th = pose
    c, s = math.cos(th), math.sin(th)
    return LabelGrid(world.sample(px + c * X - s * Y, py + s * X + c * Y).astype(np.int64), extent)


def camera_labels(gt: LabelGrid, smap: SamplingMap) -> np.ndarray:
    """Argmax of the rendered one-hot BEV labels, -1 off the ground (n_cams, h, w)."""
    rendered = render_array(one_hot(gt.labels, N_CLASSES), smap)
    lab = np.argmax(rendered, axis=-1).astype(np.int8)
    lab[~smap.valid] = -1
    return lab


def flip_labels(labels: np.ndarray, p: float, n_classes: int, rng) -> np.ndarray:
    """Replace each nonnegative label with a different random class with probability p."""
    out = labels.copy()
    if p <= 0:
        return out
    sel = (labels >= 0) & (rng.random(labels.shape) < p)
    shift = rng.integers(1, n_classes, size=int(sel.sum()))
    out[sel] = ((labels[sel].astype(np.int64) + shift) % n_classes).astype(labels.dtype)
    return out


def build_frames(world: WorldMap, motions, rig: CameraRig, smap: SamplingMap, occluders=(),
                 start_pose=(0.0, 0.0, 0.0), label_noise: float = 0.0, obs_noise: float = 0.0,
                 frame_rate: float = 2.0, rng=None) -> list[FrameRecord]:
    """Render pseudo labels and observations for every pose along the trajectory."""
    if smap.extent.shape != world.spec.extent.shape:
        raise ShapeMismatch("sampling map extent differs from the scene extent")
    if tuple(smap.camera_names) != tuple(rig.names):
        raise ShapeMismatch("sampling map built for a different rig")
    rng = np.random.default_rng(0) if rng is None else rng
    poses = integrate_trajectory(motions, start_pose)
    all_motions = [EgoMotion2D()] + list(motions)
    guard = _Guard()
    frames = []
    for t, pose in enumerate(poses):
        pose = tuple(float(v) for v in pose)
        gt = bev_labels_for_pose(world, smap.extent, pose)
        clean = camera_labels(gt, smap)
        boxes = tuple(o.at_time(t / frame_rate).in_ego_frame(pose) for o in occluders)
        occ = occlusion_masks(rig, smap, boxes) if boxes else np.zeros(smap.valid.shape, bool)
        pseudo = flip_labels(clean, label_noise, N_CLASSES, rng)
        pseudo[occ] = -1
        obs = flip_labels(clean, obs_noise, N_CLASSES, rng)
        obs[occ] = OBJECT_CLASS
        frames.append(FrameRecord(t, all_motions[t], pose, pseudo, obs, occ, boxes, gt, guard))
    return frames


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of a synthetic dataset. Defaults give the desk-scale benchmark."""

    seed: int = 0
    n_sequences: int = 64
    n_frames: int = 12
    bev_size: int = 96
    extent_x: tuple[float, float] = (-30.0, 30.0)
    extent_y: tuple[float, float] = (-15.0, 15.0)
    image_width: int = 256
    frame_rate: float = 2.0
    speed_kmh: tuple[float, float] = (30.0, 50.0)
    max_curvature: float = 1.0 / 150.0
    lane_counts: tuple[int, ...] = (2, 3)
    label_noise: float = 0.02
    obs_noise: float = 0.02
    parked_per_100m: float = 6.0
    moving_vehicles: int = 3
    occluders: bool = True

    @property
    def extent(self) -> GroundExtent:
        return GroundExtent(*self.extent_x, *self.extent_y, self.bev_size, self.bev_size)

    def rig(self) -> CameraRig:
        return default_rig(self.image_width, int(round(self.image_width * 288 / 512)))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown synth config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(eq=False)
class Sequence:
    name: str
    seed: int
    frames: list[FrameRecord]
    scene: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


@dataclass(eq=False)
class Dataset:
    config: SynthConfig
    rig: CameraRig
    smap: SamplingMap
    sequences: list[Sequence]
    _guard: _Guard = field(default_factory=_Guard, repr=False)

    def __post_init__(self):
        # one guard for all frames so a single switch locks the whole dataset
        for seq in self.sequences:
            for f in seq.frames:
                f._guard = self._guard

    @property
    def extent(self) -> GroundExtent:
        return self.smap.extent

    @property
    def gt_reads(self) -> int:
        return self._guard.reads

    @contextlib.contextmanager
    def bev_labels_locked(self):
        """Make every BEV ground-truth read raise; yields the access counter."""
        prev = self._guard.locked
        self._guard.locked = True
        try:
            yield self._guard
        finally:
            self._guard.locked = prev

    def subset(self, indices) -> "Dataset":
        return Dataset(self.config, self.rig, self.smap, [self.sequences[i] for i in indices], self._guard)


def make_sequence(cfg: SynthConfig, rig: CameraRig, smap: SamplingMap, index: int,
                  seq_seed: np.random.SeedSequence) -> Sequence:
    rng = np.random.default_rng(seq_seed)
    extent = cfg.extent
    lane_count = int(rng.choice(cfg.lane_counts))
    curvature = float(rng.uniform(-cfg.max_curvature, cfg.max_curvature))
    step_max = float(kmh_to_step(cfg.speed_kmh[1], cfg.frame_rate))
    back = extent.x_max + 5.0
    road_length = back + (cfg.n_frames - 1) * step_max + extent.x_max + 10.0
    scene_seed = int(rng.integers(2**31))
    spec = SceneSpec(seed=scene_seed, extent=extent, lane_count=lane_count, curvature=curvature,
                     road_length=road_length, dashed_dividers=bool(rng.random() < 0.7))
    world = generate_scene(spec)
    lane = int(rng.integers(lane_count))
    n_ego = -spec.half_width + (lane + 0.5) * spec.lane_width
    k_ego = curvature / (1.0 - curvature * n_ego) if curvature else 0.0
    motions = generate_trajectory(rng, cfg.n_frames, cfg.speed_kmh, cfg.frame_rate,
                                  curvature=k_ego)
    sx, sy, sth = world.road.to_world(back, n_ego)
    start = (float(sx), float(sy), float(sth))
    occ = []
    if cfg.occluders:
        ospec = OccluderSpec(parked_per_100m=cfg.parked_per_100m, moving=cfg.moving_vehicles)
        occ = place_occluders(world, ospec, n_ego, rng)
        # keep the ego lane clear around the ego path
        occ = [o for o in occ if not _blocks_ego(o, world, n_ego)]
    frames = build_frames(world, motions, rig, smap, occ, start, cfg.label_noise, cfg.obs_noise,
                          cfg.frame_rate, rng)
    scene = {"lane_count": lane_count, "curvature": curvature, "ego_lane_offset": n_ego,
             "scene_seed": scene_seed, "crosswalks": list(world.crosswalks),
             "dashed": spec.dashed_dividers, "road_length": road_length,
             "occluders": [asdict(o) for o in occ]}
    return Sequence(f"seq_{index:03d}", index, frames, scene)


def _blocks_ego(o: Occluder, world: WorldMap, n_ego: float) -> bool:
    _, n = world.road.from_world(o.x, o.y)
    return abs(float(n) - n_ego) < 1.5 and o.speed == 0.0


def generate_dataset(cfg: SynthConfig, progress=None) -> Dataset:
    rig = cfg.rig()
    smap = build_sampling_map(rig, cfg.extent)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_sequences)
    seqs = []
    for i, ss in enumerate(seeds):
        seqs.append(make_sequence(cfg, rig, smap, i, ss))
        if progress:
            progress(i + 1, cfg.n_sequences)
    return Dataset(cfg, rig, smap, seqs)


def dataset_card(ds: Dataset) -> dict:
    """Class shares over BEV cells and supervised camera pixels."""
    bev = np.zeros(N_CLASSES, dtype=np.int64)
    cam = np.zeros(N_CLASSES, dtype=np.int64)
    occluded = 0
    valid = 0
    for seq in ds.sequences:
        for f in seq.frames:
            bev += np.bincount(f._gt_bev.labels.ravel(), minlength=N_CLASSES)
            lab = f.pseudo_labels[f.pseudo_labels >= 0].astype(np.int64)
            cam += np.bincount(lab, minlength=N_CLASSES)
            occluded += int(f.occluded.sum())
            valid += int(ds.smap.valid.sum())
    return {"bev_class_share": (bev / bev.sum()).tolist(),
            "camera_class_share": (cam / max(cam.sum(), 1)).tolist(),
            "occluded_pixel_share": occluded / max(valid, 1),
            "n_frames": sum(len(s) for s in ds.sequences)}


def save_dataset(ds: Dataset, root) -> Path:
    """Directory per sequence; BEV labels as grid files, camera maps as .npz, JSON manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seqs = []
    for seq in ds.sequences:
        d = root / seq.name
        d.mkdir(exist_ok=True)
        frames = []
        for f in seq.frames:
            bev_name = f"frame_{f.index:03d}_bev.bevg"
            cam_name = f"frame_{f.index:03d}_cams.npz"
            save_grid(d / bev_name, f._gt_bev)
            np.savez_compressed(d / cam_name, pseudo_labels=f.pseudo_labels,
                                observation=f.observation, occluded=f.occluded)
            frames.append({"index": f.index, "motion": [f.motion.dx, f.motion.dy, f.motion.dphi],
                           "pose": list(f.pose), "bev_gt": f"{seq.name}/{bev_name}",
                           "cameras": f"{seq.name}/{cam_name}",
                           "occluders": [asdict(o) for o in f.occluders]})
        seqs.append({"name": seq.name, "seed": seq.seed, "scene": seq.scene, "frames": frames})
    manifest = {"version": MANIFEST_VERSION, "prng": "numpy PCG64 via SeedSequence(seed).spawn(n_sequences)",
                "config": ds.config.to_dict(), "rig": rig_to_dict(ds.rig),
                "extent": ds.extent.to_dict(), "sequences": seqs}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise InvalidSpec(f"unsupported manifest version {manifest.get('version')}")
    cfg = SynthConfig.from_dict(manifest["config"])
    rig = rig_from_dict(manifest["rig"])
    extent = GroundExtent.from_dict(manifest["extent"])
    smap = build_sampling_map(rig, extent)
    guard = _Guard()
    seqs = []
    for s in manifest["sequences"]:
        frames = []
        for fr in s["frames"]:
            cams = np.load(root / fr["cameras"])
            gt = load_grid(root / fr["bev_gt"])
            frames.append(FrameRecord(fr["index"], EgoMotion2D(*fr["motion"]), tuple(fr["pose"]),
                                      cams["pseudo_labels"], cams["observation"], cams["occluded"],
                                      tuple(Occluder(**o) for o in fr["occluders"]), gt, guard))
        seqs.append(Sequence(s["name"], s["seed"], frames, s["scene"]))
    return Dataset(cfg, rig, smap, seqs, guard)
