"""Compact camera-to-BEV lifting model, Adam and the checkpoint container.

The model stands in for a full attention backbone: camera-view class maps
are splatted onto the ground grid with the transpose of the rendering
weights (normalized by hit count), concatenated with the motion-compensated
latent of the previous frame, refined by a few 3x3 convolutions and mapped
to class logits by a shared 1x1 segmentation head.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bev import one_hot, warp_array
from .errors import ShapeMismatch
from .geometry import EgoMotion2D, GroundExtent
from .renderer import SamplingMap
from .tape import Tape, Var, add, concat, conv1x1, conv3x3, relu


def splat_features(observation: np.ndarray, smap: SamplingMap, n_in: int) -> np.ndarray:
    """Lift camera class maps to the BEV grid.

    ``observation`` holds integer ids per pixel (-1 = nothing to lift). Returns
    (rows, cols, n_in + 1): the hit-weighted mean class distribution per cell
    followed by a coverage channel ``1 - exp(-hits)``.
    """
    obs = np.asarray(observation)
    if obs.shape != smap.valid.shape:
        raise ShapeMismatch(f"observation {obs.shape} vs sampling map {smap.valid.shape}")
    ok = (obs >= 0) & smap.valid
    cells = smap.extent.rows * smap.extent.cols
    acc = np.zeros((cells, n_in))
    hits = np.zeros(cells)
    for k in range(smap.n_cams):
        m = ok[k].ravel()
        oh = np.zeros((m.size, n_in))
        oh[m] = one_hot(obs[k].ravel()[m].astype(np.int64), n_in)
        acc += smap.transposed[k] @ oh
        hits += smap.transposed[k] @ m.astype(np.float64)
    mean = np.where(hits[:, None] > 1e-12, acc / np.maximum(hits, 1e-12)[:, None], 0.0)
    cov = 1.0 - np.exp(-hits)
    return np.concatenate([mean, cov[:, None]], axis=1).reshape(smap.extent.rows, smap.extent.cols, n_in + 1)


def warp_op(x, *, extent: GroundExtent, motion: EgoMotion2D):
    """Tape primitive wrapping :func:`bevssl.bev.warp_array`."""
    out, vjp = warp_array(x, extent, motion)
    return out, lambda g: (vjp(g),)


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 4
    in_classes: int = 5  # observation ids incl. the occluder id
    latent: int = 16
    layers: int = 3
    history: bool = True
    head_skip: float = 0.01  # initial head weight on the splatted class channels
    zero_refinement: bool = False

    def __post_init__(self):
        if not 2 <= self.layers <= 4:
            raise ValueError("refinement stack has 2-4 conv layers")
        if self.latent < self.n_classes:
            raise ValueError("latent width must hold the splatted class channels")

    @property
    def input_channels(self) -> int:
        return self.in_classes + 1 + (self.latent if self.history else 0)


class SegHead:
    """Array-level view of the 1x1 segmentation head: ``apply(x) -> (logits, vjp)``."""

    def __init__(self, w, b):
        self.w = w
        self.b = b

    def apply(self, x):
        out, vjp = conv1x1(x, self.w, self.b)

        def head_vjp(g):
            gx, gw, gb = vjp(g)
            return gx, {"head.w": gw, "head.b": gb}

        return out, head_vjp


class LiftModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.params = self.init_params(config, seed)

    @staticmethod
    def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        ci = cfg.input_channels
        for k in range(cfg.layers):
            co = cfg.latent
            std = 0.0 if cfg.zero_refinement else np.sqrt(2.0 / (9 * ci))
            if k == cfg.layers - 1 and not cfg.zero_refinement:
                std *= 0.1  # start near the splat skip path
            params[f"conv{k}.w"] = rng.normal(0.0, 1.0, (3, 3, ci, co)) * std
            params[f"conv{k}.b"] = np.zeros(co)
            ci = co
        w = rng.normal(0.0, 0.01, (cfg.latent, cfg.n_classes))
        # the splat-skip block starts as a scaled identity so fresh logits stay near uniform
        w[:cfg.n_classes] = cfg.head_skip * np.eye(cfg.n_classes)
        params["head.w"] = w
        params["head.b"] = np.zeros(cfg.n_classes)
        return params

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def head(self) -> SegHead:
        return SegHead(self.params["head.w"], self.params["head.b"])

    # -- tape-level forward

    def bind(self, tape: Tape) -> dict[str, Var]:
        return {name: tape.leaf(value) for name, value in self.params.items()}

    def latent(self, tape: Tape, P: dict[str, Var], feats: np.ndarray, history: Var | None) -> Var:
        cfg = self.config
        rows, cols, _ = feats.shape
        parts = [tape.leaf(feats)]
        if cfg.history:
            parts.append(history if history is not None else tape.leaf(np.zeros((rows, cols, cfg.latent))))
        x = tape.apply(concat, *parts)
        for k in range(cfg.layers):
            x = tape.apply(conv3x3, x, P[f"conv{k}.w"], P[f"conv{k}.b"])
            if k < cfg.layers - 1:
                x = tape.apply(relu, x)
        skip = np.zeros((rows, cols, cfg.latent))
        skip[..., :cfg.n_classes] = feats[..., :cfg.n_classes]
        return tape.apply(add, x, tape.leaf(skip))

    def logits(self, tape: Tape, P: dict[str, Var], X: Var) -> Var:
        return tape.apply(conv1x1, X, P["head.w"], P["head.b"])

    def window(self, tape: Tape, P, feats_prev, feats_cur, motion: EgoMotion2D, extent: GroundExtent) -> tuple[Var, Var]:
        """Two-frame forward: latent of t-1 (no history), then latent of t with it as history."""
        x_prev = self.latent(tape, P, feats_prev, None)
        hist = None
        if self.config.history:
            hist = tape.apply(warp_op, x_prev, extent=extent, motion=motion.inverse())
        return x_prev, self.latent(tape, P, feats_cur, hist)

    def predict(self, feats_cur, feats_prev=None, motion: EgoMotion2D | None = None,
                extent: GroundExtent | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Inference: returns (BEV logits, latent) for the current frame."""
        tape = Tape()
        P = self.bind(tape)
        if feats_prev is not None and self.config.history:
            _, X = self.window(tape, P, feats_prev, feats_cur, motion or EgoMotion2D(), extent)
        else:
            X = self.latent(tape, P, feats_cur, None)
        return self.logits(tape, P, X).value, X.value


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# checkpoint container: magic, u32 version, u32 header length, JSON header,
# then little-endian float64 blobs in header order.

_CK_MAGIC = b"BEVSSLCK"
_CK_VERSION = 1
_CK_PREFIX = struct.Struct("<8sII")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    step: int = 0
    config: dict | None = None
    optimizer: Adam | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config or {})

    def model(self) -> LiftModel:
        m = LiftModel(self.model_config)
        m.params = {k: v.copy() for k, v in self.params.items()}
        return m


def save_checkpoint(path, ck: Checkpoint):
    blobs = [(name, arr) for name, arr in ck.params.items()]
    opt = None
    if ck.optimizer is not None:
        o = ck.optimizer
        opt = {"lr": o.lr, "betas": [o.b1, o.b2], "eps": o.eps, "t": o.t}
        blobs += [(f"adam.m/{k}", v) for k, v in o.m.items()]
        blobs += [(f"adam.v/{k}", v) for k, v in o.v.items()]
    entries = []
    offset = 0
    for name, arr in blobs:
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {"step": int(ck.step), "model_config": asdict(ck.model_config), "config": ck.config or {},
              "config_hash": ck.config_hash, "optimizer": opt, "entries": entries}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CK_PREFIX.pack(_CK_MAGIC, _CK_VERSION, len(hb)))
        fh.write(hb)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    magic, version, hlen = _CK_PREFIX.unpack_from(raw)
    if magic != _CK_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if version != _CK_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_CK_PREFIX.size:_CK_PREFIX.size + hlen])
    base = _CK_PREFIX.size + hlen
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(raw, "<f8", n, base + e["offset"]).reshape(e["shape"]).astype(np.float64)
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = Adam(o["lr"], tuple(o["betas"]), o["eps"])
        opt.t = o["t"]
        opt.m = {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")}
        opt.v = {k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")}
    return Checkpoint(params, ModelConfig(**header["model_config"]), header["step"], header["config"], opt)
