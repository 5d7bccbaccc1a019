"""Two-phase training: camera-view self-supervised pretraining, then BEV fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .bev import warp_array
from .errors import ConfigError, EmptyMask
from .loss import LossLog, label_cross_entropy, temporal_loss
from .metrics import IoUReport, confusion_counts, range_bands
from .model import Adam, Checkpoint, LiftModel, ModelConfig, save_checkpoint, splat_features
from .synth import N_CLASSES, Dataset, FrameRecord
from .tape import Tape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"  # pretrain | finetune
    steps: int = 600
    batch_size: int = 2
    lr: float = 1e-3
    schedule: str = "constant"  # constant | cosine (decays to 0 over the phase)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lambda_temp: float = 1.0
    label_fraction: float = 0.5
    seed: int = 0
    log_every: int = 25
    snapshot_every: int = 0
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    loss_log: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps >= 0 and batch_size >= 1 required")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.lambda_temp < 0:
            raise ConfigError("lambda_temp must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kw = dict(d)
        if "model" in kw and isinstance(kw["model"], dict):
            try:
                kw["model"] = ModelConfig(**kw["model"])
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        return cls(**kw)

    @classmethod
    def from_yaml(cls, path, **overrides) -> "TrainConfig":
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)


@dataclass
class TrainResult:
    model: LiftModel
    optimizer: Adam
    history: list[dict]
    step: int
    config: TrainConfig

    def checkpoint(self) -> Checkpoint:
        return Checkpoint({k: v.copy() for k, v in self.model.params.items()}, self.model.config,
                          self.step, self.config.to_dict(), self.optimizer)


def frame_features(frame: FrameRecord, ds: Dataset, n_in: int) -> np.ndarray:
    f = frame.cache.get("feats")
    if f is None:
        f = frame.cache["feats"] = splat_features(frame.observation, ds.smap, n_in)
    return f


def _windows(ds: Dataset, seq_ids):
    return [(s, t) for s in seq_ids for t in range(1, len(ds.sequences[s].frames))]


def select_label_sequences(n_sequences: int, fraction: float, seed: int) -> list[int]:
    """Deterministic subset of sequence ids carrying BEV labels."""
    k = max(1, int(math.ceil(fraction * n_sequences - 1e-9)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1abe1]))
    return sorted(rng.permutation(n_sequences)[:k].tolist())


def _pretrain_grads(model: LiftModel, ds: Dataset, s: int, t: int, lambda_temp: float):
    seq = ds.sequences[s]
    prev, cur = seq.frames[t - 1], seq.frames[t]
    n_in = model.config.in_classes
    tape = Tape()
    P = model.bind(tape)
    _, X = model.window(tape, P, frame_features(prev, ds, n_in), frame_features(cur, ds, n_in),
                        cur.motion, ds.extent)
    res = temporal_loss(X.value, cur.motion, model.head(), ds.smap, cur.pseudo_labels,
                        prev.pseudo_labels, weight_tm1=lambda_temp)
    g = tape.backward({X: res.grad_x})
    grads = {}
    for name, var in P.items():
        grads[name] = g.get(var.index, np.zeros_like(var.value))
    grads["head.w"] = grads["head.w"] + res.grad_params["head.w"]
    grads["head.b"] = grads["head.b"] + res.grad_params["head.b"]
    return grads, res


def _finetune_grads(model: LiftModel, ds: Dataset, s: int, t: int):
    seq = ds.sequences[s]
    prev, cur = seq.frames[t - 1], seq.frames[t]
    n_in = model.config.in_classes
    tape = Tape()
    P = model.bind(tape)
    _, X = model.window(tape, P, frame_features(prev, ds, n_in), frame_features(cur, ds, n_in),
                        cur.motion, ds.extent)
    logits = model.logits(tape, P, X)
    lv, g_logits = label_cross_entropy(logits.value, cur.gt_bev.labels)
    g = tape.backward({logits: g_logits})
    return {name: g.get(var.index, np.zeros_like(var.value)) for name, var in P.items()}, lv


def _run(cfg: TrainConfig, ds: Dataset, seq_ids, grad_fn, model: LiftModel | None,
         optimizer: Adam | None, start_step: int = 0, callback=None) -> TrainResult:
    model = model or LiftModel(cfg.model, seed=cfg.seed)
    optimizer = optimizer or Adam(cfg.lr, cfg.betas, cfg.eps)
    optimizer.lr = cfg.lr
    windows = _windows(ds, seq_ids)
    if not windows:
        raise ConfigError("dataset has no frame pairs to train on")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7a1e, 1 if cfg.phase == "pretrain" else 2]))
    loss_log = LossLog(cfg.loss_log, ds.rig.names) if cfg.loss_log else None
    history = []
    step = start_step
    for it in range(cfg.steps):
        picks = rng.integers(len(windows), size=cfg.batch_size)
        acc = None
        rec = {"step": step, "L_t": 0.0, "L_tm1": 0.0}
        counts = np.zeros(len(ds.rig), dtype=np.int64)
        for p in picks:
            s, t = windows[p]
            grads, info = grad_fn(model, s, t)
            if acc is None:
                acc = grads
            else:
                for k in acc:
                    acc[k] = acc[k] + grads[k]
            if hasattr(info, "loss_t"):
                rec["L_t"] += info.loss_t.value / cfg.batch_size
                rec["L_tm1"] += info.loss_tm1.value / cfg.batch_size
                counts += np.asarray(info.loss_t.per_camera)
            else:
                rec["L_t"] += info.value / cfg.batch_size
        for k in acc:
            acc[k] /= cfg.batch_size
        if cfg.schedule == "cosine":
            optimizer.lr = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * it / cfg.steps))
        optimizer.step(model.params, acc)
        history.append(rec)
        if loss_log is not None:
            loss_log.append(step, rec["L_t"], rec["L_tm1"] if cfg.phase == "pretrain" else None,
                            counts.tolist() if cfg.phase == "pretrain" else ())
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("%s step %d L_t %.4f L_tm1 %.4f", cfg.phase, step, rec["L_t"], rec["L_tm1"])
        if callback is not None:
            callback(step, model, rec)
        step += 1
    result = TrainResult(model, optimizer, history, step, cfg)
    if cfg.checkpoint_out:
        save_checkpoint(cfg.checkpoint_out, result.checkpoint())
    return result


def pretrain(cfg: TrainConfig, ds: Dataset, model: LiftModel | None = None, callback=None) -> TrainResult:
    """Self-supervised phase on camera-view pseudo labels of every sequence.

    BEV ground truth stays locked for the whole run; any read raises
    :class:`~bevssl.errors.LabelIsolationError`.
    """
    if cfg.phase != "pretrain":
        cfg = replace(cfg, phase="pretrain")

    def grad_fn(m, s, t):
        return _pretrain_grads(m, ds, s, t, cfg.lambda_temp)

    with ds.bev_labels_locked():
        return _run(cfg, ds, range(len(ds.sequences)), grad_fn, model, None, callback=callback)


def finetune(cfg: TrainConfig, ds: Dataset, init: Checkpoint | LiftModel | None = None, callback=None) -> TrainResult:
    """Supervised phase on BEV labels of a seeded ``label_fraction`` of the sequences.

    The optimizer restarts from scratch; ``init=None`` gives the supervised baseline.
    """
    if cfg.phase != "finetune":
        cfg = replace(cfg, phase="finetune")
    if isinstance(init, Checkpoint):
        model = init.model()
    elif isinstance(init, LiftModel):
        model = LiftModel(init.config)
        model.params = {k: v.copy() for k, v in init.params.items()}
    else:
        model = None
    seq_ids = select_label_sequences(len(ds.sequences), cfg.label_fraction, cfg.seed)

    def grad_fn(m, s, t):
        return _finetune_grads(m, ds, s, t)

    return _run(cfg, ds, seq_ids, grad_fn, model, None, callback=callback)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    report: IoUReport  # nested range bands
    occluded: IoUReport  # cells hidden at t but observed at t-1
    n_frames: int

    def summary(self) -> dict:
        out = self.report.summary()
        out["occluded_mIoU"] = float(self.occluded.miou[0])
        return out


def observed_cells(frame: FrameRecord, ds: Dataset) -> np.ndarray:
    """BEV cells that receive weight from at least one unoccluded valid pixel."""
    c = frame.cache.get("observed")
    if c is None:
        c = frame.cache["observed"] = ds.smap.coverage(ds.smap.valid & ~frame.occluded) > 1e-9
    return c


def occluded_region(prev: FrameRecord, cur: FrameRecord, ds: Dataset) -> np.ndarray:
    seen_prev = observed_cells(prev, ds).astype(np.float64)[..., None]
    carried, _ = warp_array(seen_prev, ds.extent, cur.motion.inverse())
    return (carried[..., 0] > 0.5) & ~observed_cells(cur, ds)


def predict_frame(model: LiftModel, ds: Dataset, seq, t: int) -> np.ndarray:
    n_in = model.config.in_classes
    cur = seq.frames[t]
    if t == 0:
        logits, _ = model.predict(frame_features(cur, ds, n_in))
    else:
        prev = seq.frames[t - 1]
        logits, _ = model.predict(frame_features(cur, ds, n_in), frame_features(prev, ds, n_in),
                                  cur.motion, ds.extent)
    return logits


def evaluate(model: LiftModel | Checkpoint, ds: Dataset, seq_ids=None, predictor=None) -> EvalResult:
    """Aggregate exact IoU counts over frames 1.. of the given sequences."""
    if isinstance(model, Checkpoint):
        model = model.model()
    seq_ids = range(len(ds.sequences)) if seq_ids is None else seq_ids
    bands = range_bands(ds.extent)
    c = N_CLASSES
    report = IoUReport.empty([b.name for b in bands], c)
    occl = IoUReport.empty(["occluded"], c)
    n = 0
    for s in seq_ids:
        seq = ds.sequences[s]
        for t in range(1, len(seq.frames)):
            cur = seq.frames[t]
            if predictor is None:
                pred = np.argmax(predict_frame(model, ds, seq, t), axis=-1)
            else:
                pred = predictor(seq, t)
            gt = cur.gt_bev.labels
            for b, band in enumerate(bands):
                tp, fp, fn = confusion_counts(pred, gt, band.mask, c)
                report.tp[b] += tp
                report.fp[b] += fp
                report.fn[b] += fn
            tp, fp, fn = confusion_counts(pred, gt, occluded_region(seq.frames[t - 1], cur, ds), c)
            occl.tp[0] += tp
            occl.fp[0] += fp
            occl.fn[0] += fn
            n += 1
    return EvalResult(report, occl, n)


def pretrain_initial_loss(model: LiftModel, ds: Dataset, s: int = 0, t: int = 1) -> float:
    _, res = _pretrain_grads(model, ds, s, t, 0.0)
    return res.loss_t.value


__all__ = ["TrainConfig", "TrainResult", "EvalResult", "pretrain", "finetune", "evaluate",
           "select_label_sequences", "frame_features", "occluded_region", "observed_cells", "EmptyMask"]
