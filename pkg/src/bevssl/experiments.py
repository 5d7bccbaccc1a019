"""Named experiments behind the acceptance suite and ``bevssl reproduce``.

Each experiment returns a plain dict of numbers (plus per-seed rows) so the
CLI can write it as CSV/JSON and the tests can assert on it.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .bev import one_hot
from .geometry import Camera, CameraIntrinsics, CameraPose, CameraRig, GroundExtent, default_rig
from .loss import label_cross_entropy, reconstruction_loss
from .metrics import iou, distance_pixel_profile
from .model import Adam, ModelConfig
from .renderer import build_sampling_map, render_array, render_vjp_array
from .synth import N_CLASSES, SynthConfig, generate_dataset
from .train import TrainConfig, evaluate, finetune, pretrain

log = logging.getLogger(__name__)


def benchmark_config(seed: int = 0, n_sequences: int = 64, **kw) -> SynthConfig:
    """Reduced synthetic benchmark used by the directional experiments."""
    base = dict(seed=seed, n_sequences=n_sequences, n_frames=6, bev_size=64, image_width=128)
    base.update(kw)
    return SynthConfig(**base)


def eval_config(seed: int = 0, n_sequences: int = 16, **kw) -> SynthConfig:
    """Held-out sequences: a disjoint seed stream of the benchmark distribution."""
    return benchmark_config(seed=10_000 + seed, n_sequences=n_sequences, **kw)


# --------------------------------------------------------------------------
# gradient check


def gradcheck_rig(width: int = 16, height: int = 12) -> CameraRig:
    """Two opposite cameras looking down at a small ground patch."""
    f = 0.5 * width
    intr = CameraIntrinsics(f, f, width / 2, height / 2, width, height)
    cams = (
        Camera("FRONT", intr, CameraPose.from_angles(0.0, math.radians(35), (0.5, 0.0, 1.6))),
        Camera("BACK", intr, CameraPose.from_angles(math.pi, math.radians(35), (-0.5, 0.0, 1.6))),
    )
    return CameraRig(cams)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise |a - n| / max(|a|, |n|), with entries below 1e-3 of the largest magnitude
    measured against that largest magnitude instead (both zero counts as exact)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(seed: int = 0, instances: int = 20, bev: tuple[int, int, int] = (8, 8, 3),
              image: tuple[int, int] = (16, 12), h: float = 1e-4) -> dict:
    """Analytic render VJP through the reconstruction loss vs central differences."""
    rows, cols, c = bev
    rig = gradcheck_rig(*image)
    extent = GroundExtent(-4.0, 8.0, -6.0, 6.0, rows, cols)
    smap = build_sampling_map(rig, extent)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    errs = []
    for _ in range(instances):
        z = rng.normal(0.0, 1.0, (rows, cols, c))
        labels = rng.integers(c, size=smap.valid.shape)
        target = one_hot(labels, c) * smap.valid[..., None]
        mask = smap.valid

        def f(zz):
            return reconstruction_loss(render_array(zz, smap), target, mask)[0].value

        _, g_img = reconstruction_loss(render_array(z, smap), target, mask)
        analytic = render_vjp_array(g_img, smap)
        numeric = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            zp = z.copy()
            zm = z.copy()
            zp[idx] += h
            zm[idx] -= h
            numeric[idx] = (f(zp) - f(zm)) / (2 * h)
        errs.append(relative_error(analytic, numeric))
    return {"instances": instances, "max_rel_error": float(max(errs)), "errors": errs,
            "seconds": time.perf_counter() - t0, "supervised_pixels": int(smap.valid.sum())}


# --------------------------------------------------------------------------
# free-BEV recovery


def free_bev_recovery(seed: int = 0, steps: int = 2000, lr: float = 1e-2,
                      cfg: SynthConfig | None = None, min_coverage: float = 0.0) -> dict:
    """Fit free BEV logits to one noiseless, unoccluded camera-label frame.

    Returns mean IoU of the marking classes over the visible cells (cells
    receiving any rendering weight, or more than ``min_coverage``).
    """
    cfg = cfg or SynthConfig(seed=seed, n_sequences=1, n_frames=2, label_noise=0.0, obs_noise=0.0,
                             occluders=False)
    ds = generate_dataset(cfg)
    frame = ds.sequences[0].frames[0]
    smap = ds.smap
    labels = frame.pseudo_labels.astype(np.int64)
    z = np.zeros(ds.extent.shape + (N_CLASSES,))
    params = {"z": z}
    opt = Adam(lr)
    t0 = time.perf_counter()
    curve = []
    for k in range(steps):
        lv, g = label_cross_entropy(render_array(params["z"], smap), labels)
        opt.step(params, {"z": render_vjp_array(g, smap)})
        if k % 100 == 0 or k == steps - 1:
            curve.append((k, lv.value))
    seconds = time.perf_counter() - t0
    visible = smap.coverage() > min_coverage
    pred = np.argmax(params["z"], axis=-1)
    rep = iou(pred, frame.gt_bev.labels, visible, N_CLASSES, name="visible")
    return {"miou_visible": float(rep.miou[0]), "iou": rep.iou[0].tolist(), "steps": steps,
            "seconds": seconds, "visible_cells": int(visible.sum()), "curve": curve}


# --------------------------------------------------------------------------
# directional experiments


@dataclass(frozen=True)
class Budget:
    """Step budgets of the directional experiments.

    ``supervised`` is the baseline length; the two-phase arm splits the same
    total into pretraining and a fine-tuning phase of ``finetune`` steps, the
    short arm keeps that fine-tuning and shrinks the total to a third.
    """

    supervised: int = 900
    finetune: int = 210
    pretrain_temporal: int = 600
    batch_size: int = 2
    lr: float = 3e-3  # smallest rate at which the supervised baseline plateaus within its budget
    schedule: str = "constant"

    @property
    def pretrain_full(self) -> int:
        return self.supervised - self.finetune

    @property
    def pretrain_short(self) -> int:
        return max(1, self.supervised // 3 - self.finetune)


def _train_cfg(b: Budget, seed: int, **kw) -> TrainConfig:
    return TrainConfig(batch_size=b.batch_size, lr=b.lr, schedule=b.schedule, seed=seed, log_every=0, **kw)


def temporal_experiment(seeds=(0, 1, 2, 3, 4), budget: Budget = Budget(), model: ModelConfig = ModelConfig(),
                        data_kw: dict | None = None) -> dict:
    """Occluded-region IoU of pretraining with and without the previous-frame loss."""
    rows = []
    t0 = time.perf_counter()
    for seed in seeds:
        ds = generate_dataset(benchmark_config(seed, **(data_kw or {})))
        ev = generate_dataset(eval_config(seed, **(data_kw or {})))
        row = {"seed": seed}
        for name, lam in (("temporal", 1.0), ("no_temporal", 0.0)):
            res = pretrain(_train_cfg(budget, seed, steps=budget.pretrain_temporal, lambda_temp=lam,
                                      model=model), ds)
            e = evaluate(res.model, ev)
            row[f"{name}_occluded_miou"] = float(e.occluded.miou[0])
            row[f"{name}_miou60"] = float(e.report.miou[-1])
            row[f"{name}_final_L_t"] = res.history[-1]["L_t"]
            row[f"{name}_final_L_tm1"] = res.history[-1]["L_tm1"]
        row["delta_occluded"] = row["temporal_occluded_miou"] - row["no_temporal_occluded_miou"]
        log.info("temporal seed %d: %+.4f", seed, row["delta_occluded"])
        rows.append(row)
    mean_t = float(np.mean([r["temporal_occluded_miou"] for r in rows]))
    mean_0 = float(np.mean([r["no_temporal_occluded_miou"] for r in rows]))
    return {"rows": rows, "mean_temporal": mean_t, "mean_no_temporal": mean_0,
            "mean_delta": mean_t - mean_0, "passed": mean_t >= mean_0,
            "seconds": time.perf_counter() - t0}


def two_phase_experiment(seeds=(0, 1, 2, 3, 4), budget: Budget = Budget(), model: ModelConfig = ModelConfig(),
                         label_fraction: float = 0.5, data_kw: dict | None = None) -> dict:
    """Supervised baseline vs. pretrain + fine-tune on ``label_fraction`` of the sequences."""
    rows = []
    t0 = time.perf_counter()
    for seed in seeds:
        ds = generate_dataset(benchmark_config(seed, **(data_kw or {})))
        ev = generate_dataset(eval_config(seed, **(data_kw or {})))
        sup = finetune(_train_cfg(budget, seed, steps=budget.supervised, label_fraction=1.0, model=model), ds)
        pre = pretrain(_train_cfg(budget, seed, steps=budget.pretrain_full, model=model), ds)
        ft = finetune(_train_cfg(budget, seed, steps=budget.finetune, label_fraction=label_fraction, model=model),
                      ds, init=pre.model)
        # the short arm is its own run so a decaying schedule spans its whole length
        pre_short = pretrain(_train_cfg(budget, seed, steps=budget.pretrain_short, model=model), ds)
        ft_short = finetune(_train_cfg(budget, seed, steps=budget.finetune, label_fraction=label_fraction,
                                       model=model), ds, init=pre_short.model)
        row = {"seed": seed}
        for name, m in (("supervised", sup.model), ("pretrain_only", pre.model), ("two_phase", ft.model),
                        ("two_phase_third", ft_short.model)):
            s = evaluate(m, ev).report
            row[f"{name}_miou60"] = float(s.miou[-1])
            row[f"{name}_miou20"] = float(s.miou[0])
        log.info("two-phase seed %d: sup %.4f two-phase %.4f third %.4f", seed, row["supervised_miou60"],
                 row["two_phase_miou60"], row["two_phase_third_miou60"])
        rows.append(row)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "seed"}
    return {"rows": rows, "mean": mean,
            "passed_full": mean["two_phase_miou60"] >= mean["supervised_miou60"],
            "passed_third": mean["two_phase_third_miou60"] >= 0.95 * mean["supervised_miou60"],
            "budget": {"supervised": budget.supervised, "pretrain": budget.pretrain_full,
                       "finetune": budget.finetune, "pretrain_short": budget.pretrain_short},
            "seconds": time.perf_counter() - t0}


def pretrain_sweep(lengths=(100, 300, 600), seeds=(0,), budget: Budget = Budget(),
                   model: ModelConfig = ModelConfig(), label_fraction: float = 0.5,
                   data_kw: dict | None = None) -> dict:
    """Fine-tune after pretraining runs of each of ``lengths`` steps."""
    lengths = sorted(int(n) for n in lengths)
    rows = []
    t0 = time.perf_counter()
    for seed in seeds:
        ds = generate_dataset(benchmark_config(seed, **(data_kw or {})))
        ev = generate_dataset(eval_config(seed, **(data_kw or {})))
        for n in lengths:
            pre = pretrain(_train_cfg(budget, seed, steps=n, model=model), ds)
            ft = finetune(_train_cfg(budget, seed, steps=budget.finetune, label_fraction=label_fraction,
                                     model=model), ds, init=pre.model)
            rep = evaluate(ft.model, ev).report
            rows.append({"seed": seed, "pretrain_steps": n, "total_steps": n + budget.finetune,
                         "miou60": float(rep.miou[-1]), "miou20": float(rep.miou[0])})
    return {"rows": rows, "seconds": time.perf_counter() - t0}


# --------------------------------------------------------------------------
# distance profile


def distance_profile_experiment(width: int = 512, camera: str = "CAM_FRONT") -> dict:
    """Quarter-range pixel shares of one camera of the default rig over the default extent."""
    from .geometry import DEFAULT_EXTENT

    smap = build_sampling_map(default_rig(width, int(round(width * 288 / 512))).subset([camera]), DEFAULT_EXTENT)
    prof = distance_pixel_profile(smap)
    fr = prof.camera(camera)
    return {"profile": prof, "fractions": fr.tolist(), "near": float(fr[0]), "far": float(fr[-1]),
            "monotone": bool(np.all(np.diff(fr) < 0)),
            "passed": bool(0.35 <= fr[0] <= 0.65 and 0.02 <= fr[-1] <= 0.15 and np.all(np.diff(fr) < 0))}


EXPERIMENTS = ("gradcheck", "recovery", "temporal", "two-phase", "distance-profile", "pretrain-sweep")
