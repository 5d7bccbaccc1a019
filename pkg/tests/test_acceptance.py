"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 and 7 train models on the synthetic benchmark and take tens of
minutes on one core; deselect them with ``-m "not slow"`` for quick runs.
"""
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from bevssl.bev import one_hot, warp_array
from bevssl.experiments import (
    distance_profile_experiment,
    free_bev_recovery,
    gradcheck,
    temporal_experiment,
    two_phase_experiment,
)
from bevssl.geometry import DEFAULT_EXTENT, EgoMotion2D, default_rig
from bevssl.loss import reconstruction_loss
from bevssl.metrics import miou_ranges, range_bands
from bevssl.model import LiftModel, ModelConfig
from bevssl.renderer import build_sampling_map, render_array, render_vjp_array
from bevssl.synth import N_CLASSES, SynthConfig, generate_dataset
from bevssl.train import TrainConfig, pretrain, pretrain_initial_loss

from conftest import ACCEPTANCE


@pytest.fixture(autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_renderer_gradients():
    t = time.perf_counter()
    res = gradcheck(seed=0, instances=20, bev=(8, 8, 3), image=(16, 12), h=1e-4)
    sec = time.perf_counter() - t
    record(1, res["max_rel_error"] <= 1e-5 and sec < 10,
           f"max rel error {res['max_rel_error']:.2e} over 20 instances in {sec:.1f}s")


def loop_oracle(logits, target, mask):
    L = np.asarray(logits, dtype=np.longdouble)
    n = int(mask.sum())
    total = np.longdouble(0)
    grad = np.zeros(L.shape, dtype=np.longdouble)
    for idx in np.ndindex(mask.shape):
        if mask[idx]:
            z = L[idx]
            m = max(z)
            lse = m + np.log(sum(np.exp(v - m) for v in z))
            for k in range(len(z)):
                total -= target[idx][k] * (z[k] - lse)
                grad[idx][k] = (np.exp(z[k] - lse) - target[idx][k]) / n
    return float(total / n), grad.astype(np.float64)


def test_criterion_2_loss_oracle_and_uniform_start():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        shape = (2, 5, 4)
        logits = rng.normal(0, 3, shape + (N_CLASSES,))
        target = one_hot(rng.integers(0, N_CLASSES, shape), N_CLASSES)
        mask = rng.random(shape) < 0.7
        mask.flat[0] = True
        lv, g = reconstruction_loss(logits, target, mask)
        v, go = loop_oracle(logits, target, mask)
        worst = max(worst, abs(lv.value - v), float(np.max(np.abs(g - go))))
    ds = generate_dataset(SynthConfig(n_sequences=1, n_frames=2, bev_size=64, image_width=128))
    fresh = pretrain_initial_loss(LiftModel(ModelConfig(), seed=0), ds)
    rel = abs(fresh - math.log(N_CLASSES)) / math.log(N_CLASSES)
    record(2, worst <= 1e-9 and rel <= 0.01,
           f"max oracle deviation {worst:.1e}; fresh loss {fresh:.4f} vs ln4 ({100 * rel:.2f}% off)")


def test_criterion_3_conservation_and_adjoints():
    rng = np.random.default_rng(1)
    smap = build_sampling_map(default_rig(128, 72), DEFAULT_EXTENT)
    p = rng.random(DEFAULT_EXTENT.shape + (N_CLASSES,))
    p /= p.sum(-1, keepdims=True)
    sums = render_array(p, smap).sum(-1)[smap.fully_supported]
    sum_err = float(np.max(np.abs(sums - 1)))
    g = rng.normal(size=DEFAULT_EXTENT.shape + (3,))
    same, _ = warp_array(g, DEFAULT_EXTENT, EgoMotion2D())
    identity = np.array_equal(same, g)
    adj = 0.0
    for _ in range(5):
        B = rng.normal(size=DEFAULT_EXTENT.shape + (3,))
        U = rng.normal(size=smap.valid.shape + (3,))
        adj = max(adj, abs(np.sum(render_array(B, smap) * U) - np.sum(B * render_vjp_array(U, smap))))
        motion = EgoMotion2D(*rng.uniform(-5, 5, 2), rng.uniform(-0.5, 0.5))
        W = rng.normal(size=B.shape)
        out, vjp = warp_array(B, DEFAULT_EXTENT, motion)
        adj = max(adj, abs(np.sum(out * W) - np.sum(B * vjp(W))))
    record(3, sum_err <= 1e-12 and identity and adj <= 1e-10,
           f"prob-sum error {sum_err:.1e} on {int(smap.fully_supported.sum())} pixels; "
           f"zero-motion warp bit-exact={identity}; adjoint gap {adj:.1e}")


def test_criterion_4_metrics_oracle():
    rng = np.random.default_rng(2)
    masks = [b.mask for b in range_bands(DEFAULT_EXTENT)]
    exact = nested = True
    for _ in range(100):
        gt = rng.integers(0, N_CLASSES, DEFAULT_EXTENT.shape)
        pred = np.where(rng.random(gt.shape) < 0.5, gt, rng.integers(0, N_CLASSES, gt.shape))
        rep = miou_ranges(pred, gt, extent=DEFAULT_EXTENT)
        for b, m in enumerate(masks):
            # independent count: flattened joint histogram per band
            joint = np.bincount(pred[m] * N_CLASSES + gt[m], minlength=N_CLASSES ** 2).reshape(N_CLASSES, N_CLASSES)
            tp = np.diag(joint)
            exact &= np.array_equal(rep.tp[b], tp)
            exact &= np.array_equal(rep.fp[b], joint.sum(1) - tp)
            exact &= np.array_equal(rep.fn[b], joint.sum(0) - tp)
        nested &= bool(np.all(np.diff(rep.tp, axis=0) >= 0) and np.all(np.diff(rep.fp, axis=0) >= 0)
                       and np.all(np.diff(rep.fn, axis=0) >= 0))
    nested &= bool(np.all(masks[0] <= masks[1]) and np.all(masks[1] <= masks[2]))
    record(4, exact and nested, f"counts exact={exact}, bands nested={nested} over 100 pairs of 150x150")


def test_criterion_5_visible_region_recovery():
    t = time.perf_counter()
    res = free_bev_recovery(seed=0, steps=2000)
    sec = time.perf_counter() - t
    # threshold 0.85 frozen from the reference run (0.962)
    record(5, res["miou_visible"] >= 0.85 and sec < 120,
           f"visible-cell mIoU {res['miou_visible']:.3f} on {res['visible_cells']} cells, {sec:.0f}s")


@pytest.mark.slow
def test_criterion_6_temporal_loss_direction():
    res = temporal_experiment(seeds=(0, 1, 2, 3, 4))
    deltas = " ".join(f"{100 * r['delta_occluded']:+.1f}" for r in res["rows"])
    record(6, res["passed"] and res["seconds"] < 1800,
           f"occluded mIoU {100 * res['mean_temporal']:.1f} vs {100 * res['mean_no_temporal']:.1f} "
           f"(per-seed deltas pp: {deltas}) in {res['seconds'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_two_phase_direction():
    res = two_phase_experiment(seeds=(0, 1, 2, 3, 4))
    m = res["mean"]
    record(7, res["passed_full"] and res["passed_third"] and res["seconds"] < 3600,
           f"mIoU60 supervised {100 * m['supervised_miou60']:.1f}, two-phase {100 * m['two_phase_miou60']:.1f}, "
           f"third-budget {100 * m['two_phase_third_miou60']:.1f} (needs >= {95 * m['supervised_miou60']:.1f}) "
           f"in {res['seconds'] / 60:.1f} min")


def test_criterion_8_distance_profile():
    res = distance_profile_experiment()
    fr = res["fractions"]
    record(8, res["passed"], "front camera quarters " + ", ".join(f"{100 * f:.1f}%" for f in fr))


def test_criterion_9_label_isolation():
    ds = generate_dataset(SynthConfig(seed=3, n_sequences=2, n_frames=3, bev_size=48, image_width=96))
    before = ds.gt_reads
    with ds.bev_labels_locked() as guard:
        blocked_before = guard.blocked_reads
    pretrain(TrainConfig(steps=10, seed=3), ds)
    with ds.bev_labels_locked() as guard:
        blocked = guard.blocked_reads - blocked_before
    reads = ds.gt_reads - before
    record(9, reads == 0 and blocked == 0, f"{reads} BEV ground-truth reads, {blocked} blocked attempts in 10 steps")
