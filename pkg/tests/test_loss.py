import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevssl.bev import one_hot, warp_array
from bevssl.errors import EmptyMask, ShapeMismatch
from bevssl.geometry import Camera, CameraIntrinsics, CameraPose, CameraRig, EgoMotion2D, GroundExtent
from bevssl.loss import (
    LossLog,
    label_cross_entropy,
    reconstruction_loss,
    temporal_loss,
    total_pretrain_loss,
)
from bevssl.model import SegHead
from bevssl.renderer import CameraImageStack, build_sampling_map

EXT = GroundExtent(-4.0, 8.0, -6.0, 6.0, 8, 8)


def rig():
    intr = CameraIntrinsics(8.0, 8.0, 8.0, 6.0, 16, 12)
    return CameraRig((
        Camera("A", intr, CameraPose.from_angles(0.0, math.radians(35), (0.5, 0.0, 1.6))),
        Camera("B", intr, CameraPose.from_angles(math.pi, math.radians(35), (-0.5, 0.0, 1.6))),
    ))


SMAP = build_sampling_map(rig(), EXT)


def oracle(logits, target, mask):
    """Per-pixel loop in extended precision."""
    L = np.asarray(logits, dtype=np.longdouble)
    n = int(mask.sum())
    total = np.longdouble(0)
    grad = np.zeros(L.shape, dtype=np.longdouble)
    for idx in np.ndindex(mask.shape):
        if not mask[idx]:
            continue
        z = L[idx]
        m = max(z)
        lse = m + np.log(sum(np.exp(v - m) for v in z))
        for k in range(len(z)):
            p = np.exp(z[k] - lse)
            total -= target[idx][k] * (z[k] - lse)
            grad[idx][k] = (p - target[idx][k]) / n
    return float(total / n), grad.astype(np.float64)


def random_instance(rng, shape=(2, 4, 4), c=3, scale=3.0):
    logits = rng.normal(0, scale, shape + (c,))
    labels = rng.integers(0, c, shape)
    mask = rng.random(shape) < 0.7
    mask.flat[0] = True
    return logits, one_hot(labels, c), labels, mask


def test_matches_extended_precision_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        logits, target, _, mask = random_instance(rng)
        lv, g = reconstruction_loss(logits, target, mask)
        v, go = oracle(logits, target, mask)
        assert abs(lv.value - v) <= 1e-9
        assert np.max(np.abs(g - go)) <= 1e-9
        assert lv.n_effective == mask.sum()


def test_uniform_logits_give_log_c():
    for c in (2, 3, 4):
        logits = np.zeros((2, 3, 3, c))
        lv, _ = reconstruction_loss(logits, one_hot(np.zeros((2, 3, 3), int), c), np.ones((2, 3, 3), bool))
        assert lv.value == pytest.approx(math.log(c), rel=1e-15)


def test_saturated_correct_logits_give_zero():
    labels = np.array([[0, 1, 2]])
    logits = 1e3 * one_hot(labels, 3)
    lv, _ = reconstruction_loss(logits, one_hot(labels, 3), np.ones((1, 3), bool))
    assert lv.value == pytest.approx(0.0, abs=1e-300)


def test_label_form_matches_onehot_form():
    rng = np.random.default_rng(1)
    logits, target, labels, mask = random_instance(rng)
    a, ga = reconstruction_loss(logits, target, mask)
    b, gb = label_cross_entropy(logits, np.where(mask, labels, -1))
    assert a.value == pytest.approx(b.value, rel=1e-14)
    assert np.max(np.abs(ga - gb)) <= 1e-15
    assert a.per_camera == b.per_camera == tuple(int(m.sum()) for m in mask)


def test_accepts_stacks():
    rng = np.random.default_rng(2)
    logits, target, _, _ = random_instance(rng)
    valid = np.ones(logits.shape[:3], bool)
    valid[0, 0, 0] = False
    logits[~valid] = 0
    target[~valid] = 0
    lv, _ = reconstruction_loss(CameraImageStack(logits, valid), CameraImageStack(target, valid, "onehot"), valid)
    assert lv.n_effective == valid.sum()


def test_errors():
    with pytest.raises(EmptyMask):
        reconstruction_loss(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), np.zeros((1, 2), bool))
    with pytest.raises(EmptyMask):
        label_cross_entropy(np.zeros((1, 2, 3)), -np.ones((1, 2), int))
    with pytest.raises(ShapeMismatch):
        reconstruction_loss(np.zeros((1, 2, 3)), np.zeros((1, 2, 4)), np.ones((1, 2), bool))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), shift=st.floats(-50, 50))
def test_shift_invariance_and_masked_gradient(seed, shift):
    rng = np.random.default_rng(seed)
    logits, target, _, mask = random_instance(rng)
    a, ga = reconstruction_loss(logits, target, mask)
    b, _ = reconstruction_loss(logits + shift, target, mask)
    assert abs(a.value - b.value) <= 1e-12
    assert not ga[~mask].any()


def test_gradient_finite_differences():
    rng = np.random.default_rng(3)
    logits, target, _, mask = random_instance(rng, shape=(1, 3, 3))
    _, g = reconstruction_loss(logits, target, mask)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += h
        lm[idx] -= h
        num = (reconstruction_loss(lp, target, mask)[0].value - reconstruction_loss(lm, target, mask)[0].value) / (2 * h)
        assert g[idx] == pytest.approx(num, rel=1e-6, abs=1e-10)


def test_descent_step_decreases_loss():
    rng = np.random.default_rng(4)
    for _ in range(100):
        logits, target, _, mask = random_instance(rng)
        lv, g = reconstruction_loss(logits, target, mask)
        after, _ = reconstruction_loss(logits - 1e-3 * g / np.abs(g).max(), target, mask)
        assert after.value < lv.value


# --------------------------------------------------------------------------
# temporal loss


def head(rng, d=5, c=3):
    return SegHead(rng.normal(size=(d, c)), rng.normal(size=c))


def pseudo_labels(rng, c=3):
    lab = rng.integers(0, c, SMAP.valid.shape)
    lab[~SMAP.valid] = -1
    return lab


def test_degenerate_pair_doubles_gradient():
    rng = np.random.default_rng(5)
    X = rng.normal(size=EXT.shape + (5,))
    sh = head(rng)
    gt = pseudo_labels(rng)
    both = temporal_loss(X, EgoMotion2D(), sh, SMAP, gt, gt)
    single = temporal_loss(X, EgoMotion2D(), sh, SMAP, gt, gt, weight_tm1=0.0)
    assert both.loss_t.value == both.loss_tm1.value
    assert np.max(np.abs(both.grad_x - 2 * single.grad_x)) <= 1e-15
    for k in both.grad_params:
        assert np.max(np.abs(both.grad_params[k] - 2 * single.grad_params[k])) <= 1e-14


def test_zero_weight_reproduces_current_frame_loss():
    from bevssl.renderer import render_array, render_vjp_array

    rng = np.random.default_rng(6)
    X = rng.normal(size=EXT.shape + (5,))
    sh = head(rng)
    gt_t, gt_tm1 = pseudo_labels(rng), pseudo_labels(rng)
    res = temporal_loss(X, EgoMotion2D(1.0, 0.5, 0.1), sh, SMAP, gt_t, gt_tm1, weight_tm1=0.0)
    logits, vjp = sh.apply(X)
    lv, g = label_cross_entropy(render_array(logits, SMAP), gt_t)
    gx, _ = vjp(render_vjp_array(g, SMAP))
    assert res.loss_t.value == lv.value
    assert np.array_equal(res.grad_x, gx)


def test_onehot_targets_with_masks():
    rng = np.random.default_rng(7)
    X = rng.normal(size=EXT.shape + (5,))
    sh = head(rng)
    lab = pseudo_labels(rng)
    oh = one_hot(np.maximum(lab, 0), 3) * SMAP.valid[..., None]
    a = temporal_loss(X, EgoMotion2D(0.4, 0, 0), sh, SMAP, oh, oh, masks=(SMAP.valid, SMAP.valid))
    b = temporal_loss(X, EgoMotion2D(0.4, 0, 0), sh, SMAP, lab, lab)
    assert a.total == pytest.approx(b.total, rel=1e-14)
    assert np.allclose(a.grad_x, b.grad_x, rtol=0, atol=1e-15)


def test_temporal_gradient_finite_differences():
    rng = np.random.default_rng(8)
    X = rng.normal(size=EXT.shape + (4,))
    sh = head(rng, d=4)
    gt_t, gt_tm1 = pseudo_labels(rng), pseudo_labels(rng)
    m = EgoMotion2D(1.1, -0.4, 0.15)
    res = temporal_loss(X, m, sh, SMAP, gt_t, gt_tm1)

    def f(x):
        r = temporal_loss(x, m, sh, SMAP, gt_t, gt_tm1)
        return r.loss_t.value + r.loss_tm1.value

    h = 1e-4
    num = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        xp, xm = X.copy(), X.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (f(xp) - f(xm)) / (2 * h)
    scale = np.abs(num).max()
    rel = np.abs(res.grad_x - num) / np.maximum(np.maximum(np.abs(res.grad_x), np.abs(num)), 1e-3 * scale)
    assert rel.max() <= 1e-5


def test_temporal_gradient_wrt_head_parameters():
    rng = np.random.default_rng(9)
    X = rng.normal(size=EXT.shape + (4,))
    w, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    gt_t, gt_tm1 = pseudo_labels(rng), pseudo_labels(rng)
    m = EgoMotion2D(0.8, 0.2, -0.1)
    res = temporal_loss(X, m, SegHead(w, b), SMAP, gt_t, gt_tm1)
    h = 1e-5
    for name, arr in (("head.w", w), ("head.b", b)):
        for idx in np.ndindex(arr.shape):
            ap, am = arr.copy(), arr.copy()
            ap[idx] += h
            am[idx] -= h
            args_p = (ap, b) if name == "head.w" else (w, ap)
            args_m = (am, b) if name == "head.w" else (w, am)
            fp = temporal_loss(X, m, SegHead(*args_p), SMAP, gt_t, gt_tm1).total
            fm = temporal_loss(X, m, SegHead(*args_m), SMAP, gt_t, gt_tm1).total
            assert res.grad_params[name][idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-10)


def test_previous_branch_sees_warped_latent():
    from bevssl.renderer import render_array

    rng = np.random.default_rng(10)
    X = rng.normal(size=EXT.shape + (5,))
    sh = head(rng)
    gt = pseudo_labels(rng)
    m = EgoMotion2D(1.5, 0.0, 0.05)
    res = temporal_loss(X, m, sh, SMAP, gt, gt)
    x_prev, _ = warp_array(X, EXT, m)
    lv, _ = label_cross_entropy(render_array(sh.apply(x_prev)[0], SMAP), gt)
    assert res.loss_tm1.value == lv.value


def test_total_pretrain_loss():
    assert total_pretrain_loss(0.7, 0.3, 0.0) == 0.7
    assert total_pretrain_loss(0.4, 0.4, 1.0) == 0.8
    assert total_pretrain_loss(1.0, 2.0, 0.5) == 2.0


def test_gradient_linearity_in_lambda():
    rng = np.random.default_rng(11)
    X = rng.normal(size=EXT.shape + (5,))
    sh = head(rng)
    gt_t, gt_tm1 = pseudo_labels(rng), pseudo_labels(rng)
    m = EgoMotion2D(0.9, 0.3, 0.0)
    g0 = temporal_loss(X, m, sh, SMAP, gt_t, gt_tm1, weight_tm1=0.0).grad_x
    g1 = temporal_loss(X, m, sh, SMAP, gt_t, gt_tm1, weight_tm1=1.0).grad_x
    g3 = temporal_loss(X, m, sh, SMAP, gt_t, gt_tm1, weight_tm1=3.0).grad_x
    assert np.max(np.abs(g3 - (g0 + 3 * (g1 - g0)))) <= 1e-14


def test_loss_log_roundtrip(tmp_path):
    log = LossLog(tmp_path / "loss.csv", ["A", "B"])
    log.append(0, 1.25, 1.5, [10, 12])
    log.append(1, 0.5)
    rows = LossLog(tmp_path / "loss.csv", ["A", "B"]).read()
    assert rows[0] == {"step": "0", "L_t": "1.25", "L_tm1": "1.5", "n_A": "10", "n_B": "12"}
    assert rows[1]["L_tm1"] == "" and float(rows[1]["L_t"]) == 0.5
