import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevssl.bev import LabelGrid
from bevssl.errors import ShapeMismatch
from bevssl.geometry import DEFAULT_EXTENT, Camera, CameraIntrinsics, CameraPose, CameraRig, GroundExtent, default_rig
from bevssl.metrics import (
    IoUReport,
    confusion_counts,
    distance_pixel_profile,
    iou,
    miou_ranges,
    quarter_edges,
    range_band,
    range_bands,
    summary_csv,
    summary_table,
)
from bevssl.renderer import build_sampling_map

EXT = DEFAULT_EXTENT


def brute_counts(pred, gt, masks, c):
    tp = np.zeros((len(masks), c), dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    rows, cols = pred.shape
    for i in range(rows):
        for j in range(cols):
            p, g = int(pred[i, j]), int(gt[i, j])
            for b, m in enumerate(masks):
                if not m[i, j]:
                    continue
                if p == g:
                    tp[b, p] += 1
                else:
                    fp[b, p] += 1
                    fn[b, g] += 1
    return tp, fp, fn


def test_counts_match_brute_force_on_random_pairs():
    rng = np.random.default_rng(0)
    bands = range_bands(EXT)
    masks = [b.mask for b in bands]
    for _ in range(100):
        gt = rng.integers(0, 4, EXT.shape)
        pred = np.where(rng.random(EXT.shape) < 0.6, gt, rng.integers(0, 4, EXT.shape))
        rep = miou_ranges(LabelGrid(pred, EXT), LabelGrid(gt, EXT))
        tp, fp, fn = brute_counts(pred, gt, masks, 4)
        assert np.array_equal(rep.tp, tp) and np.array_equal(rep.fp, fp) and np.array_equal(rep.fn, fn)
        assert np.all(rep.tp[:-1] <= rep.tp[1:])
        assert np.all(rep.fp[:-1] <= rep.fp[1:])
        assert np.all(rep.fn[:-1] <= rep.fn[1:])


def test_band_nesting_and_geometry():
    b20, b40, b60 = range_bands(EXT)
    assert np.all(b20.mask <= b40.mask) and np.all(b40.mask <= b60.mask)
    assert b60.mask.all()
    X, Y = EXT.cell_centers()
    assert np.abs(X[b20.mask]).max() <= 10 and np.abs(Y[b20.mask]).max() <= 5
    assert b20.mask.sum() == 50 * 50
    with pytest.raises(ValueError):
        range_band(EXT, 61)


def test_identity_and_disjoint():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 4, EXT.shape)
    rep = miou_ranges(LabelGrid(gt, EXT), LabelGrid(gt, EXT))
    iou_vals = rep.iou
    assert np.all(iou_vals[~np.isnan(iou_vals)] == 1.0)
    assert np.all(rep.miou == 1.0)
    a = np.zeros(EXT.shape, int)
    b = np.zeros(EXT.shape, int)
    a[:10] = 1
    b[-10:] = 1
    r = iou(a, b, np.ones(EXT.shape, bool))
    assert r.iou[0, 1] == 0.0
    assert math.isnan(r.iou[0, 2])  # absent from both


def test_uniform_scene_same_across_bands():
    gt = np.full(EXT.shape, 2)
    rep = miou_ranges(LabelGrid(gt, EXT), LabelGrid(gt, EXT))
    assert rep.miou.tolist() == [1.0, 1.0, 1.0]


def test_errors_beyond_40m_only_hit_the_widest_band():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 4, EXT.shape)
    pred = gt.copy()
    b40 = range_band(EXT, 40).mask
    pred[~b40] = (gt[~b40] + 1) % 4
    rep = miou_ranges(LabelGrid(pred, EXT), LabelGrid(gt, EXT))
    assert rep.miou[0] == rep.miou[1] == 1.0 > rep.miou[2]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), perm=st.permutations([1, 2, 3]))
def test_miou_invariant_to_marking_relabeling(seed, perm):
    rng = np.random.default_rng(seed)
    ext = GroundExtent(-6, 6, -3, 3, 12, 12)
    bands = [range_band(ext, 4), range_band(ext, 12)]
    gt = rng.integers(0, 4, ext.shape)
    pred = rng.integers(0, 4, ext.shape)
    lut = np.array([0] + list(perm))
    a = miou_ranges(pred, gt, bands)
    b = miou_ranges(lut[pred], lut[gt], bands)
    assert np.allclose(a.miou, b.miou, rtol=0, atol=1e-12, equal_nan=True)
    assert np.allclose(a.iou, b.iou[:, lut], equal_nan=True)


def test_report_merge_is_exact():
    rng = np.random.default_rng(3)
    gt1, gt2 = rng.integers(0, 4, (2,) + EXT.shape)
    p1, p2 = rng.integers(0, 4, (2,) + EXT.shape)
    a = miou_ranges(p1, gt1, extent=EXT)
    b = miou_ranges(p2, gt2, extent=EXT)
    both = miou_ranges(np.concatenate([p1, p2]), np.concatenate([gt1, gt2]),
                       bands=[type(x)(x.name, x.max_distance, np.concatenate([x.mask, x.mask])) for x in range_bands(EXT)])
    s = a + b
    assert np.array_equal(s.tp, both.tp) and np.array_equal(s.fp, both.fp) and np.array_equal(s.fn, both.fn)
    empty = IoUReport.empty(a.band_names, 4)
    assert np.array_equal((empty + a).tp, a.tp)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        confusion_counts(np.zeros((2, 2), int), np.zeros((2, 3), int), np.ones((2, 2), bool), 4)
    other = GroundExtent(-30, 30, -15, 16, 150, 150)
    with pytest.raises(ShapeMismatch):
        iou(LabelGrid(np.zeros(EXT.shape, int), EXT), LabelGrid(np.zeros(EXT.shape, int), other), range_band(EXT, 60))


def test_report_serialization():
    rng = np.random.default_rng(4)
    gt = rng.integers(0, 4, EXT.shape)
    rep = miou_ranges(gt, gt, extent=EXT)
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "band,class,tp,fp,fn,iou" and len(lines) == 1 + 3 * 4
    table = summary_table({"identity": rep})
    assert "boundary IoU" in table and "mIoU60" in table and "100.0" in table
    assert summary_csv({"identity": rep}).splitlines()[0] == \
        "method,boundary_iou,lane_iou,crosswalk_iou,mIoU20,mIoU40,mIoU60"


def test_nadir_camera_over_near_band():
    intr = CameraIntrinsics(100.0, 100.0, 8.0, 6.0, 16, 12)
    nadir = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
    rig = CameraRig((Camera("DOWN", intr, CameraPose(nadir, (2.0, 0.0, 5.0))),))
    prof = distance_pixel_profile(build_sampling_map(rig, EXT), [0, 7.5, 15, 22.5, 30])
    assert prof.camera("DOWN").tolist() == [1.0, 0.0, 0.0, 0.0]


def test_profile_fractions_sum_to_one_and_decrease():
    smap = build_sampling_map(default_rig(256, 144), EXT)
    prof = distance_pixel_profile(smap)
    assert np.allclose(prof.fractions.sum(1), 1.0)
    assert np.all(np.diff(prof.camera("CAM_FRONT")) < 0)
    assert quarter_edges(EXT).tolist() == [0, 7.5, 15, 22.5, 30]
    pairs = distance_pixel_profile(smap, [(0, 7.5), (7.5, 15), (15, 22.5), (22.5, 30)])
    assert np.array_equal(pairs.counts, prof.counts)
    with pytest.raises(ValueError):
        distance_pixel_profile(smap, [(0, 5), (6, 10)])
    assert prof.to_csv().splitlines()[0] == "camera,d_min,d_max,pixels,fraction"


def test_profile_matches_per_pixel_oracle():
    smap = build_sampling_map(default_rig(64, 36), EXT)
    prof = distance_pixel_profile(smap)
    edges = quarter_edges(EXT)
    counts = np.zeros((smap.n_cams, 4), dtype=np.int64)
    for k, v, u in np.ndindex(smap.valid.shape):
        if smap.valid[k, v, u]:
            d = smap.distance[k, v, u]
            for b in range(4):
                if edges[b] <= d < edges[b + 1] or (b == 3 and d == edges[4]):
                    counts[k, b] += 1
    assert np.array_equal(prof.counts, counts)
