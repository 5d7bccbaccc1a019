"""Pixel-wise cross-entropy reconstruction loss and the two-frame temporal loss."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bev import LatentBev, log_softmax, warp_array
from .errors import EmptyMask, ShapeMismatch
from .geometry import EgoMotion2D
from .renderer import CameraImageStack, SamplingMap, render_array, render_vjp_array


@dataclass(frozen=True)
class LossValue:
    value: float  # nats per supervised pixel
    n_effective: int
    per_camera: tuple[int, ...] = ()


def _data(x):
    return x.data if isinstance(x, CameraImageStack) else np.asarray(x, dtype=np.float64)


def reconstruction_loss(pred, gt, mask):
    """Mean cross-entropy of ``pred`` logits against one-hot ``gt`` over ``mask``.

    ``pred`` and ``gt`` are (..., c) arrays or CameraImageStacks, ``mask`` is the
    boolean (...) selection of supervised pixels. Returns ``(LossValue, grad)``
    with ``grad = (softmax(pred) - gt) / n`` on masked pixels and 0 elsewhere.
    """
    logits = _data(pred)
    target = _data(gt)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != target.shape or logits.shape[:-1] != mask.shape:
        raise ShapeMismatch(f"pred {logits.shape}, gt {target.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("no supervised pixels")
    logp = log_softmax(logits[mask])
    t = target[mask]
    value = float(-np.sum(t * logp) / n)
    grad = np.zeros_like(logits)
    grad[mask] = (np.exp(logp) - t) / n
    per_cam = tuple(int(m.sum()) for m in mask) if mask.ndim == 3 else ()
    return LossValue(value, n, per_cam), grad


def label_cross_entropy(logits: np.ndarray, labels: np.ndarray, weight: float = 1.0):
    """Cross-entropy against integer labels; entries with label < 0 are ignored.

    Same value and gradient as :func:`reconstruction_loss` with a one-hot
    target, without materializing it. Returns ``(LossValue, grad * weight)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    mask = labels >= 0
    c = logits.shape[-1]
    idx = np.flatnonzero(mask)
    n = idx.size
    if n == 0:
        raise EmptyMask("no supervised pixels")
    # flat gathers are much cheaper than boolean indexing on large image stacks
    flat = logits.reshape(-1, c)
    lab = labels.reshape(-1)[idx].astype(np.int64)
    logp = log_softmax(flat[idx])
    rows = np.arange(n)
    value = float(-logp[rows, lab].sum() / n)
    p = np.exp(logp)
    p[rows, lab] -= 1.0
    p *= weight / n
    grad = np.zeros_like(flat)
    grad[idx] = p
    grad = grad.reshape(logits.shape)
    per_cam = tuple(int(m.sum()) for m in mask) if mask.ndim == 3 else ()
    return LossValue(value, n, per_cam), grad


def _as_target(gt):
    """Accept integer label maps (-1 = unsupervised) or one-hot stacks."""
    if isinstance(gt, CameraImageStack):
        return gt.data
    arr = np.asarray(gt)
    return arr


def _branch_loss(target, mask, pred_cp, weight):
    if np.issubdtype(np.asarray(target).dtype, np.integer):
        labels = np.where(mask, target, -1) if mask is not None else target
        return label_cross_entropy(pred_cp, labels, weight)
    lv, g = reconstruction_loss(pred_cp, target, mask)
    return lv, g * weight


@dataclass
class TemporalLossResult:
    loss_t: LossValue
    loss_tm1: LossValue
    grad_x: np.ndarray
    grad_params: dict

    @property
    def total(self) -> float:
        return self.loss_t.value + self.loss_tm1.value


def temporal_loss(X, motion: EgoMotion2D, seg_head, smap: SamplingMap, gt_t, gt_tm1,
                  masks=(None, None), weight_tm1: float = 1.0) -> TemporalLossResult:
    """Current-frame and previous-frame reconstruction losses from one latent.

    The latent ``X`` of frame t is warped into frame t-1, both versions pass
    through the *same* ``seg_head`` and the renderer, and each rendering is
    compared with the pseudo labels of its frame. ``seg_head.apply(x)`` must
    return ``(logits, vjp)`` where ``vjp(g)`` gives ``(grad_x, grad_params)``.

    The returned gradients are for ``L_t + weight_tm1 * L_tm1``. Targets may be
    one-hot stacks (with boolean masks) or integer label maps where -1 marks
    unsupervised pixels.
    """
    x = X.data if isinstance(X, LatentBev) else np.asarray(X, dtype=np.float64)
    x_prev, warp_vjp = warp_array(x, smap.extent, motion)

    results = []
    for latent, target, mask, w in ((x, gt_t, masks[0], 1.0), (x_prev, gt_tm1, masks[1], weight_tm1)):
        logits, head_vjp = seg_head.apply(latent)
        pred_cp = render_array(logits, smap)
        lv, g_cp = _branch_loss(_as_target(target), mask, pred_cp, w)
        g_latent, g_params = head_vjp(render_vjp_array(g_cp, smap))
        results.append((lv, g_latent, g_params))

    (l_t, gx_t, gp_t), (l_tm1, gx_tm1, gp_tm1) = results
    grad_x = gx_t + warp_vjp(gx_tm1)
    grad_params = {k: gp_t[k] + gp_tm1[k] for k in gp_t}
    return TemporalLossResult(l_t, l_tm1, grad_x, grad_params)


def total_pretrain_loss(loss_t, loss_tm1, lambda_temp: float = 1.0) -> float:
    """Combined pretraining objective; ``lambda_temp = 0`` switches the temporal term off."""
    lt = loss_t.value if isinstance(loss_t, LossValue) else float(loss_t)
    ltm1 = loss_tm1.value if isinstance(loss_tm1, LossValue) else float(loss_tm1)
    if lambda_temp == 0:
        return lt
    return lt + lambda_temp * ltm1


class LossLog:
    """Append-only CSV: step, L_t, L_tm1, then supervised pixel counts per camera."""

    def __init__(self, path, camera_names):
        self.path = Path(path)
        self.camera_names = list(camera_names)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "L_t", "L_tm1"] + [f"n_{c}" for c in self.camera_names])

    def append(self, step, loss_t, loss_tm1=None, per_camera=()):
        counts = list(per_camera) or [""] * len(self.camera_names)
        ltm1 = "" if loss_tm1 is None else repr(float(loss_tm1))
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([int(step), repr(float(loss_t)), ltm1] + counts)

    def read(self) -> list[dict]:
        with open(self.path, newline="") as fh:
            return list(csv.DictReader(fh))
