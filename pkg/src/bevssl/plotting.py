"""Static figures (PNG) for reports; the Agg backend keeps this headless."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import DistanceProfile  # noqa: E402
from .renderer import PALETTE  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def distance_profile_chart(profile: DistanceProfile, path, camera: str | None = None) -> Path:
    fr = profile.camera(camera) if camera else profile.aggregate
    labels = [f"{a:g}-{b:g} m" for a, b in zip(profile.edges[:-1], profile.edges[1:])]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bars = ax.bar(labels, 100 * fr, color="#4477aa")
    ax.bar_label(bars, fmt="%.1f%%")
    ax.set_ylabel("share of image pixels [%]")
    ax.set_xlabel("ground distance")
    ax.set_title(camera or "all cameras")
    ax.set_ylim(0, max(100 * fr.max() * 1.2, 1))
    return _save(fig, path)


def loss_curves(histories: dict[str, list[dict]], path, keys=("L_t", "L_tm1")) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, hist in histories.items():
        steps = [h["step"] for h in hist]
        for k in keys:
            vals = np.array([h.get(k, np.nan) for h in hist], dtype=float)
            if np.all(vals == 0) or np.all(np.isnan(vals)):
                continue
            ax.plot(steps, vals, label=f"{name} {k}", lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy [nats/pixel]")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    return _save(fig, path)


def bev_panels(panels: dict[str, np.ndarray], path) -> Path:
    """Side-by-side class maps; rows run forward, so the image is flipped to put forward up."""
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 4))
    axes = np.atleast_1d(axes)
    for ax, (name, labels) in zip(axes, panels.items()):
        lab = np.asarray(labels)
        rgb = PALETTE[np.clip(lab, 0, len(PALETTE) - 1)]
        ax.imshow(rgb[::-1, ::-1], interpolation="nearest")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    return _save(fig, path)


def miou_bars(values: dict[str, dict[str, float]], path, metric_keys=None) -> Path:
    """Grouped bars: one group per metric, one bar per method (values as fractions)."""
    methods = list(values)
    keys = metric_keys or list(next(iter(values.values())))
    x = np.arange(len(keys))
    w = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(1.6 * len(keys) + 2, 3.5))
    for i, m in enumerate(methods):
        ax.bar(x + i * w - 0.4 + w / 2, [100 * values[m][k] for k in keys], w, label=m)
    ax.set_xticks(x, keys)
    ax.set_ylabel("IoU [%]")
    ax.legend(fontsize=7)
    return _save(fig, path)


def seed_deltas(deltas: list[float], seeds: list[int], path, ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(s) for s in seeds], 100 * np.asarray(deltas), color=["#228833" if d >= 0 else "#cc3311" for d in deltas])
    ax.axhline(100 * float(np.mean(deltas)), color="k", ls="--", lw=1, label="mean")
    ax.set_xlabel("seed")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    return _save(fig, path)
